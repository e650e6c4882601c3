"""Shared image-processing primitives.

Planes are 2-D float64 arrays; color images are (H, W, 3) float64 in
[0, 1]. Every filter pads by reflection so borders never go dark, which
would otherwise bias fusion weights and block statistics downstream.
"""
from __future__ import annotations

import numpy as np

BINOMIAL_5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0

# sRGB <-> XYZ under D65. The white point is derived from the matrix rows
# (not the rounded published values) so the achromatic axis lands on
# exactly zero chroma.
_RGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)
_WHITE_D65 = _RGB_TO_XYZ @ np.ones(3)


class ImageRangeError(ValueError):
    """Pixel values escape the documented [0, 1] range."""


def _check_unit_range(img, what="image"):
    arr = np.asarray(img, dtype=np.float64)
    if arr.size == 0:
        raise ValueError(f"{what} is empty")
    lo, hi = arr.min(), arr.max()
    if lo < -1e-9 or hi > 1.0 + 1e-9:
        raise ImageRangeError(f"{what} values outside [0, 1]: [{lo:.4g}, {hi:.4g}]")
    return np.clip(arr, 0.0, 1.0)


# ---------------------------------------------------------------------------
# color conversions
# ---------------------------------------------------------------------------


def _srgb_linearize(c):
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _srgb_delinearize(c):
    c = np.clip(c, 0.0, None)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * c ** (1.0 / 2.4) - 0.055)


def rgb_to_lab(img) -> np.ndarray:
    """CIELab under D65 from sRGB; L* in [0, 100]."""
    rgb = _check_unit_range(img)
    xyz = _srgb_linearize(rgb) @ _RGB_TO_XYZ.T
    t = xyz / _WHITE_D65
    delta = 6.0 / 29.0
    f = np.where(t > delta ** 3, np.cbrt(t), t / (3 * delta ** 2) + 4.0 / 29.0)
    lab = np.empty_like(xyz)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    # float noise from the matrix product leaves ~1e-14 on the achromatic
    # axis; snap it so gray has exactly zero chroma
    for c in (1, 2):
        ch = lab[..., c]
        ch[np.abs(ch) < 1e-12] = 0.0
    return lab


def lab_to_rgb(lab) -> np.ndarray:
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    delta = 6.0 / 29.0

    def finv(f):
        return np.where(f > delta, f ** 3, 3 * delta ** 2 * (f - 4.0 / 29.0))

    xyz = np.stack([finv(fx), finv(fy), finv(fz)], axis=-1) * _WHITE_D65
    rgb = _srgb_delinearize(xyz @ _XYZ_TO_RGB.T)
    return np.clip(rgb, 0.0, 1.0)


def lab_chroma(lab) -> np.ndarray:
    return np.hypot(lab[..., 1], lab[..., 2])


def rgb_to_hsv(img) -> np.ndarray:
    """H in [0, 1), S and V in [0, 1]."""
    rgb = _check_unit_range(img)
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    diff = mx - mn
    s = np.where(mx > 0, diff / np.where(mx > 0, mx, 1.0), 0.0)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    safe = np.where(diff > 0, diff, 1.0)
    h = np.zeros_like(mx)
    sel = (mx == r) & (diff > 0)
    h[sel] = (((g - b) / safe)[sel] / 6.0) % 1.0
    sel = (mx == g) & (diff > 0) & (mx != r)
    h[sel] = (((b - r) / safe)[sel] + 2.0) / 6.0
    sel = (mx == b) & (diff > 0) & (mx != r) & (mx != g)
    h[sel] = (((r - g) / safe)[sel] + 4.0) / 6.0
    return np.stack([h, s, mx], axis=-1)


def hsv_to_rgb(hsv) -> np.ndarray:
    hsv = np.asarray(hsv, dtype=np.float64)
    h, s, v = hsv[..., 0] * 6.0, hsv[..., 1], hsv[..., 2]
    i = np.floor(h).astype(int) % 6
    f = h - np.floor(h)
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    table = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    out = np.zeros(hsv.shape, dtype=np.float64)
    for idx, (rr, gg, bb) in enumerate(table):
        sel = i == idx
        out[..., 0][sel] = rr[sel]
        out[..., 1][sel] = gg[sel]
        out[..., 2][sel] = bb[sel]
    return np.clip(out, 0.0, 1.0)


def rgb_to_gray(img) -> np.ndarray:
    rgb = _check_unit_range(img)
    return 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]


# ---------------------------------------------------------------------------
# separable filtering and pyramids
# ---------------------------------------------------------------------------


def _filter_separable(plane: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Same-size separable filter with reflect padding (works on 2-D planes)."""
    r = len(taps) // 2
    if min(plane.shape[:2]) == 1:
        padded = np.pad(plane, ((r, r), (r, r)) + ((0, 0),) * (plane.ndim - 2), mode="edge")
    else:
        padded = np.pad(plane, ((r, r), (r, r)) + ((0, 0),) * (plane.ndim - 2), mode="reflect")
    h, w = plane.shape[:2]
    tmp = np.zeros_like(padded[r:-r] if r else padded)
    for k, t in enumerate(taps):
        tmp += t * padded[k:k + h]
    out = np.zeros_like(plane, dtype=np.float64)
    for k, t in enumerate(taps):
        out += t * tmp[:, k:k + w]
    return out


def binomial_blur(plane: np.ndarray) -> np.ndarray:
    """5-tap binomial smoothing, the pyramid's blur."""
    return _filter_separable(np.asarray(plane, dtype=np.float64), BINOMIAL_5)


def _downsample(plane: np.ndarray) -> np.ndarray:
    return binomial_blur(plane)[::2, ::2]


def _upsample(plane: np.ndarray, out_shape) -> np.ndarray:
    stuffed = np.zeros(out_shape[:2] + plane.shape[2:], dtype=np.float64)
    stuffed[::2, ::2] = plane
    return _filter_separable(stuffed, BINOMIAL_5 * 2.0)


def max_pyramid_levels(extent_h: int, extent_w: int) -> int:
    """Largest level count whose top level still has extent >= 2."""
    levels = 1
    h, w = extent_h, extent_w
    while min((h + 1) // 2, (w + 1) // 2) >= 2:
        h, w = (h + 1) // 2, (w + 1) // 2
        levels += 1
    return levels


def _check_levels(extent_h: int, extent_w: int, levels: int) -> None:
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    if levels > max_pyramid_levels(extent_h, extent_w):
        raise ValueError(f"{levels} levels exhaust a {extent_h}x{extent_w} plane")


def gaussian_pyramid(plane, levels: int) -> list:
    plane = np.asarray(plane, dtype=np.float64)
    _check_levels(plane.shape[0], plane.shape[1], levels)
    pyr = [plane]
    for _ in range(levels - 1):
        pyr.append(_downsample(pyr[-1]))
    return pyr


def laplacian_pyramid(plane, levels: int) -> list:
    """Band-pass stack; the top level keeps the residual low-pass."""
    gauss = gaussian_pyramid(plane, levels)
    pyr = []
    for i in range(levels - 1):
        pyr.append(gauss[i] - _upsample(gauss[i + 1], gauss[i].shape))
    pyr.append(gauss[-1])
    return pyr


def reconstruct_laplacian(pyr: list) -> np.ndarray:
    out = pyr[-1]
    for level in reversed(pyr[:-1]):
        out = level + _upsample(out, level.shape)
    return out


# ---------------------------------------------------------------------------
# gradients, edges, saliency
# ---------------------------------------------------------------------------


SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


def _conv3x3(plane: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    padded = np.pad(np.asarray(plane, dtype=np.float64), 1, mode="reflect")
    h, w = plane.shape
    out = np.zeros((h, w), dtype=np.float64)
    for dy in range(3):
        for dx in range(3):
            if kernel[dy, dx] != 0.0:
                out += kernel[dy, dx] * padded[dy:dy + h, dx:dx + w]
    return out


def sobel_gradients(gray):
    gx = _conv3x3(gray, SOBEL_X)
    gy = _conv3x3(gray, SOBEL_X.T)
    return gx, gy


def sobel_magnitude(gray) -> np.ndarray:
    gx, gy = sobel_gradients(gray)
    return np.hypot(gx, gy)


def gaussian_kernel_1d(sigma: float, radius: int) -> np.ndarray:
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-xs ** 2 / (2.0 * sigma ** 2))
    return k / k.sum()


def canny(gray, low: float = 0.1, high: float = 0.2) -> np.ndarray:
    """Edge detection: smooth, gradients, non-maximum suppression along the
    quantized gradient direction, then double-threshold hysteresis.

    Magnitudes are scaled by the Sobel kernel gain so a full-scale step
    edge reads 1.0; the thresholds are absolute in that unit, which keeps
    edge counts sensitive to contrast enhancement. Returns a boolean map."""
    if not 0.0 <= low < high:
        raise ValueError(f"thresholds must satisfy 0 <= low < high, got {low}, {high}")
    gray = np.asarray(gray, dtype=np.float64)
    smooth = _filter_separable(gray, gaussian_kernel_1d(1.4, 2))
    gx, gy = sobel_gradients(smooth)
    mag = np.hypot(gx, gy) / 4.0  # unit step edge -> 1.0
    if mag.max() <= 0.0:
        return np.zeros(gray.shape, dtype=bool)
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0

    h, w = mag.shape
    padded = np.pad(mag, 1, mode="constant")
    core = padded[1:-1, 1:-1]
    sectors = [
        ((angle < 22.5) | (angle >= 157.5), (0, 1)),    # horizontal gradient
        ((angle >= 22.5) & (angle < 67.5), (1, 1)),     # diagonal
        ((angle >= 67.5) & (angle < 112.5), (1, 0)),    # vertical gradient
        ((angle >= 112.5) & (angle < 157.5), (1, -1)),  # anti-diagonal
    ]
    keep = np.zeros((h, w), dtype=bool)
    for sel, (dy, dx) in sectors:
        ahead = padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        behind = padded[1 - dy:1 - dy + h, 1 - dx:1 - dx + w]
        keep |= sel & (core > ahead) & (core >= behind)
    nms = np.where(keep, mag, 0.0)

    strong = nms >= high
    weak = nms >= low
    edges = strong.copy()
    while True:
        grown = edges.copy()
        grown[1:, :] |= edges[:-1, :]
        grown[:-1, :] |= edges[1:, :]
        grown[:, 1:] |= edges[:, :-1]
        grown[:, :-1] |= edges[:, 1:]
        grown[1:, 1:] |= edges[:-1, :-1]
        grown[1:, :-1] |= edges[:-1, 1:]
        grown[:-1, 1:] |= edges[1:, :-1]
        grown[:-1, :-1] |= edges[1:, 1:]
        grown &= weak
        grown |= edges
        if np.array_equal(grown, edges):
            return edges
        edges = grown


def saliency_map(img) -> np.ndarray:
    """Distance of the blurred image's Lab value from the image's mean Lab,
    min-max normalized; a constant image maps to all zeros."""
    rgb = _check_unit_range(img)
    mean_lab = rgb_to_lab(rgb).reshape(-1, 3).mean(axis=0)
    blurred = np.stack([binomial_blur(rgb[..., c]) for c in range(3)], axis=-1)
    lab_blur = rgb_to_lab(np.clip(blurred, 0.0, 1.0))
    dist = np.sqrt(((lab_blur - mean_lab) ** 2).sum(axis=-1))
    span = dist.max() - dist.min()
    if span <= 1e-12:
        return np.zeros(dist.shape, dtype=np.float64)
    return (dist - dist.min()) / span
