"""Fusion-based enhancement: blend a white-balanced and a
contrast-equalized derivative of the input under quality-driven weight
maps, merged across a Laplacian pyramid.

Every constant lives in FusionConfig so the pipeline can be retuned
without touching code.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import imaging

log = logging.getLogger(__name__)

LAPLACIAN_KERNEL = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])
_MAX_RGB_STD = np.sqrt(2.0) / 3.0  # std of (1,0,0), the most saturated unit triple


@dataclass
class FusionConfig:
    red_compensation_alpha: float = 1.0
    near_black_mean: float = 1e-4
    clahe_tiles: int = 8
    clahe_clip: float = 2.0
    clahe_bins: int = 256
    pyramid_levels: int = 5
    weight_epsilon: float = 1e-6
    exposedness_target: float = 0.5
    exposedness_sigma: float = 0.25


DEFAULT_CONFIG = FusionConfig()


@dataclass
class FusionInputs:
    input1: np.ndarray
    input2: np.ndarray
    weights: tuple  # per-input planes, normalized to sum to 1 pixelwise


def white_balance(img, config: FusionConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Red-compensate against the green channel, then gray-world scale.

    Near-black frames (all channel means below the configured floor) are
    returned unchanged, with a warning, because scaling noise up is worse
    than leaving the cast in place.
    """
    rgb = imaging._check_unit_range(img)
    means = rgb.reshape(-1, 3).mean(axis=0)
    if np.all(means < config.near_black_mean):
        log.warning("white_balance: near-black image, returned unchanged")
        return rgb.copy()
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    alpha = config.red_compensation_alpha
    r_comp = r + alpha * (means[1] - means[0]) * (1.0 - r) * g
    comp = np.stack([np.clip(r_comp, 0.0, 1.0), g, b], axis=-1)
    ch_means = comp.reshape(-1, 3).mean(axis=0)
    target = ch_means.mean()
    scales = np.where(ch_means > 1e-6, target / np.where(ch_means > 1e-6, ch_means, 1.0), 1.0)
    return np.clip(comp * scales, 0.0, 1.0)


# ---------------------------------------------------------------------------
# contrast-limited adaptive histogram equalization
# ---------------------------------------------------------------------------


def _clahe_plane(plane: np.ndarray, tiles: int, clip: float, bins: int) -> np.ndarray:
    h, w = plane.shape
    tiles = max(1, min(tiles, h, w))
    ys = np.round(np.linspace(0, h, tiles + 1)).astype(int)
    xs = np.round(np.linspace(0, w, tiles + 1)).astype(int)
    luts = np.zeros((tiles, tiles, bins), dtype=np.float64)
    identity = np.zeros((tiles, tiles), dtype=bool)
    for ti in range(tiles):
        for tj in range(tiles):
            patch = plane[ys[ti]:ys[ti + 1], xs[tj]:xs[tj + 1]]
            npix = patch.size
            if npix == 0 or patch.max() - patch.min() < 1.0 / (2 * bins):
                identity[ti, tj] = True  # nothing to equalize; keep values exact
                continue
            hist, _ = np.histogram(patch, bins=bins, range=(0.0, 1.0))
            limit = clip * npix / bins
            excess = np.maximum(hist - limit, 0.0).sum()
            hist = np.minimum(hist, limit) + excess / bins
            cdf = np.cumsum(hist)
            cdf_min = cdf[np.flatnonzero(cdf)[0]]
            denom = max(cdf[-1] - cdf_min, 1e-12)
            luts[ti, tj] = np.clip((cdf - cdf_min) / denom, 0.0, 1.0)
    # bilinear blend of per-tile mappings, clamped at the border tiles
    cy = (ys[:-1] + ys[1:]) / 2.0
    cx = (xs[:-1] + xs[1:]) / 2.0
    rows = np.arange(h, dtype=np.float64)
    cols = np.arange(w, dtype=np.float64)
    ti1 = np.clip(np.searchsorted(cy, rows), 0, tiles - 1)
    ti0 = np.clip(ti1 - 1, 0, tiles - 1)
    span_y = np.where(cy[ti1] > cy[ti0], cy[ti1] - cy[ti0], 1.0)
    wy = np.clip((rows - cy[ti0]) / span_y, 0.0, 1.0)
    tj1 = np.clip(np.searchsorted(cx, cols), 0, tiles - 1)
    tj0 = np.clip(tj1 - 1, 0, tiles - 1)
    span_x = np.where(cx[tj1] > cx[tj0], cx[tj1] - cx[tj0], 1.0)
    wx = np.clip((cols - cx[tj0]) / span_x, 0.0, 1.0)

    idx = np.clip((plane * bins).astype(int), 0, bins - 1)
    out = np.zeros_like(plane)
    for t_rows, w_rows in ((ti0, 1.0 - wy), (ti1, wy)):
        for t_cols, w_cols in ((tj0, 1.0 - wx), (tj1, wx)):
            tr = t_rows[:, None]
            tc = t_cols[None, :]
            mapped = np.where(identity[tr, tc], plane, luts[tr, tc, idx])
            out += (w_rows[:, None] * w_cols[None, :]) * mapped
    return np.clip(out, 0.0, 1.0)


def contrast_enhance(img, config: FusionConfig = DEFAULT_CONFIG) -> np.ndarray:
    """CLAHE on the Lab luminance channel; chroma untouched."""
    rgb = imaging._check_unit_range(img)
    lab = imaging.rgb_to_lab(rgb)
    lum = np.clip(lab[..., 0] / 100.0, 0.0, 1.0)
    lab[..., 0] = _clahe_plane(lum, config.clahe_tiles, config.clahe_clip,
                               config.clahe_bins) * 100.0
    return imaging.lab_to_rgb(lab)


# ---------------------------------------------------------------------------
# weight maps and multi-scale blending
# ---------------------------------------------------------------------------


def weight_maps(img, config: FusionConfig = DEFAULT_CONFIG) -> dict:
    """Laplacian contrast, saliency, saturation, exposedness; each in [0, 1]."""
    rgb = imaging._check_unit_range(img)
    lum = imaging.rgb_to_gray(rgb)
    lap = np.clip(np.abs(imaging._conv3x3(lum, LAPLACIAN_KERNEL)) / 4.0, 0.0, 1.0)
    sal = imaging.saliency_map(rgb)
    sat = np.clip(rgb.std(axis=-1) / _MAX_RGB_STD, 0.0, 1.0)
    sig = config.exposedness_sigma
    exposed = np.exp(-((lum - config.exposedness_target) ** 2) / (2.0 * sig * sig))
    return {"laplacian_contrast": lap, "saliency": sal, "saturation": sat,
            "exposedness": exposed}


def normalize_weights(raw_weights, epsilon: float = 1e-6) -> tuple:
    """(w_k + eps) / (sum_k w_k + K*eps); the result sums to 1 everywhere."""
    total = np.zeros_like(raw_weights[0])
    for w in raw_weights:
        total += w
    k = len(raw_weights)
    return tuple((w + epsilon) / (total + k * epsilon) for w in raw_weights)


def fuse(inputs: FusionInputs, levels: int) -> np.ndarray:
    """Blend the inputs' Laplacian pyramids under Gaussian-smoothed weights."""
    images = (np.asarray(inputs.input1, dtype=np.float64),
              np.asarray(inputs.input2, dtype=np.float64))
    if images[0].shape != images[1].shape:
        raise ValueError(f"fusion inputs differ in shape: {images[0].shape} vs {images[1].shape}")
    for w in inputs.weights:
        if w.shape != images[0].shape[:2]:
            raise ValueError(f"weight plane shape {w.shape} does not match image {images[0].shape[:2]}")
    lap_pyrs = [imaging.laplacian_pyramid(im, levels) for im in images]
    w_pyrs = [imaging.gaussian_pyramid(w, levels) for w in inputs.weights]
    fused = []
    for lvl in range(levels):
        acc = np.zeros_like(lap_pyrs[0][lvl])
        for lp, wp in zip(lap_pyrs, w_pyrs):
            acc += wp[lvl][..., None] * lp[lvl]
        fused.append(acc)
    return np.clip(imaging.reconstruct_laplacian(fused), 0.0, 1.0)


def fusion_enhance(img, levels: int = None, config: FusionConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Full pipeline: white balance, CLAHE derivative, additive weight
    aggregation, pyramid fusion. The level count is capped to what the
    image extent supports, so small images still go through."""
    arr = np.asarray(img)
    cap = imaging.max_pyramid_levels(arr.shape[0], arr.shape[1])
    levels = min(config.pyramid_levels if levels is None else levels, cap)
    input1 = white_balance(img, config)
    input2 = contrast_enhance(input1, config)
    raw = []
    for candidate in (input1, input2):
        maps = weight_maps(candidate, config)
        agg = np.zeros(candidate.shape[:2], dtype=np.float64)
        for plane in maps.values():
            agg += plane
        raw.append(agg)
    weights = normalize_weights(raw, config.weight_epsilon)
    return fuse(FusionInputs(input1, input2, weights), levels)
