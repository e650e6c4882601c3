"""No-reference underwater image quality metrics.

UCIQE combines chroma spread, luminance contrast, and saturation; UIQM
combines colorfulness (UICM), sharpness (UISM), and contrast (UIConM).
All coefficients and scale conventions sit in MetricConfig: the published
score tables are only reproducible under one specific set of conventions,
so every knob is explicit and the linear forms stay auditable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imaging


class MetricError(ValueError):
    """Image violates a metric precondition (too small, wrong grid)."""


@dataclass
class MetricConfig:
    uciqe_coefficients: tuple = (0.4680, 0.2745, 0.2576)
    chroma_ceiling: float = 100.0     # Lab chroma scale for sigma_c
    luminance_ceiling: float = 100.0  # L* scale for con_l
    percentile: float = 0.01
    uiqm_coefficients: tuple = (0.0282, 0.2953, 3.5753)
    uicm_scale: float = 255.0
    uicm_trim: float = 0.1
    uicm_mu_coeff: float = -0.0268
    uicm_sigma_coeff: float = 0.1586
    block: int = 10
    uism_channel_weights: tuple = (0.299, 0.587, 0.114)
    eme_factor: float = 2.0
    eme_floor: float = 1e-4
    plip_gamma: float = 1026.0
    uiconm_scale: float = 255.0


DEFAULT_CONFIG = MetricConfig()


@dataclass
class ImageScore:
    name: str
    subset: str
    uciqe: float
    uiqm: float
    uicm: float
    uism: float
    uiconm: float

    FIELDS = ("uciqe", "uiqm", "uicm", "uiconm", "uism")


def uciqe(img, config: MetricConfig = DEFAULT_CONFIG):
    """Returns (value, components) with components (sigma_c, con_l, mu_s)
    already normalized to their configured ceilings."""
    rgb = imaging._check_unit_range(img)
    npix = rgb.shape[0] * rgb.shape[1]
    if npix < 100:
        raise MetricError(f"image has {npix} pixels; the top/bottom "
                          f"{config.percentile:.0%} luminance bins degenerate below 100")
    lab = imaging.rgb_to_lab(rgb)
    chroma = imaging.lab_chroma(lab)
    sigma_c = float(chroma.std()) / config.chroma_ceiling
    lum = np.sort(lab[..., 0].reshape(-1))
    top = max(1, int(round(config.percentile * npix)))
    con_l = float(lum[-top:].mean() - lum[:top].mean()) / config.luminance_ceiling
    mu_s = float(imaging.rgb_to_hsv(rgb)[..., 1].mean())
    c1, c2, c3 = config.uciqe_coefficients
    return c1 * sigma_c + c2 * con_l + c3 * mu_s, (sigma_c, con_l, mu_s)


def _trimmed_stats(values: np.ndarray, trim: float):
    ordered = np.sort(values.reshape(-1))
    cut = int(trim * ordered.size)
    kept = ordered[cut:ordered.size - cut]
    if kept.size == 0:
        return 0.0, 0.0
    mu = float(kept.mean())
    return mu, float(((kept - mu) ** 2).mean())


def uicm(img, config: MetricConfig = DEFAULT_CONFIG) -> float:
    """Colorfulness from alpha-trimmed opponent-channel statistics."""
    rgb = imaging._check_unit_range(img) * config.uicm_scale
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mu_rg, var_rg = _trimmed_stats(r - g, config.uicm_trim)
    mu_yb, var_yb = _trimmed_stats((r + g) / 2.0 - b, config.uicm_trim)
    return (config.uicm_mu_coeff * math.hypot(mu_rg, mu_yb)
            + config.uicm_sigma_coeff * math.sqrt(var_rg + var_yb))


def _block_grid(plane: np.ndarray, block: int):
    h, w = plane.shape
    k1, k2 = h // block, w // block
    if k1 < 1 or k2 < 1:
        raise MetricError(f"image {h}x{w} too small for {block}px metric blocks")
    trimmed = plane[:k1 * block, :k2 * block]
    return trimmed.reshape(k1, block, k2, block).transpose(0, 2, 1, 3).reshape(k1 * k2, block * block)


def _eme(plane: np.ndarray, config: MetricConfig) -> float:
    """Michelson-style log ratio of block extremes; all-zero blocks add 0."""
    blocks = _block_grid(plane, config.block)
    mx = blocks.max(axis=1)
    mn = blocks.min(axis=1)
    ratio = np.maximum(mx, config.eme_floor) / np.maximum(mn, config.eme_floor)
    return float(config.eme_factor * np.log(ratio).mean())


def uism(img, config: MetricConfig = DEFAULT_CONFIG) -> float:
    """Sharpness: per-channel EME of the gradient-weighted channel."""
    rgb = imaging._check_unit_range(img)
    total = 0.0
    for c, weight in enumerate(config.uism_channel_weights):
        channel = rgb[..., c]
        edge = imaging.sobel_magnitude(channel) * channel
        total += weight * _eme(edge, config)
    return total


def uiconm(img, config: MetricConfig = DEFAULT_CONFIG) -> float:
    """Contrast: blockwise |w log w| of the PLIP Michelson ratio on gray."""
    gray = imaging.rgb_to_gray(imaging._check_unit_range(img)) * config.uiconm_scale
    blocks = _block_grid(gray, config.block)
    mx = blocks.max(axis=1)
    mn = blocks.min(axis=1)
    gamma = config.plip_gamma
    top = gamma * (mx - mn) / (gamma - mn)
    bottom = mx + mn - mx * mn / gamma
    w = np.where(bottom > 0, top / np.where(bottom > 0, bottom, 1.0), 0.0)
    live = w > 0
    contrib = np.zeros_like(w)
    contrib[live] = np.abs(w[live] * np.log(w[live]))
    return float(contrib.mean())


def uiqm(img, config: MetricConfig = DEFAULT_CONFIG) -> float:
    p1, p2, p3 = config.uiqm_coefficients
    return p1 * uicm(img, config) + p2 * uism(img, config) + p3 * uiconm(img, config)


def score_image(name: str, subset: str, img, config: MetricConfig = DEFAULT_CONFIG) -> ImageScore:
    u, _ = uciqe(img, config)
    cm = uicm(img, config)
    sm = uism(img, config)
    cn = uiconm(img, config)
    p1, p2, p3 = config.uiqm_coefficients
    return ImageScore(name=name, subset=subset, uciqe=u,
                      uiqm=p1 * cm + p2 * sm + p3 * cn,
                      uicm=cm, uism=sm, uiconm=cn)


@dataclass
class MetricReport:
    scores: list = field(default_factory=list)           # per-image, input order
    errors: list = field(default_factory=list)           # (name, message)
    missing_subsets: list = field(default_factory=list)  # declared but empty

    def subsets(self) -> list:
        seen = []
        for s in self.scores:
            if s.subset not in seen:
                seen.append(s.subset)
        return seen

    def aggregate(self, subset=None) -> dict:
        rows = [s for s in self.scores if subset is None or s.subset == subset]
        if not rows:
            return {}
        return {f: sum(getattr(s, f) for s in rows) / len(rows) for f in ImageScore.FIELDS}


def score_dataset(directory, manifest_entries, loader,
                  config: MetricConfig = DEFAULT_CONFIG) -> MetricReport:
    """Score every manifest entry found under ``directory``.

    ``manifest_entries`` is an ordered (filename, subset) sequence;
    ``loader`` maps a path to an (H, W, 3) unit-range array. Unreadable
    files are recorded and skipped; the run continues. Subsets that end up
    empty are flagged rather than silently dropped.
    """
    directory = Path(directory)
    report = MetricReport()
    declared = []
    for filename, subset in manifest_entries:
        if subset not in declared:
            declared.append(subset)
        path = directory / filename
        try:
            img = loader(path)
            report.scores.append(score_image(filename, subset, img, config))
        except Exception as exc:  # per-file isolation: one bad image must not kill the run
            report.errors.append((filename, f"{type(exc).__name__}: {exc}"))
    present = set(s.subset for s in report.scores)
    report.missing_subsets = [s for s in declared if s not in present]
    return report
