"""Image file I/O: PNG/JPEG decode, PNG-only encode, bilinear resize.

PNG on the way out keeps every byte reproducible; a JPEG re-encode would
perturb the metric scores.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

DECODE_SUFFIXES = {".png", ".jpg", ".jpeg"}
WORKING_SIZE = 256


class ImageIOError(IOError):
    pass


def load_image(path) -> np.ndarray:
    """Decode to (H, W, 3) float64 in [0, 1]."""
    path = Path(path)
    if path.suffix.lower() not in DECODE_SUFFIXES:
        raise ImageIOError(f"{path}: unsupported format (PNG and JPEG only)")
    try:
        with Image.open(path) as im:
            rgb = im.convert("RGB")
            arr = np.asarray(rgb, dtype=np.float64) / 255.0
    except (OSError, SyntaxError) as exc:
        raise ImageIOError(f"{path}: undecodable image: {exc}") from exc
    return arr


def save_png(path, img) -> None:
    """Encode unit-range floats as 8-bit PNG (round-half-up quantization)."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    data = np.floor(arr * 255.0 + 0.5).astype(np.uint8)
    if data.ndim == 2:
        pil = Image.fromarray(data, mode="L")
    else:
        pil = Image.fromarray(data, mode="RGB")
    pil.save(Path(path), format="PNG")


def resize_bilinear(img: np.ndarray, size: int = WORKING_SIZE) -> np.ndarray:
    """Resize to size x size; identity when the extents already match."""
    if img.shape[0] == size and img.shape[1] == size:
        return img
    quant = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    pil = Image.fromarray(quant, mode="RGB" if img.ndim == 3 else "L")
    out = pil.resize((size, size), Image.BILINEAR)
    return np.asarray(out, dtype=np.float64) / 255.0


def save_edge_map(path, edges: np.ndarray) -> None:
    save_png(path, edges.astype(np.float64))
