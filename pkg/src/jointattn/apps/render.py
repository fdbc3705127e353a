"""Heatmap overlays: blue (low) to red (high), alpha-composited on the frame."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib import colormaps

from ..datakit.frames import to_float, to_uint8, write_png

OVERLAY_ALPHA = 0.45


def overlay(image: np.ndarray, heat: np.ndarray, alpha: float = OVERLAY_ALPHA, cmap: str = "jet") -> np.ndarray:
    """8-bit RGB overlay of ``heat`` (values in [0, 1], same H x W as ``image``)."""
    img = to_float(np.asarray(image))
    heat = np.asarray(heat, dtype=float)
    if heat.shape != img.shape[:2]:
        raise ValueError(f"heatmap {heat.shape} does not match image {img.shape[:2]}")
    colors = colormaps[cmap](np.clip(heat, 0.0, 1.0))[..., :3]
    return to_uint8((1 - alpha) * img + alpha * colors)


def render_heatmap(image: np.ndarray, heat: np.ndarray, path: str | Path, alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    out = overlay(image, heat, alpha)
    write_png(path, out)
    return out
