"""Gaze point from the third-person ROA heatmap and a supplied head position."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch


@dataclass
class GazeResult:
    head: tuple[float, float]
    gaze_point: tuple[float, float]
    ray: tuple[float, float]
    degenerate: bool = False

    def to_json(self) -> dict:
        return asdict(self)


def top_mass_centroid(heat: np.ndarray, mass: float = 0.1) -> tuple[float, float] | None:
    """Value-weighted centroid (x, y) of the highest pixels holding ``mass`` of the total.

    Returns None for a constant map.
    """
    h = np.asarray(heat, dtype=float)
    if not np.isfinite(h).all():
        raise ValueError("heatmap is not finite")
    # relative test, so the verdict does not change when the map is rescaled
    if h.max() - h.min() <= 1e-12 * max(abs(h.max()), abs(h.min())):
        return None
    h = h - h.min()
    flat = h.ravel()
    order = np.argsort(-flat, kind="stable")
    csum = np.cumsum(flat[order])
    # the slack absorbs rounding, so an exact hit on the target mass is found at any scale
    k = int(np.searchsorted(csum, mass * csum[-1] * (1 - 1e-12), side="left")) + 1
    keep = order[:k]
    ys, xs = np.unravel_index(keep, h.shape)
    w = flat[keep]
    return float((xs * w).sum() / w.sum()), float((ys * w).sum() / w.sum())


def gaze_from_heatmap(heat: np.ndarray, head: tuple[float, float], mass: float = 0.1) -> GazeResult:
    hgt, wid = np.asarray(heat).shape
    hx, hy = float(head[0]), float(head[1])
    if not (0 <= hx <= wid - 1 and 0 <= hy <= hgt - 1):
        raise ValueError(f"head {head} outside the {wid}x{hgt} frame")
    pt = top_mass_centroid(heat, mass)
    degenerate = pt is None
    if pt is None:
        pt = ((wid - 1) / 2.0, (hgt - 1) / 2.0)
    dx, dy = pt[0] - hx, pt[1] - hy
    norm = math.hypot(dx, dy)
    if norm < 1e-9:
        return GazeResult((hx, hy), pt, (0.0, 0.0), True)
    return GazeResult((hx, hy), pt, (dx / norm, dy / norm), degenerate)


def gaze_heatmap(net, image: np.ndarray) -> np.ndarray:
    """Upsampled ROA heatmap of one frame; all zeros when the map is constant."""
    from ..model import extract_features, roa_heatmap

    feats = extract_features(image, net)
    with torch.no_grad():
        m = net.attention(feats[None])[0]
    hm = roa_heatmap(feats, m, image.shape[0])
    return np.zeros(image.shape[:2]) if hm.constant else hm.upsampled


def predict_gaze(net, image: np.ndarray, head: tuple[float, float], mass: float = 0.1) -> GazeResult:
    return gaze_from_heatmap(gaze_heatmap(net, image), head, mass)
