"""ROA-guided co-segmentation over superpixel candidates.

The built-in segmenter is SLIC k-means in (L, a, b, x, y) with the SLICO
adaptive colour normaliser: each cluster's colour scale is the largest colour
distance seen in it on the previous pass, so no compactness is supplied.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from skimage.color import rgb2lab


class SegmenterError(RuntimeError):
    pass


def _enforce_connectivity(labels: np.ndarray) -> np.ndarray:
    """Split every label into connected parts; fold all but the largest into a neighbour."""
    labels = labels.copy()
    structure = ndimage.generate_binary_structure(2, 1)
    changed = True
    while changed:
        changed = False
        for lab in np.unique(labels):
            comp, n = ndimage.label(labels == lab, structure)
            if n <= 1:
                continue
            sizes = ndimage.sum_labels(np.ones_like(comp), comp, index=np.arange(1, n + 1))
            keep = int(np.argmax(sizes)) + 1
            for c in range(1, n + 1):
                if c == keep:
                    continue
                part = comp == c
                ring = ndimage.binary_dilation(part, structure) & ~part
                neigh = labels[ring]
                neigh = neigh[neigh != lab]
                if neigh.size == 0:
                    continue
                vals, counts = np.unique(neigh, return_counts=True)
                labels[part] = vals[np.argmax(counts)]
                changed = True
    _, relabeled = np.unique(labels, return_inverse=True)
    return relabeled.reshape(labels.shape)


def slico(image: np.ndarray, n_segments: int = 24, iterations: int = 10) -> np.ndarray:
    """Superpixel labels (H, W), each label one 4-connected region."""
    img = np.asarray(image, dtype=float)
    if img.ndim != 3 or img.shape[2] != 3:
        raise SegmenterError(f"expected an H x W x 3 image, got shape {img.shape}")
    if img.max() > 1.0:
        img = img / 255.0
    H, W = img.shape[:2]
    lab = rgb2lab(np.clip(img, 0, 1))
    step = max(2, int(round(math.sqrt(H * W / max(n_segments, 1)))))
    ys, xs = np.mgrid[0:H, 0:W].astype(float)

    grad = np.zeros((H, W))
    for ch in range(3):
        gy, gx = np.gradient(lab[..., ch])
        grad += gx * gx + gy * gy
    centers = []
    for cy in np.arange(step / 2, H, step):
        for cx in np.arange(step / 2, W, step):
            iy, ix = int(cy), int(cx)
            y0, y1, x0, x1 = max(iy - 1, 0), min(iy + 2, H), max(ix - 1, 0), min(ix + 2, W)
            win = grad[y0:y1, x0:x1]
            dy, dx = np.unravel_index(int(np.argmin(win)), win.shape)
            py, px = y0 + dy, x0 + dx
            centers.append([*lab[py, px], px, py])
    centers = np.array(centers)
    K = len(centers)
    if K < 2:
        raise SegmenterError("image too small for two superpixels")

    # zero-parameter start: spatial Voronoi cells give the first colour scales
    d_sp = (xs[None] - centers[:, 3, None, None]) ** 2 + (ys[None] - centers[:, 4, None, None]) ** 2
    labels = np.argmin(d_sp, axis=0)
    max_color = np.ones(K)
    for it in range(iterations + 1):
        for k in range(K):
            m = labels == k
            if m.any():
                dc = np.sum((lab[m] - centers[k, :3]) ** 2, axis=1)
                max_color[k] = max(float(dc.max()), 1e-6)
        if it == iterations:
            break
        best = np.full((H, W), np.inf)
        new = labels.copy()
        for k in range(K):
            cx, cy = centers[k, 3], centers[k, 4]
            y0, y1 = max(int(cy - step), 0), min(int(cy + step) + 1, H)
            x0, x1 = max(int(cx - step), 0), min(int(cx + step) + 1, W)
            win = lab[y0:y1, x0:x1]
            dc = np.sum((win - centers[k, :3]) ** 2, axis=-1)
            ds = (xs[y0:y1, x0:x1] - cx) ** 2 + (ys[y0:y1, x0:x1] - cy) ** 2
            d = dc / max_color[k] + ds / step ** 2
            region = best[y0:y1, x0:x1]
            upd = d < region
            region[upd] = d[upd]
            new[y0:y1, x0:x1][upd] = k
        labels = new
        for k in range(K):
            m = labels == k
            if m.any():
                centers[k] = [*lab[m].mean(axis=0), xs[m].mean(), ys[m].mean()]
    return _enforce_connectivity(labels)


@dataclass
class Segment:
    label: int
    mask: np.ndarray
    centroid: tuple[float, float]  # (x, y)
    histogram: np.ndarray


def color_histogram(pixels: np.ndarray, bins: int = 8) -> np.ndarray:
    """Per-channel ``bins``-bin histograms of RGB values in [0, 1], each summing to 1."""
    hs = [np.histogram(pixels[:, c], bins=bins, range=(0.0, 1.0))[0].astype(float) for c in range(3)]
    return np.concatenate([h / max(h.sum(), 1.0) for h in hs])


def chi2(h1: np.ndarray, h2: np.ndarray) -> float:
    s = h1 + h2
    nz = s > 0
    return float(0.5 * np.sum((h1[nz] - h2[nz]) ** 2 / s[nz]))


def segments_from_labels(image: np.ndarray, labels: np.ndarray, bins: int = 8) -> list[Segment]:
    img = np.asarray(image, dtype=float)
    out = []
    for lab in np.unique(labels):
        m = labels == lab
        ys, xs = np.nonzero(m)
        out.append(Segment(int(lab), m, (float(xs.mean()), float(ys.mean())), color_histogram(img[m], bins)))
    return out


@dataclass
class CosegResult:
    first_mask: np.ndarray
    third_mask: np.ndarray
    proximity: float
    appearance: float
    cost: float
    labels: tuple[int, int]
    n_candidates: tuple[int, int] = (0, 0)
    cost_matrix: np.ndarray | None = field(default=None, repr=False)

    def to_json(self) -> dict:
        return {"proximity": self.proximity, "appearance": self.appearance, "cost": self.cost,
                "labels": list(self.labels), "n_candidates": list(self.n_candidates),
                "first_area": int(self.first_mask.sum()), "third_area": int(self.third_mask.sum())}


def heat_peak(heat: np.ndarray) -> tuple[float, float]:
    iy, ix = np.unravel_index(int(np.argmax(heat)), heat.shape)
    return float(ix), float(iy)


def pair_costs(seg1: list[Segment], seg3: list[Segment], peak1, peak3, shape1, shape3,
               alpha: float = 0.5) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(cost, proximity, appearance) matrices indexed [first segment, third segment]."""
    diag1 = math.hypot(*shape1[:2])
    diag3 = math.hypot(*shape3[:2])
    p1 = np.array([math.hypot(s.centroid[0] - peak1[0], s.centroid[1] - peak1[1]) / diag1 for s in seg1])
    p3 = np.array([math.hypot(s.centroid[0] - peak3[0], s.centroid[1] - peak3[1]) / diag3 for s in seg3])
    prox = p1[:, None] + p3[None, :]
    app = np.array([[chi2(a.histogram, b.histogram) for b in seg3] for a in seg1])
    return alpha * prox + (1 - alpha) * app, prox, app


def cosegment_from_heatmaps(first_image: np.ndarray, third_image: np.ndarray, heat_first: np.ndarray,
                            heat_third: np.ndarray, segmenter=slico, alpha: float = 0.5) -> CosegResult:
    """Pick the cross-view segment pair closest to both ROA peaks and most alike in colour."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    try:
        lab1 = segmenter(first_image)
        lab3 = segmenter(third_image)
    except Exception as exc:
        raise SegmenterError(f"segmenter failed: {exc}") from exc
    seg1 = segments_from_labels(first_image, lab1)
    seg3 = segments_from_labels(third_image, lab3)
    if len(seg1) < 2 or len(seg3) < 2:
        raise SegmenterError("segmenter returned fewer than 2 candidates for a view")
    cost, prox, app = pair_costs(seg1, seg3, heat_peak(heat_first), heat_peak(heat_third),
                                 np.shape(first_image), np.shape(third_image), alpha)
    i, j = np.unravel_index(int(np.argmin(cost)), cost.shape)
    return CosegResult(seg1[i].mask, seg3[j].mask, float(prox[i, j]), float(app[i, j]), float(cost[i, j]),
                       (seg1[i].label, seg3[j].label), (len(seg1), len(seg3)), cost)


def cosegment(net, first_image: np.ndarray, third_image: np.ndarray, segmenter=slico,
              alpha: float = 0.5) -> CosegResult:
    import torch

    from ..model import extract_features, roa_heatmap

    heats = []
    for img in (first_image, third_image):
        f = extract_features(img, net)
        with torch.no_grad():
            m = net.attention(f[None])[0]
        heats.append(roa_heatmap(f, m, img.shape[0]).upsampled)
    return cosegment_from_heatmaps(first_image, third_image, heats[0], heats[1], segmenter, alpha)
