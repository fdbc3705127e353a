"""Two-view video summarisation from joint-attention agreement."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..datakit.frames import MemoryFrameStore
from ..datakit.manifest import ActionSegment, VideoPair
from ..datakit.sampling import corresponding_second


@dataclass
class Summary:
    pair_id: str
    importance: list[float]
    selected: list[int]
    threshold: float

    def to_json(self) -> dict:
        return asdict(self)


def cosine_importance(att_third: np.ndarray, att_first: np.ndarray, pair: VideoPair) -> np.ndarray:
    """Per third-person second: cosine of the two views' attention vectors, mapped to [0, 1]."""
    n = pair.third_view.n_seconds
    idx = [corresponding_second(pair, t) for t in range(n)]
    a = np.asarray(att_third[:n], dtype=float)
    b = np.asarray(att_first, dtype=float)[idx]
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    cos = np.einsum("ij,ij->i", a, b) / np.maximum(na * nb, 1e-300)
    return np.clip((cos + 1.0) / 2.0, 0.0, 1.0)


def select_seconds(importance, threshold: float) -> list[int]:
    return [t for t, v in enumerate(importance) if v >= threshold]


def adaptive_threshold(importance, percentile: float = 75.0) -> float:
    return float(np.percentile(np.asarray(importance, dtype=float), percentile))


def summarize_scores(pair_id: str, importance, threshold: float | None = None,
                     percentile: float = 75.0) -> Summary:
    imp = [float(v) for v in importance]
    thr = adaptive_threshold(imp, percentile) if threshold is None else float(threshold)
    return Summary(pair_id, imp, select_seconds(imp, thr), thr)


def summarize(net, store: MemoryFrameStore, pair: VideoPair, threshold: float | None = None,
              percentile: float = 75.0) -> Summary:
    """Summary of one pair from a trained network's attention vectors."""
    if net is None:
        raise ValueError("summarisation needs a trained checkpoint")
    from ..evaluation import encode, stream_images

    a3 = encode(net, stream_images(store, pair, "third"), "third")["att"]
    a1 = encode(net, stream_images(store, pair, "first"), "first")["att"]
    return summarize_scores(pair.pair_id, cosine_importance(a3, a1, pair), threshold, percentile)


def annotated_seconds(segments: tuple[ActionSegment, ...] | list, n_seconds: int) -> set[int]:
    """Seconds ``t`` whose interval [t, t+1) overlaps any annotated segment."""
    out = set()
    for s in segments:
        for t in range(n_seconds):
            if t < s.end and t + 1 > s.start:
                out.add(t)
    return out


def summary_metrics(selected, annotated) -> tuple[float, float, float]:
    """Second-level (recall, precision, F); empty selections score precision 0."""
    sel, ann = set(selected), set(annotated)
    inter = len(sel & ann)
    precision = inter / len(sel) if sel else 0.0
    recall = inter / len(ann) if ann else 0.0
    f = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return recall, precision, f


def random_selection(n_seconds: int, k: int, rng: np.random.Generator) -> list[int]:
    return sorted(int(t) for t in rng.choice(n_seconds, size=min(k, n_seconds), replace=False))
