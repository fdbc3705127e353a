"""Triplet sampling over a manifest at 1 frame per second."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .frames import Frame, Triplet
from .manifest import Manifest, VideoPair, align_timestamp


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    cross_video: float = 0.5  # probability of a negative from a different pair
    margin: float = 3.0       # seconds between x and a same-video negative

    def __post_init__(self):
        if not 0.0 <= self.cross_video <= 1.0:
            raise ValueError("cross_video must be a probability")
        if self.margin < 0:
            raise ValueError("margin must be nonnegative")


def corresponding_second(pair: VideoPair, t_third: float) -> int:
    """First-person frame index matching third-person second ``t_third``."""
    n = pair.first_view.n_seconds
    t = align_timestamp(t_third, pair.third_view.duration, pair.first_view.duration)
    return int(min(max(round(t), 0), n - 1))


class TripletSampler:
    """Draws triplets with the anchor uniform over all third-person frames."""

    def __init__(self, manifest: Manifest, cfg: SamplerConfig = SamplerConfig()):
        self.pairs = [p for p in manifest.valid_pairs()
                      if p.third_view.n_seconds >= 1 and p.first_view.n_seconds >= 1]
        self.cfg = cfg
        counts = np.array([p.third_view.n_seconds for p in self.pairs], dtype=np.int64)
        self._cum = np.cumsum(counts)

    def n_anchor_frames(self) -> int:
        return int(self._cum[-1]) if len(self._cum) else 0

    def anchor(self, index: int) -> tuple[VideoPair, int]:
        i = int(np.searchsorted(self._cum, index, side="right"))
        start = int(self._cum[i - 1]) if i else 0
        return self.pairs[i], index - start

    def sample(self, rng: np.random.Generator) -> Triplet:
        if self.cfg.cross_video > 0 and len(self.pairs) < 2:
            raise SamplingError("cross-video negatives need at least 2 valid pairs")
        if not self.pairs:
            raise SamplingError("no valid pairs to sample from")
        pair, ty = self.anchor(int(rng.integers(self.n_anchor_frames())))
        tx = corresponding_second(pair, ty)
        cross = rng.random() < self.cfg.cross_video
        tz = None
        if not cross:
            n1 = pair.first_view.n_seconds
            far = [t for t in range(n1) if abs(t - tx) >= self.cfg.margin]
            if far:
                tz = far[int(rng.integers(len(far)))]
            elif len(self.pairs) < 2:
                raise SamplingError(f"pair {pair.pair_id} too short for a same-video negative")
        if tz is None:
            j = int(rng.integers(len(self.pairs) - 1))
            other = self.pairs[j if self.pairs[j] is not pair else len(self.pairs) - 1]
            z = Frame(other.pair_id, "first", float(rng.integers(other.first_view.n_seconds)))
        else:
            z = Frame(pair.pair_id, "first", float(tz))
        return Triplet(
            x=Frame(pair.pair_id, "first", float(tx)),
            y=Frame(pair.pair_id, "third", float(ty)),
            z=z,
        )


def sample_triplet(m: Manifest, rng: np.random.Generator, cfg: SamplerConfig = SamplerConfig()) -> Triplet:
    return TripletSampler(m, cfg).sample(rng)


def check_triplet(t: Triplet, cfg: SamplerConfig) -> bool:
    """True when ``t`` satisfies the triplet invariants."""
    if t.x.pair_id != t.y.pair_id:
        return False
    if not (t.x.view == t.z.view == "first" and t.y.view == "third"):
        return False
    if t.z.pair_id == t.x.pair_id:
        return abs(t.z.timestamp - t.x.timestamp) >= cfg.margin
    return True
