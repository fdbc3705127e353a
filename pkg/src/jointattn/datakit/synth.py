"""Procedural paired first/third-person videos with known shared attention regions.

A third-person stream shows a textured scene, an actor blob and one action
object. The first-person stream looks at a magnified, rotated, colour-jittered
neighbourhood of that object and adds its own distractor sprites. The object is
visible only inside the pair's action segment; its class is the action label.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from .frames import MemoryFrameStore, write_png
from .manifest import ActionSegment, Manifest, StreamRef, VideoPair
from .sampling import corresponding_second

Box = tuple[float, float, float, float]


@dataclass(frozen=True)
class SynthConfig:
    side: int = 64
    n_classes: int = 6
    min_duration: int = 8
    max_duration: int = 12
    first_duration_jitter: int = 2
    action_fraction: tuple[float, float] = (0.55, 0.8)
    object_half_size: float = 0.12      # scene units; the scene spans [0, 1]^2
    ego_scale: tuple[float, float] = (1.5, 2.5)
    ego_rotation_deg: float = 15.0
    ego_center_jitter: float = 0.06
    hsv_jitter: float = 0.10
    ego_distractors: tuple[int, int] = (1, 3)
    n_backgrounds: int = 4
    noise: float = 0.02

    def __post_init__(self):
        if self.side < 32:
            raise ValueError("side must be >= 32")
        if self.n_classes < 1:
            raise ValueError("need at least one object class")
        if self.min_duration < 2 or self.max_duration < self.min_duration:
            raise ValueError("durations must satisfy 2 <= min_duration <= max_duration")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()
             if k in cls.__dataclass_fields__}
        return cls(**d)


@dataclass
class PairTruth:
    """Ground truth for one pair. Boxes are (x0, y0, x1, y1) in pixels; ``None``
    where the object is hidden."""

    pair_id: str
    object_id: int
    boxes_third: dict[int, Box | None]
    boxes_first: dict[int, Box | None]
    alignment: dict[int, int]  # third second -> first second

    def to_json(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "object_id": self.object_id,
            "boxes_third": {str(k): v for k, v in self.boxes_third.items()},
            "boxes_first": {str(k): v for k, v in self.boxes_first.items()},
            "alignment": {str(k): v for k, v in self.alignment.items()},
        }

    @classmethod
    def from_json(cls, d: dict) -> "PairTruth":
        def boxes(m):
            return {int(k): (tuple(v) if v is not None else None) for k, v in m.items()}
        return cls(d["pair_id"], int(d["object_id"]), boxes(d["boxes_third"]),
                   boxes(d["boxes_first"]), {int(k): int(v) for k, v in d["alignment"].items()})


@dataclass
class SyntheticSet:
    manifest: Manifest
    truth: dict[str, PairTruth]
    frames: MemoryFrameStore
    config: SynthConfig = field(default_factory=SynthConfig)

    def __iter__(self):
        # unpacks as (manifest, truth)
        return iter((self.manifest, self.truth))

    def split(self, n_train: int) -> tuple[Manifest, Manifest]:
        ids = self.manifest.ids
        return self.manifest.subset(ids[:n_train]), self.manifest.subset(ids[n_train:])

    def write(self, out: str | Path) -> Path:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        for (pid, view, t), img in sorted(self.frames.frames.items()):
            write_png(out / pid / view / f"{t}.png", img)
        for pid, gt in self.truth.items():
            (out / pid).mkdir(parents=True, exist_ok=True)
            (out / pid / "ground_truth.json").write_text(json.dumps(gt.to_json(), sort_keys=True))
        self.manifest.write(out / "manifest.jsonl")
        (out / "synth_config.json").write_text(json.dumps(asdict(self.config), sort_keys=True))
        return out / "manifest.jsonl"


def load_truth(root: str | Path) -> dict[str, PairTruth]:
    root = Path(root)
    return {
        p.parent.name: PairTruth.from_json(json.loads(p.read_text()))
        for p in sorted(root.glob("*/ground_truth.json"))
    }


# -- shapes -----------------------------------------------------------------

def _shape_mask(kind: int, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Membership of local coords (p, q), roughly in [-1, 1]^2, for shape ``kind``."""
    r2 = p * p + q * q
    kind %= 8
    if kind == 0:
        return np.maximum(np.abs(p), np.abs(q)) <= 0.8
    if kind == 1:
        return r2 <= 0.85 ** 2
    if kind == 2:
        return (q <= 0.75) & (q >= -0.85 + 1.6 * np.abs(p))
    if kind == 3:
        return ((np.abs(p) <= 0.3) & (np.abs(q) <= 0.9)) | ((np.abs(q) <= 0.3) & (np.abs(p) <= 0.9))
    if kind == 4:
        return (r2 <= 0.9 ** 2) & (r2 >= 0.45 ** 2)
    if kind == 5:
        return np.abs(p) + np.abs(q) <= 0.95
    if kind == 6:
        return (np.maximum(np.abs(p), np.abs(q)) <= 0.85) & (np.floor((p + 1) * 2.5) % 2 == 0)
    return (r2 <= 0.9 ** 2) & (q >= 0)


def class_color(k: int, n_classes: int) -> np.ndarray:
    return hsv_to_rgb(np.array([k / max(n_classes, 1), 0.85, 0.9]))


class _Background:
    """Smooth procedural texture evaluable at any scene coordinate."""

    def __init__(self, rng: np.random.Generator):
        self.freq = rng.uniform(2.0, 9.0, size=(4, 2)) * rng.choice([-1, 1], size=(4, 2))
        self.phase = rng.uniform(0, 2 * math.pi, size=4)
        hue = rng.uniform(0, 1)
        self.c0 = hsv_to_rgb(np.array([hue, rng.uniform(0.1, 0.3), rng.uniform(0.35, 0.55)]))
        self.c1 = hsv_to_rgb(np.array([(hue + 0.1) % 1, rng.uniform(0.1, 0.3), rng.uniform(0.6, 0.8)]))

    def __call__(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        s = sum(np.sin(2 * math.pi * (f[0] * u + f[1] * v) + ph) for f, ph in zip(self.freq, self.phase))
        a = (np.tanh(s / 2.0) + 1) / 2
        return self.c0 * (1 - a)[..., None] + self.c1 * a[..., None]


def _grid(side: int) -> tuple[np.ndarray, np.ndarray]:
    c = (np.arange(side) + 0.5) / side
    return np.meshgrid(c, c)  # (u across columns, v down rows)


def _paint(img, mask, color):
    img[mask] = color


def _clip_box(box: Box, side: int) -> Box | None:
    x0, y0, x1, y1 = (float(min(max(b, 0.0), side)) for b in box)
    if x1 - x0 <= 0 or y1 - y0 <= 0:
        return None
    return (x0, y0, x1, y1)


# -- generator --------------------------------------------------------------

def _render_pair(i: int, cfg: SynthConfig, seed: int, ss: np.random.SeedSequence,
                 backgrounds: list[_Background], store: MemoryFrameStore):
    rng = np.random.default_rng(ss)
    S = cfg.side
    pid = f"syn{seed}_{i:04d}"
    d3 = int(rng.integers(cfg.min_duration, cfg.max_duration + 1))
    d1 = int(max(2, d3 + rng.integers(-cfg.first_duration_jitter, cfg.first_duration_jitter + 1)))
    k = int(rng.integers(cfg.n_classes))
    frac = rng.uniform(*cfg.action_fraction)
    length = max(1, int(round(frac * d3)))
    start = int(rng.integers(0, d3 - length + 1))
    end = start + length

    bg = backgrounds[int(rng.integers(len(backgrounds)))]
    bg_off = rng.uniform(0, 1, size=2)
    h = cfg.object_half_size
    obj_rot = rng.uniform(-0.3, 0.3)
    color = class_color(k, cfg.n_classes)

    # object drifts slowly; actor stays beside it and sways
    c0 = rng.uniform(0.3, 0.7, size=2)
    drift = np.cumsum(rng.normal(0, 0.01, size=(d3 + 1, 2)), axis=0)
    centers = np.clip(c0 + drift, 0.2, 0.8)
    side_sign = rng.choice([-1.0, 1.0])
    actor_off = np.array([side_sign * rng.uniform(0.22, 0.3), rng.uniform(-0.15, -0.05)])
    actor_sway = rng.normal(0, 0.015, size=(d3 + 1, 2))
    actor_color = hsv_to_rgb(np.array([rng.uniform(0, 1), rng.uniform(0.0, 0.2), rng.uniform(0.05, 0.25)]))

    def state(tau: float):
        j = min(int(math.floor(tau)), d3)
        w = tau - math.floor(tau)
        c = centers[j] * (1 - w) + centers[min(j + 1, d3)] * w
        visible = start <= tau < end
        return c, visible

    def local(u, v, c):
        ca, sa = math.cos(obj_rot), math.sin(obj_rot)
        du, dv = (u - c[0]) / h, (v - c[1]) / h
        return ca * du + sa * dv, -sa * du + ca * dv

    U, V = _grid(S)
    boxes_third: dict[int, Box | None] = {}
    for t in range(d3):
        c, visible = state(float(t))
        img = bg(U + bg_off[0], V + bg_off[1])
        a_c = c + actor_off + actor_sway[t]
        body = ((U - a_c[0]) / 0.09) ** 2 + ((V - a_c[1] - 0.1) / 0.2) ** 2 <= 1
        head = ((U - a_c[0]) ** 2 + (V - a_c[1] + 0.17) ** 2) <= 0.06 ** 2
        _paint(img, body | head, actor_color)
        if visible:
            p, q = local(U, V, c)
            _paint(img, _shape_mask(k, p, q), color)
            boxes_third[t] = _clip_box(((c[0] - h) * S, (c[1] - h) * S, (c[0] + h) * S, (c[1] + h) * S), S)
        else:
            boxes_third[t] = None
        img = img + rng.normal(0, cfg.noise, size=img.shape)
        store.put(pid, "third", t, np.clip(img, 0, 1))

    boxes_first: dict[int, Box | None] = {}
    A = (np.arange(S) + 0.5) / S - 0.5
    Ae, Be = np.meshgrid(A, A)
    for j in range(d1):
        tau = j * d3 / d1
        c, visible = state(tau)
        scale = rng.uniform(*cfg.ego_scale)
        theta = math.radians(rng.uniform(-cfg.ego_rotation_deg, cfg.ego_rotation_deg))
        aniso = rng.uniform(0.9, 1.1)
        R = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
        M = R @ np.diag([aniso / scale, 1.0 / (aniso * scale)])
        cam = c + rng.uniform(-cfg.ego_center_jitter, cfg.ego_center_jitter, size=2)
        u = cam[0] + M[0, 0] * Ae + M[0, 1] * Be
        v = cam[1] + M[1, 0] * Ae + M[1, 1] * Be
        img = bg(u + bg_off[0], v + bg_off[1])
        if visible:
            p, q = local(u, v, c)
            _paint(img, _shape_mask(k, p, q), color)
            corners = np.array([[c[0] + sx * h, c[1] + sy * h] for sx in (-1, 1) for sy in (-1, 1)])
            ab = np.linalg.solve(M, (corners - cam).T).T
            px = (ab + 0.5) * S
            boxes_first[j] = _clip_box((px[:, 0].min(), px[:, 1].min(), px[:, 0].max(), px[:, 1].max()), S)
        else:
            boxes_first[j] = None
        X, Y = _grid(S)
        for _ in range(int(rng.integers(cfg.ego_distractors[0], cfg.ego_distractors[1] + 1))):
            dc = rng.uniform(0.1, 0.9, size=2)
            dh = rng.uniform(0.06, 0.11)
            dcol = hsv_to_rgb(np.array([rng.uniform(0, 1), rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.9)]))
            _paint(img, _shape_mask(int(rng.integers(8)), (X - dc[0]) / dh, (Y - dc[1]) / dh), dcol)
        hsv = rgb_to_hsv(np.clip(img, 0, 1))
        hsv[..., 0] = (hsv[..., 0] + rng.uniform(-0.5, 0.5) * cfg.hsv_jitter) % 1.0
        hsv[..., 1:] *= 1 + rng.uniform(-cfg.hsv_jitter, cfg.hsv_jitter, size=2)
        img = hsv_to_rgb(np.clip(hsv, 0, 1)) + rng.normal(0, cfg.noise, size=img.shape)
        store.put(pid, "first", j, np.clip(img, 0, 1))

    pair = VideoPair(
        pid,
        StreamRef(f"{pid}/first", 1.0, float(d1)),
        StreamRef(f"{pid}/third", 1.0, float(d3)),
        (ActionSegment(f"class_{k}", float(start), float(end)),),
    )
    alignment = {t: corresponding_second(pair, t) for t in range(d3)}
    return pair, PairTruth(pid, k, boxes_third, boxes_first, alignment)


def generate_synthetic(cfg: SynthConfig, seed: int, n_pairs: int) -> SyntheticSet:
    """Render ``n_pairs`` pairs. Pair ``i`` depends only on ``(cfg, seed, i)``."""
    root = np.random.SeedSequence(seed)
    bg_seq, pair_root = root.spawn(2)
    bg_rng = np.random.default_rng(bg_seq)
    backgrounds = [_Background(bg_rng) for _ in range(cfg.n_backgrounds)]
    store = MemoryFrameStore()
    pairs, truth = [], {}
    for i, ss in enumerate(pair_root.spawn(n_pairs)):
        pair, gt = _render_pair(i, cfg, seed, ss, backgrounds, store)
        pairs.append(pair)
        truth[pair.pair_id] = gt
    return SyntheticSet(Manifest(tuple(pairs), f"synthetic-seed{seed}"), truth, store, cfg)
