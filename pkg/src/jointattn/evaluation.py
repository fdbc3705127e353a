"""Pairs discrimination, best-match moment localisation, heatmap hit rate and
the ablation comparison table."""
from __future__ import annotations

import csv
import json
import logging
import statistics
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .datakit.frames import MemoryFrameStore, Triplet
from .datakit.manifest import Manifest, VideoPair, align_timestamp
from .datakit.sampling import SamplerConfig, TripletSampler
from .datakit.synth import PairTruth
from .model import (JointAttentionNet, apply_attention, embed, images_to_tensor, load_checkpoint,
                    param_dtype, roa_heatmap)
from .trainer import VARIANTS, TrainConfig, train

log = logging.getLogger(__name__)


@dataclass
class EvalReport:
    task: str
    value: float
    n: int
    records: list[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True, indent=1) + "\n")


# -- embeddings ---------------------------------------------------------------

def _filtered(variant: str, view: str) -> bool:
    """Whether ``view`` embeddings pass through attention under ``variant``."""
    if variant == "cnn_tl_1" and view == "first":
        return False
    if variant == "cnn_tl_3" and view == "third":
        return False
    return True


def encode(net: JointAttentionNet, images: np.ndarray, view: str = "third", variant: str = "full",
           batch: int = 64) -> dict[str, np.ndarray]:
    """Embeddings, attention vectors and raw feature maps for a stack of images."""
    embs, atts, feats = [], [], []
    with torch.no_grad():
        for i in range(0, len(images), batch):
            x = images_to_tensor(images[i:i + batch], param_dtype(net))
            f = net.features(x)
            m = net.attention(f)
            e = embed(apply_attention(f, m)) if _filtered(variant, view) else embed(f)
            embs.append(e.double().numpy())
            atts.append(m.double().numpy())
            feats.append(f.double().numpy())
    return {"emb": np.concatenate(embs), "att": np.concatenate(atts), "feat": np.concatenate(feats)}


def stream_images(store: MemoryFrameStore, pair: VideoPair, view: str) -> np.ndarray:
    n = pair.stream(view).n_seconds
    return np.stack([store.get(pair.pair_id, view, t) for t in range(n)])


# -- pairs discrimination -------------------------------------------------------

def discrimination_from_distances(d_pos, d_neg) -> tuple[float, np.ndarray]:
    """Correct iff d_pos < d_neg strictly; ties count as wrong."""
    correct = np.asarray(d_pos) < np.asarray(d_neg)
    return float(correct.mean()) if correct.size else float("nan"), correct


def sample_eval_triplets(manifest: Manifest, n: int, seed: int, cfg: SamplerConfig = SamplerConfig()) -> list[Triplet]:
    sampler = TripletSampler(manifest, cfg)
    rng = np.random.default_rng([seed, 104729])
    return [sampler.sample(rng) for _ in range(n)]


def pairs_discrimination(net: JointAttentionNet, store: MemoryFrameStore, triplets: list[Triplet],
                         variant: str = "full") -> EvalReport:
    if not triplets:
        raise ValueError("need at least one triplet")

    def stack(role):
        return np.stack([store.get(getattr(t, role).pair_id, getattr(t, role).view,
                                   int(getattr(t, role).timestamp)) for t in triplets])

    ex = encode(net, stack("x"), "first", variant)["emb"]
    ey = encode(net, stack("y"), "third", variant)["emb"]
    ez = encode(net, stack("z"), "first", variant)["emb"]
    d_pos = np.linalg.norm(ex - ey, axis=1)
    d_neg = np.linalg.norm(ey - ez, axis=1)
    acc, correct = discrimination_from_distances(d_pos, d_neg)
    records = [
        {"pair": t.y.pair_id, "t_third": t.y.timestamp, "t_first": t.x.timestamp,
         "neg_pair": t.z.pair_id, "t_neg": t.z.timestamp,
         "d_pos": round(float(dp), 10), "d_neg": round(float(dn), 10), "correct": bool(c)}
        for t, dp, dn, c in zip(triplets, d_pos, d_neg, correct)
    ]
    return EvalReport("pairs_discrimination", acc, len(triplets), records)


# -- moment localisation ---------------------------------------------------------

def localization_errors(emb_third: np.ndarray, emb_first: np.ndarray, dur_third: float,
                        dur_first: float) -> tuple[np.ndarray, np.ndarray]:
    """Per third-person moment: predicted first-person second and absolute error.

    At 1 fps a moment is a single frame, so the mean pairwise distance between
    two moments is the distance between their embeddings. ``argmin`` keeps the
    earliest moment on ties.
    """
    dist = np.linalg.norm(emb_third[:, None, :] - emb_first[None, :, :], axis=-1)
    pred = np.argmin(dist, axis=1)
    gt = np.array([align_timestamp(float(t), dur_third, dur_first) for t in range(len(emb_third))])
    return pred, np.abs(pred - gt)


def moment_localization(net: JointAttentionNet, store: MemoryFrameStore, pairs, variant: str = "full") -> EvalReport:
    records, per_pair = [], []
    for pair in pairs:
        if pair.third_view.duration < 2 or pair.first_view.duration < 2:
            log.warning("skipping %s: stream shorter than 2 s", pair.pair_id)
            continue
        e3 = encode(net, stream_images(store, pair, "third"), "third", variant)["emb"]
        e1 = encode(net, stream_images(store, pair, "first"), "first", variant)["emb"]
        pred, err = localization_errors(e3, e1, pair.third_view.duration, pair.first_view.duration)
        per_pair.append(float(err.mean()))
        records.append({"pair": pair.pair_id, "mean_error": round(float(err.mean()), 10),
                        "pred": [int(p) for p in pred]})
    all_errs = [e for e in per_pair]
    value = float(np.mean(all_errs)) if all_errs else float("nan")
    median = float(statistics.median(all_errs)) if all_errs else float("nan")
    return EvalReport("moment_localization", value, len(records), records, {"median": median})


# -- heatmaps against synthetic ground truth ----------------------------------------

def box_contains(box, x: int, y: int) -> bool:
    """Pixel (x, y) is inside when its centre lies in the box."""
    x0, y0, x1, y1 = box
    return x0 <= x + 0.5 <= x1 and y0 <= y + 0.5 <= y1


def heatmap_hit_rate(net: JointAttentionNet, store: MemoryFrameStore, pairs, truth: dict[str, PairTruth],
                     view: str = "third") -> EvalReport:
    """Fraction of frames with a visible object whose heatmap peak is inside its box."""
    side = net.cfg.backbone.input_side
    hits = []
    for pair in pairs:
        gt = truth[pair.pair_id]
        boxes = gt.boxes_third if view == "third" else gt.boxes_first
        ts = [t for t, b in sorted(boxes.items()) if b is not None]
        if not ts:
            continue
        imgs = np.stack([store.get(pair.pair_id, view, t) for t in ts])
        enc = encode(net, imgs, view)
        for t, f, m in zip(ts, enc["feat"], enc["att"]):
            hm = roa_heatmap(torch.from_numpy(f), torch.from_numpy(m), side)
            px, py = hm.peak()
            hits.append({"pair": pair.pair_id, "t": t, "peak": [px, py],
                         "hit": (not hm.constant) and box_contains(boxes[t], px, py)})
    rate = float(np.mean([h["hit"] for h in hits])) if hits else float("nan")
    return EvalReport(f"heatmap_hit_rate_{view}", rate, len(hits), hits)


# -- ablations ------------------------------------------------------------------------

@dataclass
class AblationRow:
    variant: str
    accuracy: float | None
    alignment_error: float | None
    hit_rate: float | None = None
    status: str = "ok"


def evaluate_variant(net, store, test_manifest, triplets, variant, truth=None) -> AblationRow:
    acc = pairs_discrimination(net, store, triplets, variant).value
    err = moment_localization(net, store, test_manifest, variant).value
    hit = heatmap_hit_rate(net, store, test_manifest, truth).value if truth else None
    return AblationRow(variant, acc, err, hit)


def run_ablations(train_manifest: Manifest, test_manifest: Manifest, store: MemoryFrameStore,
                  cfg: TrainConfig, variants=VARIANTS, n_eval_triplets: int = 1000,
                  truth: dict | None = None, out: str | Path | None = None,
                  checkpoints: dict[str, str | Path] | None = None) -> list[AblationRow]:
    """Train (or load) each variant under one shared seed and evaluate it.

    With ``checkpoints`` given, variants are loaded instead of trained and a
    missing file becomes an ``absent`` row.
    """
    triplets = sample_eval_triplets(test_manifest, n_eval_triplets, cfg.seed, cfg.sampler_config())
    rows = []
    for v in variants:
        vcfg = replace(cfg, variant=v)
        if checkpoints is not None:
            path = checkpoints.get(v)
            if path is None or not Path(path).exists():
                rows.append(AblationRow(v, None, None, None, "absent"))
                continue
            net, _ = load_checkpoint(path)
        else:
            net, _ = train(vcfg, train_manifest, store, Path(out) / v if out else None)
        rows.append(evaluate_variant(net, store, test_manifest, triplets, v, truth))
        log.info("%s: %s", v, rows[-1])
    if out is not None:
        write_table(rows, out)
    return rows


def format_table(rows: list[AblationRow]) -> str:
    def f(v, pct=False):
        if v is None:
            return "-"
        return f"{100 * v:.1f}" if pct else f"{v:.2f}"

    header = ("variant", "accuracy %", "align err s", "roa hit %", "status")
    body = [(r.variant, f(r.accuracy, True), f(r.alignment_error), f(r.hit_rate, True), r.status) for r in rows]
    widths = [max(len(str(x[i])) for x in [header] + body) for i in range(len(header))]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(row, widths)).rstrip() for row in [header] + body]
    return "\n".join(lines) + "\n"


def write_table(rows: list[AblationRow], out: str | Path) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablations.txt").write_text(format_table(rows))
    with (out / "ablations.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "accuracy", "alignment_error", "hit_rate", "status"])
        for r in rows:
            w.writerow([r.variant, r.accuracy, r.alignment_error, r.hit_rate, r.status])
    (out / "ablations.json").write_text(json.dumps([asdict(r) for r in rows], indent=1, sort_keys=True) + "\n")
    from .plotting import plot_ablations
    plot_ablations(rows, out / "ablations.png")
