"""Multi-branch training loop, ablation wiring and finite-difference checks."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from .datakit.frames import MemoryFrameStore, Triplet
from .datakit.manifest import Manifest
from .datakit.sampling import SamplerConfig, TripletSampler
from .losses import (LossConfig, attention_loss, importance_weight, pair_distance, triplet_loss,
                     weight_entropy)
from .model import (JointAttentionNet, ModelConfig, apply_attention, embed, param_dtype, roa_grid,
                    save_checkpoint)

log = logging.getLogger(__name__)

VARIANTS = ("full", "without_sa", "cnn_sa_1", "cnn_sa_3", "cnn_tl_1", "cnn_tl_3", "lowlevel_tw")


class ConfigError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 30
    seed: int = 42
    lam: float = 2.5
    variant: str = "full"
    momentum: float = 0.9
    triplet_variant: str = "stable"
    weight_mode: str = "learned"
    triplets_per_epoch: int | None = None  # None: one per third-person training frame
    cross_video: float = 0.5
    margin: float = 3.0
    al_backbone_grad: bool = False  # let the attention loss reach the backbone
    weight_backbone_grad: bool = False  # let the importance weight steer the backbone
    clip_grad_norm: float | None = None
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")

    @classmethod
    def full_scale(cls, **kw) -> "TrainConfig":
        """The full-scale recipe (pretrained 2048-channel backbone assumed)."""
        return cls(learning_rate=3e-5, batch_size=4, momentum=0.0, **kw)

    def loss_config(self) -> LossConfig:
        mode = "lowlevel_gradient" if self.variant == "lowlevel_tw" else self.weight_mode
        return LossConfig(lam=self.lam, triplet_variant=self.triplet_variant, weight_mode=mode)

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(cross_video=self.cross_video, margin=self.margin)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "model" in d and isinstance(d["model"], dict):
            d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d)


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    wall_time: float = 0.0
    probe_loss: float | None = None

    @property
    def losses(self) -> list[float]:
        return [e["loss"] for e in self.epochs]

    def write_jsonl(self, path: str | Path) -> None:
        with Path(path).open("w") as fh:
            for e in self.epochs:
                fh.write(json.dumps(e, sort_keys=True) + "\n")


@dataclass
class TripletOutput:
    feats: tuple[torch.Tensor, torch.Tensor, torch.Tensor]
    att: tuple[torch.Tensor, torch.Tensor, torch.Tensor]
    emb: tuple[torch.Tensor, torch.Tensor, torch.Tensor]
    d_pos: torch.Tensor
    d_neg: torch.Tensor
    l_tl: torch.Tensor
    l_al: torch.Tensor
    w: torch.Tensor
    per_triplet: torch.Tensor
    loss: torch.Tensor

    def heatmap_grids(self) -> tuple[torch.Tensor, ...]:
        return tuple(roa_grid(f, m) for f, m in zip(self.feats, self.att))


def forward_triplet(net: JointAttentionNet, images: tuple[torch.Tensor, torch.Tensor, torch.Tensor],
                    variant: str = "full", loss_cfg: LossConfig = LossConfig(),
                    al_backbone_grad: bool = True, weight_backbone_grad: bool = False) -> TripletOutput:
    """Run a batch of (x, y, z) images through the shared network and the objective."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    x, y, z = images
    b = x.shape[0]
    feats_all = net.features(torch.cat([x, y, z], dim=0))
    fx, fy, fz = feats_all[:b], feats_all[b:2 * b], feats_all[2 * b:]
    att_all = net.attention(feats_all)
    mx, my, mz = att_all[:b], att_all[b:2 * b], att_all[2 * b:]

    ex, ey, ez = (embed(apply_attention(f, m)) for f, m in ((fx, mx), (fy, my), (fz, mz)))
    if variant == "cnn_tl_1":
        ex, ez = embed(fx), embed(fz)
    elif variant == "cnn_tl_3":
        ey = embed(fy)

    if al_backbone_grad:
        ax, ay, gx, gy = mx, my, fx, fy
    else:
        # same values, but the attention loss only trains the attention MLP
        fd = feats_all.detach()
        ax, ay = net.attention(fd[:b]), net.attention(fd[b:2 * b])
        gx, gy = fd[:b], fd[b:2 * b]
    if variant == "cnn_sa_1":
        l_al = attention_loss(gx.mean(dim=(-2, -1)), ay)
    elif variant == "cnn_sa_3":
        l_al = attention_loss(ax, gy.mean(dim=(-2, -1)))
    else:
        l_al = attention_loss(ax, ay)
    lam = 0.0 if variant == "without_sa" else loss_cfg.lam

    d_pos = pair_distance(ex, ey)
    d_neg = pair_distance(ey, ez)
    l_tl = triplet_loss(d_pos, d_neg, loss_cfg)

    mode = "lowlevel_gradient" if variant == "lowlevel_tw" else loss_cfg.weight_mode
    if mode == "learned":
        pooled = torch.cat([fx.mean(dim=(-2, -1)), fy.mean(dim=(-2, -1)), fz.mean(dim=(-2, -1))], dim=1)
        # by default the weight layer reads backbone features but does not steer the backbone
        if not weight_backbone_grad:
            pooled = pooled.detach()
        w = importance_weight("learned", pooled=pooled, head=net.weight_head)
    elif mode == "lowlevel_gradient":
        w = importance_weight("lowlevel_gradient", images=(x, y, z))
    else:
        w = importance_weight("constant_one", batch_size=b).to(x.dtype)

    per = (l_tl + lam * l_al) * w
    return TripletOutput((fx, fy, fz), (mx, my, mz), (ex, ey, ez), d_pos, d_neg, l_tl, l_al, w, per, per.mean())


def batch_images(store: MemoryFrameStore, triplets: list[Triplet], dtype=torch.float32):
    out = []
    for role in ("x", "y", "z"):
        arr = np.stack([store.get(getattr(t, role).pair_id, getattr(t, role).view,
                                  int(getattr(t, role).timestamp)) for t in triplets])
        out.append(torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype))
    return tuple(out)


def probe_triplets(manifest: Manifest, cfg: TrainConfig) -> list[Triplet]:
    sampler = TripletSampler(manifest, cfg.sampler_config())
    rng = np.random.default_rng([cfg.seed, 7919])
    return [sampler.sample(rng) for _ in range(cfg.batch_size)]


def init_model(cfg: TrainConfig) -> JointAttentionNet:
    torch.manual_seed(cfg.seed)
    return JointAttentionNet(cfg.model)


def evaluate_loss(net: JointAttentionNet, store: MemoryFrameStore, triplets: list[Triplet],
                  cfg: TrainConfig) -> float:
    with torch.no_grad():
        out = forward_triplet(net, batch_images(store, triplets, param_dtype(net)), cfg.variant,
                              cfg.loss_config(), cfg.al_backbone_grad, cfg.weight_backbone_grad)
    return float(out.loss)


def _dump_batch(path: Path, batch, triplets) -> None:
    np.savez(path, x=batch[0].numpy(), y=batch[1].numpy(), z=batch[2].numpy(),
             ids=np.array([[t.x.pair_id, t.x.timestamp, t.y.timestamp, t.z.pair_id, t.z.timestamp]
                           for t in triplets], dtype=object))


def train(cfg: TrainConfig, manifest: Manifest, store: MemoryFrameStore,
          out: str | Path | None = None) -> tuple[JointAttentionNet, TrainReport]:
    """Train one variant. Writes ``checkpoint.bin`` and ``train_report.jsonl``
    under ``out`` when given. Bit-reproducible for a fixed (cfg, manifest)."""
    if len(manifest) == 0:
        raise ConfigError("training manifest is empty")
    torch.use_deterministic_algorithms(True)
    net = init_model(cfg)
    opt = torch.optim.SGD(net.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum)
    sampler = TripletSampler(manifest, cfg.sampler_config())
    per_epoch = cfg.triplets_per_epoch or sampler.n_anchor_frames()
    loss_cfg = cfg.loss_config()
    report = TrainReport()
    t0 = time.perf_counter()
    out = Path(out) if out is not None else None

    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        triplets = [sampler.sample(rng) for _ in range(per_epoch)]
        sums = {"loss": 0.0, "l_al": 0.0, "l_tl": 0.0, "w_entropy": 0.0}
        gmax = 0.0
        n_batches = 0
        te = time.perf_counter()
        for i in range(0, per_epoch, cfg.batch_size):
            chunk = triplets[i:i + cfg.batch_size]
            batch = batch_images(store, chunk)
            res = forward_triplet(net, batch, cfg.variant, loss_cfg, cfg.al_backbone_grad,
                                  cfg.weight_backbone_grad)
            if not torch.isfinite(res.loss):
                if out is not None:
                    out.mkdir(parents=True, exist_ok=True)
                    _dump_batch(out / "nan_batch.npz", batch, chunk)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {n_batches}")
            opt.zero_grad()
            res.loss.backward()
            gnorm = float(torch.nn.utils.clip_grad_norm_(net.parameters(), cfg.clip_grad_norm or math.inf))
            opt.step()
            sums["loss"] += float(res.loss.detach())
            sums["l_al"] += float(res.l_al.detach().mean())
            sums["l_tl"] += float(res.l_tl.detach().mean())
            sums["w_entropy"] += weight_entropy(res.w)
            gmax = max(gmax, gnorm)
            n_batches += 1
        rec = {k: v / n_batches for k, v in sums.items()}
        rec.update(epoch=epoch, grad_norm_max=gmax, seconds=time.perf_counter() - te)
        report.epochs.append(rec)
        log.info("epoch %d loss %.4f l_al %.4f l_tl %.4f", epoch, rec["loss"], rec["l_al"], rec["l_tl"])

    report.wall_time = time.perf_counter() - t0
    report.probe_loss = evaluate_loss(net, store, probe_triplets(manifest, cfg), cfg)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "checkpoint.bin", net, {"train_config": cfg.to_dict(),
                                                       "probe_loss": report.probe_loss})
        report.write_jsonl(out / "train_report.jsonl")
    return net, report


# -- finite-difference verification -------------------------------------------

def relative_error(a: float, n: float, floor: float = 1e-6) -> float:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero gradients absolute."""
    return abs(a - n) / max(abs(a), abs(n), floor)


def fd_check(fn, params: list[torch.Tensor], step: float = 1e-5, n_coords: int | None = 200,
             rng: np.random.Generator | None = None, floor: float = 1e-6, kink_tol: float = 1e-3) -> float:
    """Max relative error between autograd and central differences of scalar ``fn()``.

    ``params`` must be float64 leaf tensors with ``requires_grad``. When
    ``n_coords`` is set, a random subsample of that many coordinates is checked.
    Each coordinate is also differenced at ``step / 10``; if the two estimates
    disagree by more than ``kink_tol`` a ReLU or max kink lies within ``step``
    and the finer estimate is used. The choice never looks at autograd.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    loss = fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [g if g is not None else torch.zeros_like(p) for g, p in zip(grads, params)]
    sizes = np.array([p.numel() for p in params])
    total = int(sizes.sum())
    idx = np.arange(total) if n_coords is None or n_coords >= total else rng.choice(total, n_coords, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    with torch.no_grad():
        for flat in idx:
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            j = int(flat - offsets[k])
            view = params[k].view(-1)
            orig = float(view[j])

            def central(h):
                view[j] = orig + h
                fp = float(fn())
                view[j] = orig - h
                fm = float(fn())
                view[j] = orig
                return (fp - fm) / (2 * h)

            num = central(step)
            fine = central(step / 10)
            if relative_error(num, fine, floor) > kink_tol:
                num = fine
            worst = max(worst, relative_error(float(grads[k].view(-1)[j]), num, floor))
    return worst


def gradient_check(net: JointAttentionNet, images, step: float = 1e-5, variant: str = "full",
                   loss_cfg: LossConfig = LossConfig(), n_coords: int = 200, seed: int = 0) -> float:
    """Finite-difference check of the full objective over network parameters (float64).

    Both training stop-gradients are switched off here, so autograd must
    reproduce the true gradient of the objective.
    """
    net64 = JointAttentionNet(net.cfg).double()
    net64.load_state_dict(net.state_dict())
    imgs = tuple(im.double() for im in images)
    params = [p for p in net64.parameters() if p.requires_grad]

    def fn():
        return forward_triplet(net64, imgs, variant, loss_cfg, al_backbone_grad=True,
                               weight_backbone_grad=True).loss

    return fd_check(fn, params, step, n_coords, np.random.default_rng(seed))


def variant_config(cfg: TrainConfig, variant: str) -> TrainConfig:
    return replace(cfg, variant=variant)


def moving_average(xs: list[float], k: int = 5) -> list[float]:
    if len(xs) < k:
        return []
    c = np.cumsum(np.insert(np.asarray(xs, dtype=float), 0, 0.0))
    return list((c[k:] - c[:-k]) / k)


def isfinite_report(report: TrainReport) -> bool:
    return all(math.isfinite(e[k]) for e in report.epochs for k in ("loss", "l_al", "l_tl"))
