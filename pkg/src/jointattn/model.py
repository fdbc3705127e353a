"""Weight-shared feature extraction, channel attention, attention filtering,
ROA heatmaps and embeddings, plus the checkpoint archive format."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as nnf
from torch import nn

from .datakit.frames import Frame


class ContractError(ValueError):
    """Shape or domain contract violated by the caller."""


@dataclass(frozen=True)
class BackboneConfig:
    kind: str = "desk_small"  # or "external_pretrained"
    channels: int = 64
    height: int = 8
    width: int = 8
    input_side: int = 64
    widths: tuple[int, ...] = (16, 32, 48, 64)
    strides: tuple[int, ...] = (2, 2, 2, 1)
    # (left/top, right/bottom) zero padding per block; the shifted third block
    # centres each output cell on its 8-pixel input block to within 0.5 px
    paddings: tuple[tuple[int, int], ...] = ((1, 1), (1, 1), (0, 1), (1, 1))

    def __post_init__(self):
        if self.kind not in ("desk_small", "external_pretrained"):
            raise ContractError(f"unknown backbone kind {self.kind!r}")
        if self.height < 1 or self.width < 1:
            raise ContractError("feature map must be at least 1x1")
        if self.kind == "desk_small" and self.widths[-1] != self.channels:
            raise ContractError("last block width must equal channels")


@dataclass(frozen=True)
class AttentionConfig:
    reduction: int = 8
    mlp_bias: bool = False

    def __post_init__(self):
        if self.reduction < 1:
            raise ContractError("reduction ratio must be >= 1")

    def hidden(self, channels: int) -> int:
        return max(1, channels // self.reduction)


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        b = dict(d.get("backbone", {}))
        for k in ("widths", "strides"):
            if k in b:
                b[k] = tuple(b[k])
        if "paddings" in b:
            b["paddings"] = tuple(tuple(p) for p in b["paddings"])
        return cls(BackboneConfig(**b), AttentionConfig(**d.get("attention", {})))


def _he_uniform_(w: torch.Tensor, fan_in: int) -> None:
    bound = math.sqrt(6.0 / fan_in)
    with torch.no_grad():
        w.uniform_(-bound, bound)


class DeskBackbone(nn.Module):
    """Four bias-free 3x3 conv + ReLU blocks; 64x64 input gives 64x8x8."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        layers = []
        c_in = 3
        for width, stride, (lo, hi) in zip(cfg.widths, cfg.strides, cfg.paddings):
            layers += [nn.ZeroPad2d((lo, hi, lo, hi)),
                       nn.Conv2d(c_in, width, 3, stride=stride, bias=False), nn.ReLU()]
            c_in = width
        self.body = nn.Sequential(*layers)

    def reset_parameters(self) -> None:
        for m in self.body:
            if isinstance(m, nn.Conv2d):
                _he_uniform_(m.weight, m.in_channels * m.kernel_size[0] * m.kernel_size[1])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


class ChannelAttention(nn.Module):
    """Shared two-layer MLP over average- and max-pooled channel statistics."""

    def __init__(self, channels: int, cfg: AttentionConfig = AttentionConfig()):
        super().__init__()
        hidden = cfg.hidden(channels)
        self.fc1 = nn.Linear(channels, hidden, bias=cfg.mlp_bias)
        self.fc2 = nn.Linear(hidden, channels, bias=cfg.mlp_bias)

    def reset_parameters(self) -> None:
        for fc in (self.fc1, self.fc2):
            _he_uniform_(fc.weight, fc.in_features)
            if fc.bias is not None:
                nn.init.zeros_(fc.bias)

    def mlp(self, v: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.relu(self.fc1(v)))

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        avg = feats.mean(dim=(-2, -1))
        mx = feats.amax(dim=(-2, -1))
        return torch.sigmoid(self.mlp(avg) + self.mlp(mx))


class JointAttentionNet(nn.Module):
    """Backbone, channel attention and the importance-weight layer.

    There is one set of modules; every branch of a triplet runs through it,
    so weight sharing holds by construction.
    """

    def __init__(self, cfg: ModelConfig = ModelConfig(), backbone: nn.Module | None = None):
        super().__init__()
        self.cfg = cfg
        c = cfg.backbone.channels
        if backbone is None:
            if cfg.backbone.kind != "desk_small":
                raise ContractError("external_pretrained backbones must be passed in explicitly")
            backbone = DeskBackbone(cfg.backbone)
        self.backbone = backbone
        self.attention = ChannelAttention(c, cfg.attention)
        self.weight_head = nn.Linear(3 * c, 1)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        if hasattr(self.backbone, "reset_parameters"):
            self.backbone.reset_parameters()
        self.attention.reset_parameters()
        nn.init.zeros_(self.weight_head.weight)
        nn.init.zeros_(self.weight_head.bias)

    def features(self, images: torch.Tensor) -> torch.Tensor:
        b = self.cfg.backbone
        if images.shape[-3:] != (3, b.input_side, b.input_side):
            raise ContractError(f"expected (*, 3, {b.input_side}, {b.input_side}) input, got {tuple(images.shape)}")
        feats = self.backbone(images)
        if feats.shape[-3:] != (b.channels, b.height, b.width):
            raise ContractError(f"backbone produced {tuple(feats.shape[-3:])}, config says "
                                f"{(b.channels, b.height, b.width)}")
        return feats


# -- functional surface --------------------------------------------------------

def images_to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """HxWx3 array(s) in [0, 1] -> (N, 3, H, W) tensor."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def param_dtype(net: nn.Module) -> torch.dtype:
    return next(net.parameters()).dtype


def extract_features(frame: Frame | np.ndarray, net: JointAttentionNet) -> torch.Tensor:
    img = frame.image if isinstance(frame, Frame) else frame
    if img is None:
        raise ContractError("frame has no image loaded")
    with torch.no_grad():
        return net.features(images_to_tensor(img, param_dtype(net)))[0]


def channel_attention(feats: torch.Tensor, att: ChannelAttention) -> torch.Tensor:
    if not torch.isfinite(feats).all():
        raise ContractError("feature map is not finite")
    return att(feats)


def apply_attention(feats: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """Channel-wise filtering: ``out[..., k, i, j] = m[..., k] * feats[..., k, i, j]``."""
    if m.shape[-1] != feats.shape[-3]:
        raise ContractError(f"attention has {m.shape[-1]} channels, features have {feats.shape[-3]}")
    return feats * m[..., None, None]


def embed(feats: torch.Tensor) -> torch.Tensor:
    """Global average pool then L2-normalise; a zero vector stays zero."""
    pooled = feats.mean(dim=(-2, -1))
    return nnf.normalize(pooled, dim=-1, eps=1e-12)


def roa_grid(feats: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """Attention-weighted channel average, before normalisation: (..., h, w)."""
    if m.shape[-1] != feats.shape[-3]:
        raise ContractError("attention and feature channel counts differ")
    return (feats * m[..., None, None]).sum(dim=-3) / m.sum(dim=-1)[..., None, None]


@dataclass
class ROAHeatmap:
    grid: np.ndarray       # h x w, in [0, 1]
    upsampled: np.ndarray  # side x side, in [0, 1]
    constant: bool = False

    def peak(self) -> tuple[int, int]:
        """(x, y) pixel of the upsampled maximum, first in row-major order."""
        iy, ix = np.unravel_index(int(np.argmax(self.upsampled)), self.upsampled.shape)
        return int(ix), int(iy)


def _minmax(a: np.ndarray) -> tuple[np.ndarray, bool]:
    lo, hi = float(a.min()), float(a.max())
    if not hi - lo > 1e-12 * max(1.0, abs(hi)):
        return np.full_like(a, 0.5), True
    return (a - lo) / (hi - lo), False


def roa_heatmap(feats: torch.Tensor, m: torch.Tensor, input_side: int | None = None) -> ROAHeatmap:
    """Heatmap of one feature map (c, h, w) under attention vector ``m`` (c,)."""
    with torch.no_grad():
        raw = roa_grid(feats, m).double()
        side = input_side or raw.shape[-1]
        up = nnf.interpolate(raw[None, None], size=(side, side), mode="bilinear", align_corners=False)[0, 0]
    grid, const = _minmax(raw.numpy())
    if const:
        return ROAHeatmap(grid, np.full((side, side), 0.5), True)
    upsampled, _ = _minmax(up.numpy())
    return ROAHeatmap(grid, upsampled, False)


# -- checkpoints ---------------------------------------------------------------

MAGIC = b"JATTCKPT"
FORMAT_VERSION = 1


def save_checkpoint(path: str | Path, net: JointAttentionNet, extra: dict | None = None) -> None:
    """Write ``MAGIC | u64 header length | JSON header | float32 LE tensors``."""
    state = net.state_dict()
    tensors = [{"name": k, "shape": list(v.shape), "dtype": "float32"} for k, v in state.items()]
    header = {
        "version": FORMAT_VERSION,
        "config": net.cfg.to_dict(),
        "tensors": tensors,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for v in state.values():
            fh.write(v.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes())


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ContractError(f"{path}: not a checkpoint archive")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + n].decode("utf-8"))
    if header.get("version") != FORMAT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {header.get('version')}")
    offset = 16 + n
    arrays = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        arrays[t["name"]] = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(t["shape"])
        offset += 4 * count
    if offset != len(data):
        raise ContractError(f"{path}: trailing or missing tensor data")
    return header, arrays


def load_checkpoint(path: str | Path, dtype: torch.dtype = torch.float32) -> tuple[JointAttentionNet, dict]:
    header, arrays = read_checkpoint(path)
    net = JointAttentionNet(ModelConfig.from_dict(header["config"]))
    net.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
    return net.to(dtype), header
