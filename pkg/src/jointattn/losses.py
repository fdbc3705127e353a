"""Attention loss, triplet losses, per-triplet importance weights, total loss.

All functions take and return torch tensors so autograd supplies the
analytic gradients; plain floats are accepted where noted.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as nnf

from .model import ContractError

WEIGHT_MODES = ("learned", "lowlevel_gradient", "constant_one")
TRIPLET_VARIANTS = ("stable", "verbatim")


class SingularityError(ArithmeticError):
    """The printed triplet formula's denominator is (numerically) zero."""


@dataclass(frozen=True)
class LossConfig:
    lam: float = 2.5
    triplet_variant: str = "stable"
    denom_epsilon: float = 1e-8
    weight_mode: str = "learned"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not self.denom_epsilon > 0:
            raise ValueError("denom_epsilon must be > 0")
        if self.triplet_variant not in TRIPLET_VARIANTS:
            raise ValueError(f"triplet_variant must be one of {TRIPLET_VARIANTS}")
        if self.weight_mode not in WEIGHT_MODES:
            raise ValueError(f"weight_mode must be one of {WEIGHT_MODES}")


def _t(v) -> torch.Tensor:
    return v if isinstance(v, torch.Tensor) else torch.as_tensor(v, dtype=torch.float64)


def attention_loss(mx: torch.Tensor, my: torch.Tensor) -> torch.Tensor:
    """Euclidean norm of the difference of two attention vectors (last dim)."""
    mx, my = _t(mx), _t(my)
    if mx.shape != my.shape:
        raise ContractError(f"attention vectors differ in shape: {tuple(mx.shape)} vs {tuple(my.shape)}")
    diff = mx - my
    # the plain norm has an undefined gradient at 0; route zero rows through a safe branch
    sq = (diff * diff).sum(dim=-1)
    zero = sq == 0
    safe = torch.where(zero, torch.ones_like(sq), sq)
    return torch.where(zero, torch.zeros_like(sq), torch.sqrt(safe))


def pair_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return attention_loss(a, b)


def triplet_loss_verbatim(d_pos, d_neg, eps: float = 1e-8) -> torch.Tensor:
    """``e^dpos / (e^dpos - e^dneg)`` exactly as written, sign included.

    Raises SingularityError when any ``|e^dpos - e^dneg| < eps``.
    """
    d_pos, d_neg = _t(d_pos), _t(d_neg)
    num = torch.exp(d_pos)
    den = num - torch.exp(d_neg)
    if bool((den.detach().abs() < eps).any()):
        raise SingularityError(f"|e^d_pos - e^d_neg| < {eps}")
    return num / den


def triplet_loss_stable(d_pos, d_neg) -> torch.Tensor:
    """``softplus(d_pos - d_neg)``, evaluated without overflow."""
    x = _t(d_pos) - _t(d_neg)
    return torch.logaddexp(torch.zeros_like(x), x)


def triplet_loss(d_pos, d_neg, cfg: LossConfig) -> torch.Tensor:
    if cfg.triplet_variant == "verbatim":
        return triplet_loss_verbatim(d_pos, d_neg, cfg.denom_epsilon)
    return triplet_loss_stable(d_pos, d_neg)


def normalize_scores(scores: torch.Tensor) -> torch.Tensor:
    """Batch softmax scaled by batch size, so the weights average exactly 1."""
    if scores.numel() == 0:
        raise ContractError("importance weights need a nonempty batch")
    return scores.numel() * torch.softmax(scores.reshape(-1), dim=0)


_SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


def mean_gradient_magnitude(images: torch.Tensor) -> torch.Tensor:
    """Mean 3x3 Sobel gradient magnitude of grayscale images (N, 3, H, W) -> (N,)."""
    gray = (0.299 * images[:, 0] + 0.587 * images[:, 1] + 0.114 * images[:, 2])[:, None]
    kx = _SOBEL_X.to(images.dtype)[None, None]
    ky = kx.transpose(-1, -2)
    gx = nnf.conv2d(gray, kx)
    gy = nnf.conv2d(gray, ky)
    return torch.sqrt(gx * gx + gy * gy).mean(dim=(1, 2, 3))


def importance_weight(mode: str, pooled: torch.Tensor | None = None, head: torch.nn.Linear | None = None,
                      images: tuple[torch.Tensor, torch.Tensor, torch.Tensor] | None = None,
                      batch_size: int | None = None) -> torch.Tensor:
    """Per-triplet weights with batch mean 1.

    ``learned``: one affine layer on the concatenated pooled features (B, 3c).
    ``lowlevel_gradient``: mean Sobel magnitude over the triplet's three images.
    ``constant_one``: all ones.
    """
    if mode == "learned":
        if pooled is None or head is None:
            raise ContractError("learned weights need pooled features and a head")
        return normalize_scores(head(pooled).reshape(-1))
    if mode == "lowlevel_gradient":
        if images is None:
            raise ContractError("low-level weights need the triplet images")
        s = sum(mean_gradient_magnitude(im) for im in images) / 3.0
        return normalize_scores(s)
    if mode == "constant_one":
        n = batch_size if batch_size is not None else (pooled.shape[0] if pooled is not None else 0)
        if n < 1:
            raise ContractError("importance weights need a nonempty batch")
        dtype = pooled.dtype if pooled is not None else torch.float64
        return torch.ones(n, dtype=dtype)
    raise ContractError(f"unknown weight mode {mode!r}")


def weight_entropy(w: torch.Tensor) -> float:
    p = (w / w.sum()).detach()
    p = p[p > 0]
    return float(-(p * p.log()).sum())


def total_loss(l_tl, l_al, w, lam: float) -> torch.Tensor:
    """``(l_tl + lam * l_al) * w`` per triplet."""
    return (_t(l_tl) + lam * _t(l_al)) * _t(w)


def batch_loss(l_tl, l_al, w, lam: float) -> torch.Tensor:
    return total_loss(l_tl, l_al, w, lam).mean()


LOG2 = math.log(2.0)
