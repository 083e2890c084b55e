"""Training objectives, difference weighting and inference-time max filtering.

``mae``/``adv_loss`` and the combined losses operate on torch tensors and stay
differentiable. The difference-weighting helpers accept numpy arrays, torch
tensors or :class:`~volufuse.volcore.Volume` objects and return the same kind.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage

from .volcore import Volume

REAL = "real"
SYNTHETIC = "synthetic"


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    beta: float = 0.01
    max_filter_radius: int = 1
    weight_epsilon: float = 1e-8

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or (self.alpha == 0 and self.beta == 0):
            raise ValueError("alpha and beta must be non-negative and not both zero")
        if self.max_filter_radius < 0:
            raise ValueError("max_filter_radius must be >= 0")


def _tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    if isinstance(x, Volume):
        x = x.data
    return torch.as_tensor(np.asarray(x))


def mae(o, gt) -> torch.Tensor:
    """Mean absolute error, reduced in float64."""
    o, gt = _tensor(o), _tensor(gt)
    if o.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(o.shape)} vs {tuple(gt.shape)}")
    return (o - gt).abs().mean(dtype=torch.float64)


def adv_loss(logits, target: str) -> torch.Tensor:
    """Mean sigmoid cross-entropy against label 1 (``"real"``) or 0 (``"synthetic"``).

    Uses ``max(x, 0) - x*y + log1p(exp(-|x|))`` so large logits never overflow.
    """
    if target not in (REAL, SYNTHETIC):
        raise ValueError(f"target must be {REAL!r} or {SYNTHETIC!r}, got {target!r}")
    x = _tensor(logits).to(torch.float64)
    y = 1.0 if target == REAL else 0.0
    return (x.clamp(min=0) - x * y + torch.log1p(torch.exp(-x.abs()))).mean()


def generator_loss(o, gt, d_logits_on_o, cfg: LossConfig) -> torch.Tensor:
    loss = cfg.alpha * mae(o, gt)
    if cfg.beta:
        loss = loss + cfg.beta * adv_loss(d_logits_on_o, REAL)
    return loss


def discriminator_loss(d_logits_on_gt, d_logits_on_o) -> torch.Tensor:
    return adv_loss(d_logits_on_gt, REAL) + adv_loss(d_logits_on_o, SYNTHETIC)


# ------------------------------------------------------------ difference weighting


def difference_weight(i, o, eps: float = 1e-8, per_sample: bool = False):
    """``|i - o|`` scaled by its maximum (floored at ``eps``) into ``[0, 1]``.

    With ``per_sample`` set, rank-5 torch/numpy batches are normalised per item.
    Torch results are detached: the weight map is a constant for training.
    """
    if isinstance(i, Volume):
        return i.with_data(difference_weight(i.data, o.data if isinstance(o, Volume) else o, eps))
    if tuple(i.shape) != tuple(o.shape):
        raise ValueError(f"shape mismatch: {tuple(i.shape)} vs {tuple(o.shape)}")
    if isinstance(i, torch.Tensor) or isinstance(o, torch.Tensor):
        with torch.no_grad():
            d = (_tensor(i) - _tensor(o)).abs()
            if per_sample:
                m = d.flatten(1).amax(dim=1).view(-1, *([1] * (d.dim() - 1)))
            else:
                m = d.max()
            return d / m.clamp(min=eps)
    d = np.abs(np.asarray(i, dtype=np.float64) - np.asarray(o, dtype=np.float64))
    if per_sample:
        m = d.reshape(d.shape[0], -1).max(axis=1).reshape((-1,) + (1,) * (d.ndim - 1))
    else:
        m = d.max()
    return (d / np.maximum(m, eps)).astype(np.float32)


def apply_difference_weighting(i, o, w):
    """Per-voxel convex blend ``(1 - w) * i + w * o``."""
    if isinstance(i, Volume):
        wd = w.data if isinstance(w, Volume) else w
        od = o.data if isinstance(o, Volume) else o
        return i.with_data(apply_difference_weighting(i.data, od, wd))
    if isinstance(i, torch.Tensor) or isinstance(o, torch.Tensor):
        i, o, w = _tensor(i), _tensor(o), _tensor(w)
        return (1 - w) * i + w * o
    i64 = np.asarray(i, dtype=np.float64)
    o64 = np.asarray(o, dtype=np.float64)
    w64 = np.asarray(w, dtype=np.float64)
    out = (1.0 - w64) * i64 + w64 * o64
    # rounding must not leave the [min(i,o), max(i,o)] envelope
    out = np.clip(out, np.minimum(i64, o64), np.maximum(i64, o64))
    return out.astype(np.asarray(i).dtype)


def max_filter(v, radius: int):
    """Maximum over the ``(2r+1)**3`` neighbourhood with replicated borders."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if isinstance(v, Volume):
        return v.with_data(max_filter(v.data, radius))
    data = np.asarray(v)
    if radius == 0:
        return data.copy()
    return ndimage.maximum_filter(data, size=2 * radius + 1, mode="nearest")
