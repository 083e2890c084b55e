"""Residual 3D U-Net generator, patch discriminator and AdamW, written functionally.

Networks are plain functions of a :data:`ParameterSet` (an ordered ``name -> tensor``
mapping) and a rank-5 input ``(batch, channel, z, y, x)``. Torch supplies the
dense kernels and reverse-mode differentiation; the architecture, initialisation,
optimizer and checkpoint format live here.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Mapping, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

logger = logging.getLogger(__name__)

ParameterSet = Dict[str, torch.Tensor]
Tensor5 = torch.Tensor

LEAKY_SLOPE = 0.01
DISC_HEAD_GAIN = 0.1
NORM_EPS = 1e-5
CHECKPOINT_FORMAT = "volufuse-ckpt-1"


class ShapeError(ValueError):
    """Raised when a tensor does not satisfy a network's shape contract."""


class CheckpointError(RuntimeError):
    """Raised for unreadable or mismatched checkpoints."""


def set_threads(n: Optional[int]) -> int:
    """Set torch's intra-op thread count; ``1`` gives bitwise reproducible runs."""
    if n is None or n <= 0:
        n = os.cpu_count() or 1
    torch.set_num_threads(int(n))
    return int(n)


@dataclass(frozen=True)
class GeneratorConfig:
    in_channels: int = 1
    base_channels: int = 8
    depth: int = 3
    blocks_per_level: int = 1

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 4:
            raise ValueError(f"base_channels must be >= 4, got {self.base_channels}")
        if self.in_channels < 1 or self.blocks_per_level < 1:
            raise ValueError("in_channels and blocks_per_level must be >= 1")

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    @property
    def divisor(self) -> int:
        return 2 ** (self.depth - 1)


@dataclass(frozen=True)
class DiscriminatorConfig:
    in_channels: int = 1
    base_channels: int = 8
    stages: int = 4

    def __post_init__(self):
        if self.stages < 1 or self.base_channels < 1:
            raise ValueError("stages and base_channels must be >= 1")


NetConfig = Union[GeneratorConfig, DiscriminatorConfig]


# --------------------------------------------------------------------------- init


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _conv(params: ParameterSet, rng: np.random.Generator, name: str, cin: int, cout: int, k: int, gain: float = 1.0) -> None:
    fan_in = cin * k**3
    w = rng.normal(0.0, gain * np.sqrt(2.0 / fan_in), size=(cout, cin, k, k, k))
    params[f"{name}.w"] = torch.from_numpy(w.astype(np.float32))
    params[f"{name}.b"] = torch.zeros(cout, dtype=torch.float32)


def _norm(params: ParameterSet, name: str, c: int) -> None:
    params[f"{name}.g"] = torch.ones(c, dtype=torch.float32)
    params[f"{name}.b"] = torch.zeros(c, dtype=torch.float32)


def _resblock(params: ParameterSet, rng, name: str, cin: int, cout: int) -> None:
    _conv(params, rng, f"{name}.conv1", cin, cout, 3)
    _norm(params, f"{name}.norm1", cout)
    _conv(params, rng, f"{name}.conv2", cout, cout, 3)
    _norm(params, f"{name}.norm2", cout)
    if cin != cout:
        _conv(params, rng, f"{name}.proj", cin, cout, 1)


def init_params(config: NetConfig, rng=0) -> ParameterSet:
    """Fan-in scaled normal kernels, zero biases, unit norm scales.

    ``rng`` is a seed or a ``numpy.random.Generator``; the same seed always
    yields bitwise-identical parameters.
    """
    rng = _as_rng(rng)
    params: ParameterSet = {}
    if isinstance(config, DiscriminatorConfig):
        cin = config.in_channels
        for s in range(config.stages):
            cout = config.base_channels * 2**s
            _conv(params, rng, f"stage{s}.conv", cin, cout, 3)
            _norm(params, f"stage{s}.norm", cout)
            cin = cout
        # small logits at start, so both adversarial terms begin near ln 2
        _conv(params, rng, "head", cin, 1, 1, gain=DISC_HEAD_GAIN)
        return params

    cin = config.in_channels
    for level in range(config.depth):
        c = config.channels(level)
        if level > 0:
            _conv(params, rng, f"down{level}.conv", cin, c, 3)
            _norm(params, f"down{level}.norm", c)
            cin = c
        for b in range(config.blocks_per_level):
            _resblock(params, rng, f"enc{level}.block{b}", cin, c)
            cin = c
    for level in range(config.depth - 2, -1, -1):
        c = config.channels(level)
        cin = config.channels(level + 1) + c
        for b in range(config.blocks_per_level):
            _resblock(params, rng, f"dec{level}.block{b}", cin, c)
            cin = c
    _conv(params, rng, "head", config.base_channels, 1, 1)
    return params


# ------------------------------------------------------------------------ forward


def instance_norm(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """Per-sample, per-channel normalisation over the spatial axes."""
    mean = x.mean(dim=(2, 3, 4), keepdim=True)
    var = ((x - mean) ** 2).mean(dim=(2, 3, 4), keepdim=True)
    xhat = (x - mean) / torch.sqrt(var + NORM_EPS)
    return xhat * gamma.view(1, -1, 1, 1, 1) + beta.view(1, -1, 1, 1, 1)


def leaky(x: torch.Tensor) -> torch.Tensor:
    return F.leaky_relu(x, LEAKY_SLOPE)


def conv(params: Mapping[str, torch.Tensor], name: str, x: torch.Tensor, stride: int = 1) -> torch.Tensor:
    w = params[f"{name}.w"]
    pad = w.shape[-1] // 2
    return F.conv3d(x, w, params[f"{name}.b"], stride=stride, padding=pad)


def norm(params: Mapping[str, torch.Tensor], name: str, x: torch.Tensor) -> torch.Tensor:
    return instance_norm(x, params[f"{name}.g"], params[f"{name}.b"])


def residual_block(params: Mapping[str, torch.Tensor], name: str, x: torch.Tensor) -> torch.Tensor:
    h = leaky(norm(params, f"{name}.norm1", conv(params, f"{name}.conv1", x)))
    h = norm(params, f"{name}.norm2", conv(params, f"{name}.conv2", h))
    skip = conv(params, f"{name}.proj", x) if f"{name}.proj.w" in params else x
    return leaky(h + skip)


def upsample2(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode="trilinear", align_corners=False)


def _check_input(x: torch.Tensor, channels: int, divisor: int, what: str) -> None:
    if x.dim() != 5:
        raise ShapeError(f"{what} expects a rank-5 tensor, got shape {tuple(x.shape)}")
    if x.shape[1] != channels:
        raise ShapeError(f"{what} expects {channels} input channel(s), got {x.shape[1]}")
    if any(s < 1 or s % divisor for s in x.shape[2:]):
        raise ShapeError(f"{what}: spatial shape {tuple(x.shape[2:])} not divisible by {divisor}")


def runet_forward(params: Mapping[str, torch.Tensor], x: Tensor5, config: GeneratorConfig) -> Tensor5:
    """Residual U-Net: same spatial shape in, one channel out."""
    _check_input(x, config.in_channels, config.divisor, "runet_forward")
    skips = []
    h = x
    for level in range(config.depth):
        if level > 0:
            h = leaky(norm(params, f"down{level}.norm", conv(params, f"down{level}.conv", h, stride=2)))
        for b in range(config.blocks_per_level):
            h = residual_block(params, f"enc{level}.block{b}", h)
        skips.append(h)
    for level in range(config.depth - 2, -1, -1):
        h = torch.cat([upsample2(h), skips[level]], dim=1)
        for b in range(config.blocks_per_level):
            h = residual_block(params, f"dec{level}.block{b}", h)
    return conv(params, "head", h)


def disc_forward(params: Mapping[str, torch.Tensor], x: Tensor5, config: DiscriminatorConfig) -> Tensor5:
    """Patch critic returning a raw logit map downsampled by ``2**stages``."""
    _check_input(x, config.in_channels, 1, "disc_forward")
    h = x
    for s in range(config.stages):
        h = leaky(norm(params, f"stage{s}.norm", conv(params, f"stage{s}.conv", h, stride=2)))
    return conv(params, "head", h)


# ----------------------------------------------------------------------- backward


def backward(loss: torch.Tensor, params: Mapping[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
    """Reverse-mode gradients of a scalar ``loss`` for every entry of ``params``.

    Parameters that do not influence the loss receive zero gradients.
    """
    if not isinstance(loss, torch.Tensor) or loss.numel() != 1:
        raise ValueError("backward requires a scalar loss")
    names = list(params)
    tensors = [params[n] for n in names]
    if not loss.requires_grad:
        return {n: torch.zeros_like(t) for n, t in zip(names, tensors)}
    grads = torch.autograd.grad(loss.reshape(()), tensors, allow_unused=True)
    return {
        n: (torch.zeros_like(t) if g is None else g.to(t.dtype))
        for n, t, g in zip(names, tensors, grads)
    }


def requires_grad(params: ParameterSet, flag: bool = True) -> ParameterSet:
    for t in params.values():
        t.requires_grad_(flag)
    return params


# ---------------------------------------------------------------------- optimizer


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    step: int = 0
    m: Dict[str, torch.Tensor] = field(default_factory=dict)
    v: Dict[str, torch.Tensor] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, torch.Tensor], **hyper) -> "OptimState":
        state = cls(**hyper)
        for name, p in params.items():
            state.m[name] = torch.zeros_like(p, requires_grad=False)
            state.v[name] = torch.zeros_like(p, requires_grad=False)
        return state


def adamw_step(params: ParameterSet, grads: Mapping[str, torch.Tensor], state: OptimState):
    """One AdamW update with bias correction and decoupled weight decay, in place."""
    for name, p in params.items():
        if name not in grads or grads[name].shape != p.shape:
            raise ShapeError(f"gradient for {name!r} missing or misshapen")
        if name not in state.m:
            state.m[name] = torch.zeros_like(p, requires_grad=False)
            state.v[name] = torch.zeros_like(p, requires_grad=False)
        if state.m[name].shape != p.shape:
            raise ShapeError(f"optimizer moment for {name!r} has shape {tuple(state.m[name].shape)}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name].detach()
            m, v = state.m[name], state.v[name]
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            if state.weight_decay:
                p.mul_(1.0 - state.lr * state.weight_decay)
            denom = (v / c2).sqrt_().add_(state.eps)
            p.addcdiv_(m, denom, value=-state.lr / c1)
    return params, state


# --------------------------------------------------------------------- checkpoint


def config_to_dict(config: NetConfig) -> dict:
    kind = "discriminator" if isinstance(config, DiscriminatorConfig) else "generator"
    return {"kind": kind, **asdict(config)}


def config_from_dict(d: Mapping) -> NetConfig:
    d = dict(d)
    kind = d.pop("kind", "generator")
    if kind == "discriminator":
        return DiscriminatorConfig(**d)
    return GeneratorConfig(**d)


def save_checkpoint(
    path: Union[str, Path],
    params: Mapping[str, torch.Tensor],
    config: NetConfig,
    step: int = 0,
    extra: Optional[Mapping] = None,
) -> Path:
    """Write ``manifest.json`` plus one little-endian float32 blob per parameter."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (name, t) in enumerate(params.items()):
        fname = f"p{i:03d}.f32"
        arr = t.detach().cpu().numpy().astype("<f4")
        (path / fname).write_bytes(arr.tobytes(order="C"))
        entries.append({"name": name, "shape": list(arr.shape), "file": fname})
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": config_to_dict(config),
        "step": int(step),
        "params": entries,
        "extra": dict(extra or {}),
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[ParameterSet, NetConfig, dict]:
    path = Path(path)
    mpath = path / "manifest.json" if path.is_dir() else path
    if not mpath.exists():
        raise CheckpointError(f"checkpoint manifest not found: {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"malformed checkpoint manifest {mpath}: {exc}") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{mpath}: unknown checkpoint format {manifest.get('format')!r}")
    config = config_from_dict(manifest["config"])
    params: ParameterSet = {}
    for e in manifest["params"]:
        blob = (mpath.parent / e["file"]).read_bytes()
        arr = np.frombuffer(blob, dtype="<f4")
        shape = tuple(e["shape"])
        if arr.size != int(np.prod(shape)):
            raise CheckpointError(f"{mpath}: blob for {e['name']!r} has {arr.size} values, expected {shape}")
        params[e["name"]] = torch.from_numpy(arr.reshape(shape).astype(np.float32))
    expected = init_params(config, 0)
    if list(expected) != list(params) or any(expected[k].shape != params[k].shape for k in expected):
        raise CheckpointError(f"{mpath}: parameters do not match the stored network config")
    return params, config, manifest


class Network:
    """Inference wrapper binding parameters to a forward function (numpy in, numpy out)."""

    def __init__(self, params: ParameterSet, config: NetConfig):
        self.params = params
        self.config = config
        self._fwd: Callable = disc_forward if isinstance(config, DiscriminatorConfig) else runet_forward

    @property
    def in_channels(self) -> int:
        return self.config.in_channels

    @classmethod
    def load(cls, path) -> "Network":
        params, config, _ = load_checkpoint(path)
        return cls(params, config)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            out = self._fwd(self.params, torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32)), self.config)
        return out.numpy()
