"""Volume container, intensity normalisation, trilinear resampling and augmentation.

All functions are pure: they return new :class:`Volume` objects and never mutate
their inputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

CHANNELS = ("nucleus", "membrane", "synthetic")
AXES = {"z": 0, "y": 1, "x": 2}
VOL_FORMAT = "VOL1"

Triple = Tuple[float, float, float]


class InvalidInputError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Volume:
    """Single-channel 3D intensity grid indexed ``(z, y, x)`` with spacing in µm."""

    data: np.ndarray
    spacing: Triple = (1.0, 1.0, 1.0)
    name: str = ""
    channel: str = "synthetic"

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise InvalidInputError(f"volume data must be 3D, got shape {data.shape}")
        if data.size == 0 or min(data.shape) < 1:
            raise InvalidInputError(f"volume extents must be >= 1, got {data.shape}")
        if data.dtype != np.float32:
            data = data.astype(np.float32)
        if not np.isfinite(data).all():
            raise InvalidInputError("volume contains NaN or infinite values")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise InvalidInputError(f"spacing must be three positive values, got {self.spacing}")
        if self.channel not in CHANNELS:
            raise InvalidInputError(f"unknown channel {self.channel!r}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)

    def with_data(self, data: np.ndarray, **changes) -> "Volume":
        return replace(self, data=data, **changes)


@dataclass(frozen=True)
class IntensityStats:
    mean: float = 0.0
    std: float = 1.0
    p_lo: float = 0.0
    p_hi: float = 1.0
    lo_percentile: float = 0.0
    hi_percentile: float = 1.0


def _volume(v) -> Volume:
    return v if isinstance(v, Volume) else Volume(np.asarray(v, dtype=np.float32))


# ------------------------------------------------------------------- intensities


def standardize(v: Volume) -> Tuple[Volume, IntensityStats]:
    """Zero-mean, unit-variance copy of ``v`` (population std) plus the stats used.

    A constant volume maps to all zeros with ``std == 0``.
    """
    v = _volume(v)
    x = v.data.astype(np.float64)
    mean = float(x.mean())
    std = float(x.std())
    out = np.zeros_like(x) if std == 0.0 else (x - mean) / std
    stats = IntensityStats(
        mean=mean, std=std, p_lo=float(x.min()), p_hi=float(x.max()), lo_percentile=0.0, hi_percentile=1.0
    )
    return v.with_data(out.astype(np.float32)), stats


def destandardize(v: Volume, stats: IntensityStats) -> Volume:
    x = v.data.astype(np.float64) * stats.std + stats.mean
    return v.with_data(x.astype(np.float32))


def percentile_bounds(data: np.ndarray, lo: float, hi: float) -> Tuple[float, float]:
    if not 0.0 <= lo < hi <= 1.0:
        raise InvalidInputError(f"percentile bounds must satisfy 0 <= lo < hi <= 1, got ({lo}, {hi})")
    p_lo, p_hi = np.quantile(np.asarray(data, dtype=np.float64), [lo, hi])
    return float(p_lo), float(p_hi)


def percentile_normalize(v: Volume, lo: float = 0.02, hi: float = 0.98) -> Volume:
    """Map the ``lo``/``hi`` quantiles to 0/1 and clamp to ``[0, 1]``."""
    v = _volume(v)
    p_lo, p_hi = percentile_bounds(v.data, lo, hi)
    if p_hi <= p_lo:
        return v.with_data(np.zeros(v.shape, dtype=np.float32))
    x = (v.data.astype(np.float64) - p_lo) / (p_hi - p_lo)
    return v.with_data(np.clip(x, 0.0, 1.0).astype(np.float32))


# -------------------------------------------------------------------- resampling


def _sample_positions(n_in: int, n_out: int) -> np.ndarray:
    # align-corners mapping; a single output sample sits at the input centre
    if n_out == 1:
        return np.array([(n_in - 1) / 2.0])
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


def _interp_axis(x: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    n_in = x.shape[axis]
    if n_out == n_in:
        return x
    pos = _sample_positions(n_in, n_out)
    if n_in == 1:
        return np.repeat(x, n_out, axis=axis)
    i0 = np.clip(np.floor(pos).astype(np.int64), 0, n_in - 2)
    frac = pos - i0
    shape = [1] * x.ndim
    shape[axis] = n_out
    frac = frac.reshape(shape)
    a = np.take(x, i0, axis=axis)
    b = np.take(x, i0 + 1, axis=axis)
    return a * (1.0 - frac) + b * frac


def interpolate_to_shape(data: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    """Separable align-corners trilinear interpolation of a 3D array to ``shape``."""
    shape = tuple(int(s) for s in shape)
    if shape == data.shape:
        return np.array(data, dtype=np.float32, copy=True)
    x = np.asarray(data, dtype=np.float64)
    for axis in range(3):
        x = _interp_axis(x, axis, shape[axis])
    return x.astype(np.float32)


def resample_trilinear(v: Volume, target_spacing: Sequence[float]) -> Volume:
    """Resample to a new voxel spacing; extents follow ``round(n * s / t)``."""
    target = tuple(float(t) for t in target_spacing)
    if len(target) != 3 or min(target) <= 0:
        raise InvalidInputError(f"target spacing must be three positive values, got {target_spacing}")
    if target == v.spacing:
        return v.with_data(v.data.copy())
    shape = tuple(max(1, int(round(n * s / t))) for n, s, t in zip(v.shape, v.spacing, target))
    return v.with_data(interpolate_to_shape(v.data, shape), spacing=target)


def resize_to(v: Volume, shape: Sequence[int]) -> Volume:
    """Trilinear resize to exactly ``shape``.

    Downsampling by more than 2x on any axis is preceded by a Gaussian
    prefilter with sigma ``0.5 * ratio`` on every downsampled axis.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or min(shape) < 1:
        raise InvalidInputError(f"target shape must be three extents >= 1, got {shape}")
    if shape == v.shape:
        return v.with_data(v.data.copy())
    ratios = [n / m for n, m in zip(v.shape, shape)]
    data = v.data
    if max(ratios) > 2.0:
        sigma = [0.5 * r if r > 1.0 else 0.0 for r in ratios]
        data = ndimage.gaussian_filter(data.astype(np.float64), sigma=sigma, mode="nearest")
    spacing = tuple(s * n / m for s, n, m in zip(v.spacing, v.shape, shape))
    return v.with_data(interpolate_to_shape(data, shape), spacing=spacing)


# ------------------------------------------------------------------ augmentation


def _axis_indices(axes: Iterable[Union[str, int]]) -> Tuple[int, ...]:
    out = []
    for a in axes:
        idx = AXES[a] if isinstance(a, str) else int(a)
        if idx not in (0, 1, 2):
            raise InvalidInputError(f"invalid axis {a!r}")
        out.append(idx)
    return tuple(sorted(set(out)))


def flip(v: Volume, axes: Iterable[Union[str, int]] = ()) -> Volume:
    idx = _axis_indices(axes)
    if not idx:
        return v.with_data(v.data.copy())
    return v.with_data(np.ascontiguousarray(np.flip(v.data, axis=idx)))


def crop_offsets(shape: Sequence[int], size: Sequence[int], rng: np.random.Generator) -> Tuple[int, int, int]:
    if len(size) != 3 or any(s < 1 or s > n for s, n in zip(size, shape)):
        raise InvalidInputError(f"crop size {tuple(size)} does not fit volume of shape {tuple(shape)}")
    return tuple(int(rng.integers(0, n - s + 1)) for n, s in zip(shape, size))


def random_crop(v: Volume, size: Sequence[int], rng: np.random.Generator) -> Volume:
    size = tuple(int(s) for s in size)
    oz, oy, ox = crop_offsets(v.shape, size, rng)
    sz, sy, sx = size
    return v.with_data(v.data[oz : oz + sz, oy : oy + sy, ox : ox + sx].copy())


# --------------------------------------------------------------------------- I/O


def _paths(path: Union[str, Path]) -> Tuple[Path, Path]:
    path = Path(path)
    name = path.name
    for suffix in (".vol.json", ".vol.raw", ".vol"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
            break
    return path.with_name(name + ".vol.json"), path.with_name(name + ".vol.raw")


def save_volume(v: Volume, path: Union[str, Path]) -> Path:
    """Write ``<name>.vol.json`` and ``<name>.vol.raw`` (little-endian float32, z-major)."""
    header_path, raw_path = _paths(path)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": VOL_FORMAT,
        "shape": list(v.shape),
        "spacing_um": list(v.spacing),
        "dtype": "f32le",
        "channel": v.channel,
        "name": v.name,
    }
    raw_path.write_bytes(v.data.astype("<f4").tobytes(order="C"))
    header_path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    return header_path


def load_volume(path: Union[str, Path]) -> Volume:
    header_path, raw_path = _paths(path)
    try:
        header = json.loads(header_path.read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"malformed volume header {header_path}: {exc}") from exc
    if header.get("dtype") != "f32le":
        raise InvalidInputError(f"{header_path}: unsupported dtype {header.get('dtype')!r}")
    shape = tuple(int(s) for s in header["shape"])
    data = np.fromfile(raw_path, dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise InvalidInputError(f"{raw_path}: expected {np.prod(shape)} values, found {data.size}")
    return Volume(
        data.reshape(shape).astype(np.float32),
        spacing=tuple(header["spacing_um"]),
        name=header.get("name", header_path.name[: -len(".vol.json")]),
        channel=header.get("channel", "synthetic"),
    )
