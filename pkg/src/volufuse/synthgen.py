"""Synthetic phantoms and a depth-dependent single-view degradation model.

Ground-truth phantoms play the role of the multi-view fused volume; the
degraded copy stands in for the single view fed to the network.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .volcore import AXES, Volume, load_volume, save_volume

logger = logging.getLogger(__name__)

MANIFEST_FORMAT = "volufuse-dataset-1"
PHANTOM_CHANNELS = ("nucleus", "membrane")


class PlacementError(RuntimeError):
    """Objects could not be placed without overlap within the retry budget."""


@dataclass(frozen=True)
class PhantomSpec:
    shape: Tuple[int, int, int] = (64, 64, 64)
    channel: str = "nucleus"
    count_range: Tuple[int, int] = (8, 16)
    radius_range: Tuple[float, float] = (4.0, 7.0)
    shell_thickness: float = 1.5
    spacing: Tuple[float, float, float] = (0.6, 0.6, 0.6)
    seed: int = 0

    def __post_init__(self):
        if self.channel not in PHANTOM_CHANNELS:
            raise ValueError(f"channel must be one of {PHANTOM_CHANNELS}, got {self.channel!r}")
        lo, hi = self.count_range
        if lo < 1 or hi < lo:
            raise ValueError(f"invalid count_range {self.count_range}")
        rlo, rhi = self.radius_range
        if rlo < 1 or rhi < rlo or 2 * rhi + 2 > min(self.shape):
            raise ValueError(f"radius_range {self.radius_range} does not fit shape {self.shape}")


@dataclass(frozen=True)
class DegradationSpec:
    view_axis: str = "z"
    attenuation_length: float = 32.0
    blur_near: float = 0.3
    blur_far: float = 3.0
    noise_sigma: float = 0.001
    noise_gain: float = 0.0002
    seed: int = 0

    def __post_init__(self):
        if self.view_axis not in AXES:
            raise ValueError(f"view_axis must be one of z, y, x; got {self.view_axis!r}")
        if not self.attenuation_length > 0:
            raise ValueError("attenuation_length must be > 0")
        if not 0 <= self.blur_near <= self.blur_far:
            raise ValueError("blur must satisfy 0 <= near <= far")
        if self.noise_sigma < 0 or self.noise_gain < 0:
            raise ValueError("noise parameters must be >= 0")


def _place_centers(spec: PhantomSpec, rng: np.random.Generator, max_tries: int = 2000):
    n = int(rng.integers(spec.count_range[0], spec.count_range[1] + 1))
    centers, radii = [], []
    shape = np.asarray(spec.shape, dtype=np.float64)
    # shells have tails beyond their radius; keep neighbouring ones apart above half-max
    gap = 1.0 + (2.0 * spec.shell_thickness if spec.channel == "membrane" else 0.0)
    for _ in range(n):
        for _attempt in range(max_tries):
            r = float(rng.uniform(*spec.radius_range))
            c = rng.uniform(r + 1.0, shape - r - 2.0)
            if all(np.linalg.norm(c - c2) >= r + r2 + gap for c2, r2 in zip(centers, radii)):
                centers.append(c)
                radii.append(r)
                break
        else:
            raise PlacementError(f"could not place {n} objects in {spec.shape} after {max_tries} tries")
    return centers, radii


def generate_phantom(spec: PhantomSpec) -> Volume:
    """Gaussian nuclei or thin spherical membranes at non-overlapping centres, in ``[0, 1]``."""
    rng = np.random.default_rng(spec.seed)
    centers, radii = _place_centers(spec, rng)
    grids = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in spec.shape], indexing="ij")
    out = np.zeros(spec.shape, dtype=np.float64)
    for c, r in zip(centers, radii):
        amp = rng.uniform(0.75, 1.0)
        # each object only touches a bounding box; keeps generation cheap
        lo = [max(0, int(math.floor(ci - 2 * r - 2))) for ci in c]
        hi = [min(s, int(math.ceil(ci + 2 * r + 3))) for ci, s in zip(c, spec.shape)]
        box = tuple(slice(a, b) for a, b in zip(lo, hi))
        d2 = sum((g[box] - ci) ** 2 for g, ci in zip(grids, c))
        if spec.channel == "nucleus":
            sigma = r / 2.0
            out[box] += amp * np.exp(-d2 / (2.0 * sigma**2))
        else:
            width = spec.shell_thickness / 2.0
            out[box] += amp * np.exp(-((np.sqrt(d2) - r) ** 2) / (2.0 * width**2))
    lo, hi = out.min(), out.max()
    out = (out - lo) / (hi - lo) if hi > lo else np.zeros_like(out)
    return Volume(out.astype(np.float32), spacing=spec.spacing, name=f"phantom_{spec.seed}", channel=spec.channel)


def _blur_slice(data: np.ndarray, axis: int, d: int, sigma: float) -> np.ndarray:
    """Slice ``d`` of ``gaussian_filter(data, sigma)`` computed on a local slab only."""
    if sigma <= 0:
        return np.take(data, d, axis=axis)
    reach = int(4.0 * sigma + 0.5) + 1
    a, b = max(0, d - reach), min(data.shape[axis], d + reach + 1)
    slab = np.take(data, np.arange(a, b), axis=axis)
    return np.take(ndimage.gaussian_filter(slab, sigma, mode="nearest"), d - a, axis=axis)


def degrade_single_view(gt: Volume, deg: DegradationSpec) -> Volume:
    """Depth-dependent blur, exponential attenuation and mixed noise along ``view_axis``.

    Depth 0 is the illuminated (near) side.
    """
    axis = AXES[deg.view_axis]
    data = gt.data.astype(np.float64)
    n = data.shape[axis]
    out = np.empty_like(data)
    for d in range(n):
        t = d / (n - 1) if n > 1 else 0.0
        sigma = deg.blur_near + t * (deg.blur_far - deg.blur_near)
        sl = _blur_slice(data, axis, d, sigma) * math.exp(-d / deg.attenuation_length)
        idx = [slice(None)] * 3
        idx[axis] = d
        out[tuple(idx)] = sl
    if deg.noise_sigma > 0 or deg.noise_gain > 0:
        rng = np.random.default_rng(deg.seed)
        std = np.sqrt(deg.noise_sigma**2 + deg.noise_gain * np.clip(out, 0.0, None))
        out = out + std * rng.standard_normal(out.shape)
    out = np.clip(out, 0.0, None)
    return gt.with_data(out.astype(np.float32), name=f"{gt.name}_view")


# ------------------------------------------------------------------------ dataset


def case_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1)[0])


def split_indices(n_cases: int, seed: int) -> Tuple[List[int], List[int]]:
    """Deterministic 4:1 train/validation split."""
    order = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5E1])).permutation(n_cases)
    n_val = int(round(n_cases / 5))
    if n_cases > 1:
        n_val = min(max(n_val, 1), n_cases - 1)
    val = sorted(int(i) for i in order[:n_val])
    train = sorted(int(i) for i in order[n_val:])
    return train, val


def make_dataset(
    n_cases: int,
    phantom_spec: PhantomSpec,
    deg_spec: DegradationSpec,
    out_dir: Union[str, Path],
    seed: int = 0,
    channels: Optional[Sequence[str]] = None,
) -> Dict:
    """Write ``n_cases`` (input, gt) pairs plus ``manifest.json`` to ``out_dir``.

    Cases cycle through ``channels`` (default: both phantom channels). Each case
    seeds itself from ``(seed, index)``, so any subset regenerates identically.
    """
    if n_cases < 1:
        raise ValueError("n_cases must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    channels = tuple(channels or PHANTOM_CHANNELS)
    train, val = split_indices(n_cases, seed)
    val_set = set(val)
    cases = []
    for i in range(n_cases):
        cs = case_seed(seed, i)
        channel = channels[i % len(channels)]
        ps = replace(phantom_spec, channel=channel, seed=cs)
        ds = replace(deg_spec, seed=cs + 1)
        gt = generate_phantom(ps)
        view = degrade_single_view(gt, ds)
        cid = f"case_{i:03d}"
        gt = gt.with_data(gt.data, name=f"{cid}_gt")
        view = view.with_data(view.data, name=f"{cid}_input")
        save_volume(gt, out_dir / f"{cid}_gt.vol.json")
        save_volume(view, out_dir / f"{cid}_input.vol.json")
        cases.append(
            {
                "id": cid,
                "channel": channel,
                "input": f"{cid}_input.vol.json",
                "gt": f"{cid}_gt.vol.json",
                "split": "val" if i in val_set else "train",
                "seed": cs,
            }
        )
    spec_dict = asdict(phantom_spec)
    spec_dict.pop("channel")
    spec_dict.pop("seed")
    manifest = {
        "format": MANIFEST_FORMAT,
        "seed": int(seed),
        "n_cases": n_cases,
        "channels": list(channels),
        "phantom_spec": spec_dict,
        "degradation_spec": {k: v for k, v in asdict(deg_spec).items() if k != "seed"},
        "cases": cases,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    logger.info("wrote %d cases (%d train / %d val) to %s", n_cases, len(train), len(val), out_dir)
    return manifest


class Dataset:
    """A loaded dataset manifest with path resolution relative to its directory."""

    def __init__(self, manifest_path: Union[str, Path]):
        path = Path(manifest_path)
        if path.is_dir():
            path = path / "manifest.json"
        if not path.exists():
            raise FileNotFoundError(f"dataset manifest not found: {path}")
        try:
            self.manifest = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"malformed dataset manifest {path}: {exc}") from exc
        if self.manifest.get("format") != MANIFEST_FORMAT:
            raise ValueError(f"{path}: unknown dataset format {self.manifest.get('format')!r}")
        self.root = path.parent
        self.path = path

    @property
    def cases(self) -> List[dict]:
        return self.manifest["cases"]

    def split(self, name: str) -> List[dict]:
        return [c for c in self.cases if c["split"] == name]

    def load(self, case: dict, which: str) -> Volume:
        return load_volume(self.root / case[which])

    def pair(self, case: dict) -> Tuple[Volume, Volume]:
        return self.load(case, "input"), self.load(case, "gt")
