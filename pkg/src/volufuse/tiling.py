"""Overlapping patch grids with partition-of-unity blending.

Arrays may carry leading (e.g. channel) axes; the last three axes are spatial.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .volcore import Volume

Shape3 = Tuple[int, int, int]


@dataclass(frozen=True)
class TileGrid:
    volume_shape: Shape3
    patch_shape: Shape3
    overlap: Shape3
    origins: Tuple[Shape3, ...]
    taper: Shape3

    def __len__(self) -> int:
        return len(self.origins)


def _axis_origins(n: int, p: int, o: int) -> List[int]:
    if n <= p:
        return [0]
    stride = p - o
    starts = list(range(0, n - p, stride))
    starts.append(n - p)
    return sorted(set(starts))


def plan_tiles(volume_shape: Sequence[int], patch_shape: Sequence[int], overlap: Sequence[int]) -> TileGrid:
    """Tiles at stride ``patch - overlap``; the last tile on each axis ends flush."""
    vs = tuple(int(s) for s in volume_shape)
    ps = tuple(int(s) for s in patch_shape)
    ov = tuple(int(s) for s in overlap)
    if not (len(vs) == len(ps) == len(ov) == 3):
        raise ValueError("volume_shape, patch_shape and overlap must be triples")
    if min(vs) < 1 or min(ps) < 1 or min(ov) < 0:
        raise ValueError("extents must be >= 1 and overlap >= 0")
    if any(o >= p for o, p in zip(ov, ps)):
        raise ValueError(f"overlap {ov} must be smaller than patch {ps} on every axis")
    per_axis = [_axis_origins(n, p, o) for n, p, o in zip(vs, ps, ov)]
    origins = tuple(itertools.product(*per_axis))
    taper = tuple(max(1, (o + 1) // 2) for o in ov)
    return TileGrid(vs, ps, ov, origins, taper)


def extract(v, grid: TileGrid, index: int) -> np.ndarray:
    """Patch ``index`` of exactly ``grid.patch_shape``; undersized axes are reflect-padded."""
    data = v.data if isinstance(v, Volume) else np.asarray(v)
    if tuple(data.shape[-3:]) != grid.volume_shape:
        raise ValueError(f"array spatial shape {data.shape[-3:]} does not match grid {grid.volume_shape}")
    if not 0 <= index < len(grid.origins):
        raise IndexError(f"tile index {index} out of range for {len(grid.origins)} tiles")
    lead = (slice(None),) * (data.ndim - 3)
    sl = tuple(slice(o, o + p) for o, p in zip(grid.origins[index], grid.patch_shape))
    patch = data[lead + sl]
    for k, (p, s) in enumerate(zip(grid.patch_shape, patch.shape[-3:])):
        if p > s:
            pad = [(0, 0)] * patch.ndim
            pad[patch.ndim - 3 + k] = (0, p - s)
            # a single voxel has nothing to reflect
            patch = np.pad(patch, pad, mode="reflect" if s > 1 else "edge")
    return np.array(patch, copy=True)


def _profile(p: int, start: int, n: int, taper: int) -> np.ndarray:
    """1D weight of one tile: linear ramp over ``taper`` voxels at interior edges."""
    k = np.arange(p, dtype=np.float64)
    w = np.ones(p, dtype=np.float64)
    if start > 0:
        w = np.minimum(w, (k + 1) / (taper + 1))
    if start + p < n:
        w = np.minimum(w, (p - k) / (taper + 1))
    return w


def tile_weight(grid: TileGrid, index: int) -> np.ndarray:
    """Unnormalised separable blend weight of tile ``index`` (cropped to the volume)."""
    profiles = []
    for axis in range(3):
        o = grid.origins[index][axis]
        p, n = grid.patch_shape[axis], grid.volume_shape[axis]
        w = _profile(p, o, n, grid.taper[axis])
        profiles.append(w[: max(0, min(p, n - o))])
    return profiles[0][:, None, None] * profiles[1][None, :, None] * profiles[2][None, None, :]


def stitch(patches: Sequence[np.ndarray], grid: TileGrid, template: Optional[Volume] = None):
    """Blend per-tile predictions into one array of ``grid.volume_shape``.

    Weights taper linearly across half the overlap band and are renormalised
    to sum to one at every voxel; padded regions are discarded. Accumulation
    follows tile order, so the result does not depend on how patches were computed.
    If ``template`` is given the result is wrapped in a copy of that volume.
    """
    if len(patches) != len(grid.origins):
        raise ValueError(f"expected {len(grid.origins)} patches, got {len(patches)}")
    first = np.asarray(patches[0])
    lead = first.shape[:-3]
    acc = np.zeros(lead + grid.volume_shape, dtype=np.float64)
    wsum = np.zeros(grid.volume_shape, dtype=np.float64)
    for i, (patch, origin) in enumerate(zip(patches, grid.origins)):
        patch = np.asarray(patch)
        if patch.shape != lead + grid.patch_shape:
            raise ValueError(f"patch {i} has shape {patch.shape}, expected {lead + grid.patch_shape}")
        w = tile_weight(grid, i)
        ext = w.shape
        sl = tuple(slice(o, o + e) for o, e in zip(origin, ext))
        crop = patch[(Ellipsis,) + tuple(slice(0, e) for e in ext)]
        acc[(Ellipsis,) + sl] += crop * w
        wsum[sl] += w
    out = (acc / wsum).astype(np.float32)
    if template is not None:
        return template.with_data(out)
    return out
