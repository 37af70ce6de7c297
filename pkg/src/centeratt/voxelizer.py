"""Point cloud to averaged voxel features and a dense BEV pseudo-image.

``voxelize`` splits the cloud across ``workers`` threads. Each worker reduces
its share to per-voxel partial ``(sum, count)`` pairs; partial sums are kept as
exact integers (every float32 is an integer multiple of 2**-149), so merging
them in ascending voxel order gives bit-identical means for any worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from .errors import ConfigError
from .tensor import Tensor

_F32_SCALE_SHIFT = 149  # float32 value * 2**149 is always an integer


@dataclass(frozen=True)
class VoxelConfig:
    x_range: Tuple[float, float] = (-25.6, 25.6)
    y_range: Tuple[float, float] = (-25.6, 25.6)
    z_range: Tuple[float, float] = (-2.0, 4.0)
    voxel_size: Tuple[float, float, float] = (0.1, 0.1, 0.15)

    def __post_init__(self):
        self.dims  # validates divisibility

    @classmethod
    def full_range(cls) -> "VoxelConfig":
        """Full-range configuration: +-75.2 m in X/Y, [-2, 4] m in Z."""
        return cls((-75.2, 75.2), (-75.2, 75.2), (-2.0, 4.0), (0.1, 0.1, 0.15))

    @property
    def mins(self) -> Tuple[float, float, float]:
        return (self.x_range[0], self.y_range[0], self.z_range[0])

    @property
    def maxs(self) -> Tuple[float, float, float]:
        return (self.x_range[1], self.y_range[1], self.z_range[1])

    @property
    def dims(self) -> Tuple[int, int, int]:
        out = []
        for axis, (lo, hi), size in zip("xyz", (self.x_range, self.y_range, self.z_range),
                                        self.voxel_size):
            if size <= 0 or hi <= lo:
                raise ConfigError(f"invalid {axis} range/voxel size: [{lo}, {hi}) / {size}")
            q = (hi - lo) / size
            n = round(q)
            if abs(q - n) > 1e-6 * max(1.0, q):
                raise ConfigError(f"{axis} range {hi - lo} not divisible by voxel size {size}")
            out.append(int(n))
        return tuple(out)


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Occupied voxels sorted by linear index ``(ix * ny + iy) * nz + iz``."""

    config: VoxelConfig
    coords: np.ndarray  # (M, 3) int64 (ix, iy, iz)
    means: np.ndarray  # (M, 4) float64
    counts: np.ndarray  # (M,) int64

    @property
    def occupied(self) -> Dict[tuple, tuple]:
        return {tuple(int(v) for v in c): (m, int(n))
                for c, m, n in zip(self.coords, self.means, self.counts)}

    def __len__(self):
        return int(self.counts.shape[0])

    def same_as(self, other: "VoxelGrid") -> bool:
        return (self.config == other.config
                and self.coords.tobytes() == other.coords.tobytes()
                and self.means.tobytes() == other.means.tobytes()
                and self.counts.tobytes() == other.counts.tobytes())


def _exact_ints(values: np.ndarray) -> np.ndarray:
    """float32 array -> object array of Python ints equal to value * 2**149."""
    bits = np.ascontiguousarray(values, dtype=np.float32).view(np.uint32).astype(np.int64)
    biased = (bits >> 23) & 0xFF
    mant = bits & 0x7FFFFF
    sig = np.where(biased == 0, mant, mant | 0x800000)
    shift = np.maximum(biased - 1, 0)
    signed = np.where(bits >> 31, -sig, sig)
    return signed.astype(object) << shift.astype(object)


def _linear_index(points: np.ndarray, cfg: VoxelConfig):
    p = points[:, :3].astype(np.float64)
    mins = np.array(cfg.mins)
    maxs = np.array(cfg.maxs)
    keep = np.all((p >= mins) & (p < maxs), axis=1)
    dims = np.array(cfg.dims)
    idx = np.floor((p[keep] - mins) / np.array(cfg.voxel_size)).astype(np.int64)
    idx = np.clip(idx, 0, dims - 1)
    nx, ny, nz = cfg.dims
    lin = (idx[:, 0] * ny + idx[:, 1]) * nz + idx[:, 2]
    return keep, lin


def _partial(lin: np.ndarray, feats: np.ndarray):
    if lin.size == 0:
        return lin, np.zeros((0, 4), dtype=object), np.zeros(0, np.int64)
    order = np.argsort(lin, kind="stable")
    lin = lin[order]
    ints = np.stack([_exact_ints(feats[order, k]) for k in range(4)], axis=1)
    starts = np.flatnonzero(np.r_[True, lin[1:] != lin[:-1]])
    sums = np.add.reduceat(ints, starts, axis=0)
    counts = np.diff(np.r_[starts, lin.size])
    return lin[starts], sums, counts


def voxelize(points, cfg: VoxelConfig = VoxelConfig(), workers: int = 1) -> VoxelGrid:
    """Average ``(x, y, z, intensity)`` per voxel over half-open ranges ``[min, max)``."""
    if workers < 1:
        raise ValueError("workers must be >= 1")
    pts = np.asarray(points, dtype=np.float32).reshape(-1, 4)
    keep, lin = _linear_index(pts, cfg)
    feats = pts[keep]
    chunks = np.array_split(np.arange(lin.size), workers)
    if workers == 1:
        partials = [_partial(lin, feats)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            partials = list(pool.map(lambda c: _partial(lin[c], feats[c]), chunks))

    all_lin = np.concatenate([p[0] for p in partials])
    all_sums = np.concatenate([p[1] for p in partials])
    all_counts = np.concatenate([p[2] for p in partials])
    nx, ny, nz = cfg.dims
    if all_lin.size == 0:
        return VoxelGrid(cfg, np.zeros((0, 3), np.int64), np.zeros((0, 4)), np.zeros(0, np.int64))
    order = np.argsort(all_lin, kind="stable")
    all_lin = all_lin[order]
    starts = np.flatnonzero(np.r_[True, all_lin[1:] != all_lin[:-1]])
    sums = np.add.reduceat(all_sums[order], starts, axis=0)
    counts = np.add.reduceat(all_counts[order], starts)
    lin_u = all_lin[starts]

    denom = [int(c) << _F32_SCALE_SHIFT for c in counts]
    means = np.array([[s / d for s in row] for row, d in zip(sums, denom)], dtype=np.float64)
    coords = np.stack([lin_u // (ny * nz), (lin_u // nz) % ny, lin_u % nz], axis=1)
    return VoxelGrid(cfg, coords.astype(np.int64), means.reshape(-1, 4), counts.astype(np.int64))


BEV_CHANNELS = 5


def bev_encode(grid: VoxelGrid) -> Tensor:
    """Collapse Z into a ``[5, ny, nx]`` image.

    Channels 0-3 average the voxel means over occupied Z bins (summed in
    ascending ``iz``); channel 4 is the occupied-bin count divided by ``nz``.
    """
    nx, ny, nz = grid.config.dims
    acc = np.zeros((ny, nx, 4), dtype=np.float64)
    occ = np.zeros((ny, nx), dtype=np.int64)
    if len(grid):
        ix, iy = grid.coords[:, 0], grid.coords[:, 1]
        np.add.at(acc, (iy, ix), grid.means)
        np.add.at(occ, (iy, ix), 1)
    out = np.zeros((BEV_CHANNELS, ny, nx), dtype=np.float64)
    filled = occ > 0
    out[:4, filled] = (acc[filled] / occ[filled][:, None]).T
    out[4] = occ / nz
    return Tensor(out.astype(np.float32))


def grid_to_store(grid: VoxelGrid) -> dict:
    """Debug dump of a grid in weight-store form (see :mod:`centeratt.weights`)."""
    return {
        "voxels.coords": Tensor(grid.coords.astype(np.float32)),
        "voxels.means": Tensor(grid.means.astype(np.float32)),
        "voxels.counts": Tensor(grid.counts.astype(np.float32)),
    }
