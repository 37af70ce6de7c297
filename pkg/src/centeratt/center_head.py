"""First-stage center head: Gaussian heatmap targets, peak picking, box decoding.

Head outputs share one channel layout (see :data:`HEAD_CHANNELS`)::

    [0, K)      class heatmaps in [0, 1]
    K, K+1      sub-cell offset (dx, dy) in cells
    K+2         z centre in metres
    K+3..K+5    log(l), log(w), log(h)
    K+6, K+7    sin(yaw), cos(yaw)

Cell ``(row, col)`` covers ``x in [xmin + col*vx, xmin + (col+1)*vx)`` and the
matching ``y`` interval for ``row``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, NamedTuple, Sequence

import numpy as np

from .boxes import NUM_CLASSES, Box3D
from .tensor import Tensor
from .voxelizer import VoxelConfig

REGRESSION_CHANNELS = 8


@dataclass(frozen=True)
class HeadConfig:
    num_classes: int = NUM_CLASSES
    max_proposals: int = 128
    score_threshold: float = 0.1
    min_gaussian_radius: int = 2
    gaussian_overlap: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.score_threshold < 1.0:
            raise ValueError(f"score_threshold must be in (0, 1), got {self.score_threshold}")
        if self.max_proposals < 1:
            raise ValueError("max_proposals must be >= 1")
        if not 0.0 < self.gaussian_overlap < 1.0:
            raise ValueError("gaussian_overlap must be in (0, 1)")

    @property
    def head_channels(self) -> int:
        return self.num_classes + REGRESSION_CHANNELS


HEAD_CHANNELS = NUM_CLASSES + REGRESSION_CHANNELS


@dataclass(frozen=True, eq=False)
class HeatmapTargets:
    heatmap: np.ndarray  # (K, H, W) float64
    offset: np.ndarray  # (2, H, W)
    z: np.ndarray  # (1, H, W)
    size: np.ndarray  # (3, H, W) log sizes
    rot: np.ndarray  # (2, H, W) sin, cos
    mask: np.ndarray  # (H, W) bool

    def packed(self) -> np.ndarray:
        """All planes stacked in head-channel order."""
        return np.concatenate([self.heatmap, self.offset, self.z, self.size, self.rot])


def gaussian_radius(l_cells: float, w_cells: float, overlap: float = 0.1,
                    min_radius: int = 2) -> int:
    """Smallest of the three corner-shift radii keeping IoU >= ``overlap``.

    Truncated to an integer and floored at ``min_radius``.
    """
    if l_cells <= 0 or w_cells <= 0:
        raise ValueError("footprint must be positive")
    h, w, o = l_cells, w_cells, overlap
    b1 = h + w
    c1 = w * h * (1 - o) / (1 + o)
    r1 = (b1 + math.sqrt(b1 ** 2 - 4 * c1)) / 2
    b2 = 2 * (h + w)
    c2 = (1 - o) * w * h
    r2 = (b2 + math.sqrt(b2 ** 2 - 16 * c2)) / 2
    a3 = 4 * o
    b3 = -2 * o * (h + w)
    c3 = (o - 1) * w * h
    r3 = (b3 + math.sqrt(b3 ** 2 - 4 * a3 * c3)) / 2
    return max(int(min_radius), int(min(r1, r2, r3)))


def center_cell(box: Box3D, vcfg: VoxelConfig):
    """Integer ``(row, col)`` of the cell holding the box centre and the fractional offsets."""
    vx, vy, _ = vcfg.voxel_size
    fx = (box.cx - vcfg.x_range[0]) / vx
    fy = (box.cy - vcfg.y_range[0]) / vy
    col, row = math.floor(fx), math.floor(fy)
    return row, col, fx - col, fy - row


def encode_targets(boxes: Sequence[Box3D], cfg: HeadConfig = HeadConfig(),
                   vcfg: VoxelConfig = VoxelConfig()) -> HeatmapTargets:
    """Splat one Gaussian per box (max-combined) and write regression at its centre cell."""
    nx, ny, _ = vcfg.dims
    k = cfg.num_classes
    heat = np.zeros((k, ny, nx))
    offset = np.zeros((2, ny, nx))
    z = np.zeros((1, ny, nx))
    size = np.zeros((3, ny, nx))
    rot = np.zeros((2, ny, nx))
    mask = np.zeros((ny, nx), dtype=bool)
    vx, vy, _ = vcfg.voxel_size
    for box in boxes:
        row, col, dx, dy = center_cell(box, vcfg)
        if not (0 <= row < ny and 0 <= col < nx):
            continue
        radius = gaussian_radius(box.l / vx, box.w / vy, cfg.gaussian_overlap,
                                 cfg.min_gaussian_radius)
        sigma = radius / 3.0
        r0, r1 = max(row - radius, 0), min(row + radius, ny - 1)
        c0, c1 = max(col - radius, 0), min(col + radius, nx - 1)
        ys = np.arange(r0, r1 + 1)[:, None] - row
        xs = np.arange(c0, c1 + 1)[None, :] - col
        g = np.exp(-(xs ** 2 + ys ** 2) / (2 * sigma ** 2))
        window = heat[box.class_id, r0:r1 + 1, c0:c1 + 1]
        np.maximum(window, g, out=window)
        offset[:, row, col] = (dx, dy)
        z[0, row, col] = box.cz
        size[:, row, col] = (math.log(box.l), math.log(box.w), math.log(box.h))
        rot[:, row, col] = (math.sin(box.yaw), math.cos(box.yaw))
        mask[row, col] = True
    return HeatmapTargets(heat, offset, z, size, rot, mask)


class Peak(NamedTuple):
    class_id: int
    row: int
    col: int
    score: float


# neighbour offsets (drow, dcol); those earlier in row-major order must be beaten strictly
_NEIGHBOURS = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0)]


def peak_mask(heatmap: np.ndarray) -> np.ndarray:
    """Cells that are the 3x3 maximum of their channel; ties go to the lowest row-major index."""
    hm = np.asarray(heatmap, dtype=np.float64)
    k, h, w = hm.shape
    padded = np.full((k, h + 2, w + 2), -np.inf)
    padded[:, 1:-1, 1:-1] = hm
    keep = np.ones(hm.shape, dtype=bool)
    for dr, dc in _NEIGHBOURS:
        nb = padded[:, 1 + dr:1 + dr + h, 1 + dc:1 + dc + w]
        if dr < 0 or (dr == 0 and dc < 0):
            keep &= hm > nb
        else:
            keep &= hm >= nb
    return keep


def decode_peaks(heatmap, cfg: HeadConfig = HeadConfig()) -> List[Peak]:
    """Top ``max_proposals`` peaks with score >= threshold, best first.

    Ties in score are ordered by class, then by row-major cell index.
    """
    hm = heatmap.data if isinstance(heatmap, Tensor) else np.asarray(heatmap)
    hm = hm.astype(np.float64)
    cand = peak_mask(hm) & (hm >= cfg.score_threshold)
    cls, rows, cols = np.nonzero(cand)
    if cls.size == 0:
        return []
    scores = hm[cls, rows, cols]
    flat = rows * hm.shape[2] + cols
    order = np.lexsort((flat, cls, -scores))[:cfg.max_proposals]
    return [Peak(int(cls[i]), int(rows[i]), int(cols[i]), float(scores[i])) for i in order]


def split_head(head) -> tuple:
    """Split a head-layout array into ``(heatmap, regression)``."""
    arr = head.data if isinstance(head, Tensor) else np.asarray(head)
    k = arr.shape[0] - REGRESSION_CHANNELS
    return arr[:k], arr[k:]


def decode_boxes(peaks: Sequence[Peak], regression, vcfg: VoxelConfig = VoxelConfig()) -> List[Box3D]:
    """Read the regression planes (``[8, H, W]``, head-layout order) at every peak."""
    reg = regression.data if isinstance(regression, Tensor) else np.asarray(regression)
    vx, vy, _ = vcfg.voxel_size
    out = []
    for p in peaks:
        v = [float(x) for x in reg[:, p.row, p.col]]
        out.append(Box3D(
            cx=(p.col + v[0]) * vx + vcfg.x_range[0],
            cy=(p.row + v[1]) * vy + vcfg.y_range[0],
            cz=v[2],
            l=math.exp(v[3]), w=math.exp(v[4]), h=math.exp(v[5]),
            yaw=math.atan2(v[6], v[7]),
            class_id=p.class_id,
            score=p.score,
        ))
    return out


def decode_head(head, cfg: HeadConfig = HeadConfig(),
                vcfg: VoxelConfig = VoxelConfig()) -> List[Box3D]:
    heat, reg = split_head(head)
    return decode_boxes(decode_peaks(heat, cfg), reg, vcfg)
