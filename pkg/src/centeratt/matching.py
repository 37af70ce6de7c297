"""Rotated IoU, proposal/ground-truth matching cost, Hungarian assignment and
the second-stage loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .boxes import Box3D, bev_intersection_area
from .refine import box_deltas

BCE_EPS = 1e-7


def rotated_iou_bev(a: Box3D, b: Box3D) -> float:
    """Bird's-eye-view IoU of two yaw-rotated rectangles."""
    inter = bev_intersection_area(a, b)
    union = a.l * a.w + b.l * b.w - inter
    if union <= 1e-12:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def rotated_iou_3d(a: Box3D, b: Box3D) -> float:
    """BEV intersection times vertical overlap, over the union volume."""
    dz = min(a.cz + a.h / 2, b.cz + b.h / 2) - max(a.cz - a.h / 2, b.cz - b.h / 2)
    if dz <= 0:
        return 0.0
    inter = bev_intersection_area(a, b) * dz
    union = a.l * a.w * a.h + b.l * b.w * b.h - inter
    if union <= 1e-12:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def box_iou(a: Box3D, b: Box3D, mode: str = "bev") -> float:
    if mode == "bev":
        return rotated_iou_bev(a, b)
    if mode == "3d":
        return rotated_iou_3d(a, b)
    raise ValueError(f"unknown IoU mode {mode!r}")


@dataclass(frozen=True)
class MatchConfig:
    lambda_cls: float = 1.0
    lambda_iou: float = 1.0
    iou_mode: str = "bev"

    def __post_init__(self):
        if self.lambda_cls < 0 or self.lambda_iou < 0:
            raise ValueError("cost weights must be non-negative")
        if self.lambda_cls == 0 and self.lambda_iou == 0:
            raise ValueError("lambda_cls and lambda_iou cannot both be zero")


def build_cost_matrix(scores, proposals: Sequence[Box3D], gts: Sequence[Box3D],
                      cfg: MatchConfig = MatchConfig()) -> np.ndarray:
    """``cost[i, j] = lambda_cls * (1 - p_i[class_j]) + lambda_iou * (1 - IoU(i, j))``."""
    scores = np.asarray(scores, dtype=np.float64).reshape(len(proposals), -1)
    if np.any(scores < 0) or np.any(scores > 1):
        raise ValueError("class scores must lie in [0, 1]")
    cost = np.zeros((len(proposals), len(gts)))
    for j, g in enumerate(gts):
        cls_cost = 1.0 - scores[:, g.class_id]
        ious = np.array([box_iou(p, g, cfg.iou_mode) for p in proposals])
        cost[:, j] = cfg.lambda_cls * cls_cost + cfg.lambda_iou * (1.0 - ious)
    return cost


@dataclass(frozen=True)
class Assignment:
    pairs: Tuple[Tuple[int, int], ...]
    unmatched: Tuple[int, ...]
    total_cost: float

    @property
    def size(self) -> int:
        return len(self.pairs)


def _solve_rows(a: list, n: int, m: int, inf: int) -> list:
    """Shortest-augmenting-path Hungarian for ``n <= m``; returns column -> row (1-based)."""
    u = [0] * (n + 1)
    v = [0] * (m + 1)
    p = [0] * (m + 1)
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = a[i0 - 1]
            ui0 = u[i0]
            delta = inf
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    return p


def hungarian_assign(cost) -> Assignment:
    """Minimum-cost one-to-one matching of size ``min(rows, cols)``.

    Costs are converted to exact integers, and each entry carries a secondary
    key so that among all optimal matchings the one whose per-row column list
    (unmatched rows counting as +inf) is lexicographically smallest wins.
    O(n^2 m) with ``n = min(rows, cols)``.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {c.shape}")
    rows, cols = c.shape
    if rows == 0 or cols == 0:
        return Assignment((), tuple(range(rows)), 0.0)
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix entries must be finite")

    ratios = [float(x).as_integer_ratio() for x in c.flat]
    den = max(d for _, d in ratios)
    ints = [num * (den // d) for num, d in ratios]
    base = cols + 1
    span = 2 * base ** rows + 1
    weights = [base ** (rows - 1 - i) for i in range(rows)]
    key = [[ints[i * cols + j] * span + (j - cols) * weights[i] for j in range(cols)]
           for i in range(rows)]
    bound = max(abs(k) for r in key for k in r)
    inf = 4 * (rows + cols + 1) * (bound + 1)

    pairs = []
    if rows <= cols:
        p = _solve_rows(key, rows, cols, inf)
        pairs = [(p[j] - 1, j - 1) for j in range(1, cols + 1) if p[j] != 0]
    else:
        transposed = [list(col) for col in zip(*key)]
        p = _solve_rows(transposed, cols, rows, inf)
        pairs = [(i - 1, p[i] - 1) for i in range(1, rows + 1) if p[i] != 0]
    pairs.sort()
    matched = {i for i, _ in pairs}
    total = 0.0
    for i, j in pairs:
        total += float(c[i, j])
    return Assignment(tuple(pairs), tuple(i for i in range(rows) if i not in matched), total)


def _bce(p: np.ndarray, target: np.ndarray) -> np.ndarray:
    # floor each log argument at eps: finite everywhere, exactly 0 for perfect predictions
    p = np.clip(p, 0.0, 1.0)
    pos = np.log(np.maximum(p, BCE_EPS))
    neg = np.log(np.maximum(1.0 - p, BCE_EPS))
    return -(np.where(target > 0, target * pos, 0.0) + np.where(target < 1, (1.0 - target) * neg, 0.0))


def second_stage_loss(scores, deltas, proposals: Sequence[Box3D], gts: Sequence[Box3D],
                      assignment: Assignment) -> Tuple[float, float]:
    """Mean BCE over every proposal/class sigmoid and mean L1 over matched deltas."""
    scores = np.asarray(scores, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    n = len(proposals)
    if scores.shape[0] != n or deltas.shape[0] != n:
        raise ValueError(f"predictions cover {scores.shape[0]}/{deltas.shape[0]} proposals, "
                         f"expected {n}")
    for i, j in assignment.pairs:
        if not (0 <= i < n and 0 <= j < len(gts)):
            raise ValueError(f"assignment pair {(i, j)} out of range for "
                             f"{n} proposals and {len(gts)} ground-truth boxes")
    if n == 0:
        return 0.0, 0.0
    target = np.zeros_like(scores)
    for i, j in assignment.pairs:
        target[i, gts[j].class_id] = 1.0
    cls_loss = float(_bce(scores, target).mean())
    if not assignment.pairs:
        return cls_loss, 0.0
    reg_targets = np.array([box_deltas(proposals[i], gts[j]) for i, j in assignment.pairs])
    matched = deltas[[i for i, _ in assignment.pairs]]
    reg_loss = float(np.abs(matched - reg_targets).mean())
    return cls_loss, reg_loss


def format_loss_line(scene_id: str, cls_loss: float, reg_loss: float, matched: int,
                     unmatched: int) -> str:
    return f"{scene_id}, {cls_loss:.6f}, {reg_loss:.6f}, {matched}, {unmatched}"
