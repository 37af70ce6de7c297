"""Oriented 3D boxes and the planar polygon helpers they need."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np

TWO_PI = 2.0 * math.pi


class ObjectClass(enum.IntEnum):
    VEHICLE = 0
    PEDESTRIAN = 1
    CYCLIST = 2


CLASS_NAMES = ("Vehicle", "Pedestrian", "Cyclist")
NUM_CLASSES = len(CLASS_NAMES)


def wrap_angle(a: float) -> float:
    """Map ``a`` into ``[-pi, pi)``; values already in range are returned unchanged."""
    a = float(a)
    if -math.pi <= a < math.pi:
        return a
    a = math.fmod(a + math.pi, TWO_PI)
    if a < 0:
        a += TWO_PI
    a -= math.pi
    if a >= math.pi:  # fmod rounding can land exactly on +pi
        a -= TWO_PI
    return a


@dataclass(frozen=True)
class Box3D:
    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    yaw: float
    class_id: int = 0
    score: float = 1.0

    def __post_init__(self):
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise ValueError(f"box sizes must be positive, got {(self.l, self.w, self.h)}")
        for name in ("cx", "cy", "cz", "l", "w", "h", "score"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))
        object.__setattr__(self, "class_id", int(self.class_id))

    @property
    def center(self):
        return (self.cx, self.cy, self.cz)

    @property
    def diagonal(self) -> float:
        return math.hypot(self.l, self.w)

    def with_score(self, score: float) -> "Box3D":
        return replace(self, score=score)


def bev_corners(box: Box3D) -> np.ndarray:
    """Counter-clockwise BEV corners as a ``(4, 2)`` array."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    hl, hw = box.l / 2.0, box.w / 2.0
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([box.cx, box.cy])


def polygon_area(poly) -> float:
    """Signed shoelace area; positive for counter-clockwise vertex order."""
    if len(poly) < 3:
        return 0.0
    p = np.asarray(poly, dtype=np.float64)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def clip_polygon(subject, clip) -> list:
    """Sutherland-Hodgman: clip ``subject`` against the convex CCW polygon ``clip``."""
    output = [tuple(p) for p in subject]
    clip = [tuple(p) for p in clip]
    for i in range(len(clip)):
        if not output:
            break
        a, b = clip[i], clip[(i + 1) % len(clip)]
        inp, output = output, []
        prev = inp[-1]
        prev_in = _cross(a, b, prev) >= 0.0
        for cur in inp:
            cur_in = _cross(a, b, cur) >= 0.0
            if cur_in != prev_in:
                # edge prev->cur crosses line a-b
                d1 = _cross(a, b, prev)
                d2 = _cross(a, b, cur)
                t = d1 / (d1 - d2)
                output.append((prev[0] + t * (cur[0] - prev[0]),
                               prev[1] + t * (cur[1] - prev[1])))
            if cur_in:
                output.append(cur)
            prev, prev_in = cur, cur_in
    return output


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    # cheap reject on circumscribed circles
    if math.hypot(a.cx - b.cx, a.cy - b.cy) > 0.5 * (a.diagonal + b.diagonal):
        return 0.0
    poly = clip_polygon(bev_corners(a), bev_corners(b))
    return max(polygon_area(poly), 0.0)


def points_in_box(points, box: Box3D, margin: float = 0.0) -> np.ndarray:
    """Indices of ``points`` (``[N, >=3]``) inside ``box`` grown by ``margin`` metres."""
    if margin < 0:
        raise ValueError("margin must be >= 0")
    p = np.asarray(points, dtype=np.float64)
    if p.size == 0:
        return np.zeros(0, dtype=np.int64)
    dx = p[:, 0] - box.cx
    dy = p[:, 1] - box.cy
    dz = p[:, 2] - box.cz
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    inside = ((np.abs(lx) <= box.l / 2 + margin) & (np.abs(ly) <= box.w / 2 + margin)
              & (np.abs(dz) <= box.h / 2 + margin))
    return np.nonzero(inside)[0]
