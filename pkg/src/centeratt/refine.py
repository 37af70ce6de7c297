"""Box refinement parameterisation shared by the second stage and its loss.

Deltas are ``(dx, dy, dz, dlog_l, dlog_w, dlog_h, dsin, dcos)``; centre
offsets are expressed in units of half the proposal's BEV diagonal.
"""

from __future__ import annotations

import math
from dataclasses import replace
from typing import Sequence

import numpy as np

from .boxes import Box3D

NUM_DELTAS = 8


def refine_box(box: Box3D, d) -> Box3D:
    half_diag = box.diagonal / 2.0
    return replace(
        box,
        cx=box.cx + d[0] * half_diag,
        cy=box.cy + d[1] * half_diag,
        cz=box.cz + d[2] * half_diag,
        l=box.l * math.exp(d[3]),
        w=box.w * math.exp(d[4]),
        h=box.h * math.exp(d[5]),
        yaw=math.atan2(math.sin(box.yaw) + d[6], math.cos(box.yaw) + d[7]),
    )


def refine_boxes(proposals: Sequence[Box3D], deltas) -> list:
    deltas = np.asarray(deltas, dtype=np.float64).reshape(len(proposals), NUM_DELTAS)
    return [refine_box(b, [float(x) for x in d]) for b, d in zip(proposals, deltas)]


def box_deltas(proposal: Box3D, target: Box3D) -> np.ndarray:
    """Inverse of :func:`refine_box`: the deltas that turn ``proposal`` into ``target``."""
    half_diag = proposal.diagonal / 2.0
    return np.array([
        (target.cx - proposal.cx) / half_diag,
        (target.cy - proposal.cy) / half_diag,
        (target.cz - proposal.cz) / half_diag,
        math.log(target.l / proposal.l),
        math.log(target.w / proposal.w),
        math.log(target.h / proposal.h),
        math.sin(target.yaw) - math.sin(proposal.yaw),
        math.cos(target.yaw) - math.cos(proposal.yaw),
    ])
