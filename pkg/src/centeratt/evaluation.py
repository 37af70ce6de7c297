"""Average precision and heading-weighted average precision (APH).

Each true positive counts ``1 - dyaw / pi`` towards the heading-weighted
precision numerator, with ``dyaw`` the absolute heading error in ``[0, pi]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from .boxes import CLASS_NAMES, NUM_CLASSES, Box3D, wrap_angle
from .matching import box_iou


@dataclass(frozen=True)
class EvalConfig:
    iou_vehicle: float = 0.7
    iou_pedestrian: float = 0.5
    iou_cyclist: float = 0.5
    iou_mode: str = "bev"

    def __post_init__(self):
        for t in self.thresholds.values():
            if not 0.0 < t <= 1.0:
                raise ValueError(f"IoU thresholds must be in (0, 1], got {t}")

    @property
    def thresholds(self) -> Dict[int, float]:
        return {0: self.iou_vehicle, 1: self.iou_pedestrian, 2: self.iou_cyclist}


@dataclass(frozen=True)
class Match:
    det: Box3D
    gt: Optional[int]
    iou: float
    dyaw: float

    @property
    def is_tp(self) -> bool:
        return self.gt is not None


def heading_error(a: float, b: float) -> float:
    return abs(wrap_angle(a - b))


def match_detections(dets: Sequence[Box3D], gts: Sequence[Box3D],
                     iou_threshold: Union[float, Mapping[int, float]],
                     iou_mode: str = "bev") -> List[Match]:
    """Greedy one-to-one matching in descending score order.

    Each detection takes the unmatched same-class ground truth with the highest
    IoU, provided it reaches the threshold.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    taken = [False] * len(gts)
    out = []
    for i in order:
        d = dets[i]
        thr = iou_threshold[d.class_id] if isinstance(iou_threshold, Mapping) else iou_threshold
        best_j, best_iou = None, -1.0
        for j, g in enumerate(gts):
            if taken[j] or g.class_id != d.class_id:
                continue
            iou = box_iou(d, g, iou_mode)
            if iou > best_iou:
                best_j, best_iou = j, iou
        if best_j is not None and best_iou >= thr:
            taken[best_j] = True
            out.append(Match(d, best_j, best_iou, heading_error(d.yaw, gts[best_j].yaw)))
        else:
            out.append(Match(d, None, max(best_iou, 0.0), 0.0))
    return out


@dataclass
class EvalResult:
    ap: Dict[int, float] = field(default_factory=dict)
    aph: Dict[int, float] = field(default_factory=dict)
    excluded: List[int] = field(default_factory=list)

    @property
    def mAP(self) -> float:
        return float(np.mean(list(self.ap.values()))) if self.ap else 0.0

    @property
    def mAPH(self) -> float:
        return float(np.mean(list(self.aph.values()))) if self.aph else 0.0

    def to_csv(self) -> str:
        lines = ["class,ap,aph"]
        for c in sorted(self.ap):
            lines.append(f"{CLASS_NAMES[c]},{100 * self.ap[c]:.1f},{100 * self.aph[c]:.1f}")
        lines.append("mAP,mAPH")
        lines.append(f"{100 * self.mAP:.1f},{100 * self.mAPH:.1f}")
        return "\n".join(lines) + "\n"


def _area_under(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-point interpolated area under a precision/recall curve."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def ap_aph_for_class(matches: Sequence[Match], num_gt: int):
    if num_gt <= 0:
        raise ValueError("need at least one ground-truth box")
    if not matches:
        return 0.0, 0.0
    order = sorted(range(len(matches)), key=lambda i: -matches[i].det.score)
    tp = np.array([matches[i].is_tp for i in order], dtype=np.float64)
    weight = np.array([(1.0 - matches[i].dyaw / math.pi) if matches[i].is_tp else 0.0
                       for i in order])
    cum_tp = np.cumsum(tp)
    cum_h = np.cumsum(weight)
    seen = np.arange(1, len(order) + 1, dtype=np.float64)
    recall = cum_tp / num_gt
    ap = _area_under(recall, cum_tp / seen)
    aph = _area_under(recall, cum_h / seen)
    return ap, aph


def compute_ap_aph(matches: Sequence[Match], num_gt: Mapping[int, int],
                   num_classes: int = NUM_CLASSES) -> EvalResult:
    """Per-class AP/APH over matches pooled from all scenes.

    Classes without ground truth are left out of the means and listed in
    ``excluded``.
    """
    result = EvalResult()
    for c in range(num_classes):
        n = num_gt.get(c, 0)
        if n == 0:
            result.excluded.append(c)
            continue
        ap, aph = ap_aph_for_class([m for m in matches if m.det.class_id == c], n)
        result.ap[c] = ap
        result.aph[c] = aph
    return result


def evaluate(detections: Sequence[Sequence[Box3D]], ground_truth: Sequence[Sequence[Box3D]],
             cfg: EvalConfig = EvalConfig()) -> EvalResult:
    """Match scene by scene, then pool everything into one curve per class."""
    if len(detections) != len(ground_truth):
        raise ValueError("need one detection list per scene")
    matches = []
    num_gt: Dict[int, int] = {}
    for dets, gts in zip(detections, ground_truth):
        matches.extend(match_detections(dets, gts, cfg.thresholds, cfg.iou_mode))
        for g in gts:
            num_gt[g.class_id] = num_gt.get(g.class_id, 0) + 1
    return compute_ap_aph(matches, num_gt)
