"""Inference-time weight transforms and a numerical equivalence check.

* :func:`fold_store` folds every ``X.bn`` into its sibling ``X.conv`` or
  ``X.linear`` weights. Adjacency comes from the names alone.
* :func:`convert_pipeline_precision` rounds weights to binary16. Batch-norm
  parameters stay fp32.
* :func:`equivalence_check` runs two detectors over the same scenes and
  reports how far their final detections drift apart.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from .boxes import Box3D
from .errors import PrecisionOverflowError, ShapeError
from .matching import rotated_iou_bev
from .tensor import Precision, Tensor, quantize_fp16

BN_PARAMS = ("gamma", "beta", "mean", "var")
FOLDABLE = ("conv", "linear")


def fold_batchnorm(weight, bias, gamma, beta, mean, var, eps: float = 1e-3):
    """Return ``(W', b')`` with ``affine(x; W', b') == bn(affine(x; W, b))``.

    Works for conv weights ``[Co, Ci, kh, kw]`` and linear weights ``[Co, Ci]``;
    the output channel is always axis 0. Arrays or tensors are accepted and
    float64 arrays are returned.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    arr = [np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float64)
           for v in (weight, bias, gamma, beta, mean, var)]
    w, b, g, bt, mu, vr = arr
    c = w.shape[0]
    for name, v in zip(("bias", "gamma", "beta", "mean", "var"), (b, g, bt, mu, vr)):
        if v.shape != (c,):
            raise ShapeError(f"{name} has shape {v.shape}, expected ({c},)", "C_out")
    s = g / np.sqrt(vr + eps)
    w_f = w * s.reshape((c,) + (1,) * (w.ndim - 1))
    b_f = s * (b - mu) + bt
    return w_f, b_f


def foldable_pairs(store) -> List[Tuple[str, str]]:
    """``(weight prefix, bn prefix)`` pairs such as ``("a.b.conv", "a.b.bn")``."""
    pairs = []
    for name in store:
        if not name.endswith(".bn.gamma"):
            continue
        base = name[: -len(".bn.gamma")]
        for kind in FOLDABLE:
            if f"{base}.{kind}.weight" in store:
                pairs.append((f"{base}.{kind}", f"{base}.bn"))
                break
    return pairs


def fold_store(store, eps: float = 1e-3) -> dict:
    """New store with every annotated affine->BN pair folded and the BN entries dropped."""
    out = dict(store)
    for affine, bn in foldable_pairs(store):
        w = store[f"{affine}.weight"]
        w_f, b_f = fold_batchnorm(w, store[f"{affine}.bias"],
                                  *(store[f"{bn}.{p}"] for p in BN_PARAMS), eps=eps)
        wt, bt = Tensor(w_f), Tensor(b_f)
        if w.precision is Precision.FP16E:
            wt, bt = quantize_fp16(wt), quantize_fp16(bt)
        out[f"{affine}.weight"], out[f"{affine}.bias"] = wt, bt
        for p in BN_PARAMS:
            del out[f"{bn}.{p}"]
    return out


def keeps_fp32(name: str) -> bool:
    return ".bn." in name


def convert_pipeline_precision(store, target: Precision) -> dict:
    """Return a new store in ``target`` precision; the input store is untouched."""
    if target is Precision.FP32:
        return {k: (Tensor(v.data) if v.precision is not Precision.FP32 else v)
                for k, v in store.items()}
    out, overflow = {}, []
    for name, t in store.items():
        if keeps_fp32(name):
            out[name] = t
            continue
        q = quantize_fp16(t)
        if np.isinf(q.data).any() and not np.isinf(t.data).any():
            overflow.append(name)
        out[name] = q
    if overflow:
        raise PrecisionOverflowError(overflow)
    return out


# ---------------------------------------------------------------------------
# Equivalence check
# ---------------------------------------------------------------------------

METRICS = ("score", "center", "size", "yaw")


@dataclass
class EquivalenceReport:
    tolerance: float
    max_abs: Dict[str, float] = field(default_factory=lambda: {m: 0.0 for m in METRICS})
    max_rel: Dict[str, float] = field(default_factory=lambda: {m: 0.0 for m in METRICS})
    worst_scene: Dict[str, str] = field(default_factory=lambda: {m: "" for m in METRICS})
    count_a: int = 0
    count_b: int = 0
    unmatched: int = 0
    scenes: int = 0

    @property
    def max_abs_diff(self) -> float:
        return max(self.max_abs.values())

    @property
    def max_rel_diff(self) -> float:
        return max(self.max_rel.values())

    @property
    def worst(self) -> str:
        return max(METRICS, key=lambda m: self.max_rel[m])

    @property
    def passed(self) -> bool:
        return self.max_rel_diff <= self.tolerance

    def update(self, metric: str, a: float, b: float, scene_id: str) -> None:
        diff = abs(a - b)
        rel = diff / max(abs(a), abs(b), 1.0)
        self.max_abs[metric] = max(self.max_abs[metric], diff)
        if rel > self.max_rel[metric] or not self.worst_scene[metric]:
            self.worst_scene[metric] = scene_id
            self.max_rel[metric] = rel

    def to_csv(self) -> str:
        rows = ["tensor,metric,value"]
        for m in METRICS:
            rows.append(f"{m},max_abs,{self.max_abs[m]!r}")
            rows.append(f"{m},max_rel,{self.max_rel[m]!r}")
        rows.append(f"detections,count_a,{self.count_a}")
        rows.append(f"detections,count_b,{self.count_b}")
        rows.append(f"detections,unmatched,{self.unmatched}")
        rows.append(f"overall,max_abs,{self.max_abs_diff!r}")
        rows.append(f"overall,max_rel,{self.max_rel_diff!r}")
        rows.append(f"overall,tolerance,{self.tolerance!r}")
        rows.append(f"overall,pass,{int(self.passed)}")
        return "\n".join(rows) + "\n"

    def to_text(self) -> str:
        lines = [f"{'tensor':<10}{'max_abs':>14}{'max_rel':>14}  worst scene"]
        for m in METRICS:
            lines.append(f"{m:<10}{self.max_abs[m]:>14.3e}{self.max_rel[m]:>14.3e}  "
                         f"{self.worst_scene[m] or '-'}")
        lines.append(f"detections: {self.count_a} vs {self.count_b} "
                     f"({self.unmatched} unmatched) over {self.scenes} scene(s)")
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"worst offender: {self.worst}; max rel diff {self.max_rel_diff:.3e} "
                     f"vs tolerance {self.tolerance:.1e}: {verdict}")
        return "\n".join(lines) + "\n"


def align_detections(a: Sequence[Box3D], b: Sequence[Box3D]) -> List[Tuple[int, int]]:
    """Greedy pairing by descending BEV IoU (positive IoU only, same class)."""
    cand = []
    for i, da in enumerate(a):
        for j, db in enumerate(b):
            if da.class_id != db.class_id:
                continue
            iou = rotated_iou_bev(da, db)
            if iou > 0:
                cand.append((-iou, i, j))
    cand.sort()
    used_a, used_b, pairs = set(), set(), []
    for _, i, j in cand:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j))
    return sorted(pairs)


def _yaw_diff(a: float, b: float) -> float:
    d = abs(a - b) % (2 * math.pi)
    return min(d, 2 * math.pi - d)


def compare_detections(report: EquivalenceReport, scene_id: str, a: Sequence[Box3D],
                       b: Sequence[Box3D]) -> None:
    pairs = align_detections(a, b)
    report.scenes += 1
    report.count_a += len(a)
    report.count_b += len(b)
    report.unmatched += len(a) + len(b) - 2 * len(pairs)
    for i, j in pairs:
        da, db = a[i], b[j]
        report.update("score", da.score, db.score, scene_id)
        for va, vb in ((da.cx, db.cx), (da.cy, db.cy), (da.cz, db.cz)):
            report.update("center", va, vb, scene_id)
        for va, vb in ((da.l, db.l), (da.w, db.w), (da.h, db.h)):
            report.update("size", va, vb, scene_id)
        d = _yaw_diff(da.yaw, db.yaw)
        report.update("yaw", 0.0, d, scene_id)


def equivalence_check(detector_a: Callable, detector_b: Callable, scenes: Sequence,
                      tolerance: float = 1e-5) -> EquivalenceReport:
    """Run both detectors on every scene and collect the worst detection drift.

    ``detector_a``/``detector_b`` map one scene (whatever the callers agree on,
    usually a manifest entry) to a list of boxes. ``scenes`` holds
    ``(scene_id, scene)`` pairs.
    """
    report = EquivalenceReport(tolerance)
    for scene_id, scene in scenes:
        compare_detections(report, scene_id, detector_a(scene), detector_b(scene))
    return report
