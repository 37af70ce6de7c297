"""End-to-end detector split into the five timed stages.

Stages (each a method taking the previous stage's output):

1. ``load_data``    read the point file and labels of one scene
2. ``preprocess``   format points (and voxelize, if configured to happen here)
3. ``collate``      assemble the batch record
4. ``load_to_gpu``  precision conversion and contiguous layout of the inputs
5. ``model``        voxelize (by default), backbone or oracle, decode, second stage

Ablation variants differ only in their second stage, ROI scales and weights.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .backbone import FeatureMap, fpn_forward, head_forward, init_backbone_weights, oracle_forward
from .boxes import Box3D
from .center_head import decode_boxes, decode_peaks, split_head
from .config import PipelineConfig
from .errors import ConfigError, MissingWeightsError
from .optimize import convert_pipeline_precision, fold_store
from .roi_attention import (baseline_forward, centeratt_forward, extract_roi_features,
                            fuse_scores, init_second_stage_weights)
from .refine import refine_boxes
from .scene import ManifestEntry, Scene, load_scene
from .tensor import Precision, Tensor, quantize_fp16
from .voxelizer import VoxelGrid, bev_encode, voxelize

SECOND_STAGES = ("none", "baseline", "centeratt")


@dataclass(frozen=True)
class Variant:
    name: str
    second_stage: str = "centeratt"
    fpn: bool = False
    precision: str = "fp32"
    fold_bn: bool = False

    def __post_init__(self):
        if self.second_stage not in SECOND_STAGES:
            raise ConfigError(f"second_stage must be one of {SECOND_STAGES}")
        if self.precision not in ("fp32", "fp16"):
            raise ConfigError(f"precision must be fp32 or fp16, got {self.precision!r}")

    @property
    def tensor_precision(self) -> Precision:
        return Precision.FP16E if self.precision == "fp16" else Precision.FP32


# The four rows of the second-stage / neck ablation grid.
ABLATION_VARIANTS = (
    Variant("baseline", "baseline", fpn=False),
    Variant("centeratt", "centeratt", fpn=False),
    Variant("fpn", "baseline", fpn=True),
    Variant("centeratt+fpn", "centeratt", fpn=True),
)


def variant_by_name(name: str) -> Variant:
    for v in ABLATION_VARIANTS:
        if v.name == name:
            return v
    names = ", ".join(v.name for v in ABLATION_VARIANTS)
    raise ConfigError(f"unknown variant {name!r}; choose from {names}")


def scale_sets(cfg: PipelineConfig):
    return ((1,), tuple(cfg.backbone.fpn_scales))


def oracle_weights(cfg: PipelineConfig) -> dict:
    """Seeded second-stage weights used when oracle mode runs without a weight file."""
    rng = np.random.default_rng(cfg.seed)
    return init_second_stage_weights(cfg.roi, cfg.attention, cfg.head.head_channels, rng,
                                     scale_sets=scale_sets(cfg))


def init_pipeline_weights(cfg: PipelineConfig, seed: Optional[int] = None) -> dict:
    """Random learned-mode weights covering every ablation variant."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    store = init_backbone_weights(cfg.backbone, rng, cfg.head)
    store.update(init_second_stage_weights(cfg.roi, cfg.attention, cfg.backbone.out_channels,
                                           rng, scale_sets=scale_sets(cfg)))
    return store


@dataclass
class Batch:
    scene_ids: List[str]
    points: List[np.ndarray]
    boxes: List[tuple]
    grids: List[Optional[VoxelGrid]]
    bev: List[Optional[Tensor]] = None


class Pipeline:
    """One configured detector variant.

    ``store`` is required in learned mode. Oracle mode falls back to
    :func:`oracle_weights` when a second stage needs weights.
    """

    def __init__(self, cfg: PipelineConfig, variant: Variant = Variant("default"),
                 store: Optional[dict] = None, score_threshold: Optional[float] = None):
        if variant.precision == "fp32" and cfg.precision == "fp16":
            variant = replace(variant, precision="fp16")
        self.cfg = cfg
        self.variant = variant
        self.precision = variant.tensor_precision
        self.score_threshold = (cfg.head.score_threshold if score_threshold is None
                                else float(score_threshold))
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ConfigError("score threshold must be in [0, 1]")
        # proposals keep score >= t; the final filter is strict, so t = 1 keeps nothing
        self.head_cfg = replace(cfg.head,
                                score_threshold=min(max(self.score_threshold, 1e-12), 1 - 1e-12))
        scales = tuple(cfg.backbone.fpn_scales) if variant.fpn else (1,)
        self.roi_cfg = replace(cfg.roi, scales=scales)
        if store is None:
            if cfg.mode == "learned":
                raise MissingWeightsError("learned mode needs a weight file (or use oracle mode)")
            store = oracle_weights(cfg) if variant.second_stage != "none" else {}
        if variant.fold_bn:
            store = fold_store(store)
        self.store = convert_pipeline_precision(store, self.precision)

    # -- stages ---------------------------------------------------------------

    def load_data(self, entry: ManifestEntry) -> tuple:
        return entry.scene_id, load_scene(entry)

    def preprocess(self, item) -> tuple:
        scene_id, scene = item
        pts = np.ascontiguousarray(scene.points, dtype=np.float32)
        grid = None
        if self.cfg.voxelize_stage == "preprocess":
            grid = voxelize(pts, self.cfg.voxel, self.cfg.workers)
        return scene_id, pts, scene.boxes, grid

    def collate(self, items) -> Batch:
        if isinstance(items, tuple):
            items = [items]
        return Batch([i[0] for i in items], [i[1] for i in items], [i[2] for i in items],
                     [i[3] for i in items])

    def load_to_gpu(self, batch: Batch) -> Batch:
        bev = []
        for grid in batch.grids:
            if grid is None:
                bev.append(None)
                continue
            t = bev_encode(grid)
            bev.append(quantize_fp16(t) if self.precision is Precision.FP16E else t)
        points = [np.array(p, dtype=np.float32, order="C", copy=True) for p in batch.points]
        return Batch(batch.scene_ids, points, batch.boxes, batch.grids, bev)

    def model(self, batch: Batch) -> List[List[Box3D]]:
        return [self._detect_one(pts, boxes, bev)
                for pts, boxes, bev in zip(batch.points, batch.boxes, batch.bev)]

    STAGES = (("load data", "load_data"), ("preprocess", "preprocess"), ("collate", "collate"),
              ("load to GPU", "load_to_gpu"), ("model", "model"))

    def stage_functions(self):
        """``(stage name, bound method)`` pairs in execution order."""
        return [(label, getattr(self, attr)) for label, attr in self.STAGES]

    # -- model internals ------------------------------------------------------

    def _cast(self, t: Tensor) -> Tensor:
        return quantize_fp16(t) if self.precision is Precision.FP16E else t

    def _features(self, points, boxes, bev):
        """Return ``(head tensor, feature maps for ROI pooling)``."""
        if bev is None:
            bev = self._cast(bev_encode(voxelize(points, self.cfg.voxel, self.cfg.workers)))
        if self.cfg.mode == "oracle":
            maps = [FeatureMap(self._cast(fm.tensor), fm.stride)
                    for fm in oracle_forward(boxes, self.cfg.backbone, self.cfg.head,
                                             self.cfg.voxel)]
            return maps[0].tensor, maps
        maps = fpn_forward(bev, self.cfg.backbone, self.store)
        ny, nx = self.cfg.voxel.dims[1], self.cfg.voxel.dims[0]
        head = head_forward(maps[0], self.store, self.cfg.head)
        head = Tensor(head.data[:, :ny, :nx], head.precision)
        return head, maps

    def _detect_one(self, points, boxes, bev) -> List[Box3D]:
        head, maps = self._features(points, boxes, bev)
        heat, reg = split_head(head)
        proposals = decode_boxes(decode_peaks(heat, self.head_cfg), reg, self.cfg.voxel)
        if proposals and self.variant.second_stage != "none":
            roi = extract_roi_features(proposals, maps, self.roi_cfg, self.store, self.cfg.voxel)
            if self.variant.second_stage == "centeratt":
                scores, deltas = centeratt_forward(roi, proposals, self.cfg.attention,
                                                   self.store, self.cfg.voxel)
            else:
                scores, deltas = baseline_forward(roi, self.store)
            fused = fuse_scores([p.score for p in proposals], scores.max(axis=1))
            refined = refine_boxes(proposals, deltas)
            dets = [b.with_score(float(s)) for b, s in zip(refined, fused)]
        else:
            dets = list(proposals)
        dets = [d for d in dets if d.score > self.score_threshold]
        order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
        return [dets[i] for i in order]

    # -- convenience ----------------------------------------------------------

    def run_entry(self, entry: ManifestEntry) -> List[Box3D]:
        out = entry
        for _, fn in self.stage_functions():
            out = fn(out)
        return out[0]

    __call__ = run_entry

    def run_scene(self, scene: Scene, scene_id: str = "scene") -> List[Box3D]:
        """Run stages 2-5 on an in-memory scene."""
        out = (scene_id, scene)
        for _, fn in self.stage_functions()[1:]:
            out = fn(out)
        return out[0]

    def run(self, entries: Sequence[ManifestEntry]) -> Dict[str, List[Box3D]]:
        return {e.scene_id: self.run_entry(e) for e in entries}
