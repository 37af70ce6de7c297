"""Second stage: face-centre ROI pooling, the CenterAtt attention head, the
original MLP-only head and score fusion. Box refinement lives in ``refine``.

Weight names::

    roi.s{scales}.mlp.layer{k}.linear.{weight,bias}    e.g. roi.s1_2_4.mlp.layer0
    roi.s{scales}.mlp.layer{k}.bn.{gamma,beta,mean,var}  (absent once folded)
    centeratt.layer{l}.{q,k,v,out,ffn1,ffn2}.{weight,bias}
    centeratt.layer{l}.norm{1,2}.{weight,bias}
    second.cls.{weight,bias}                            K sigmoid outputs
    second.reg.{weight,bias}                            8 refinement deltas

The ROI MLP input width depends on the pooled scales, so each scale set gets
its own MLP and one store can serve single-scale and FPN variants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .backbone import BN_EPS, FeatureMap, random_bn
from .boxes import NUM_CLASSES, Box3D
from .errors import MissingWeightsError, ShapeError
from .refine import NUM_DELTAS
from .tensor import (AttentionConfig, AttentionTrace, AttentionWeights, Precision, Tensor,
                     batch_norm, bilinear_sample_many, mlp_forward, multi_head_self_attention,
                     round_fp16, sine_position_embedding_many)
from .voxelizer import VoxelConfig

NUM_ROI_POINTS = 5


@dataclass(frozen=True)
class RoiConfig:
    scales: Tuple[int, ...] = (1,)
    mlp_dims: Tuple[int, ...] = (256,)
    model_dim: int = 128


def face_centers(box: Box3D) -> np.ndarray:
    """``(5, 2)`` BEV points: centre, then front, back, left and right face centres."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    local = np.array([[0.0, 0.0], [box.l / 2, 0.0], [-box.l / 2, 0.0],
                      [0.0, box.w / 2], [0.0, -box.w / 2]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([box.cx, box.cy])


def pool_roi_points(proposals: Sequence[Box3D], feature_maps: Sequence[FeatureMap],
                    scales: Sequence[int], vcfg: VoxelConfig = VoxelConfig()) -> Tensor:
    """Bilinear features at the 5 face points on every scale: ``[N, 5 * |scales| * C]``.

    Layout is point-major, then scale, then channel.
    """
    by_stride = {fm.stride: fm for fm in feature_maps}
    missing = [s for s in scales if s not in by_stride]
    if missing:
        raise ShapeError(f"no feature map for stride(s) {missing}", "scales")
    precision = by_stride[scales[0]].tensor.precision
    n = len(proposals)
    chans = [by_stride[s].tensor.shape[0] for s in scales]
    width = NUM_ROI_POINTS * sum(chans)
    if n == 0:
        return Tensor(np.zeros((0, width)), precision)
    pts = np.stack([face_centers(b) for b in proposals])  # (N, 5, 2)
    vx, vy, _ = vcfg.voxel_size
    per_point = []
    for p in range(NUM_ROI_POINTS):
        for s in scales:
            # integer sample coordinates sit on cell centres
            xs = (pts[:, p, 0] - vcfg.x_range[0]) / (vx * s) - 0.5
            ys = (pts[:, p, 1] - vcfg.y_range[0]) / (vy * s) - 0.5
            per_point.append(bilinear_sample_many(by_stride[s].tensor, xs, ys))
    pooled = np.concatenate(per_point, axis=1).astype(np.float32)
    if precision is Precision.FP16E:
        pooled = round_fp16(pooled)
    return Tensor(pooled, precision)


def _get(store, name):
    try:
        return store[name]
    except KeyError:
        raise MissingWeightsError(f"missing weight {name}") from None


def linear_block(x: Tensor, store, prefix: str, activation: str = "relu") -> Tensor:
    """linear -> (batch norm over features, unless folded) -> activation."""
    y = mlp_forward(x, [(_get(store, f"{prefix}.linear.weight"),
                         _get(store, f"{prefix}.linear.bias"), "none")])
    if f"{prefix}.bn.gamma" in store:
        yt = batch_norm(Tensor(y.data.T, y.precision), store[f"{prefix}.bn.gamma"],
                        store[f"{prefix}.bn.beta"], store[f"{prefix}.bn.mean"],
                        store[f"{prefix}.bn.var"], BN_EPS)
        y = Tensor(yt.data.T, yt.precision)
    if activation == "relu":
        y = Tensor(np.maximum(y.data, 0), y.precision)
    return y


def mlp_prefix(scales: Sequence[int]) -> str:
    return "roi.s" + "_".join(str(s) for s in scales) + ".mlp"


def roi_mlp(pooled: Tensor, store, cfg: RoiConfig) -> Tensor:
    x = pooled
    prefix = mlp_prefix(cfg.scales)
    for k in range(len(cfg.mlp_dims) + 1):
        x = linear_block(x, store, f"{prefix}.layer{k}")
    if x.shape[1] != cfg.model_dim and x.shape[0]:
        raise ShapeError(f"ROI MLP produced width {x.shape[1]}, expected {cfg.model_dim}",
                         "model_dim")
    return x


def extract_roi_features(proposals: Sequence[Box3D], feature_maps: Sequence[FeatureMap],
                         cfg: RoiConfig, store, vcfg: VoxelConfig = VoxelConfig()) -> Tensor:
    """Pooled face-point features passed through the ROI MLP: ``[N, model_dim]``."""
    return roi_mlp(pool_roi_points(proposals, feature_maps, cfg.scales, vcfg), store, cfg)


def normalized_centers(proposals: Sequence[Box3D], vcfg: VoxelConfig) -> np.ndarray:
    xs = np.array([(b.cx - vcfg.x_range[0]) / (vcfg.x_range[1] - vcfg.x_range[0])
                   for b in proposals])
    ys = np.array([(b.cy - vcfg.y_range[0]) / (vcfg.y_range[1] - vcfg.y_range[0])
                   for b in proposals])
    return np.stack([xs, ys], axis=1).reshape(-1, 2)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def _heads(x: Tensor, store) -> Tuple[np.ndarray, np.ndarray]:
    cls = mlp_forward(x, [(_get(store, "second.cls.weight"), _get(store, "second.cls.bias"),
                           "none")])
    reg = mlp_forward(x, [(_get(store, "second.reg.weight"), _get(store, "second.reg.bias"),
                           "none")])
    scores = _sigmoid(cls.data.astype(np.float64))
    if x.precision is Precision.FP16E:
        scores = round_fp16(scores).astype(np.float64)
    return scores, reg.data.astype(np.float64)


def centeratt_forward(roi_features: Tensor, proposals: Sequence[Box3D], cfg: AttentionConfig,
                      store, vcfg: VoxelConfig = VoxelConfig(),
                      trace: Optional[AttentionTrace] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Attention over all proposals, then per-class sigmoid scores and deltas.

    Returns ``(scores [N, K], deltas [N, 8])``.
    """
    n = len(proposals)
    if roi_features.shape[0] != n or n < 1:
        raise ShapeError(f"{roi_features.shape[0]} ROI features for {n} proposals", "N")
    if cfg.pe_dim != roi_features.shape[1]:
        raise ShapeError(f"pe_dim {cfg.pe_dim} != ROI feature width {roi_features.shape[1]}",
                         "pe_dim")
    pe = sine_position_embedding_many(normalized_centers(proposals, vcfg), cfg)
    tokens = (roi_features.data.astype(np.float64) + pe).astype(np.float32)
    if roi_features.precision is Precision.FP16E:
        tokens = round_fp16(tokens)
    x = Tensor(tokens, roi_features.precision)
    for layer in range(cfg.num_layers):
        weights = AttentionWeights.from_store(store, f"centeratt.layer{layer}")
        x = multi_head_self_attention(x, cfg, weights, trace)
    return _heads(x, store)


def baseline_forward(roi_features: Tensor, store) -> Tuple[np.ndarray, np.ndarray]:
    """Original two-stage head: each proposal scored and refined on its own."""
    return _heads(roi_features, store)


def fuse_scores(stage1, stage2):
    """Geometric mean of first- and second-stage confidences."""
    return np.sqrt(np.asarray(stage1, dtype=np.float64) * np.asarray(stage2, dtype=np.float64))


def init_roi_mlp_weights(scales: Sequence[int], roi_cfg: RoiConfig, in_channels: int,
                         rng: np.random.Generator) -> dict:
    store = {}
    dims = [NUM_ROI_POINTS * len(scales) * in_channels, *roi_cfg.mlp_dims, roi_cfg.model_dim]
    prefix = mlp_prefix(scales)
    for k, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        bound = math.sqrt(6.0 / d_in)
        store[f"{prefix}.layer{k}.linear.weight"] = Tensor(rng.uniform(-bound, bound, (d_out, d_in)))
        store[f"{prefix}.layer{k}.linear.bias"] = Tensor(rng.uniform(-0.1, 0.1, d_out))
        store.update(random_bn(rng, d_out, f"{prefix}.layer{k}.bn"))
    return store


def init_second_stage_weights(roi_cfg: RoiConfig, att_cfg: AttentionConfig, in_channels: int,
                              rng: np.random.Generator, zero_regression: bool = True,
                              scale_sets: Optional[Sequence[Sequence[int]]] = None) -> dict:
    """Random ROI-MLP/attention/classifier weights.

    One ROI MLP is created per entry of ``scale_sets`` (default: just
    ``roi_cfg.scales``). With ``zero_regression`` the refinement head starts
    at zero, so untrained weights leave proposals unchanged.
    """
    store = {}
    for scales in scale_sets or (roi_cfg.scales,):
        store.update(init_roi_mlp_weights(tuple(scales), roi_cfg, in_channels, rng))
    for layer in range(att_cfg.num_layers):
        store.update(AttentionWeights.random(att_cfg, rng).to_store(f"centeratt.layer{layer}"))
    d = roi_cfg.model_dim
    bound = 1.0 / math.sqrt(d)
    store["second.cls.weight"] = Tensor(rng.uniform(-bound, bound, (NUM_CLASSES, d)))
    store["second.cls.bias"] = Tensor(np.full(NUM_CLASSES, 1.0))
    if zero_regression:
        store["second.reg.weight"] = Tensor(np.zeros((NUM_DELTAS, d)))
    else:
        store["second.reg.weight"] = Tensor(rng.uniform(-0.01, 0.01, (NUM_DELTAS, d)))
    store["second.reg.bias"] = Tensor(np.zeros(NUM_DELTAS))
    return store
