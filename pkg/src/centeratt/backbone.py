"""Dense 2D BEV backbone with a top-down FPN neck, plus the oracle feature source.

Stage ``i`` runs at stride ``2**i``. Stage 0 keeps the stem resolution; every
later stage opens with a stride-2 block. The neck keeps the deepest stage
as-is and adds 1x1 laterals of shallower stages on the way back up::

    P[last] = C[last]
    P[i]    = lateral_i(C[i]) + upsample2(P[i + 1])

Weight names::

    backbone.stem.{weight,bias}
    backbone.stage{i}.block{j}.conv.{weight,bias}
    backbone.stage{i}.block{j}.bn.{gamma,beta,mean,var}     (absent once folded)
    fpn.lateral{stride}.{weight,bias}
    head.conv.{weight,bias}
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .center_head import HeadConfig, encode_targets
from .errors import ConfigError, MissingWeightsError
from .tensor import Precision, Tensor, batch_norm, conv2d, relu, round_fp16
from .voxelizer import BEV_CHANNELS, VoxelConfig

BN_EPS = 1e-3


@dataclass(frozen=True, eq=False)
class FeatureMap:
    tensor: Tensor
    stride: int


@dataclass(frozen=True)
class BackboneConfig:
    channels: Tuple[int, ...] = (8, 16, 32)
    blocks: Tuple[int, ...] = (1, 1, 1)
    fpn_scales: Tuple[int, ...] = (1, 2, 4)
    mode: str = "learned"
    upsample: str = "nearest"
    in_channels: int = BEV_CHANNELS

    def __post_init__(self):
        if len(self.channels) != len(self.blocks) or not self.channels:
            raise ConfigError("channels and blocks must list one entry per stage")
        if any(b < 1 for b in self.blocks[1:]) or self.blocks[0] < 0:
            raise ConfigError("stages after the first need at least one (downsampling) block")
        if list(self.fpn_scales) != sorted(set(self.fpn_scales)) or 1 not in self.fpn_scales:
            raise ConfigError(f"fpn_scales must be ascending and include 1: {self.fpn_scales}")
        bad = [s for s in self.fpn_scales if s not in self.strides]
        if bad:
            raise ConfigError(f"fpn scale(s) {bad} not produced by {len(self.blocks)} stages")
        if self.mode not in ("learned", "oracle"):
            raise ConfigError(f"mode must be learned or oracle, got {self.mode!r}")
        if self.upsample not in ("nearest", "bilinear"):
            raise ConfigError(f"upsample must be nearest or bilinear, got {self.upsample!r}")

    @property
    def strides(self) -> Tuple[int, ...]:
        return tuple(2 ** i for i in range(len(self.blocks)))

    @property
    def out_channels(self) -> int:
        return self.channels[-1]


def padded_dims(h: int, w: int, multiple: int) -> Tuple[int, int]:
    return (math.ceil(h / multiple) * multiple, math.ceil(w / multiple) * multiple)


def pad_to(t: Tensor, multiple: int) -> Tensor:
    c, h, w = t.shape
    ph, pw = padded_dims(h, w, multiple)
    if (ph, pw) == (h, w):
        return t
    out = np.zeros((c, ph, pw), dtype=np.float32)
    out[:, :h, :w] = t.data
    return Tensor(out, t.precision)


def _get(store, name):
    try:
        return store[name]
    except KeyError:
        raise MissingWeightsError(f"missing weight {name}") from None


def conv_block(x: Tensor, store, prefix: str, stride: int) -> Tensor:
    """conv3x3 -> (batch norm, unless folded away) -> relu."""
    y = conv2d(x, _get(store, f"{prefix}.conv.weight"), _get(store, f"{prefix}.conv.bias"),
               stride=stride, padding=1)
    if f"{prefix}.bn.gamma" in store:
        y = batch_norm(y, store[f"{prefix}.bn.gamma"], store[f"{prefix}.bn.beta"],
                       store[f"{prefix}.bn.mean"], store[f"{prefix}.bn.var"], BN_EPS)
    return relu(y)


def upsample2(t: Tensor, mode: str = "nearest") -> Tensor:
    if mode == "nearest":
        return Tensor(t.data.repeat(2, axis=1).repeat(2, axis=2), t.precision)
    c, h, w = t.shape
    # align-corners=False bilinear, clamped at the border
    src_y = np.clip((np.arange(2 * h) + 0.5) / 2 - 0.5, 0, h - 1)
    src_x = np.clip((np.arange(2 * w) + 0.5) / 2 - 0.5, 0, w - 1)
    y0 = np.floor(src_y).astype(int)
    x0 = np.floor(src_x).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (src_y - y0)[None, :, None]
    fx = (src_x - x0)[None, None, :]
    d = t.data.astype(np.float64)
    top = d[:, y0][:, :, x0] * (1 - fx) + d[:, y0][:, :, x1] * fx
    bot = d[:, y1][:, :, x0] * (1 - fx) + d[:, y1][:, :, x1] * fx
    out = (top * (1 - fy) + bot * fy).astype(np.float32)
    if t.precision is Precision.FP16E:
        out = round_fp16(out)
    return Tensor(out, t.precision)


def _add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data.astype(np.float64) + b.data
    out = out.astype(np.float32)
    if a.precision is Precision.FP16E:
        out = round_fp16(out)
    return Tensor(out, a.precision)


def stage_outputs(bev: Tensor, cfg: BackboneConfig, store) -> List[Tensor]:
    x = pad_to(bev, cfg.strides[-1])
    x = conv2d(x, _get(store, "backbone.stem.weight"), _get(store, "backbone.stem.bias"),
               stride=1, padding=1)
    outs = []
    for i, nblocks in enumerate(cfg.blocks):
        for j in range(nblocks):
            stride = 2 if (i > 0 and j == 0) else 1
            x = conv_block(x, store, f"backbone.stage{i}.block{j}", stride)
        outs.append(x)
    return outs


def fpn_forward(bev: Tensor, cfg: BackboneConfig, store) -> List[FeatureMap]:
    """Top-down FPN maps, one per stride in ``cfg.fpn_scales``, ascending."""
    stages = stage_outputs(bev, cfg, store)
    pyramid = {cfg.strides[-1]: stages[-1]}
    p = stages[-1]
    for i in range(len(stages) - 2, -1, -1):
        s = cfg.strides[i]
        lat = conv2d(stages[i], _get(store, f"fpn.lateral{s}.weight"),
                     _get(store, f"fpn.lateral{s}.bias"))
        p = _add(lat, upsample2(p, cfg.upsample))
        pyramid[s] = p
    return [FeatureMap(pyramid[s], s) for s in cfg.fpn_scales]


def backbone_forward(bev: Tensor, cfg: BackboneConfig, store) -> FeatureMap:
    """Stride-1 feature map (the finest level of the neck)."""
    return fpn_forward(bev, BackboneConfig(cfg.channels, cfg.blocks, (1,), cfg.mode,
                                           cfg.upsample, cfg.in_channels), store)[0]


def head_forward(feature: FeatureMap, store, head_cfg: HeadConfig = HeadConfig()) -> Tensor:
    """1x1 conv to the head layout; sigmoid on the class heatmaps."""
    out = conv2d(feature.tensor, _get(store, "head.conv.weight"), _get(store, "head.conv.bias"))
    data = out.data.astype(np.float64)
    k = head_cfg.num_classes
    data[:k] = 1.0 / (1.0 + np.exp(-data[:k]))
    data = data.astype(np.float32)
    if out.precision is Precision.FP16E:
        data = round_fp16(data)
    return Tensor(data, out.precision)


def avg_pool(t: Tensor, s: int) -> Tensor:
    if s == 1:
        return t
    c, h, w = t.shape
    t = pad_to(t, s)
    _, ph, pw = t.shape
    pooled = t.data.astype(np.float64).reshape(c, ph // s, s, pw // s, s).mean(axis=(2, 4))
    return Tensor(pooled.astype(np.float32), t.precision)


def oracle_forward(boxes, cfg: BackboneConfig, head_cfg: HeadConfig = HeadConfig(),
                   vcfg: VoxelConfig = VoxelConfig()) -> List[FeatureMap]:
    """Feature maps whose stride-1 level is exactly the packed head targets.

    Coarser levels are box-filtered copies; they only feed ROI pooling.
    """
    packed = Tensor(encode_targets(boxes, head_cfg, vcfg).packed())
    return [FeatureMap(avg_pool(packed, s), s) for s in cfg.fpn_scales]


def _he_conv(rng, c_out, c_in, k):
    bound = math.sqrt(6.0 / (c_in * k * k))
    return (Tensor(rng.uniform(-bound, bound, (c_out, c_in, k, k))),
            Tensor(rng.uniform(-0.1, 0.1, c_out)))


def random_bn(rng, c, prefix) -> dict:
    return {
        f"{prefix}.gamma": Tensor(rng.uniform(0.5, 1.5, c)),
        f"{prefix}.beta": Tensor(rng.uniform(-0.2, 0.2, c)),
        f"{prefix}.mean": Tensor(rng.uniform(-0.2, 0.2, c)),
        f"{prefix}.var": Tensor(rng.uniform(0.5, 1.5, c)),
    }


def init_backbone_weights(cfg: BackboneConfig, rng: np.random.Generator,
                          head_cfg: HeadConfig = HeadConfig()) -> dict:
    store = {}
    w, b = _he_conv(rng, cfg.channels[0], cfg.in_channels, 3)
    store["backbone.stem.weight"], store["backbone.stem.bias"] = w, b
    c_prev = cfg.channels[0]
    for i, (c, nblocks) in enumerate(zip(cfg.channels, cfg.blocks)):
        for j in range(nblocks):
            prefix = f"backbone.stage{i}.block{j}"
            w, b = _he_conv(rng, c, c_prev, 3)
            store[f"{prefix}.conv.weight"], store[f"{prefix}.conv.bias"] = w, b
            store.update(random_bn(rng, c, f"{prefix}.bn"))
            c_prev = c
        if nblocks == 0:
            if c != c_prev:
                raise ConfigError("an empty stage cannot change the channel count")
    d = cfg.out_channels
    for i, s in enumerate(cfg.strides[:-1]):
        w, b = _he_conv(rng, d, cfg.channels[i], 1)
        store[f"fpn.lateral{s}.weight"], store[f"fpn.lateral{s}.bias"] = w, b
    w, b = _he_conv(rng, head_cfg.head_channels, d, 1)
    store["head.conv.weight"], store["head.conv.bias"] = w, b
    return store
