"""Dense numeric kernels with fp32 and emulated-fp16 execution.

Every kernel accepts :class:`Tensor` values and returns a new ``Tensor`` whose
precision matches the input. Under ``Precision.FP16E`` the inputs and weights
are rounded to IEEE-754 binary16, the per-element accumulation is carried in
(at least) fp32, and the finished element is rounded back to binary16.
Normalisation statistics and softmax stay in fp32.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ShapeError

LAYER_NORM_EPS = 1e-5


class Precision(enum.Enum):
    FP32 = "fp32"
    FP16E = "fp16"


# ---------------------------------------------------------------------------
# binary16 rounding
# ---------------------------------------------------------------------------

_MANT_BITS = np.uint64((1 << 52) - 1)
_IMPLICIT = np.uint64(1 << 52)


def fp16_bits(values) -> np.ndarray:
    """Round ``values`` to binary16 (nearest, ties-to-even) and return raw bits.

    Works directly on the float64 bit pattern so float32 and float64 inputs are
    both rounded once.
    """
    x = np.ascontiguousarray(values, dtype=np.float64)
    bits = x.view(np.uint64)
    sign = ((bits >> np.uint64(63)).astype(np.uint16)) << np.uint16(15)
    biased = ((bits >> np.uint64(52)) & np.uint64(0x7FF)).astype(np.int64)
    mant = bits & _MANT_BITS

    e = biased - 1023
    special = biased == 0x7FF
    overflow = (~special) & (e > 15)
    zero = biased == 0  # double subnormals are far below the half range

    # Right-shift that leaves 10 fraction bits (normal) or the subnormal count.
    shift = np.where(e >= -14, 42, 28 - e)
    shift = np.clip(shift, 1, 60).astype(np.uint64)
    m = mant | _IMPLICIT
    q = m >> shift
    rem = m & ((np.uint64(1) << shift) - np.uint64(1))
    half = np.uint64(1) << (shift - np.uint64(1))
    round_up = (rem > half) | ((rem == half) & ((q & np.uint64(1)) == 1))
    q = (q + round_up.astype(np.uint64)).astype(np.int64)

    h = np.where(e >= -14, ((e + 14) << 10) + q, q)
    h = np.where(zero, 0, h)
    h = np.where(overflow, 0x7C00, h)
    nan_payload = np.where(mant != 0, 0x200, 0)
    h = np.where(special, 0x7C00 | nan_payload, h)
    return (sign | h.astype(np.uint16)).astype(np.uint16)


def round_fp16(values) -> np.ndarray:
    """Round to the nearest binary16 value, returned as float32."""
    return fp16_bits(values).view(np.float16).astype(np.float32)


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Tensor:
    """Immutable dense array with a precision tag.

    Values are stored as float32; an ``FP16E`` tensor only ever holds values
    that survive a binary16 round trip.
    """

    data: np.ndarray
    precision: Precision = Precision.FP32

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, copy=True, order="C")
        if data.ndim == 0:
            data = data.reshape(1)
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        if self.precision is Precision.FP16E:
            finite = np.isfinite(data)
            back = data[finite].astype(np.float16).astype(np.float32)
            if not np.array_equal(back, data[finite]):
                raise ValueError("FP16E tensor holds values not representable in binary16")

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, precision={self.precision.value})"

    @classmethod
    def zeros(cls, shape, precision=Precision.FP32):
        return cls(np.zeros(shape, np.float32), precision)


def as_tensor(value, precision=Precision.FP32) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float32), precision)


def quantize_fp16(t: Tensor) -> Tensor:
    """Round every element to binary16; values past 65504 become infinities."""
    return Tensor(round_fp16(t.data), Precision.FP16E)


def _finish(acc: np.ndarray, precision: Precision) -> Tensor:
    out = acc.astype(np.float32)
    if precision is Precision.FP16E:
        out = round_fp16(out)
    return Tensor(out, precision)


def _operand(t: Tensor, half: bool) -> np.ndarray:
    data = t.data
    if half and t.precision is not Precision.FP16E:
        data = round_fp16(data)
    return data.astype(np.float64)


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------


def conv2d(input: Tensor, weight: Tensor, bias: Tensor, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding on a ``[C, H, W]`` input."""
    if input.data.ndim != 3:
        raise ShapeError(f"conv2d input must be [C,H,W], got {input.shape}", "input.rank")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d weight must be [Co,Ci,kh,kw], got {weight.shape}",
                         "weight.rank")
    c_in, h, w = input.shape
    c_out, w_in, kh, kw = weight.shape
    if w_in != c_in:
        raise ShapeError(f"weight expects {w_in} input channels, input has {c_in}", "C_in")
    if bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} does not match C_out={c_out}", "C_out")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {kh}x{kw}", "kernel")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}", "stride")

    half = input.precision is Precision.FP16E
    x = _operand(input, half)
    wt = _operand(weight, half)
    b = _operand(bias, half)
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    hp, wp = x.shape[1:]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}", "H")

    acc = np.zeros((c_out, ho * wo), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            patch = x[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
            acc += wt[:, :, i, j] @ patch.reshape(c_in, -1)
    acc += b[:, None]
    return _finish(acc.reshape(c_out, ho, wo), input.precision)


def batch_norm(input: Tensor, gamma: Tensor, beta: Tensor, mean: Tensor, var: Tensor,
               eps: float = 1e-3) -> Tensor:
    """Per-channel inference batch norm; works on ``[C, ...]`` inputs."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    c = input.shape[0]
    for name, p in (("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)):
        if p.shape != (c,):
            raise ShapeError(f"batch_norm {name} has shape {p.shape}, expected ({c},)", "C")
    half = input.precision is Precision.FP16E
    x = _operand(input, half)
    bshape = (c,) + (1,) * (x.ndim - 1)
    scale = gamma.data.astype(np.float64) / np.sqrt(var.data.astype(np.float64) + eps)
    y = (x - mean.data.astype(np.float64).reshape(bshape)) * scale.reshape(bshape)
    y = y + beta.data.astype(np.float64).reshape(bshape)
    return _finish(y, input.precision)


def relu(t: Tensor) -> Tensor:
    return Tensor(np.maximum(t.data, 0), t.precision)


def _linear(x: np.ndarray, w: Tensor, b: Tensor, half: bool) -> np.ndarray:
    """Row-wise affine map in float64; caller rounds."""
    return x @ _operand(w, half).T + _operand(b, half)


def _round(acc: np.ndarray, half: bool) -> np.ndarray:
    out = acc.astype(np.float32)
    if half:
        out = round_fp16(out)
    return out.astype(np.float64)


ACTIVATIONS = ("relu", "none")


def mlp_forward(input: Tensor, layers: Sequence[tuple]) -> Tensor:
    """Apply ``(weight[out, in], bias[out], activation)`` layers row-wise."""
    if input.data.ndim != 2:
        raise ShapeError(f"mlp input must be [N,D], got {input.shape}", "input.rank")
    half = input.precision is Precision.FP16E
    x = input.data.astype(np.float64)
    width = input.shape[1]
    for k, (weight, bias, activation) in enumerate(layers):
        if weight.data.ndim != 2 or weight.shape[1] != width:
            raise ShapeError(
                f"layer {k} expects input width {weight.shape[-1]}, got {width}", f"layer{k}.D_in")
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"layer {k} bias shape {bias.shape}", f"layer{k}.D_out")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        y = _linear(x, weight, bias, half)
        if activation == "relu":
            y = np.maximum(y, 0.0)
        x = _round(y, half)
        width = weight.shape[0]
    return _finish(x, input.precision)


def _bilinear_weights(feature: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    _, h, w = feature.shape
    xs = np.clip(np.asarray(xs, dtype=np.float64), 0.0, w - 1)
    ys = np.clip(np.asarray(ys, dtype=np.float64), 0.0, h - 1)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    f = feature.astype(np.float64)
    top = f[:, y0, x0] * (1 - fx) + f[:, y0, x1] * fx
    bottom = f[:, y1, x0] * (1 - fx) + f[:, y1, x1] * fx
    return (top * (1 - fy) + bottom * fy).T


def bilinear_sample_many(feature: Tensor, xs, ys) -> np.ndarray:
    """Vectorised :func:`bilinear_sample`; returns an ``[N, C]`` float64 array."""
    return _bilinear_weights(feature.data, xs, ys)


def bilinear_sample(feature: Tensor, x: float, y: float) -> Tensor:
    """Sample all channels at column ``x`` and row ``y`` (cell-centre coordinates).

    Coordinates outside the map are clamped to the border.
    """
    vals = _bilinear_weights(feature.data, np.array([x]), np.array([y]))[0]
    return _finish(vals, feature.precision)


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AttentionConfig:
    num_heads: int = 8
    model_dim: int = 128
    ffn_dim: int = 2048
    pe_dim: int = 128
    num_layers: int = 1
    temperature: float = 10000.0

    def __post_init__(self):
        if self.model_dim % self.num_heads:
            raise ValueError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")


def sine_position_embedding(xy, cfg: AttentionConfig) -> Tensor:
    """Sine/cosine embedding of a normalised BEV position.

    Layout is ``[x block | y block]``, each block interleaving
    ``sin(a / T**(4i/pe_dim))`` and ``cos(...)`` for ``i < pe_dim // 4``.
    """
    return Tensor(sine_position_embedding_many(np.asarray([xy], dtype=np.float64), cfg)[0])


def sine_position_embedding_many(xy: np.ndarray, cfg: AttentionConfig) -> np.ndarray:
    if cfg.pe_dim % 4:
        raise ValueError(f"pe_dim must be divisible by 4, got {cfg.pe_dim}")
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    quarter = cfg.pe_dim // 4
    freq = cfg.temperature ** (4.0 * np.arange(quarter) / cfg.pe_dim)
    blocks = []
    for axis in range(2):
        arg = xy[:, axis:axis + 1] / freq
        block = np.empty((xy.shape[0], 2 * quarter))
        block[:, 0::2] = np.sin(arg)
        block[:, 1::2] = np.cos(arg)
        blocks.append(block)
    return np.concatenate(blocks, axis=1)


ATTENTION_PARAMS = ("q", "k", "v", "out", "ffn1", "ffn2")


@dataclass(frozen=True)
class AttentionWeights:
    """Weights of one post-norm transformer encoder layer (``[out, in]`` layout)."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln1_gamma: Tensor
    ln1_beta: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor

    _STORE_NAMES = {
        "wq": "q.weight", "bq": "q.bias", "wk": "k.weight", "bk": "k.bias",
        "wv": "v.weight", "bv": "v.bias", "wo": "out.weight", "bo": "out.bias",
        "ln1_gamma": "norm1.weight", "ln1_beta": "norm1.bias",
        "w1": "ffn1.weight", "b1": "ffn1.bias", "w2": "ffn2.weight", "b2": "ffn2.bias",
        "ln2_gamma": "norm2.weight", "ln2_beta": "norm2.bias",
    }

    def to_store(self, prefix: str) -> dict:
        return {f"{prefix}.{name}": getattr(self, attr)
                for attr, name in self._STORE_NAMES.items()}

    @classmethod
    def from_store(cls, store, prefix: str) -> "AttentionWeights":
        from .errors import MissingWeightsError

        kwargs = {}
        for attr, name in cls._STORE_NAMES.items():
            key = f"{prefix}.{name}"
            if key not in store:
                raise MissingWeightsError(f"missing weight {key}")
            kwargs[attr] = store[key]
        return cls(**kwargs)

    @classmethod
    def random(cls, cfg: AttentionConfig, rng: np.random.Generator,
               scale: float = 1.0) -> "AttentionWeights":
        d, f = cfg.model_dim, cfg.ffn_dim

        def lin(n_out, n_in):
            bound = scale / math.sqrt(n_in)
            return (Tensor(rng.uniform(-bound, bound, (n_out, n_in))),
                    Tensor(rng.uniform(-bound, bound, n_out)))

        wq, bq = lin(d, d)
        wk, bk = lin(d, d)
        wv, bv = lin(d, d)
        wo, bo = lin(d, d)
        w1, b1 = lin(f, d)
        w2, b2 = lin(d, f)
        ones, zeros = Tensor(np.ones(d)), Tensor(np.zeros(d))
        return cls(wq, bq, wk, bk, wv, bv, wo, bo, ones, zeros, w1, b1, w2, b2, ones, zeros)


def _layer_norm(x: np.ndarray, gamma: Tensor, beta: Tensor) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LAYER_NORM_EPS) * gamma.data + beta.data


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class AttentionTrace:
    """Intermediate values exposed for inspection by tests."""

    attention: np.ndarray = field(default=None)


def multi_head_self_attention(tokens: Tensor, cfg: AttentionConfig, weights: AttentionWeights,
                              trace: Optional[AttentionTrace] = None) -> Tensor:
    """One post-norm transformer encoder layer over ``[N, model_dim]`` tokens.

    Pass an :class:`AttentionTrace` to receive the ``[heads, N, N]`` softmax
    weights.
    """
    if tokens.data.ndim != 2:
        raise ShapeError(f"tokens must be [N,D], got {tokens.shape}", "tokens.rank")
    n, d = tokens.shape
    if n < 1:
        raise ShapeError("need at least one token", "N")
    if d != cfg.model_dim:
        raise ShapeError(f"token width {d} != model_dim {cfg.model_dim}", "model_dim")
    for attr in ("wq", "wk", "wv", "wo"):
        if getattr(weights, attr).shape != (d, d):
            raise ShapeError(f"{attr} must be [{d},{d}], got {getattr(weights, attr).shape}",
                             attr)
    if weights.w1.shape != (cfg.ffn_dim, d) or weights.w2.shape != (d, cfg.ffn_dim):
        raise ShapeError("feed-forward weights do not match ffn_dim", "ffn_dim")

    half = tokens.precision is Precision.FP16E
    heads = cfg.num_heads
    dh = d // heads
    x = tokens.data.astype(np.float64)

    def proj(inp, w, b):
        return _round(_linear(inp, w, b, half), half)

    q = proj(x, weights.wq, weights.bq).reshape(n, heads, dh).transpose(1, 0, 2)
    k = proj(x, weights.wk, weights.bk).reshape(n, heads, dh).transpose(1, 0, 2)
    v = proj(x, weights.wv, weights.bv).reshape(n, heads, dh).transpose(1, 0, 2)
    scores = _round(q @ k.transpose(0, 2, 1) / math.sqrt(dh), half)
    attn = _softmax(scores)
    if trace is not None:
        trace.attention = attn.copy()
    ctx = _round(_round(attn, half) @ v, half).transpose(1, 0, 2).reshape(n, d)
    attn_out = proj(ctx, weights.wo, weights.bo)
    x1 = _round(_layer_norm(x + attn_out, weights.ln1_gamma, weights.ln1_beta), half)
    hidden = _round(np.maximum(_linear(x1, weights.w1, weights.b1, half), 0.0), half)
    ffn = proj(hidden, weights.w2, weights.b2)
    out = _layer_norm(x1 + ffn, weights.ln2_gamma, weights.ln2_beta)
    return _finish(out, tokens.precision)
