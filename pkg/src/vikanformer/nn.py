"""
Neural building blocks shared by every variant: linear layers, layer
normalization, softmax and multi-head self-attention (naive and tiled).
"""
import math
from dataclasses import dataclass

import numpy as np

from vikanformer.errors import ShapeError
from vikanformer.tensor import Tensor, bmm, concat, matmul, parameter


@dataclass
class LinearParams:
    weight: Tensor  # [out, in]
    bias: Tensor  # [out]

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor


@dataclass
class AttentionParams:
    w_q: list[Tensor]  # H x [d, d_head]
    w_k: list[Tensor]
    w_v: list[Tensor]
    w_o: Tensor  # [d, d]

    @property
    def heads(self) -> int:
        return len(self.w_q)

    @property
    def d(self) -> int:
        return self.w_o.shape[0]

    @property
    def head_dim(self) -> int:
        return self.w_q[0].shape[1]


@dataclass
class AttentionStats:
    """Instrumentation for the largest score block built per sequence and head."""
    peak_score_elements: int = 0
    blocks: int = 0

    def record(self, rows: int, cols: int):
        self.blocks += 1
        self.peak_score_elements = max(self.peak_score_elements, rows * cols)


# *** initializers ***
def xavier_uniform(fan_in: int, fan_out: int, shape: tuple[int, ...], rng: np.random.Generator) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return parameter(rng.uniform(-limit, limit, size=shape))


def init_linear(in_features: int, out_features: int, rng: np.random.Generator) -> LinearParams:
    return LinearParams(
        weight=xavier_uniform(in_features, out_features, (out_features, in_features), rng),
        bias=parameter(np.zeros(out_features)),
    )


def init_layer_norm(d: int) -> LayerNormParams:
    return LayerNormParams(gamma=parameter(np.ones(d)), beta=parameter(np.zeros(d)))


def init_attention(d: int, heads: int, rng: np.random.Generator) -> AttentionParams:
    if d % heads != 0:
        raise ShapeError(f"heads={heads} does not divide d={d}")
    head_dim = d // heads
    # head ごとに q, k, v の順で乱数を引く
    w_q, w_k, w_v = [], [], []
    for _ in range(heads):
        w_q.append(xavier_uniform(d, head_dim, (d, head_dim), rng))
        w_k.append(xavier_uniform(d, head_dim, (d, head_dim), rng))
        w_v.append(xavier_uniform(d, head_dim, (d, head_dim), rng))
    return AttentionParams(w_q, w_k, w_v, w_o=xavier_uniform(d, d, (d, d), rng))


# *** layers ***
def linear(p: LinearParams, x: Tensor) -> Tensor:
    """x·Wᵀ + b over the last axis; leading axes are flattened into rows."""
    if x.shape[-1] != p.in_features:
        raise ShapeError(f"linear expects {p.in_features} input features, got shape {x.shape}")
    lead = x.shape[:-1]
    rows = x.reshape(-1, p.in_features)
    out = matmul(rows, p.weight.T) + p.bias
    return out.reshape(*lead, p.out_features)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered * (var + eps) ** -0.5 * gamma + beta


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    # 最大値は定数として引く (softmax はシフト不変なので勾配は変わらない)
    shifted = x - np.max(x.data, axis=axis, keepdims=True)
    e = shifted.exp()
    return e / e.sum(axis=axis, keepdims=True)


def _as_batch(x: Tensor, p: AttentionParams) -> tuple[Tensor, bool]:
    if x.ndim not in (2, 3) or x.shape[-1] != p.d:
        raise ShapeError(f"attention expects [T,{p.d}] or [B,T,{p.d}], got {x.shape}")
    if x.ndim == 2:
        return x.reshape(1, *x.shape), True
    return x, False


def _project(x: Tensor, w: Tensor) -> Tensor:
    b, t, d = x.shape
    return matmul(x.reshape(b * t, d), w).reshape(b, t, w.shape[1])


def _merge_heads(heads: list[Tensor], p: AttentionParams, squeeze: bool) -> Tensor:
    merged = concat(heads, axis=-1)
    b, t, d = merged.shape
    out = matmul(merged.reshape(b * t, d), p.w_o).reshape(b, t, d)
    return out.reshape(t, d) if squeeze else out


def attention_naive(p: AttentionParams, x: Tensor, stats: AttentionStats | None = None) -> Tensor:
    """softmax(QKᵀ/√d_head)·V per head, heads concatenated then W_o."""
    x, squeeze = _as_batch(x, p)
    scale = 1.0 / math.sqrt(p.head_dim)
    t = x.shape[1]
    heads = []
    for h in range(p.heads):
        q = _project(x, p.w_q[h])
        k = _project(x, p.w_k[h])
        v = _project(x, p.w_v[h])
        scores = bmm(q, k.transpose((0, 2, 1))) * scale
        if stats is not None:
            stats.record(t, t)
        heads.append(bmm(softmax(scores, axis=-1), v))
    return _merge_heads(heads, p, squeeze)


def attention_tiled(p: AttentionParams, x: Tensor, tile: int, stats: AttentionStats | None = None) -> Tensor:
    """
    Same result as `attention_naive`, accumulated over key tiles with an
    online softmax: running max m, running denominator l and a rescaled
    output accumulator. Only [T, tile] score blocks are ever built.
    """
    if tile < 1:
        raise ShapeError(f"tile must be >= 1, got {tile}")
    x, squeeze = _as_batch(x, p)
    scale = 1.0 / math.sqrt(p.head_dim)
    b, t, _ = x.shape
    heads = []
    for h in range(p.heads):
        q = _project(x, p.w_q[h])
        k = _project(x, p.w_k[h])
        v = _project(x, p.w_v[h])
        m = None
        denom = None
        acc = None
        for start in range(0, t, tile):
            k_tile = k[:, start:start + tile, :]
            v_tile = v[:, start:start + tile, :]
            scores = bmm(q, k_tile.transpose((0, 2, 1))) * scale
            if stats is not None:
                stats.record(t, k_tile.shape[1])
            # running max は定数扱い (シフト不変性より勾配に寄与しない)
            block_max = np.max(scores.data, axis=-1, keepdims=True)
            m_new = block_max if m is None else np.maximum(m, block_max)
            weights = (scores - m_new).exp()
            if acc is None:
                denom = weights.sum(axis=-1, keepdims=True)
                acc = bmm(weights, v_tile)
            else:
                correction = np.exp(m - m_new)
                denom = denom * correction + weights.sum(axis=-1, keepdims=True)
                acc = acc * correction + bmm(weights, v_tile)
            m = m_new
        heads.append(acc / denom)
    return _merge_heads(heads, p, squeeze)


def attention(p: AttentionParams, x: Tensor, mode: str = "naive", tile: int = 4,
              stats: AttentionStats | None = None) -> Tensor:
    if mode == "naive":
        return attention_naive(p, x, stats)
    if mode == "tiled":
        return attention_tiled(p, x, tile, stats)
    raise ValueError(f"Invalid attention mode: {mode}. Use 'naive' or 'tiled'.")
