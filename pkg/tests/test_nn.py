import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from vikanformer.errors import ShapeError
from vikanformer.nn import (
    AttentionStats,
    LinearParams,
    attention,
    attention_naive,
    attention_tiled,
    init_attention,
    init_linear,
    layer_norm,
    linear,
    softmax,
)
from vikanformer.tensor import Tensor


def _attention_oracle(p, x: np.ndarray) -> np.ndarray:
    """Explicit loops over heads, queries and keys."""
    t = x.shape[0]
    head_outputs = []
    for h in range(p.heads):
        q, k, v = x @ p.w_q[h].data, x @ p.w_k[h].data, x @ p.w_v[h].data
        out = np.zeros_like(v)
        for i in range(t):
            scores = [sum(q[i, c] * k[j, c] for c in range(p.head_dim)) / math.sqrt(p.head_dim) for j in range(t)]
            top = max(scores)
            weights = [math.exp(s - top) for s in scores]
            total = sum(weights)
            for j in range(t):
                out[i] += weights[j] / total * v[j]
        head_outputs.append(out)
    return np.concatenate(head_outputs, axis=1) @ p.w_o.data


# *** linear ***
def test_linear_identity(rng):
    p = LinearParams(Tensor(np.eye(3)), Tensor(np.zeros(3)))
    x = rng.normal(size=(4, 3))
    assert_allclose(linear(p, Tensor(x)).data, x)


def test_linear_zero_weight_gives_bias():
    p = LinearParams(Tensor(np.zeros((2, 3))), Tensor([1.0, 2.0]))
    out = linear(p, Tensor(np.ones((5, 3))))
    assert_allclose(out.data, np.tile([1.0, 2.0], (5, 1)))


def test_linear_matches_loop_oracle(rng):
    p = init_linear(4, 3, rng)
    p.bias.data[...] = rng.normal(size=3)
    x = rng.normal(size=(5, 4))
    expected = np.array([
        [sum(x[n, i] * p.weight.data[o, i] for i in range(4)) + p.bias.data[o] for o in range(3)]
        for n in range(5)
    ])
    assert_allclose(linear(p, Tensor(x)).data, expected, rtol=0, atol=1e-12)


def test_linear_flattens_leading_axes(rng):
    p = init_linear(4, 3, rng)
    x = rng.normal(size=(2, 5, 4))
    out = linear(p, Tensor(x))
    assert out.shape == (2, 5, 3)
    assert_allclose(out.data[1], linear(p, Tensor(x[1])).data)


def test_linear_shape_mismatch(rng):
    with pytest.raises(ShapeError):
        linear(init_linear(4, 3, rng), Tensor(np.ones((2, 5))))


# *** layer norm ***
def test_layer_norm_constant_row_is_zero():
    out = layer_norm(Tensor(np.full((2, 4), 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    assert_allclose(out.data, np.zeros((2, 4)))


def test_layer_norm_zero_gamma_gives_beta(rng):
    out = layer_norm(Tensor(rng.normal(size=(3, 4))), Tensor(np.zeros(4)), Tensor(np.full(4, 5.0)))
    assert_allclose(out.data, np.full((3, 4), 5.0))


def test_layer_norm_statistics(rng):
    out = layer_norm(Tensor(rng.normal(2.0, 3.0, size=(10, 16))), Tensor(np.ones(16)), Tensor(np.zeros(16)))
    assert np.all(np.abs(out.data.mean(axis=1)) < 1e-7)
    assert np.all(np.abs(out.data.var(axis=1) - 1.0) < 1e-3)


# *** softmax ***
def test_softmax_uniform():
    assert_allclose(softmax(Tensor([2.0, 2.0, 2.0])).data, [1 / 3, 1 / 3, 1 / 3])


def test_softmax_shift_invariance(rng):
    x = rng.normal(size=(3, 5))
    assert_allclose(softmax(Tensor(x + 7.5)).data, softmax(Tensor(x)).data, atol=1e-13)


def test_softmax_ln3():
    assert_allclose(softmax(Tensor([0.0, math.log(3.0)])).data, [0.25, 0.75])


def test_softmax_rows_sum_to_one(rng):
    out = softmax(Tensor(rng.normal(scale=10.0, size=(6, 9))), axis=-1).data
    assert np.all(np.abs(out.sum(axis=-1) - 1.0) < 1e-12)
    assert np.all((out > 0) & (out < 1))


# *** attention ***
def test_attention_single_token(rng):
    p = init_attention(8, 2, rng)
    x = rng.normal(size=(1, 8))
    values = np.concatenate([x @ p.w_v[h].data for h in range(2)], axis=1)
    assert_allclose(attention_naive(p, Tensor(x)).data, values @ p.w_o.data, atol=1e-14)


def test_attention_identical_rows_average_values(rng):
    p = init_attention(8, 2, rng)
    row = rng.normal(size=(1, 8))
    x = np.repeat(row, 5, axis=0)
    out = attention_naive(p, Tensor(x)).data
    single = attention_naive(p, Tensor(row)).data
    assert_allclose(out, np.repeat(single, 5, axis=0), atol=1e-12)


def test_attention_matches_loop_oracle(rng):
    p = init_attention(8, 2, rng)
    x = rng.normal(size=(5, 8))
    assert_allclose(attention_naive(p, Tensor(x)).data, _attention_oracle(p, x), rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("tile", [1, 2, 3, 7])
def test_tiled_matches_naive(seed, tile):
    rng = np.random.default_rng(seed)
    p = init_attention(8, 2, rng)
    x = Tensor(rng.normal(size=(7, 8)))
    assert_allclose(attention_tiled(p, x, tile).data, attention_naive(p, x).data, rtol=0, atol=1e-10)


def test_tiled_tile_one_long_sequence(rng):
    p = init_attention(8, 2, rng)
    x = Tensor(rng.normal(size=(8, 8)))
    assert_allclose(attention_tiled(p, x, 1).data, attention_naive(p, x).data, rtol=0, atol=1e-10)


def test_tiled_single_token_any_tile(rng):
    p = init_attention(8, 2, rng)
    x = Tensor(rng.normal(size=(1, 8)))
    for tile in (1, 4, 16):
        assert_allclose(attention_tiled(p, x, tile).data, attention_naive(p, x).data, atol=1e-14)


def test_batched_attention_equals_per_sequence(rng):
    p = init_attention(8, 2, rng)
    x = rng.normal(size=(3, 6, 8))
    for mode in ("naive", "tiled"):
        batched = attention(p, Tensor(x), mode, tile=4).data
        for b in range(3):
            assert_allclose(batched[b], attention(p, Tensor(x[b]), mode, tile=4).data, atol=1e-12)


def test_storage_counters(rng):
    p = init_attention(8, 2, rng)
    x = Tensor(rng.normal(size=(17, 8)))
    naive, tiled = AttentionStats(), AttentionStats()
    attention_naive(p, x, naive)
    attention_tiled(p, x, 4, tiled)
    assert naive.peak_score_elements == 17 * 17
    assert tiled.peak_score_elements == 17 * 4
    assert tiled.peak_score_elements < naive.peak_score_elements
    # 2 heads x ceil(17 / 4) tiles
    assert tiled.blocks == 2 * 5


def test_attention_errors(rng):
    with pytest.raises(ShapeError):
        init_attention(8, 3, rng)
    p = init_attention(8, 2, rng)
    with pytest.raises(ShapeError):
        attention_tiled(p, Tensor(np.ones((4, 8))), 0)
    with pytest.raises(ShapeError):
        attention_naive(p, Tensor(np.ones((4, 6))))
    with pytest.raises(ValueError):
        attention(p, Tensor(np.ones((4, 8))), mode="flash")
