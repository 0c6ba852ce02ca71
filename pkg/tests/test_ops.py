import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import attention_loops, conv3d_loops, linear_loops
from vsrkit import ops
from vsrkit.gradcheck import check_gradients, relative_error
from vsrkit.losses import ce_loss, ctc_loss
from vsrkit.tensor import ShapeError, Tensor

F64 = np.float64


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=F64), requires_grad=grad, dtype=F64)


def weighted_sum(out: Tensor, seed: int = 0) -> Tensor:
    """Scalar probe with non-uniform weights so every output entry matters."""
    w = np.random.default_rng(seed).normal(size=out.shape)
    return ops.sum(ops.mul(out, Tensor(w, dtype=out.dtype)))


# ---------------------------------------------------------------- conv3d


def test_conv3d_identity_kernel(rng):
    x = rng.random((1, 3, 4, 5)).astype(np.float32)
    out = ops.conv3d(Tensor(x), Tensor(np.ones((1, 1, 1, 1, 1))), Tensor([0.0]))
    assert np.array_equal(out.data, x)


def test_conv3d_all_ones_sums_one_to_eight():
    x = np.arange(1, 9, dtype=np.float32).reshape(1, 2, 2, 2)
    out = ops.conv3d(Tensor(x), Tensor(np.ones((1, 1, 2, 2, 2))))
    assert out.shape == (1, 1, 1, 1) and out.data.item() == 36.0


def test_conv3d_matches_loop_oracle_exactly(rng):
    x = rng.normal(size=(1, 4, 6, 6)).astype(np.float32)
    w = rng.normal(size=(2, 1, 3, 3, 3)).astype(np.float32)
    b = rng.normal(size=2).astype(np.float32)
    out = ops.conv3d(Tensor(x), Tensor(w), Tensor(b))
    assert np.array_equal(out.data, conv3d_loops(x, w, b).astype(np.float32))


@pytest.mark.parametrize("stride,pad", [((1, 2, 2), (1, 1, 1)), ((2, 1, 3), (0, 2, 1))])
def test_conv3d_stride_padding_matches_oracle(rng, stride, pad):
    x = rng.normal(size=(2, 5, 7, 6))
    w = rng.normal(size=(3, 2, 2, 3, 3))
    out = ops.conv3d(t64(x, False), t64(w, False), None, stride, pad)
    ref = conv3d_loops(x, w, None, stride, pad)
    assert out.shape == ref.shape
    assert np.allclose(out.data, ref, rtol=0, atol=1e-12)


def test_conv3d_errors_name_the_axis():
    x = Tensor(np.zeros((2, 3, 4, 4)))
    with pytest.raises(ShapeError, match="C_in"):
        ops.conv3d(x, Tensor(np.zeros((1, 3, 1, 1, 1))))
    with pytest.raises(ShapeError, match="axis T"):
        ops.conv3d(x, Tensor(np.zeros((1, 2, 5, 1, 1))))
    with pytest.raises(ValueError):
        ops.conv3d(x, Tensor(np.zeros((1, 2, 1, 1, 1))), stride=0)


# ---------------------------------------------------------------- linear / norms / softmax


def test_linear_examples(rng):
    out = ops.linear(Tensor([1.0, 1.0]), Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([0.0, 0.0]))
    assert out.data.tolist() == [3.0, 7.0]
    x = rng.normal(size=(3, 4)).astype(np.float32)
    assert np.array_equal(ops.linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)
    const = ops.linear(Tensor(x), Tensor(np.zeros((2, 4))), Tensor([5.0, -1.0])).data
    assert np.array_equal(const, np.tile([5.0, -1.0], (3, 1)))


def test_linear_matches_loop_oracle_exactly(rng):
    x = rng.normal(size=(2, 3, 5)).astype(np.float32)
    w = rng.normal(size=(4, 5)).astype(np.float32)
    b = rng.normal(size=4).astype(np.float32)
    out = ops.linear(Tensor(x), Tensor(w), Tensor(b))
    assert np.array_equal(out.data, linear_loops(x, w, b).astype(np.float32))
    with pytest.raises(ShapeError):
        ops.linear(Tensor(x), Tensor(w[:, :4]))


def test_layer_norm_examples(rng):
    ones, zeros = Tensor(np.ones(4)), Tensor(np.zeros(4))
    assert np.array_equal(ops.layer_norm(Tensor(np.full(4, 3.0)), ones, zeros).data, np.zeros(4))
    out = ops.layer_norm(Tensor([-1.0, 1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
    assert np.allclose(out.data, [-1.0, 1.0], atol=1e-6)
    x = rng.normal(size=8) * 3 + 2
    y = ops.layer_norm(t64(x, False), t64(np.ones(8), False), t64(np.zeros(8), False), 1e-12).data
    assert abs(y.mean()) < 1e-6 and abs(y.var() - 1) < 1e-4


def test_softmax_examples():
    assert np.allclose(ops.softmax(Tensor(np.zeros(4))).data, 0.25)
    assert np.allclose(ops.softmax(Tensor([0.0, math.log(3.0)])).data, [0.25, 0.75], atol=1e-7)


@given(st.lists(st.floats(-30, 30), min_size=1, max_size=12), st.integers(-64, 64))
def test_softmax_rows_sum_to_one_and_shift_invariant(values, shift):
    x = np.array(values)
    p = ops.softmax(t64(x, False)).data
    assert abs(p.sum() - 1) < 1e-6
    # integer shifts of integer-valued logits are exact, so max-subtraction makes them bitwise equal
    xi = np.round(x)
    assert ops.softmax(t64(xi, False)).data.tobytes() == ops.softmax(t64(xi + shift, False)).data.tobytes()


def test_log_softmax_rows_normalize(rng):
    lp = ops.log_softmax(Tensor(rng.normal(size=(3, 7)) * 5)).f64()
    assert np.allclose(np.exp(lp).sum(axis=-1), 1.0, atol=1e-6)


# ---------------------------------------------------------------- attention


def _attn_params(rng, d, scale=0.5, dtype=np.float32):
    return [Tensor(rng.normal(size=s) * scale, dtype=dtype) for s in [(d, d), (d,)] * 4]


def test_attention_single_position_is_value_then_output_projection(rng):
    d = 6
    params = _attn_params(rng, d)
    x = Tensor(rng.normal(size=(1, d)))
    out = ops.multi_head_attention(x, x, x, params, heads=2)
    wq, bq, wk, bk, wv, bv, wo, bo = params
    expect = ops.linear(ops.linear(x, wv, bv), wo, bo)
    assert np.allclose(out.data, expect.data, atol=1e-6)


def test_attention_permutation_equivariance(rng):
    d = 8
    params = _attn_params(rng, d, dtype=F64)
    x = rng.normal(size=(5, d))
    perm = rng.permutation(5)
    a = ops.multi_head_attention(t64(x, False), t64(x, False), t64(x, False), params, heads=2).data
    b = ops.multi_head_attention(t64(x[perm], False), t64(x[perm], False), t64(x[perm], False), params, heads=2).data
    assert np.allclose(a[perm], b, atol=1e-12)


def test_attention_hand_computed_two_by_two():
    # identity projections, one head: weights = softmax(q k^T / sqrt(2))
    x = np.array([[1.0, 0.0], [0.0, 2.0]])
    eye, zero = np.eye(2), np.zeros(2)
    params = [Tensor(a, dtype=F64) for a in (eye, zero) * 4]
    probs = ops.attention_weights(t64(x), t64(x), t64(x), params, heads=1)[0]
    s = 1 / math.sqrt(2)
    row0 = np.exp([1 * s, 0.0]) / np.exp([1 * s, 0.0]).sum()
    row1 = np.exp([0.0, 4 * s]) / np.exp([0.0, 4 * s]).sum()
    assert np.allclose(probs, [row0, row1], atol=1e-12)
    out = ops.multi_head_attention(t64(x), t64(x), t64(x), params, heads=1).data
    assert np.allclose(out, np.stack([row0, row1]) @ x, atol=1e-12)


def test_attention_matches_loop_oracle(rng):
    d, heads = 6, 3
    params = _attn_params(rng, d)
    q = rng.normal(size=(4, d)).astype(np.float32)
    kv = rng.normal(size=(3, d)).astype(np.float32)
    mask = np.array([[1, 0, 1], [1, 1, 1], [0, 1, 0], [1, 1, 0]], dtype=bool)
    out = ops.multi_head_attention(Tensor(q), Tensor(kv), Tensor(kv), params, heads, mask)
    ref = attention_loops(q, kv, kv, *[p.data for p in params], heads, mask)
    assert np.allclose(out.data, ref.astype(np.float32), rtol=1e-6, atol=1e-6)


def test_attention_rejects_bad_heads(rng):
    params = _attn_params(rng, 6)
    x = Tensor(rng.normal(size=(2, 6)))
    with pytest.raises(ValueError):
        ops.multi_head_attention(x, x, x, params, heads=4)


def test_positional_encoding_properties():
    pe = ops.positional_encoding(8, 6)
    assert np.array_equal(pe[0], [0, 1, 0, 1, 0, 1])
    assert np.abs(pe).max() <= 1.0
    assert np.array_equal(ops.positional_encoding(4, 6), pe[:4])


# ---------------------------------------------------------------- gradient checks


def _case(name, rng):
    """(function, tensors) for one op on small float64 inputs."""
    r = lambda *s: rng.normal(size=s)  # noqa: E731
    if name == "add":
        a, b = t64(r(3, 4)), t64(r(3, 4))
        return lambda: weighted_sum(ops.add(a, b)), [a, b]
    if name == "sub":
        a, b = t64(r(3, 4)), t64(r(3, 4))
        return lambda: weighted_sum(ops.sub(a, b)), [a, b]
    if name == "mul":
        a, b = t64(r(3, 4)), t64(r(3, 4))
        return lambda: weighted_sum(ops.mul(a, b)), [a, b]
    if name == "scale":
        a = t64(r(5))
        return lambda: weighted_sum(ops.scale(ops.add_scalar(a, 0.3), -1.7)), [a]
    if name == "add_bias":
        a, b = t64(r(2, 3, 4)), t64(r(4))
        return lambda: weighted_sum(ops.add_bias(a, b)), [a, b]
    if name == "mean":
        a = t64(r(3, 5))
        return lambda: ops.mean(ops.mul(a, a)), [a]
    if name in ("relu", "sigmoid", "swish", "gelu"):
        a = t64(r(4, 5) + np.sign(r(4, 5)) * 0.05)
        fn = getattr(ops, name)
        return lambda: weighted_sum(fn(a)), [a]
    if name == "glu":
        a = t64(r(3, 6))
        return lambda: weighted_sum(ops.glu(a)), [a]
    if name == "dropout":
        a = t64(r(4, 4))
        return lambda: weighted_sum(ops.dropout(a, 0.3, np.random.default_rng(5))), [a]
    if name == "reshape_transpose":
        a = t64(r(2, 3, 4))
        return lambda: weighted_sum(ops.transpose(ops.reshape(a, (6, 4)), (1, 0))), [a]
    if name == "concat_slice":
        a, b = t64(r(3, 2)), t64(r(3, 4))
        return lambda: weighted_sum(ops.slice_axis(ops.concat([a, b], -1), 1, 5)), [a, b]
    if name == "embedding":
        table = t64(r(5, 3))
        return lambda: weighted_sum(ops.embedding([[0, 3, 3], [4, 0, 1]], table)), [table]
    if name == "linear":
        x, w, b = t64(r(2, 3, 4)), t64(r(5, 4)), t64(r(5))
        return lambda: weighted_sum(ops.linear(x, w, b)), [x, w, b]
    if name == "layer_norm":
        x, g, b = t64(r(3, 6)), t64(r(6)), t64(r(6))
        return lambda: weighted_sum(ops.layer_norm(x, g, b)), [x, g, b]
    if name == "frame_instance_norm":
        x, g, b = t64(r(2, 3, 3, 3)), t64(r(2)), t64(r(2))
        return lambda: weighted_sum(ops.frame_instance_norm(x, g, b)), [x, g, b]
    if name == "softmax":
        x = t64(r(3, 5))
        return lambda: weighted_sum(ops.softmax(x)), [x]
    if name == "log_softmax":
        x = t64(r(3, 5))
        return lambda: weighted_sum(ops.log_softmax(x)), [x]
    if name == "conv3d":
        x, w, b = t64(r(2, 3, 4, 4)), t64(r(2, 2, 3, 3, 3) * 0.3), t64(r(2))
        return lambda: weighted_sum(ops.conv3d(x, w, b, (1, 2, 1), 1)), [x, w, b]
    if name == "depthwise_conv1d":
        x, w, b = t64(r(5, 4)), t64(r(4, 3)), t64(r(4))
        return lambda: weighted_sum(ops.depthwise_conv1d(x, w, b)), [x, w, b]
    if name == "depthwise_conv1d_trimmed":
        x, w, b = t64(r(2, 4)), t64(r(4, 7)), t64(r(4))
        return lambda: weighted_sum(ops.depthwise_conv1d(x, w, b)), [x, w, b]
    if name == "max_pool_hw":
        # well-separated values keep the argmax stable under the probe step
        vals = rng.permutation(2 * 2 * 5 * 4).reshape(2, 2, 5, 4) * 0.1
        x = t64(vals)
        return lambda: weighted_sum(ops.max_pool_hw(x)), [x]
    if name == "avg_pool_hw":
        x = t64(r(2, 3, 3, 2))
        return lambda: weighted_sum(ops.avg_pool_hw(x)), [x]
    if name == "multi_head_attention":
        q, kv = t64(r(3, 4)), t64(r(4, 4))
        params = [t64(a) for a in (r(4, 4), r(4), r(4, 4), r(4), r(4, 4), r(4), r(4, 4), r(4))]
        mask = np.array([[1, 1, 0, 1], [0, 1, 1, 1], [1, 0, 0, 0]], dtype=bool)
        return lambda: weighted_sum(ops.multi_head_attention(q, kv, kv, params, 2, mask)), [q, kv, *params]
    if name == "ctc_loss":
        x = t64(r(6, 4))
        return lambda: ctc_loss(ops.log_softmax(x), [1, 2, 2], 0), [x]
    if name == "ce_loss":
        x = t64(r(4, 5))
        return lambda: ce_loss(ops.log_softmax(x), [1, 0, 4, 4], 0.1), [x]
    raise KeyError(name)


GRAD_OPS = [
    "add", "sub", "mul", "scale", "add_bias", "mean", "relu", "sigmoid", "swish", "gelu", "glu",
    "dropout", "reshape_transpose", "concat_slice", "embedding", "linear", "layer_norm",
    "frame_instance_norm", "softmax", "log_softmax", "conv3d", "depthwise_conv1d",
    "depthwise_conv1d_trimmed", "max_pool_hw", "avg_pool_hw", "multi_head_attention", "ctc_loss", "ce_loss",
]


@pytest.mark.parametrize("name", GRAD_OPS)
def test_gradient_matches_finite_differences(name):
    fn, tensors = _case(name, np.random.default_rng(sum(map(ord, name))))
    errors = check_gradients(fn, tensors, step=1e-3)
    assert max(errors) < 1e-3, dict(zip(range(len(errors)), errors))


def test_relative_error_floor():
    assert relative_error(np.zeros(3), np.full(3, 1e-12)) < 1e-4
    assert relative_error(np.ones(3), np.ones(3) * 1.1) == pytest.approx(0.1 / 1.1)


def test_depthwise_trimming_is_exact(rng):
    x = t64(rng.normal(size=(3, 2)), False)
    w = rng.normal(size=(2, 9))
    b = t64(np.zeros(2), False)
    full = ops.depthwise_conv1d(x, t64(w, False), b).data
    # taps beyond +-(T-1) only ever see padding
    trimmed = ops.depthwise_conv1d(x, t64(w[:, 2:7], False), b).data
    assert np.allclose(full, trimmed, atol=1e-14)
