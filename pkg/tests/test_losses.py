import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import ctc_brute_force, log_softmax_rows
from vsrkit import ops
from vsrkit.losses import JointLossConfig, ce_loss, combine, ctc_loss
from vsrkit.tensor import Tensor


def lp_tensor(a):
    return Tensor(log_softmax_rows(a), dtype=np.float64)


def test_ctc_single_frame_single_label():
    p = np.log(np.array([[0.2, 0.5, 0.3]]))
    assert float(ctc_loss(Tensor(p, dtype=np.float64), [1]).data) == pytest.approx(-math.log(0.5))


def test_ctc_uniform_two_frames():
    # paths for "1" over 2 frames with V=2: (1,1), (0,1), (1,0)
    p = np.log(np.full((2, 2), 0.5))
    assert float(ctc_loss(Tensor(p, dtype=np.float64), [1]).data) == pytest.approx(-math.log(0.75))


def test_ctc_repeat_needs_blank():
    p = np.log(np.full((2, 3), 1 / 3))
    assert np.isposinf(ctc_loss(Tensor(p), [1, 1]).data)
    p3 = np.log(np.full((3, 3), 1 / 3))
    assert float(ctc_loss(Tensor(p3, dtype=np.float64), [1, 1]).data) == pytest.approx(-math.log(1 / 27))


def test_ctc_infeasible_is_inf_without_tape():
    x = Tensor(np.zeros((1, 3)), requires_grad=True)
    loss = ctc_loss(ops.log_softmax(x), [1, 2])
    assert np.isposinf(loss.data) and not loss.requires_grad


def test_ctc_input_validation():
    with pytest.raises(ValueError):
        ctc_loss(Tensor(np.zeros((2, 3))), [0, 1])
    with pytest.raises(IndexError):
        ctc_loss(Tensor(np.zeros((2, 3))), [3])


@settings(max_examples=40)
@given(st.integers(1, 4), st.integers(2, 4), st.integers(0, 2), st.integers(0, 10_000))
def test_ctc_matches_brute_force(t, v, n, seed):
    rng = np.random.default_rng(seed)
    labels = list(rng.integers(1, v, size=n))
    lp = log_softmax_rows(rng.normal(size=(t, v)) * 2)
    expected = ctc_brute_force(lp, labels)
    got = float(ctc_loss(Tensor(lp, dtype=np.float64), labels).data)
    if np.isinf(expected):
        assert np.isposinf(got)
    else:
        assert got == pytest.approx(-expected, abs=1e-9)


def test_ce_closed_form():
    lp = np.log(np.array([[0.7, 0.2, 0.1], [0.1, 0.1, 0.8]]))
    got = float(ce_loss(Tensor(lp, dtype=np.float64), [0, 2]).data)
    assert got == pytest.approx(-(math.log(0.7) + math.log(0.8)) / 2)
    eps = 0.1
    smooth = float(ce_loss(Tensor(lp, dtype=np.float64), [0, 2], eps).data)
    q0 = [1 - eps, eps / 2, eps / 2]
    q1 = [eps / 2, eps / 2, 1 - eps]
    expected = -(np.dot(q0, lp[0]) + np.dot(q1, lp[1])) / 2
    assert smooth == pytest.approx(expected)


@pytest.mark.parametrize("eps", [0.0, 0.1, 0.5])
def test_ce_uniform_prediction_is_log_v(eps):
    v = 6
    lp = np.full((4, v), -math.log(v))
    assert float(ce_loss(Tensor(lp, dtype=np.float64), [0, 1, 2, 3], eps).data) == pytest.approx(math.log(v))


def test_ce_validation():
    with pytest.raises(ValueError):
        ce_loss(Tensor(np.zeros((2, 3))), [0])
    with pytest.raises(ValueError):
        JointLossConfig(label_smoothing=1.0)
    with pytest.raises(ValueError):
        JointLossConfig(ctc_weight=1.5)


def test_joint_weights():
    ctc, ce = Tensor(2.0, dtype=np.float64), Tensor(5.0, dtype=np.float64)
    assert combine(ctc, ce, 0.0) is ce
    assert combine(ctc, ce, 1.0) is ctc
    assert float(combine(ctc, ce, 0.3).data) == pytest.approx(0.3 * 2 + 0.7 * 5)


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_joint_is_convex_combination(a, b, w):
    ctc, ce = Tensor(3.0 * a, dtype=np.float64), Tensor(7.0 * b, dtype=np.float64)
    j = float(combine(ctc, ce, w).data)
    lo, hi = min(3 * a, 7 * b), max(3 * a, 7 * b)
    assert lo - 1e-12 <= j <= hi + 1e-12


def test_ctc_gradient_is_posterior_minus_occupancy():
    # d loss / d logits = softmax - occupancy; rows therefore sum to zero
    x = Tensor(np.random.default_rng(0).normal(size=(5, 4)), requires_grad=True, dtype=np.float64)
    loss = ctc_loss(ops.log_softmax(x), [1, 3])
    loss.backward()
    assert np.allclose(x.grad.sum(axis=1), 0.0, atol=1e-12)
