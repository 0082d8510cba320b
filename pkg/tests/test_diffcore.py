import math

import numpy as np
import pytest

from corptree import diffcore as dc
from corptree.diffcore import ParameterStore
from corptree.errors import (
    BadSegmentId,
    CorruptCheckpoint,
    LabelOutOfRange,
    NonFiniteValue,
    ShapeMismatch,
)
from oracles import max_rel_err, naive_segment_mean, numeric_grad

RNG = np.random.default_rng(1234)
GRAD_TOL = 1e-6


def check_op_gradient(forward, backward, *inputs, d_out_shape):
    """FD-check each input's gradient for out = forward(*inputs)."""
    r = RNG.uniform(-1.0, 1.0, size=d_out_shape)
    analytic = backward(r, *inputs)
    if not isinstance(analytic, tuple):
        analytic = (analytic,)
    for pos, (x, a) in enumerate(zip(inputs, analytic)):
        if a is None:
            continue
        numeric = numeric_grad(lambda: float((forward(*inputs) * r).sum()), x)
        assert max_rel_err(a, numeric) < GRAD_TOL, f"input {pos}"


# --- matmul -----------------------------------------------------------------


def test_matmul_identity():
    b = RNG.normal(size=(3, 4))
    np.testing.assert_array_equal(dc.matmul(np.eye(3), b), b)


def test_matmul_hand_value():
    out = dc.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0], [1.0]]))
    np.testing.assert_array_equal(out, [[3.0], [7.0]])


def test_matmul_gradients():
    a = RNG.uniform(-2, 2, (4, 3))
    b = RNG.uniform(-2, 2, (3, 5))
    check_op_gradient(dc.matmul, lambda r, a, b: dc.matmul_backward(r, a, b), a, b,
                      d_out_shape=(4, 5))


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        dc.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_rejects_nonfinite():
    with pytest.raises(NonFiniteValue):
        dc.matmul(np.array([[np.inf, 1.0]]), np.ones((2, 1)))


# --- add_bias -----------------------------------------------------------------


def test_add_bias_zero_identity():
    x = RNG.normal(size=(3, 2))
    np.testing.assert_array_equal(dc.add_bias(x, np.zeros((1, 2))), x)


def test_add_bias_shifts_columns():
    out = dc.add_bias(np.zeros((2, 2)), np.array([[1.0, -1.0]]))
    np.testing.assert_array_equal(out, [[1.0, -1.0], [1.0, -1.0]])


def test_add_bias_gradients():
    x = RNG.uniform(-2, 2, (5, 4))
    b = RNG.uniform(-2, 2, (1, 4))
    check_op_gradient(dc.add_bias, lambda r, x, b: dc.add_bias_backward(r), x, b,
                      d_out_shape=(5, 4))


# --- relu / tanh ------------------------------------------------------------------


def test_relu_values():
    np.testing.assert_array_equal(dc.relu(np.array([[-3.0, -0.5]])), [[0.0, 0.0]])
    np.testing.assert_array_equal(dc.relu(np.array([[-1.0, 2.0]])), [[0.0, 2.0]])


def test_relu_gradient_away_from_kink():
    x = RNG.uniform(-2, 2, (5, 4))
    x = np.where(np.abs(x) < 1e-3, x + 0.5, x)
    check_op_gradient(dc.relu, lambda r, x: dc.relu_backward(r, x), x, d_out_shape=(5, 4))


def test_tanh_values():
    assert dc.tanh_op(np.zeros((1, 1)))[0, 0] == 0.0
    assert abs(dc.tanh_op(np.array([[50.0]]))[0, 0] - 1.0) < 1e-9
    assert abs(dc.tanh_op(np.array([[-50.0]]))[0, 0] + 1.0) < 1e-9


def test_tanh_gradients():
    x = RNG.uniform(-2, 2, (4, 3))
    check_op_gradient(dc.tanh_op, lambda r, x: dc.tanh_backward(r, dc.tanh_op(x)), x,
                      d_out_shape=(4, 3))


# --- segment_mean ---------------------------------------------------------------------


def test_segment_mean_single_segment_is_column_mean():
    x = RNG.normal(size=(4, 3))
    out = dc.segment_mean(x, np.zeros(4, dtype=int), 1)
    np.testing.assert_allclose(out[0], x.mean(axis=0))


def test_segment_mean_singletons_identity():
    x = RNG.normal(size=(3, 2))
    out = dc.segment_mean(x, np.arange(3), 3)
    np.testing.assert_array_equal(out, x)


def test_segment_mean_empty_segment_zero_row_and_grad():
    x = RNG.normal(size=(3, 2))
    segments = np.array([0, 0, 2])
    out = dc.segment_mean(x, segments, 3)
    np.testing.assert_array_equal(out[1], 0.0)
    d_x = dc.segment_mean_backward(np.ones((3, 2)), segments, 3)
    assert d_x.shape == x.shape


def test_segment_mean_matches_naive_loop():
    x = RNG.normal(size=(7, 4))
    segments = np.array([2, 0, 1, 1, 2, 0, 2])
    np.testing.assert_allclose(
        dc.segment_mean(x, segments, 3), naive_segment_mean(x, segments, 3)
    )


def test_segment_mean_constant_matrix():
    x = np.full((6, 3), 1.7)
    out = dc.segment_mean(x, np.array([0, 1, 1, 0, 2, 2]), 3)
    np.testing.assert_array_equal(out, np.full((3, 3), 1.7))


def test_segment_mean_gradients():
    x = RNG.uniform(-2, 2, (6, 3))
    segments = np.array([0, 0, 1, 1, 1, 3])
    check_op_gradient(
        lambda x: dc.segment_mean(x, segments, 4),
        lambda r, x: dc.segment_mean_backward(r, segments, 4),
        x,
        d_out_shape=(4, 3),
    )


def test_segment_mean_bad_segment_id():
    with pytest.raises(BadSegmentId):
        dc.segment_mean(np.ones((2, 2)), np.array([0, 5]), 2)


# --- gather_rows ------------------------------------------------------------------------


def test_gather_rows_identity_and_reorder():
    x = RNG.normal(size=(4, 3))
    np.testing.assert_array_equal(dc.gather_rows(x, np.arange(4)), x)
    np.testing.assert_array_equal(dc.gather_rows(x, [2, 0]), x[[2, 0]])


def test_gather_rows_duplicate_index_accumulates():
    x = RNG.uniform(-2, 2, (5, 3))
    idx = np.array([2, 0, 2, 4])
    check_op_gradient(
        lambda x: dc.gather_rows(x, idx),
        lambda r, x: dc.gather_rows_backward(r, idx, 5),
        x,
        d_out_shape=(4, 3),
    )
    d_x = dc.gather_rows_backward(np.ones((4, 3)), idx, 5)
    assert d_x[2, 0] == 2.0  # two output rows map back to row 2


# --- scale_rows --------------------------------------------------------------------------


def test_scale_rows_identity_and_zero():
    x = RNG.normal(size=(3, 4))
    np.testing.assert_array_equal(dc.scale_rows(x, np.ones((3, 1))), x)
    np.testing.assert_array_equal(dc.scale_rows(x, np.zeros((3, 1))), np.zeros_like(x))


def test_scale_rows_gradients():
    x = RNG.uniform(-2, 2, (5, 4))
    g = RNG.uniform(-2, 2, (5, 1))
    check_op_gradient(dc.scale_rows, dc.scale_rows_backward, x, g, d_out_shape=(5, 4))


# --- softmax_xent ---------------------------------------------------------------------------


def test_softmax_uniform_logits():
    loss, probs = dc.softmax_xent(np.zeros((2, 3)), [0, 2])
    assert loss == pytest.approx(math.log(3.0), abs=1e-12)
    np.testing.assert_allclose(probs, 1.0 / 3.0)


def test_softmax_confident_correct():
    loss, _ = dc.softmax_xent(np.array([[10.0, -10.0]]), [0])
    assert loss == pytest.approx(math.log1p(math.exp(-20.0)), rel=1e-9)
    assert loss == pytest.approx(2.06e-9, rel=1e-2)


def test_softmax_rows_sum_to_one():
    logits = RNG.normal(size=(6, 5)) * 30
    _, probs = dc.softmax_xent(logits, RNG.integers(0, 5, size=6))
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)


def test_softmax_loss_nonnegative():
    logits = RNG.normal(size=(8, 4))
    loss, _ = dc.softmax_xent(logits, RNG.integers(0, 4, size=8))
    assert loss >= 0.0


def test_softmax_gradients():
    logits = RNG.uniform(-2, 2, (6, 4))
    labels = RNG.integers(0, 4, size=6)

    def forward():
        return dc.softmax_xent(logits, labels)[0]

    _, probs = dc.softmax_xent(logits, labels)
    analytic = dc.softmax_xent_backward(probs, labels)
    numeric = numeric_grad(forward, logits)
    assert max_rel_err(analytic, numeric) < GRAD_TOL


def test_softmax_weighted_gradients():
    logits = RNG.uniform(-2, 2, (6, 3))
    labels = RNG.integers(0, 3, size=6)
    weights = np.array([0.5, 1.5, 3.0])

    def forward():
        return dc.softmax_xent(logits, labels, weights)[0]

    _, probs = dc.softmax_xent(logits, labels, weights)
    analytic = dc.softmax_xent_backward(probs, labels, weights)
    numeric = numeric_grad(forward, logits)
    assert max_rel_err(analytic, numeric) < GRAD_TOL


def test_softmax_label_out_of_range():
    with pytest.raises(LabelOutOfRange):
        dc.softmax_xent(np.zeros((2, 3)), [0, 3])


def test_ops_bitwise_deterministic():
    x = RNG.normal(size=(5, 4))
    segments = np.array([0, 1, 1, 0, 2])
    assert np.array_equal(dc.segment_mean(x, segments, 3), dc.segment_mean(x, segments, 3))
    assert np.array_equal(dc.tanh_op(x), dc.tanh_op(x))


# --- ParameterStore -----------------------------------------------------------------------------


def test_store_round_trip_exact():
    store = ParameterStore()
    store.add("w", RNG.normal(size=(3, 4)) * 1e-7)
    store.add("b", RNG.normal(size=(1, 4)) * 1e7)
    loaded = ParameterStore.loads(store.dumps())
    assert loaded.names() == ["w", "b"]
    for name in store.names():
        assert np.array_equal(loaded.value(name), store.value(name))


def test_store_rejects_duplicate_names():
    store = ParameterStore()
    store.add("w", np.ones((1, 1)))
    with pytest.raises(ShapeMismatch):
        store.add("w", np.ones((1, 1)))


def test_store_corrupt_json():
    with pytest.raises(CorruptCheckpoint):
        ParameterStore.loads("{not json")


def test_store_zero_grads_and_sizes():
    store = ParameterStore()
    store.add("w", np.ones((2, 3)))
    store.grad("w")[...] = 5.0
    store.zero_grads()
    assert np.array_equal(store.grad("w"), np.zeros((2, 3)))
    assert store.total_size() == 6


# --- grad_check -------------------------------------------------------------------------------


def test_grad_check_quadratic():
    store = ParameterStore()
    store.add("theta", RNG.uniform(-2, 2, (3, 3)))

    def f(s):
        theta = s.value("theta")
        s.grad("theta")[...] += 2.0 * theta
        return float((theta * theta).sum())

    assert dc.grad_check(f, store) < 1e-8


def test_grad_check_flags_wrong_gradient():
    store = ParameterStore()
    store.add("theta", RNG.uniform(1.0, 2.0, (2, 2)))

    def f(s):
        theta = s.value("theta")
        s.grad("theta")[...] += 3.0 * theta  # wrong on purpose
        return float((theta * theta).sum())

    assert dc.grad_check(f, store) > 1e-2
