import math

import hypothesis.extra.numpy as hnp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crosspath import ops
from crosspath.tensor import NonFiniteError, ShapeError, Tape, Tensor, set_finite_checks

from conftest import analytic_grads, max_rel_err, numeric_grad


# --- conv2d ---------------------------------------------------------------------

def test_conv_center_of_ones_is_nine():
    x = np.ones((1, 1, 3, 3), np.float32)
    w = np.ones((1, 1, 3, 3), np.float32)
    out = ops.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(1, np.float32)))
    assert out.shape == (1, 1, 3, 3)
    assert out.data[0, 0, 1, 1] == 9.0
    assert out.data[0, 0, 0, 0] == 4.0


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((2, 3, 5, 4)).astype(np.float32)
    w = np.eye(3, dtype=np.float32).reshape(3, 3, 1, 1)
    out = ops.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3, np.float32)))
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("stride,padding", [(1, "same"), (1, "valid"), (2, "same"), (2, "valid")])
def test_conv_gradients_match_finite_differences(rng, stride, padding):
    x = rng.standard_normal((2, 3, 5, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    probe = rng.standard_normal(ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding).shape)

    def f():
        return float((ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding).data * probe).sum())

    gx, gw, gb = analytic_grads(lambda X, W, B: _probe(ops.conv2d(X, W, B, stride, padding), probe), x, w, b)
    assert max_rel_err(gx, numeric_grad(f, x)) < 1e-5
    assert max_rel_err(gw, numeric_grad(f, w)) < 1e-5
    assert max_rel_err(gb, numeric_grad(f, b)) < 1e-5


def _probe(out, probe):
    """sum(out * probe) via the tape: seed backward with `probe` through a custom sum."""
    from crosspath.tensor import emit

    def backward(g):
        return (probe * g,)

    return emit(np.asarray((out.data * probe).sum(), out.dtype), (out,), backward, "probe")


@pytest.mark.parametrize("padding,size,expected", [("same", 5, 5), ("same", 4, 4), ("valid", 5, 3)])
def test_conv_output_size(padding, size, expected):
    out = ops.conv2d(Tensor(np.zeros((1, 2, size, size))), Tensor(np.zeros((3, 2, 3, 3))), Tensor(np.zeros(3)),
                     padding=padding)
    assert out.shape == (1, 3, expected, expected)


def test_conv_strided_same_uses_ceil():
    out = ops.conv2d(Tensor(np.zeros((1, 1, 5, 5))), Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros(1)), stride=2)
    assert out.shape == (1, 1, 3, 3)


def test_conv_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(1, 2, 4, 4\).*\(3, 5, 3, 3\)"):
        ops.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 5, 3, 3))), Tensor(np.zeros(3)))


def test_conv_same_padding_rejects_even_kernel():
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros(1)))


# --- dense ----------------------------------------------------------------------

def test_dense_identity_passthrough(rng):
    x = rng.standard_normal((3, 4)).astype(np.float32)
    out = ops.dense(Tensor(x), Tensor(np.eye(4, dtype=np.float32)), Tensor(np.zeros(4, np.float32)))
    np.testing.assert_array_equal(out.data, x)


def test_dense_hand_arithmetic():
    out = ops.dense(Tensor(np.array([[1.0, 2.0]])), Tensor(np.array([[1.0, 0.0], [0.0, 1.0]])), Tensor(np.array([1.0, 1.0])))
    np.testing.assert_array_equal(out.data, [[2.0, 3.0]])


def test_dense_gradients(rng):
    x, w, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2)), rng.standard_normal(2)
    probe = rng.standard_normal((3, 2))
    f = lambda: float((ops.dense(Tensor(x), Tensor(w), Tensor(b)).data * probe).sum())
    gx, gw, gb = analytic_grads(lambda X, W, B: _probe(ops.dense(X, W, B), probe), x, w, b)
    for g, a in ((gx, x), (gw, w), (gb, b)):
        assert max_rel_err(g, numeric_grad(f, a)) < 1e-5


def test_dense_dim_mismatch():
    with pytest.raises(ShapeError):
        ops.dense(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))), Tensor(np.zeros(2)))


# --- relu / maxpool / softmax / gap ---------------------------------------------------

def test_relu_derivative_at_zero_is_zero():
    (g,) = analytic_grads(lambda X: ops.sum_all(ops.relu(X)), np.array([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(g, [0.0, 0.0, 1.0])


def test_maxpool_routes_gradient_to_first_max_on_ties():
    x = np.array([[[[1.0, 1.0], [0.0, 1.0]]]])
    out = ops.maxpool2x2(Tensor(x))
    assert out.data.item() == 1.0
    (g,) = analytic_grads(lambda X: ops.sum_all(ops.maxpool2x2(X)), x)
    np.testing.assert_array_equal(g, [[[[1.0, 0.0], [0.0, 0.0]]]])


def test_maxpool_values(rng):
    x = rng.standard_normal((2, 3, 4, 6))
    out = ops.maxpool2x2(Tensor(x)).data
    ref = x.reshape(2, 3, 2, 2, 3, 2).max(axis=(3, 5))
    np.testing.assert_array_equal(out, ref)


def test_maxpool_rejects_odd_dims():
    with pytest.raises(ShapeError):
        ops.maxpool2x2(Tensor(np.zeros((1, 1, 3, 4))))


def test_gap_mean():
    out = ops.global_avg_pool(Tensor(np.array([[[[1.0, 3.0], [5.0, 7.0]]]])))
    np.testing.assert_array_equal(out.data, [[4.0]])


def test_gap_rejects_non_4d():
    with pytest.raises(ShapeError):
        ops.global_avg_pool(Tensor(np.zeros((2, 3))))


def test_gap_broadcast_back_preserves_sum(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    z = ops.global_avg_pool(Tensor(x)).data
    back = np.broadcast_to(z[:, :, None, None], x.shape)
    assert back.sum() == pytest.approx(x.sum(), rel=1e-12, abs=1e-12)


def test_softmax_closed_form():
    out = ops.softmax(Tensor(np.array([0.0, math.log(3.0)])))
    np.testing.assert_allclose(out.data, [0.25, 0.75], rtol=1e-15)


@given(c=st.floats(-50, 50), n=st.integers(1, 12))
def test_softmax_of_constant_is_uniform(c, n):
    out = ops.softmax(Tensor(np.full(n, c)))
    np.testing.assert_allclose(out.data, np.full(n, 1.0 / n), rtol=1e-12)


@settings(max_examples=200)
@given(x=hnp.arrays(np.float64, st.integers(1, 10), elements=st.floats(-30, 30)), shift=st.floats(-100, 100))
def test_softmax_sums_to_one_and_is_shift_invariant(x, shift):
    p = ops.softmax(Tensor(x)).data
    assert abs(p.sum() - 1.0) < 1e-6
    assert np.all(p >= 0)
    q = ops.softmax(Tensor(x + shift)).data
    np.testing.assert_allclose(p, q, rtol=1e-9, atol=1e-12)


def test_softmax_empty_rejected():
    with pytest.raises(ShapeError):
        ops.softmax(Tensor(np.zeros(0)))


# --- elementwise ---------------------------------------------------------------------

def test_scalar_mul_zero_and_one(rng):
    x = rng.standard_normal((2, 3, 2, 2))
    np.testing.assert_array_equal(ops.scalar_broadcast_mul(Tensor(np.asarray(0.0)), Tensor(x)).data, np.zeros_like(x))
    np.testing.assert_array_equal(ops.scalar_broadcast_mul(Tensor(np.asarray(1.0)), Tensor(x)).data, x)


def test_scalar_mul_gate_gradient_is_sum_of_x_times_upstream(rng):
    x = rng.standard_normal((3, 2, 4))
    g = rng.standard_normal(3)
    probe = rng.standard_normal(x.shape)
    gg, gx = analytic_grads(lambda G, X: _probe(ops.scalar_broadcast_mul(G, X), probe), g, x)
    np.testing.assert_allclose(gg, (x * probe).sum(axis=(1, 2)), rtol=1e-12)
    np.testing.assert_allclose(gx, probe * g[:, None, None], rtol=1e-12)
    # shared scalar
    (gs, _) = analytic_grads(lambda G, X: _probe(ops.scalar_broadcast_mul(G, X), probe), np.asarray(0.7), x)
    assert gs == pytest.approx((x * probe).sum())


def test_add_requires_equal_shapes():
    with pytest.raises(ShapeError):
        ops.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


@pytest.mark.parametrize("k", [1, 2, 4])
def test_mean_over_copies_is_identity(rng, k):
    x = rng.standard_normal((2, 3))
    np.testing.assert_array_equal(ops.mean_over([Tensor(x)] * k).data, x)


def test_mean_over_three_copies_close(rng):
    x = rng.standard_normal((2, 3))
    np.testing.assert_allclose(ops.mean_over([Tensor(x)] * 3).data, x, rtol=1e-15)


def test_mean_over_empty():
    with pytest.raises(ShapeError):
        ops.mean_over([])


# --- loss ------------------------------------------------------------------------------

def test_cross_entropy_uniform_logits_is_ln10():
    loss = ops.cross_entropy_loss(Tensor(np.zeros((4, 10))), np.array([0, 3, 9, 5]))
    assert loss.item() == pytest.approx(math.log(10), abs=1e-12)


def test_cross_entropy_confident_logits_go_to_zero():
    logits = np.full((2, 10), -50.0)
    logits[0, 2] = logits[1, 7] = 50.0
    assert ops.cross_entropy_loss(Tensor(logits), np.array([2, 7])).item() < 1e-30


def test_cross_entropy_gradient(rng):
    logits = rng.standard_normal((5, 4))
    labels = np.array([0, 3, 1, 1, 2])
    (g,) = analytic_grads(lambda L: ops.cross_entropy_loss(L, labels), logits)
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    onehot = np.eye(4)[labels]
    np.testing.assert_allclose(g, (p - onehot) / 5, rtol=1e-12)
    f = lambda: ops.cross_entropy_loss(Tensor(logits), labels).item()
    assert max_rel_err(g, numeric_grad(f, logits)) < 1e-5


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ValueError):
        ops.cross_entropy_loss(Tensor(np.zeros((2, 3))), np.array([0, 3]))


# --- randomized finite-difference property (all primitives) -------------------------------

PRIMS = {
    "relu": lambda X: ops.relu(X),
    "softmax": lambda X: ops.softmax(ops.flatten(X)),
    "gap": lambda X: ops.global_avg_pool(X),
    "maxpool": lambda X: ops.maxpool2x2(X),
    "flatten": lambda X: ops.flatten(X),
    "select": lambda X: ops.select(X, (slice(None), 1)),
    "mul_const": lambda X: ops.mul_const(X, -1.5),
}


@settings(max_examples=60, deadline=None)
@given(name=st.sampled_from(sorted(PRIMS)), seed=st.integers(0, 2 ** 31 - 1))
def test_primitive_gradients_property(name, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((2, 3, 4, 4))
    # keep away from relu / maxpool kinks: no |x| < 1e-2 and no near-ties in a pool window
    x = np.where(np.abs(x) < 1e-2, 0.5, x)
    if name == "maxpool":
        x = x + np.arange(x.size).reshape(x.shape) * 1e-3 * r.permutation(x.size).reshape(x.shape) / x.size
    op = PRIMS[name]
    probe = r.standard_normal(op(Tensor(x)).shape)
    f = lambda: float((op(Tensor(x)).data * probe).sum())
    (g,) = analytic_grads(lambda X: _probe(op(X), probe), x)
    assert max_rel_err(g, numeric_grad(f, x), floor=1e-7) < 1e-5


# --- engine behaviour ----------------------------------------------------------------------

def test_nan_is_an_error():
    with pytest.raises(NonFiniteError):
        ops.mul_const(Tensor(np.array([np.nan, 1.0])), 2.0)


def test_finite_checks_can_be_disabled():
    prev = set_finite_checks(False)
    try:
        out = ops.relu(Tensor(np.array([np.inf])))
        assert np.isinf(out.data).all()
    finally:
        set_finite_checks(prev)


def test_forward_is_deterministic(rng):
    x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    b = np.zeros(4, np.float32)
    a = ops.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    c = ops.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    assert a.tobytes() == c.tobytes()


def test_tape_accumulates_gradients_across_backward_calls():
    w = Tensor(np.array([2.0]), requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            y = ops.sum_all(ops.mul_const(w, 3.0))
        tape.backward(y)
    np.testing.assert_array_equal(w.grad, [6.0])


def test_no_recording_outside_tape():
    w = Tensor(np.array([2.0]), requires_grad=True)
    y = ops.mul_const(w, 3.0)
    assert y.requires_grad
    with Tape() as tape:
        pass
    assert len(tape) == 0


def test_tape_is_cleared():
    w = Tensor(np.array([2.0]), requires_grad=True)
    with Tape() as tape:
        ops.mul_const(w, 3.0)
    assert len(tape) == 1
    tape.clear()
    assert len(tape) == 0
