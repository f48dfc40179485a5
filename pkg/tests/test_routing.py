import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crosspath import ops
from crosspath.routing import CrossConnectLayer, GateUnit, average_heads, compute_gates, cross_connect, expand_input
from crosspath.tensor import ShapeError, Tensor

from conftest import analytic_grads, max_rel_err, numeric_grad


def _zero_logits(layer):
    for u in layer.gate_units:
        u.w2.data[...] = 0
        u.b2.data[...] = 0


def _inputs(rng, m, shape, dtype=np.float32):
    return [Tensor(rng.standard_normal(shape).astype(dtype)) for _ in range(m)]


# --- examples -----------------------------------------------------------------------------

def test_zero_logits_two_by_two_gives_average():
    layer = CrossConnectLayer(2, 2, channels=1)
    _zero_logits(layer)
    x1 = Tensor(np.array([[[[1.0, 1.0], [1.0, 1.0]]]], np.float32))
    x2 = Tensor(np.full((1, 1, 2, 2), 3.0, np.float32))
    out = layer.forward([x1, x2])
    for y in out.outputs:
        np.testing.assert_array_equal(y.data, np.full((1, 1, 2, 2), 2.0))
    np.testing.assert_array_equal(out.gates.values, np.full((1, 2, 2), 0.5))


def test_dominant_logit_passes_input_through():
    layer = CrossConnectLayer(1, 2, channels=3)
    _zero_logits(layer)
    layer.gate_units[0].b2.data[:] = [80.0, -80.0]
    x = np.random.default_rng(0).standard_normal((2, 3, 4, 4)).astype(np.float32)
    y1, y2 = layer.forward([Tensor(x)]).outputs
    np.testing.assert_allclose(y1.data, x, rtol=1e-6)
    assert np.abs(y2.data).max() < 1e-30


def test_fixed_stitch_uses_coefficients_and_is_not_normalized():
    layer = CrossConnectLayer(2, 2, channels=1, mode="fixed-stitch")
    layer.coeffs.data[...] = [[1.0, 2.0], [0.5, 0.0]]
    out = layer.forward([Tensor(np.ones((1, 1, 2, 2), np.float32)), Tensor(np.full((1, 1, 2, 2), 3.0, np.float32))])
    np.testing.assert_array_equal(out.outputs[0].data, np.full((1, 1, 2, 2), 7.0))
    np.testing.assert_array_equal(out.outputs[1].data, np.full((1, 1, 2, 2), 0.5))
    assert not out.gates.is_column_stochastic()


def test_fixed_stitch_init_near_uniform():
    layer = CrossConnectLayer(3, 3, channels=4, mode="fixed-stitch", rng=np.random.default_rng(5))
    assert np.abs(layer.coeffs.data - 1 / 3).max() < 0.06
    assert layer.num_parameters() == 9


def test_gate_unit_parameter_counts():
    assert GateUnit(3, 2).num_parameters() == 98
    assert GateUnit(16, 2).num_parameters() == 306
    assert GateUnit(32, 2).num_parameters() == 562
    assert GateUnit(128, 2).num_parameters() == 2098


def test_gate_on_dense_input_skips_pooling():
    unit = GateUnit(5, 3)
    x = np.random.default_rng(1).standard_normal((4, 5)).astype(np.float32)
    a, g = compute_gates(unit, Tensor(x))
    h = np.maximum(x @ unit.w1.data + unit.b1.data, 0)
    np.testing.assert_allclose(a.data, h @ unit.w2.data + unit.b2.data, rtol=1e-5)
    assert g.shape == (4, 3)


def test_shape_errors():
    layer = CrossConnectLayer(2, 2, channels=3)
    with pytest.raises(ShapeError):
        layer.forward([Tensor(np.zeros((1, 3, 4, 4)))])
    with pytest.raises(ShapeError):
        layer.forward([Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((1, 3, 2, 2)))])
    with pytest.raises(ShapeError):
        layer.forward([Tensor(np.zeros((1, 4, 4, 4)))] * 2)
    with pytest.raises(ValueError):
        CrossConnectLayer(0, 2, channels=3)
    with pytest.raises(ValueError):
        expand_input(layer, Tensor(np.zeros((1, 3, 4, 4))))


def test_average_heads_requires_matching_shapes():
    with pytest.raises(ShapeError):
        average_heads([Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4)))])
    with pytest.raises(ValueError):
        average_heads([])


def test_routing_gradients_include_gate_weights():
    rng = np.random.default_rng(3)
    layer = CrossConnectLayer(2, 3, channels=2, rng=rng, dtype=np.float64)
    xs = [rng.standard_normal((2, 2, 3, 3)) for _ in range(2)]
    u = layer.gate_units[1]
    probes = [rng.standard_normal((2, 2, 3, 3)) for _ in range(3)]

    def loss_value():
        ys = layer.forward([Tensor(x) for x in xs]).outputs
        return float(sum((y.data * p).sum() for y, p in zip(ys, probes)))

    def build(x0, x1):
        ys = layer.forward([x0, x1]).outputs
        return ops.add_n([ops.sum_all(_times(y, p)) for y, p in zip(ys, probes)])

    gx0, gx1 = analytic_grads(build, *xs)
    assert max_rel_err(gx0, numeric_grad(loss_value, xs[0])) < 1e-6
    assert max_rel_err(gx1, numeric_grad(loss_value, xs[1])) < 1e-6
    # gate weights
    for t in (u.w1, u.w2, u.b2):
        t.zero_grad()
    from crosspath.tensor import Tape
    with Tape() as tape:
        loss = build(Tensor(xs[0]), Tensor(xs[1]))
    tape.backward(loss)
    for t in (u.w1, u.w2, u.b2):
        assert max_rel_err(t.grad, numeric_grad(loss_value, t.data), floor=1e-7) < 1e-5


def _times(y, p):
    from crosspath.tensor import emit
    return emit(y.data * p, (y,), lambda g: (g * p,), "probe_mul")


# --- property suite (>= 1000 randomized cases in total) -----------------------------------------

layer_shapes = st.tuples(
    st.integers(1, 4),  # m
    st.integers(1, 4),  # n
    st.integers(1, 6),  # channels
    st.integers(1, 5),  # batch
    st.sampled_from([(1, 1), (2, 3), (4, 4)]),  # spatial, or dense when (1, 1) with flag
    st.booleans(),  # dense input
    st.integers(0, 2 ** 31 - 1),
)


def _make(case, dtype=np.float32):
    m, n, c, batch, hw, dense, seed = case
    rng = np.random.default_rng(seed)
    layer = CrossConnectLayer(m, n, channels=c, rng=rng, dtype=dtype)
    # scale gate weights up so gates are far from uniform on some draws
    scale = rng.uniform(0.1, 8.0)
    for u in layer.gate_units:
        u.w2.data *= dtype(scale)
        u.b2.data[...] = rng.standard_normal(n).astype(dtype) * scale
    shape = (batch, c) if dense else (batch, c, *hw)
    xs = [Tensor((rng.standard_normal(shape) * rng.uniform(0.1, 10)).astype(dtype)) for _ in range(m)]
    return layer, xs, rng


@settings(max_examples=300, deadline=None)
@given(case=layer_shapes)
def test_gates_are_column_stochastic(case):
    layer, xs, _ = _make(case)
    gm = layer.forward(xs).gates
    assert gm.values.shape == (xs[0].shape[0], layer.n, layer.m)
    assert np.all(gm.values >= 0)
    assert np.abs(gm.column_sums() - 1.0).max() <= 1e-6


@settings(max_examples=300, deadline=None)
@given(case=layer_shapes)
def test_mass_is_conserved(case):
    layer, xs, _ = _make(case)
    ys = layer.forward(xs).outputs
    total_in = sum(x.data.astype(np.float64).sum() for x in xs)
    total_out = sum(y.data.astype(np.float64).sum() for y in ys)
    scale = max(1.0, sum(np.abs(x.data.astype(np.float64)).sum() for x in xs))
    assert abs(total_out - total_in) <= 1e-5 * scale


@settings(max_examples=250, deadline=None)
@given(case=layer_shapes)
def test_zero_logits_mix_uniformly(case):
    layer, xs, _ = _make(case)
    _zero_logits(layer)
    out = layer.forward(xs)
    assert np.all(out.gates.values == np.float32(1.0 / layer.n))
    expected = sum(x.data.astype(np.float64) for x in xs) / layer.n
    for y in out.outputs:
        np.testing.assert_allclose(y.data, expected, rtol=1e-5, atol=1e-5)


@settings(max_examples=250, deadline=None)
@given(case=layer_shapes)
def test_samples_are_routed_independently(case):
    layer, xs, rng = _make(case)
    batch = xs[0].shape[0]
    perm = rng.permutation(batch)
    out = layer.forward(xs)
    out_p = layer.forward([Tensor(x.data[perm]) for x in xs])
    np.testing.assert_array_equal(out_p.gates.values, out.gates.values[perm])
    for y, yp in zip(out.outputs, out_p.outputs):
        np.testing.assert_array_equal(yp.data, y.data[perm])


def test_single_output_gate_is_one():
    unit = GateUnit(4, 1, np.random.default_rng(0))
    _, g = compute_gates(unit, Tensor(np.random.default_rng(1).standard_normal((3, 4, 2, 2)).astype(np.float32)))
    np.testing.assert_array_equal(g.data, np.ones((3, 1)))


def test_one_to_one_layer_is_identity():
    x = np.random.default_rng(2).standard_normal((2, 3, 4, 4)).astype(np.float32)
    (y,), gm = cross_connect(CrossConnectLayer(1, 1, channels=3), [Tensor(x)])
    np.testing.assert_array_equal(y.data, x)


def test_channel_shift_changes_gates():
    rng = np.random.default_rng(4)
    unit = GateUnit(3, 2, rng, dtype=np.float64)
    x = rng.standard_normal((1, 3, 4, 4))
    _, g1 = compute_gates(unit, Tensor(x))
    _, g2 = compute_gates(unit, Tensor(x + np.array([1.0, -2.0, 0.5])[None, :, None, None]))
    assert not np.allclose(g1.data, g2.data)


def test_forced_identity_gates_route_straight_through():
    layer = CrossConnectLayer(2, 2, channels=2)
    _zero_logits(layer)
    layer.gate_units[0].b2.data[:] = [100.0, -100.0]
    layer.gate_units[1].b2.data[:] = [-100.0, 100.0]
    xs = _inputs(np.random.default_rng(0), 2, (2, 2, 3, 3))
    ys, _ = cross_connect(layer, xs)
    np.testing.assert_allclose(ys[0].data, xs[0].data, rtol=1e-6)
    np.testing.assert_allclose(ys[1].data, xs[1].data, rtol=1e-6)


def test_expand_input_examples():
    img = np.random.default_rng(5).random((2, 3, 4, 4)).astype(np.float32)
    layer = CrossConnectLayer(1, 2, channels=3)
    _zero_logits(layer)
    halves = expand_input(layer, Tensor(img))
    for h in halves:
        np.testing.assert_array_equal(h.data, img * np.float32(0.5))
    layer.gate_units[0].b2.data[:] = [200.0, -200.0]
    full, empty = expand_input(layer, Tensor(img))
    np.testing.assert_array_equal(full.data, img)
    assert not empty.data.any()
    layer.gate_units[0].b2.data[:] = [0.3, -0.4]
    parts = expand_input(layer, Tensor(img))
    np.testing.assert_allclose(parts[0].data + parts[1].data, img, atol=1e-6)


def test_average_heads_examples():
    a = Tensor(np.array([[2.0, 0.0]]))
    b = Tensor(np.array([[0.0, 2.0]]))
    np.testing.assert_array_equal(average_heads([a, b]).data, [[1.0, 1.0]])
    np.testing.assert_array_equal(average_heads([a, a]).data, a.data)
    np.testing.assert_array_equal(average_heads([a]).data, a.data)


def test_fixed_stitch_coefficients_ignore_input():
    layer = CrossConnectLayer(2, 2, channels=2, mode="fixed-stitch")
    rng = np.random.default_rng(0)
    g1 = layer.forward(_inputs(rng, 2, (3, 2, 2, 2))).gates.values
    g2 = layer.forward(_inputs(rng, 2, (3, 2, 2, 2))).gates.values
    np.testing.assert_array_equal(g1, g2)
