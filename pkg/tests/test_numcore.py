import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from msdet import numcore as nc
from msdet.errors import ContractError, DimensionError, ParseError


def _fd_check(fn, *shapes, seed=0, samples=30, positive=False):
    rng = np.random.default_rng(seed)
    params = []
    for i, shape in enumerate(shapes):
        v = rng.normal(size=shape)
        if positive:
            v = np.abs(v) + 0.5
        params.append(nc.Parameter(v, f"x{i}"))
    out_shape = fn(*params).shape
    w = nc.Tensor(rng.normal(size=out_shape))

    def f():
        return nc.tsum(fn(*params) * w)

    return nc.grad_check(f, params, samples=samples, seed=seed)


# --------------------------------------------------------------------- matmul
def test_matmul_identity():
    b = nc.Tensor([[3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_array_equal((nc.Tensor(np.eye(2)) @ b).data, b.data)


def test_matmul_hand_product():
    out = nc.Tensor([[1.0, 2.0], [3.0, 4.0]]) @ nc.Tensor([[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_zero():
    out = nc.Tensor(np.zeros((3, 2))) @ nc.Tensor(np.random.default_rng(1).normal(size=(2, 5)))
    assert not out.data.any()


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        nc.Tensor(np.ones((2, 3))) @ nc.Tensor(np.ones((2, 3)))


# -------------------------------------------------------------------- softmax
def test_softmax_uniform():
    np.testing.assert_allclose(nc.softmax(nc.Tensor(np.zeros(4))).data, [0.25] * 4, rtol=0, atol=1e-15)


def test_softmax_closed_form():
    y = nc.softmax(nc.Tensor([0.0, math.log(3.0)])).data
    np.testing.assert_allclose(y, [0.25, 0.75], rtol=1e-14)


def test_softmax_shift_invariance():
    x = np.random.default_rng(2).normal(size=(3, 5))
    a = nc.softmax(nc.Tensor(x), axis=1).data
    b = nc.softmax(nc.Tensor(x + 123.456), axis=1).data
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_softmax_large_inputs_stay_finite():
    y = nc.softmax(nc.Tensor([1000.0, 1000.0, -1000.0])).data
    assert np.all(np.isfinite(y))
    np.testing.assert_allclose(y, [0.5, 0.5, 0.0])


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-50, 50)), st.integers(0, 1))
def test_softmax_normalized(x, axis):
    y = nc.softmax(nc.Tensor(x), axis=axis).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=axis), 1.0, atol=1e-9)


def test_softmax_mask_blocks_entries():
    y = nc.softmax(nc.Tensor([1.0, 2.0, 3.0]), mask=np.array([False, True, False])).data
    assert y[1] == 0.0
    assert abs(y.sum() - 1.0) < 1e-15


# -------------------------------------------------------------------- sigmoid
def test_inverse_sigmoid_values():
    assert nc.inverse_sigmoid(nc.Tensor(0.5)).item() == 0.0
    assert abs(nc.inverse_sigmoid(nc.Tensor(0.75)).item() - math.log(3.0)) < 1e-15
    assert nc.sigmoid(nc.Tensor(0.0)).item() == 0.5


def test_inverse_sigmoid_clamps_boundaries():
    x = nc.inverse_sigmoid(nc.Tensor([0.0, 1.0])).data
    np.testing.assert_allclose(x, [math.log(1e-5 / (1 - 1e-5)), math.log((1 - 1e-5) / 1e-5)])


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-5, 1 - 1e-5))
def test_sigmoid_roundtrip(y):
    back = nc.sigmoid(nc.inverse_sigmoid(nc.Tensor(y))).item()
    assert abs(back - y) < 1e-9


# ----------------------------------------------------------- elementwise/reduce
def test_elementwise_basics():
    x = nc.Tensor([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(nc.add(x, 0.0).data, x.data)
    assert nc.tanh(nc.Tensor(0.0)).item() == 0.0
    assert nc.tsum(nc.Tensor([1.0, 2.0, 3.0])).item() == 6.0
    np.testing.assert_array_equal(nc.relu(x).data, [1.0, 0.0, 3.0])


def test_broadcast_error():
    with pytest.raises(DimensionError):
        nc.add(nc.Tensor(np.ones((2, 3))), nc.Tensor(np.ones((4,))))


def test_concat_and_slice():
    a, b = nc.Tensor(np.ones((2, 2))), nc.Tensor(np.zeros((2, 3)))
    c = nc.concat([a, b], axis=1)
    assert c.shape == (2, 5)
    np.testing.assert_array_equal(c[:, 1:3].data, [[1, 0], [1, 0]])
    with pytest.raises(DimensionError):
        nc.concat([a, nc.Tensor(np.ones((3, 3)))], axis=1)


def test_reduction_axis_error():
    with pytest.raises(DimensionError):
        nc.tsum(nc.Tensor(np.ones((2, 2))), axis=3)


# ----------------------------------------------------------- per-op VJP checks
OPS = {
    "add_broadcast": (lambda a, b: a + b, [(3, 4), (4,)]),
    "sub": (lambda a, b: a - b, [(3, 4), (3, 1)]),
    "mul_broadcast": (lambda a, b: a * b, [(2, 3, 4), (3, 1)]),
    "div": (lambda a, b: a / b, [(3, 4), (3, 4)]),
    "matmul": (lambda a, b: a @ b, [(3, 4), (4, 5)]),
    "matmul_batched": (lambda a, b: a @ b, [(2, 3, 4), (4, 2)]),
    "tanh": (nc.tanh, [(5, 3)]),
    "relu": (nc.relu, [(5, 3)]),
    "sigmoid": (nc.sigmoid, [(5, 3)]),
    "exp": (nc.exp, [(5, 3)]),
    "abs": (nc.tabs, [(5, 3)]),
    "square": (nc.square, [(5, 3)]),
    "sum_axis": (lambda a: nc.tsum(a, axis=1), [(3, 4, 2)]),
    "mean_keepdims": (lambda a: nc.mean(a, axis=(0, 2), keepdims=True), [(3, 4, 2)]),
    "softmax": (lambda a: nc.softmax(a, axis=-1), [(3, 6)]),
    "softmax_axis0": (lambda a: nc.softmax(a, axis=0), [(4, 3)]),
    "layer_norm": (lambda a, g, b: nc.layer_norm(a, g, b), [(4, 6), (6,), (6,)]),
    "reshape_transpose": (lambda a: nc.transpose(nc.reshape(a, (4, 3, 2)), (2, 0, 1)), [(6, 4)]),
    "getitem_basic": (lambda a: a[1:, ::2], [(4, 5)]),
    "getitem_advanced": (lambda a: a[np.array([0, 2, 2, 1])], [(3, 4)]),
    "concat": (lambda a, b: nc.concat([a, b], axis=0), [(2, 3), (4, 3)]),
    "stack": (lambda a, b: nc.stack([a, b], axis=1), [(2, 3), (2, 3)]),
    "maximum": (nc.maximum, [(4, 4), (4, 4)]),
    "minimum": (nc.minimum, [(4, 4), (4,)]),
    "clamp": (lambda a: nc.clamp(a, -0.5, 0.7), [(6, 6)]),
    "where": (lambda a, b: nc.where(np.eye(4, dtype=bool), a, b), [(4, 4), (4, 4)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_vjp_matches_central_differences(name):
    fn, shapes = OPS[name]
    assert _fd_check(fn, *shapes, seed=7) < 1e-6


def test_vjp_log_positive_domain():
    assert _fd_check(nc.log, (4, 4), positive=True) < 1e-6


def test_vjp_inverse_sigmoid_interior():
    p = nc.Parameter(np.random.default_rng(3).uniform(0.05, 0.95, size=(5,)), "p")
    assert nc.grad_check(lambda: nc.tsum(nc.inverse_sigmoid(p)), [p]) < 1e-6


# ------------------------------------------------------------------- bilinear
def _grid(h=4, w=5, c=3, seed=0):
    return np.random.default_rng(seed).normal(size=(h, w, c))


def test_bilinear_integer_points_are_exact():
    m = _grid()
    pts = np.array([[0.0, 0.0], [4.0, 3.0], [2.0, 1.0]])
    out = nc.bilinear_sample(nc.Tensor(m), nc.Tensor(pts)).data
    np.testing.assert_array_equal(out, [m[0, 0], m[3, 4], m[1, 2]])


def test_bilinear_horizontal_midpoint():
    m = _grid()
    out = nc.bilinear_sample(nc.Tensor(m), nc.Tensor([[1.5, 2.0]])).data
    np.testing.assert_allclose(out[0], 0.5 * (m[2, 1] + m[2, 2]), rtol=1e-15)


def test_bilinear_far_outside_is_zero():
    out = nc.bilinear_sample(nc.Tensor(_grid()), nc.Tensor([[-10.0, -10.0]])).data
    assert not out.any()


def test_bilinear_zero_padding_at_edge():
    m = _grid()
    # half a pixel left of column 0: half the stored value
    out = nc.bilinear_sample(nc.Tensor(m), nc.Tensor([[-0.5, 1.0]])).data
    np.testing.assert_allclose(out[0], 0.5 * m[1, 0], rtol=1e-15)


def test_bilinear_batched_leading_axes():
    maps = np.random.default_rng(5).normal(size=(2, 3, 4, 5, 2))
    pts = np.random.default_rng(6).uniform(-1, 5, size=(2, 3, 7, 2))
    out = nc.bilinear_sample(nc.Tensor(maps), nc.Tensor(pts)).data
    for i in range(2):
        for j in range(3):
            ref = nc.bilinear_sample(nc.Tensor(maps[i, j]), nc.Tensor(pts[i, j])).data
            np.testing.assert_array_equal(out[i, j], ref)


def test_bilinear_grad_check_cell_interiors():
    rng = np.random.default_rng(11)
    m = nc.Parameter(rng.normal(size=(5, 6, 3)), "map")
    cells = rng.integers(-1, 6, size=(12, 2)).astype(float)
    frac = rng.uniform(0.1, 0.9, size=(12, 2))
    pts = nc.Parameter(cells + frac, "pts")
    w = nc.Tensor(rng.normal(size=(12, 3)))
    err = nc.grad_check(lambda: nc.tsum(nc.bilinear_sample(m, pts) * w), [m, pts], samples=60)
    assert err < 1e-4


def test_bilinear_out_of_range_gradient_zero():
    m = nc.Parameter(_grid(), "map")
    pts = nc.Parameter([[-10.0, -10.0], [50.0, 2.0]], "pts")
    nc.backward(nc.tsum(nc.bilinear_sample(m, pts)))
    assert not m.grad.any()
    assert not pts.grad.any()


# ------------------------------------------------------------------- backward
def test_backward_sigmoid_at_zero():
    p = nc.Parameter(0.0, "p")
    nc.backward(nc.sigmoid(p))
    assert p.grad == 0.25


def test_backward_sum_product_vs_fd():
    rng = np.random.default_rng(0)
    a = nc.Parameter(rng.normal(size=(3, 4)), "A")
    b = nc.Parameter(rng.normal(size=(4, 2)), "B")
    assert nc.grad_check(lambda: nc.tsum(a @ b), [a, b], samples=20) < 1e-6


def test_unreached_parameter_untouched():
    p = nc.Parameter([1.0, 2.0], "used")
    q = nc.Parameter([3.0], "unused")
    nc.backward(nc.tsum(p * p))
    np.testing.assert_array_equal(p.grad, [2.0, 4.0])
    assert not q.grad.any()


def test_backward_rejects_nonscalar():
    p = nc.Parameter([1.0, 2.0], "p")
    with pytest.raises(ContractError):
        nc.backward(p * 2.0)


def test_backward_deterministic_replay():
    rng = np.random.default_rng(4)
    a = nc.Parameter(rng.normal(size=(6, 5)), "a")
    b = nc.Parameter(rng.normal(size=(5, 5)), "b")

    def loss():
        h = nc.tanh(a @ b)
        return nc.tsum(nc.softmax(h, axis=1) * h) + nc.tsum(nc.layer_norm(h, b[0], b[1]))

    nc.backward(loss())
    g1 = (a.grad.copy(), b.grad.copy())
    a.zero_grad()
    b.zero_grad()
    nc.backward(loss())
    assert np.array_equal(g1[0], a.grad) and np.array_equal(g1[1], b.grad)


def test_shared_subexpression_accumulates():
    p = nc.Parameter(3.0, "p")
    y = p * p
    nc.backward(y + y)
    assert p.grad == 12.0


def test_no_grad_builds_no_tape():
    p = nc.Parameter([1.0], "p")
    with nc.no_grad():
        y = p * 2.0
    assert not y.requires_grad


def test_detach_and_exact_mode():
    p = nc.Parameter(2.0, "p")
    nc.backward(p.detach() * p)
    assert p.grad == 2.0
    p.zero_grad()
    with nc.exact_gradients():
        nc.backward(p.detach() * p)
    assert p.grad == 4.0


# ----------------------------------------------------------------- grad_check
def test_grad_check_identity_projection():
    # at 0 the difference quotient 2h / 2h is exact in floating point
    p = nc.Parameter([0.0, 0.0, 0.0], "p")
    assert nc.grad_check(lambda: p[1], [p], samples=3) == 0.0
    q = nc.Parameter([1.5, -2.0, 0.3], "q")
    assert nc.grad_check(lambda: q[1], [q], samples=3) < 1e-10


def test_grad_check_detects_nondeterminism():
    p = nc.Parameter([1.0], "p")
    rng = np.random.default_rng(0)
    with pytest.raises(ContractError):
        nc.grad_check(lambda: nc.tsum(p * rng.normal()), [p])


def test_grad_check_flags_wrong_gradient():
    p = nc.Parameter([0.7, 1.1], "p")

    def bad():
        x = nc.as_tensor(p)
        # forward doubles, VJP claims identity
        return nc.tsum(nc.Tensor(2 * x.data, True, _parents=(x,), _vjp=lambda g: (g,), op="bad"))

    assert nc.grad_check(bad, [p], samples=2) > 0.4


# ------------------------------------------------------------------- snapshot
def test_snapshot_roundtrip(tmp_path):
    ps = nc.ParameterSet()
    rng = np.random.default_rng(0)
    ps.add("layer.w", rng.normal(size=(3, 4)))
    ps.add("layer.b", rng.normal(size=(4,)))
    ps.add("scale", 2.5)
    path = tmp_path / "p.snap"
    nc.write_snapshot(path, ps)
    raw = path.read_bytes()
    assert raw.startswith(b"NUMCORE-SNAPSHOT 1\n3\nlayer.w 3,4\nlayer.b 4\nscale \nEND\n")
    assert len(raw.split(b"END\n", 1)[1]) == 8 * (12 + 4 + 1)
    state = nc.read_snapshot(path)
    assert list(state) == ["layer.w", "layer.b", "scale"]
    for name, arr in state.items():
        np.testing.assert_array_equal(arr, ps[name].data)


def test_snapshot_truncated(tmp_path):
    ps = nc.ParameterSet()
    ps.add("w", np.ones((2, 2)))
    path = tmp_path / "p.snap"
    nc.write_snapshot(path, ps)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(ParseError, match="byte"):
        nc.read_snapshot(path)
