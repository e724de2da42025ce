import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from crystalmt import numerics as nx
from oracles import rel_err


def test_linear_identity():
    y = nx.linear([1.0, 2.0], np.eye(2), [0.0, 0.0])
    assert y.data.tolist() == [1.0, 2.0]


def test_linear_arithmetic():
    y = nx.linear([1.0, 1.0], [[2.0], [3.0]], [1.0])
    assert y.data.tolist() == [6.0]


@given(arrays(np.float64, 2, elements=st.floats(-1e3, 1e3)))
def test_linear_zero_weight(x):
    y = nx.linear(x, np.zeros((2, 2)), [5.0, 7.0])
    assert y.data.tolist() == [5.0, 7.0]


def test_linear_shape_error_names_both_shapes():
    with pytest.raises(nx.ShapeError, match=r"\(3,\).*\(2, 2\)"):
        nx.linear(np.ones(3), np.eye(2), np.zeros(2))


def test_activations():
    assert nx.sigmoid(0.0).item() == 0.5
    assert nx.softplus(0.0).item() == pytest.approx(0.693147, abs=1e-6)
    s = nx.sigmoid(50.0).item()
    # exact rationals: 1 - 1e-20 is not representable as a double
    assert 1 - Fraction(1, 10**20) < Fraction(s) <= 1


def test_activations_stable_at_extremes():
    t = np.array([-500.0, -50.0, 0.0, 50.0, 500.0])
    s = nx.sigmoid(t).data
    sp = nx.softplus(t).data
    assert np.all(np.isfinite(s)) and np.all(np.isfinite(sp))
    assert sp[-1] == 500.0
    assert sp[0] == pytest.approx(math.exp(-500.0), rel=1e-12)


def test_unknown_activation():
    with pytest.raises(ValueError):
        nx.activate(1.0, "relu")


def test_mean_rows():
    v = np.array([0.3, -1.2, 4.0])
    assert np.allclose(nx.mean_rows(np.tile(v, (5, 1))).data, v, rtol=1e-15, atol=0)
    assert np.array_equal(nx.mean_rows(v[None, :]).data, v)
    assert nx.mean_rows([[0.0, 2.0], [2.0, 0.0]]).data.tolist() == [1.0, 1.0]


def test_mean_rows_empty():
    with pytest.raises(nx.ShapeError):
        nx.mean_rows(np.zeros((0, 3)))


def test_backward_square():
    tape = nx.Tape()
    x = tape.leaf(3.0, name="x")
    y = nx.mul(x, x)
    grads = tape.backward(y)
    assert grads["x"] == 6.0


def test_backward_independent_leaf_is_zero():
    tape = nx.Tape()
    x = tape.leaf([1.0, 2.0], name="x")
    unused = tape.leaf([[1.0, 2.0]], name="unused")
    loss = nx.weighted_sum(x, [1.0, 1.0])
    grads = tape.backward(loss)
    assert np.array_equal(grads["unused"], np.zeros((1, 2)))
    assert grads["unused"].shape == unused.shape


def test_backward_requires_scalar():
    tape = nx.Tape()
    x = tape.leaf([1.0, 2.0])
    with pytest.raises(nx.TapeError):
        tape.backward(nx.mul(x, x))


def test_tape_spent_until_reset():
    tape = nx.Tape()
    x = tape.leaf(2.0, name="x")
    tape.backward(nx.mul(x, x))
    with pytest.raises(nx.TapeError):
        tape.backward(nx.mul(x, x))
    tape.reset()
    x = tape.leaf(2.0, name="x")
    assert tape.backward(nx.mul(x, x))["x"] == 4.0


@pytest.mark.filterwarnings("ignore:overflow")
def test_nonfinite_is_reported_with_op_name():
    with pytest.raises(nx.NumericalError, match="mul"):
        nx.mul([1e200], [1e200])


def test_mixing_tapes_is_an_error():
    a = nx.Tape().leaf([1.0])
    b = nx.Tape().leaf([1.0])
    with pytest.raises(nx.TapeError):
        nx.add(a, b)


def test_mse_of_linear_matches_finite_differences(rng):
    x = rng.normal(size=(4, 3))
    W0 = rng.normal(size=(3, 2))
    b0 = rng.normal(size=2)
    y = rng.normal(size=(4, 2))

    def mse(W, b):
        d = nx.sub(nx.linear(x, W, b), y)
        return nx.weighted_sum(nx.mean_rows(nx.mul(d, d)), [0.5, 0.5])

    tape = nx.Tape()
    grads = tape.backward(mse(tape.leaf(W0, name="W"), tape.leaf(b0, name="b")))
    fd_W = nx.finite_diff_gradient(lambda W: mse(W, b0).item(), W0, 1e-5)
    fd_b = nx.finite_diff_gradient(lambda b: mse(W0, b).item(), b0, 1e-5)
    assert rel_err(grads["W"], fd_W).max() < 1e-6
    assert rel_err(grads["b"], fd_b).max() < 1e-6


def test_finite_diff_examples():
    assert nx.finite_diff_gradient(lambda x: float(x[0] ** 2), [3.0], 1e-4)[0] == pytest.approx(6.0, abs=1e-6)
    assert np.array_equal(nx.finite_diff_gradient(lambda x: 1.0, np.ones(3)), np.zeros(3))
    g = nx.finite_diff_gradient(lambda x: nx.softplus(x).data.sum(), [0.0], 1e-5)
    assert g[0] == pytest.approx(0.5, abs=1e-6)


def test_finite_diff_propagates_nonfinite():
    with pytest.raises(nx.NumericalError):
        nx.finite_diff_gradient(lambda x: float("nan"), [1.0])


def _check_primitive(build, inputs, rng_tol=1e-5):
    """Gradient of sum(w * build(*inputs)) against central differences for every input."""
    out0 = build(*inputs)
    w = np.random.default_rng(0).normal(size=out0.shape)
    tape = nx.Tape()
    leaves = [tape.leaf(a, name=str(k)) for k, a in enumerate(inputs)]
    grads = tape.backward(nx.weighted_sum(build(*leaves), w))
    for k, a in enumerate(inputs):
        def f(v, k=k):
            args = list(inputs)
            args[k] = v
            return float(np.sum(w * build(*args).data))

        fd = nx.finite_diff_gradient(f, a, 1e-5)
        assert rel_err(grads[str(k)], fd).max() < rng_tol, f"input {k}"


IDX = np.array([0, 2, 2, 1, 0, 2])


@pytest.mark.parametrize(
    "build, shapes",
    [
        (lambda x, W: nx.matmul(x, W), [(4, 3), (3, 2)]),
        (lambda x, W, b: nx.linear(x, W, b), [(4, 3), (3, 2), (2,)]),
        (lambda x, W, b: nx.linear(x, W, b), [(3,), (3, 2), (2,)]),
        (lambda a, b: nx.add(a, b), [(3, 2), (2,)]),
        (lambda a, b: nx.sub(a, b), [(3, 2), (3, 2)]),
        (lambda a, b: nx.mul(a, b), [(3, 2), (3, 2)]),
        (lambda x: nx.sigmoid(x), [(3, 4)]),
        (lambda x: nx.softplus(x), [(3, 4)]),
        (lambda x: nx.mean_rows(x), [(5, 3)]),
        (lambda x: nx.gather_rows(x, IDX), [(3, 2)]),
        (lambda x: nx.segment_sum(x, IDX, 4), [(6, 2)]),
        (lambda x: nx.segment_mean(x, IDX, 3), [(6, 2)]),
        (lambda a, b: nx.concat([a, b]), [(3, 2), (3, 1)]),
    ],
)
def test_primitive_gradients(build, shapes, rng):
    _check_primitive(build, [rng.normal(size=s) for s in shapes])


def test_linearity_homogeneous(rng):
    x = rng.normal(size=3)
    W = rng.normal(size=(3, 2))
    zero = nx.linear(np.zeros(3), W, np.zeros(2)).data
    for alpha in (-2.0, 0.5, 3.0):
        lhs = nx.linear(alpha * x, W, np.zeros(2)).data - zero
        assert np.allclose(lhs, alpha * (nx.linear(x, W, np.zeros(2)).data - zero), rtol=1e-14, atol=1e-14)


def test_determinism_bit_identical(rng):
    x = rng.normal(size=(7, 5))
    W = rng.normal(size=(5, 3))
    a = nx.softplus(nx.linear(x, W, np.ones(3))).data
    b = nx.softplus(nx.linear(x, W, np.ones(3))).data
    assert a.tobytes() == b.tobytes()


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-400, 400)))
def test_softplus_derivative_is_sigmoid(t):
    tape = nx.Tape()
    x = tape.leaf(t, name="x")
    g = tape.backward(nx.weighted_sum(nx.softplus(x), np.ones_like(t)))["x"]
    assert np.allclose(g, nx.sigmoid(t).data, rtol=1e-15, atol=0)


def test_five_point_stencil():
    g = nx.finite_diff_gradient(lambda x: float(np.sin(x[0])), [0.3], 1e-2, order=4)
    assert g[0] == pytest.approx(math.cos(0.3), abs=1e-9)
    # a direction the function ignores gives exactly zero
    f = lambda x: 1e3 * float(x[0]) ** 2 + 0.0 * float(x[1])
    assert nx.finite_diff_gradient(f, [0.7, 5.0], 1e-3, order=4)[1] == 0.0
    with pytest.raises(ValueError):
        nx.finite_diff_gradient(f, [0.0, 0.0], order=3)
