import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.signal import correlate

from traffic_s2s.autodiff import Tape, backward, finite_diff_gradient, max_relative_error
from traffic_s2s.errors import ContractError, DimensionError

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def grad_check(build, params, eps=1e-5, tol=1e-6):
    def f(p):
        tape = Tape()
        return build(tape, tape.params_from(p)).value.item()

    tape = Tape()
    loss = build(tape, tape.params_from(params))
    g = backward(tape, loss)
    fd = finite_diff_gradient(f, params, eps)
    assert max_relative_error(g, fd) < tol


def conv_ref(x, k, b):
    """Zero-padded 'same' cross-correlation via scipy, one (out, in) pair at a time."""
    out = np.zeros((k.shape[0],) + x.shape[1:])
    for o in range(k.shape[0]):
        for i in range(k.shape[1]):
            out[o] += correlate(x[i], k[o, i], mode="same")
        out[o] += b[o]
    return out


def test_conv2d_identity_and_hand_values():
    t = Tape()
    y = t.conv2d(t.const(np.array([[[2.0]]])), t.const(np.ones((1, 1, 1, 1))), t.const(np.zeros(1)))
    assert y.value.tolist() == [[[2.0]]]
    y = t.conv2d(t.const(np.ones((1, 3, 3))), t.const(np.ones((1, 1, 3, 3))), t.const(np.zeros(1)))
    assert y.value[0].tolist() == [[4, 6, 4], [6, 9, 6], [4, 6, 4]]


def test_conv2d_bias_only(rng):
    t = Tape()
    y = t.conv2d(t.const(rng.normal(size=(3, 4, 5))), t.const(np.zeros((2, 3, 3, 3))), t.const(np.full(2, 5.0)))
    assert np.all(y.value == 5.0)


def test_conv2d_matches_scipy(rng):
    x = rng.normal(size=(3, 5, 4))
    k = rng.normal(size=(2, 3, 3, 3))
    b = rng.normal(size=2)
    t = Tape()
    y = t.conv2d(t.const(x), t.const(k), t.const(b))
    np.testing.assert_allclose(y.value, conv_ref(x, k, b), atol=1e-12)


def test_conv3d_matches_scipy(rng):
    x = rng.normal(size=(2, 2, 3, 4, 4))
    k = rng.normal(size=(3, 2, 3, 3, 3))
    b = rng.normal(size=3)
    t = Tape()
    y = t.conv3d(t.const(x), t.const(k), t.const(b))
    for n in range(2):
        np.testing.assert_allclose(y.value[n], conv_ref(x[n], k, b), atol=1e-12)


def test_conv_identity_kernel_is_identity(rng):
    x = rng.normal(size=(3, 4, 4))
    t = Tape()
    y = t.conv2d(t.const(x), t.const(np.eye(3).reshape(3, 3, 1, 1)), t.const(np.zeros(3)))
    assert np.array_equal(y.value, x)


@given(a=finite, b=finite, seed=st.integers(0, 2**16))
def test_conv2d_linearity(a, b, seed):
    r = np.random.default_rng(seed)
    x, y = r.normal(size=(2, 2, 4, 5))
    k = r.normal(size=(3, 2, 3, 3))
    t = Tape()
    zero = t.const(np.zeros(3))
    conv = lambda v: t.conv2d(t.const(v), t.const(k), zero).value
    np.testing.assert_allclose(conv(a * x + b * y), a * conv(x) + b * conv(y), atol=1e-10)


def test_conv_errors():
    t = Tape()
    with pytest.raises(DimensionError):
        t.conv2d(t.const(np.ones((2, 3, 3))), t.const(np.ones((1, 3, 3, 3))), t.const(np.zeros(1)))
    with pytest.raises((DimensionError, ContractError)):
        t.conv2d(t.const(np.ones((1, 3, 3))), t.const(np.ones((1, 1, 2, 2))), t.const(np.zeros(1)))


def test_elementwise_examples():
    t = Tape()
    c = lambda v: t.const(np.array(v, dtype=float))
    assert t.hadamard(c([1, 2, 3]), c([0, 0, 0])).value.tolist() == [0, 0, 0]
    assert t.hadamard(c([1, 2, 3]), c([1, 1, 1])).value.tolist() == [1, 2, 3]
    assert t.hadamard(c([2, 3]), c([4, 5])).value.tolist() == [8, 15]
    assert t.sigmoid(c(0.0)).value == 0.5
    assert t.tanh(c(0.0)).value == 0.0
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(t.matmul(t.const(np.eye(2)), t.const(m)).value, m)
    with pytest.raises(DimensionError):
        t.add(c([1, 2]), c([1, 2, 3]))
    with pytest.raises(DimensionError):
        t.hadamard(c([1, 2]), c([1, 2, 3]))
    with pytest.raises(DimensionError):
        t.matmul(t.const(np.ones((2, 3))), t.const(np.ones((2, 3))))


def test_mse_examples():
    t = Tape()
    c = lambda v: t.const(np.array(v, dtype=float))
    assert t.mse_loss(c([1, 2]), c([1, 2])).value == 0
    assert t.mse_loss(c([0, 0]), c([2, 0])).value == 2
    assert t.mse_loss(c([1, 2, 3]), c([3, 2, 1])).value == pytest.approx(8 / 3, abs=1e-15)
    with pytest.raises(DimensionError):
        t.mse_loss(c([1, 2]), c([1]))


@given(arrays(np.float64, 20, elements=st.floats(-30, 30)))
def test_activation_ranges(x):
    # |x| <= 30 keeps both activations strictly inside their open ranges in float64
    t = Tape()
    s = t.sigmoid(t.const(x)).value
    h = t.tanh(t.const(x / 2)).value
    assert np.all((s > 0) & (s < 1))
    assert np.all((h > -1) & (h < 1))


def test_backward_chain_rule_example():
    t = Tape()
    w = t.param("w", np.array([1.0]))
    loss = t.mse_loss(t.scale(w, 2.0), t.const(np.array([4.0])))
    assert backward(t, loss)["w"].tolist() == [-8.0]


def test_backward_unused_param_and_product_rule(rng):
    a, b = rng.normal(size=4), rng.normal(size=4)
    t = Tape()
    pa, pb = t.param("a", a), t.param("b", b)
    t.param("unused", np.ones(3))
    g = backward(t, t.sum(t.hadamard(pa, pb)))
    assert np.array_equal(g["a"], b)
    assert np.array_equal(g["b"], a)
    assert np.array_equal(g["unused"], np.zeros(3))


def test_backward_rejects_non_scalar():
    t = Tape()
    with pytest.raises(ContractError):
        backward(t, t.param("w", np.ones(2)))


def test_backward_twice_identical(rng):
    t = Tape()
    w = t.param("w", rng.normal(size=(3, 2, 3, 3)))
    x = t.const(rng.normal(size=(2, 4, 4)))
    loss = t.sum(t.tanh(t.conv2d(x, w, t.const(np.zeros(3)))))
    g1 = backward(t, loss)
    g2 = backward(t, loss)
    assert all(np.array_equal(g1[k], g2[k]) for k in g1)


def test_tape_topological_order(rng):
    t = Tape()
    a = t.param("a", rng.normal(size=3))
    b = t.tanh(t.add(a, t.const(np.ones(3))))
    for node in t.nodes:
        assert all(p.id < node.id for p in node.inputs)
        assert node.value.size == int(np.prod(node.shape))
    backward(t, t.sum(b))
    assert all(n.gradient.shape == n.value.shape for n in t.nodes)


def test_finite_diff_examples():
    g = finite_diff_gradient(lambda p: float(p["p"][0] ** 2), {"p": np.array([3.0])}, 1e-5)
    assert abs(g["p"][0] - 6) < 1e-6
    g = finite_diff_gradient(lambda p: 1.5, {"p": np.ones((2, 2))})
    assert np.all(np.abs(g["p"]) < 1e-9)


@pytest.mark.parametrize("op", ["conv2d", "conv3d", "linear", "batchnorm", "stack", "slice", "gates"])
def test_op_gradients(op, rng):
    y = rng.normal(size=(2, 3, 4, 4))
    if op == "conv2d":
        params = {"x": rng.normal(size=(2, 2, 4, 4)), "k": rng.normal(size=(3, 2, 3, 3)), "b": rng.normal(size=3)}
        build = lambda t, p: t.mse_loss(t.conv2d(p["x"], p["k"], p["b"]), t.const(y))
    elif op == "conv3d":
        y3 = rng.normal(size=(2, 2, 3, 3, 3))
        params = {"x": rng.normal(size=(2, 2, 3, 3, 3)), "k": rng.normal(size=(2, 2, 3, 3, 3)), "b": rng.normal(size=2)}
        build = lambda t, p: t.mse_loss(t.conv3d(p["x"], p["k"], p["b"]), t.const(y3))
    elif op == "linear":
        yl = rng.normal(size=(3, 2))
        params = {"x": rng.normal(size=(3, 4)), "w": rng.normal(size=(4, 2)), "b": rng.normal(size=2)}
        build = lambda t, p: t.mse_loss(t.tanh(t.linear(p["x"], p["w"], p["b"])), t.const(yl))
    elif op == "batchnorm":
        params = {"x": rng.normal(size=(2, 3, 4, 4)), "g": rng.normal(size=3), "s": rng.normal(size=3)}
        build = lambda t, p: t.mse_loss(t.tanh(t.batchnorm(p["x"], p["g"], p["s"])), t.const(y))
    elif op == "stack":
        params = {"a": rng.normal(size=(3, 4, 4)), "b": rng.normal(size=(3, 4, 4))}
        build = lambda t, p: t.mse_loss(t.stack([p["a"], t.sigmoid(p["b"])], axis=0), t.const(y))
    elif op == "slice":
        params = {"a": rng.normal(size=(2, 6, 4, 4))}
        build = lambda t, p: t.mse_loss(t.slice(p["a"], 1, 2, 5), t.const(y))
    else:
        params = {"a": rng.normal(size=(2, 3, 4, 4)), "b": rng.normal(size=(3, 4, 4))}
        build = lambda t, p: t.mse_loss(
            t.hadamard(t.sigmoid(p["a"]), t.tanh(t.sub(p["a"], t.tile(p["b"], 2)))), t.const(y))
    grad_check(build, params)
