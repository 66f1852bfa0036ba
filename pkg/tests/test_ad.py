import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stablenode import ad
from stablenode.ad import Graph, GraphError, ShapeError, Tensor

finite = st.floats(-3.0, 3.0, allow_nan=False, allow_infinity=False)


def _grad(fn, x):
    g = Graph()
    xt = g.parameter("x", x)
    return ad.backward(fn(xt))["x"].data


def test_hand_derivatives():
    # d/dx sum(x^2 * 3) = 6x
    x = np.array([1.0, -2.0, 0.5])
    np.testing.assert_allclose(_grad(lambda t: ad.sum(ad.scale(ad.square(t), 3.0)), x), 6 * x)
    # d/dx sum(exp(x)) = exp(x)
    np.testing.assert_allclose(_grad(lambda t: ad.sum(ad.exp(t)), x), np.exp(x))
    # d/dx sum(tanh) = 1 - tanh^2
    np.testing.assert_allclose(_grad(lambda t: ad.sum(ad.tanh(t)), x), 1 - np.tanh(x) ** 2)


def test_matmul_and_broadcast_gradients(rng):
    a = rng.normal(size=(4, 3))
    w = rng.normal(size=(3, 2))
    b = rng.normal(size=(2,))

    for name in ("a", "w", "b"):

        def fn(t, name=name):
            vals = {"a": a, "w": w, "b": b}
            vals[name] = t
            return ad.sum(ad.tanh(ad.matmul(vals["a"], vals["w"]) + vals["b"]))

        rep = ad.grad_check(fn, {"a": a, "w": w, "b": b}[name], tol=1e-7)
        assert rep.passed, (name, rep.max_rel_error)


@pytest.mark.parametrize(
    "fn",
    [
        lambda t: ad.sum(ad.softplus(t)),
        lambda t: ad.sum(ad.sigmoid(t) * t),
        lambda t: ad.sum(ad.log(ad.square(t) + 1.0)),
        lambda t: ad.sum(ad.div(t, ad.square(t) + 2.0)),
        lambda t: ad.sum(ad.sqrt(ad.square(t) + 0.5)),
        lambda t: ad.mean(ad.min_over_axis(ad.reshape(t, (2, 3)), axis=1)),
        lambda t: ad.sum(ad.concat(ad.split(t, [2, 4], axis=0)[::-1], axis=0) * np.arange(6.0)),
        lambda t: ad.sum(ad.take(ad.reshape(t, (2, 3)), 1, [2, 0]) * np.array([1.0, 2.0])),
        lambda t: ad.sum(ad.lincomb([t, ad.square(t)], [0.5, -1.5])),
        lambda t: ad.sum(ad.where(np.arange(6) % 2 == 0, t, ad.exp(t))),
        lambda t: ad.sum(ad.broadcast(ad.reshape(t, (1, 6)), (3, 6)) * np.arange(18.0).reshape(3, 6)),
        lambda t: ad.sum(ad.stack([t, ad.neg(t)], axis=1) * np.ones((6, 2)) * 2.0),
    ],
)
def test_primitives_match_central_differences(fn):
    x = np.array([0.3, -1.2, 0.8, 1.7, -0.4, 0.05])
    rep = ad.grad_check(fn, x, tol=1e-6)
    assert rep.passed, rep


def test_relu_smooth_pieces():
    d = 0.1
    y = np.array([-1.0, 0.0, 0.05, 0.1, 2.0])
    out = ad.relu_smooth(Tensor(y), d).data
    np.testing.assert_allclose(out, [0.0, 0.0, 0.05**2 / 0.2, 0.05, 1.95], atol=1e-15)
    # derivative is continuous at both knots
    g = _grad(lambda t: ad.sum(ad.relu_smooth(t, d)), np.array([-1e-12, 1e-12, d - 1e-12, d + 1e-12]))
    np.testing.assert_allclose(g, [0.0, 0.0, 1.0, 1.0], atol=1e-10)


def test_min_over_axis_routes_to_first_argmin():
    g = _grad(lambda t: ad.sum(ad.min_over_axis(t, axis=0)), np.array([1.0, 1.0, 3.0]))
    np.testing.assert_array_equal(g, [1.0, 0.0, 0.0])


def test_sqrt_subgradient_at_zero_is_zero():
    g = _grad(lambda t: ad.sum(ad.sqrt(t)), np.array([0.0, 4.0]))
    np.testing.assert_allclose(g, [0.0, 0.25])


def test_backward_errors():
    g = Graph()
    x = g.parameter("x", np.ones(3))
    with pytest.raises(ShapeError):
        ad.backward(x * 2.0)
    root = ad.sum(x)
    ad.backward(root)
    with pytest.raises(GraphError):
        ad.backward(root)
    g.clear_grads()
    assert ad.backward(root)["x"].data.tolist() == [1.0, 1.0, 1.0]
    with pytest.raises(GraphError):
        ad.backward(Tensor(np.array(1.0)))


def test_shape_mismatch_is_reported():
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_frozen_parameters_get_no_gradient():
    g = Graph()
    a = g.parameter("a", np.array([2.0]))
    b = g.parameter("b", np.array([3.0]), trainable=False)
    grads = ad.backward(ad.sum(a * b))
    assert set(grads) == {"a"}
    assert grads["a"].data[0] == 3.0


def test_replay_reproduces_forward_values():
    g = Graph()
    x = g.parameter("x", np.array([0.5, -0.5]))
    y = ad.sum(ad.tanh(x) * ad.exp(x))
    vals = g.replay()
    assert vals[y.node_id] == pytest.approx(y.item())
    shifted = g.replay({"x": np.array([1.0, 1.0])})
    assert shifted[y.node_id] == pytest.approx(2 * np.tanh(1.0) * np.e)


def test_jvp_matches_finite_difference_and_is_differentiable(rng):
    w = rng.normal(size=(3, 3))

    def f(t):
        return ad.tanh(ad.matmul(t, w))

    x = rng.normal(size=(1, 3))
    v = rng.normal(size=(1, 3))
    h = 1e-6
    fd = (np.tanh((x + h * v) @ w) - np.tanh((x - h * v) @ w)) / (2 * h)
    np.testing.assert_allclose(ad.jvp(f, x, v).data, fd, rtol=1e-7, atol=1e-9)

    # gradient of a directional derivative (second order) against differences
    rep = ad.grad_check(lambda t: ad.sum(ad.square(ad.jvp(f, t, v))), x, tol=1e-6)
    assert rep.passed, rep


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_reports_nonfinite_location():
    rep = ad.grad_check(lambda t: ad.sum(ad.log(t)), np.array([1.0, 1e-7]), step=1e-6)
    assert not rep.passed
    assert rep.worst_index == (1,)


def test_register_custom_primitive():
    if "cube" not in ad.primitive_kinds():
        ad.register_primitive(
            "cube",
            lambda x: x**3,
            lambda g, ins, out, attrs, need: (g * 3 * ins[0] ** 2,),
        )
    g = Graph()
    x = g.parameter("x", np.array([2.0]))
    y = ad.apply_primitive("cube", x)
    assert ad.backward(ad.sum(y))["x"].data[0] == 12.0


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 3), elements=finite), arrays(np.float64, (3,), elements=finite))
def test_broadcast_add_mul_gradients_property(a, b):
    ga = _grad(lambda t: ad.sum(t * b + b), a)
    np.testing.assert_allclose(ga, np.broadcast_to(b, a.shape))
    gb = _grad(lambda t: ad.sum(a * t + t), b)
    np.testing.assert_allclose(gb, a.sum(axis=0) + 2.0)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (5,), elements=finite))
def test_grad_of_linear_functional_property(x):
    c = np.linspace(-1, 1, 5)
    np.testing.assert_allclose(_grad(lambda t: ad.sum(t * c), x), c)
