import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stablenode import ad
from stablenode.ad import ShapeError, Tensor
from stablenode.nets import (
    CouplingStack,
    IcnnSpec,
    LyapunovSpec,
    MlpSpec,
    attractor_residual,
    coupling_forward,
    coupling_inverse,
    icnn_value,
    lyapunov_value,
    lyapunov_value_and_grad,
    mlp_forward,
)


def _bind(params):
    return {k: Tensor(v) for k, v in params.items()}


def _lyap(mode, attractors, seed=0, hidden=(8, 8), activation="softplus"):
    icnns = tuple(IcnnSpec(f"V{i}", (len(attractors[0]), *hidden, 1), activation) for i in range(len(attractors)))
    spec = LyapunovSpec(mode, tuple(map(tuple, attractors)), icnns)
    return spec, _bind(spec.init(np.random.default_rng(seed)))


def test_mlp_shapes_and_width_check(rng):
    spec = MlpSpec("f", (2, 5, 3))
    p = _bind(spec.init(rng))
    assert mlp_forward(spec, p, Tensor(rng.normal(size=(4, 2)))).shape == (4, 3)
    with pytest.raises(ShapeError):
        mlp_forward(spec, p, Tensor(np.ones((4, 3))))
    assert spec.param_names() == ["f.W0", "f.b0", "f.W1", "f.b1"]


def test_mlp_gradient_matches_differences(rng):
    spec = MlpSpec("f", (2, 4, 2), "softplus")
    params = spec.init(rng)
    x = rng.normal(size=(3, 2))
    for name in params:

        def fn(t, name=name):
            p = _bind(params)
            p[name] = t
            return ad.sum(ad.square(mlp_forward(spec, p, Tensor(x))))

        rep = ad.grad_check(fn, params[name])
        assert rep.passed, (name, rep)


@pytest.mark.parametrize("activation", ["softplus", "relu_smooth"])
def test_icnn_is_convex_along_random_segments(rng, activation):
    spec = IcnnSpec("g", (2, 16, 16, 1), activation)
    p = _bind(spec.init(rng))
    a = rng.normal(size=(200, 2)) * 2
    b = rng.normal(size=(200, 2)) * 2
    lam = rng.uniform(size=(200, 1))
    lhs = icnn_value(spec, p, Tensor(lam * a + (1 - lam) * b)).data
    rhs = lam[:, 0] * icnn_value(spec, p, Tensor(a)).data + (1 - lam[:, 0]) * icnn_value(spec, p, Tensor(b)).data
    assert np.all(lhs <= rhs + 1e-12)


@pytest.mark.parametrize("mode,attractors", [("single", [[0.3, -0.1]]), ("product", [[0.0, 0.0], [0.0, -0.2]])])
def test_lyapunov_zero_at_attractors_and_positive_elsewhere(rng, mode, attractors):
    spec, p = _lyap(mode, attractors)
    xs = [Tensor(np.array(a)) for a in attractors]
    assert np.all(np.abs(attractor_residual(spec, p, xs)) < 1e-12)
    pts = rng.normal(size=(500, 2))
    assert np.all(lyapunov_value(spec, p, Tensor(pts), xs).data > 0)


def test_sigmoid_blend_residual_is_small():
    spec, p = _lyap("sigmoid_blend", [[0.0, 0.0], [0.0, -0.2]])
    xs = [Tensor(np.array([0.0, 0.0])), Tensor(np.array([0.0, -0.2]))]
    res = attractor_residual(spec, p, xs)
    # the other candidate enters with weight sigmoid(-gamma * 0.04)
    assert np.all(res >= 0) and np.all(res < 0.1)


def test_lyapunov_gradient_matches_differences(rng):
    spec, p = _lyap("sigmoid_blend", [[0.0, 0.0], [0.0, -0.2]])
    xs = [Tensor(np.array([0.0, 0.0])), Tensor(np.array([0.0, -0.2]))]
    x = rng.normal(size=(5, 2)) * 0.3
    _, g = lyapunov_value_and_grad(spec, p, Tensor(x), xs)
    h = 1e-6
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        fd = (lyapunov_value(spec, p, Tensor(x + e), xs).data - lyapunov_value(spec, p, Tensor(x - e), xs).data) / (2 * h)
        np.testing.assert_allclose(g.data[:, j], fd, rtol=1e-5, atol=1e-9)


def test_lyapunov_gradient_is_differentiable_wrt_parameters(rng):
    spec, p0 = _lyap("single", [[0.0, 0.0]], hidden=(4,))
    params = {k: v.data for k, v in p0.items()}
    xs = [Tensor(np.zeros(2))]
    x = Tensor(rng.normal(size=(3, 2)))
    name = "V0.A0"

    def fn(t):
        p = _bind(params)
        p[name] = t
        return ad.sum(ad.square(lyapunov_value_and_grad(spec, p, x, xs)[1]))

    assert ad.grad_check(fn, params[name], tol=1e-5).passed


def test_lyapunov_spec_validation():
    icnn = IcnnSpec("V0", (2, 4, 1))
    with pytest.raises(ValueError):
        LyapunovSpec("single", ((0.0, 0.0), (1.0, 1.0)), (icnn, icnn))
    with pytest.raises(ValueError):
        LyapunovSpec("bogus", ((0.0, 0.0),), (icnn,))
    with pytest.raises(ValueError):
        IcnnSpec("V0", (2, 4, 2))


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 5), st.integers(0, 10_000))
def test_coupling_round_trip_property(dim, seed):
    rng = np.random.default_rng(seed)
    stack = CouplingStack("psi", dim, 3, (8,))
    p = _bind(stack.init(rng, out_scale=0.5))
    x = rng.normal(size=(50, dim))
    z = coupling_forward(stack, p, Tensor(x))
    np.testing.assert_allclose(coupling_inverse(stack, p, z).data, x, atol=1e-9)
    assert not np.allclose(z.data, x)


def test_coupling_identity_at_init(rng):
    stack = CouplingStack("psi", 2)
    p = _bind(stack.init(rng))
    x = rng.normal(size=(4, 2))
    np.testing.assert_array_equal(coupling_forward(stack, p, Tensor(x)).data, x)
    with pytest.raises(ValueError):
        CouplingStack("psi", 1)
