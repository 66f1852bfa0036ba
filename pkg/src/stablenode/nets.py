"""Network blocks: MLPs, input-convex networks, Lyapunov candidates and
affine coupling stacks.

Parameters live outside the specs as ``{name: ndarray}`` dictionaries.  A
forward function receives the bound mapping ``{name: Tensor}`` and looks
parameters up by name, so insertion order never matters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import ad
from .ad import ShapeError, Tensor

Bound = Mapping[str, Tensor]

ACTIVATIONS = {"tanh": ad.tanh, "softplus": ad.softplus}


def _check_width(x, width: int, who: str) -> None:
    if x.shape[-1] != width:
        raise ShapeError(f"{who}: expected input width {width}, got shape {x.shape}")


@dataclass(frozen=True)
class MlpSpec:
    name: str
    widths: tuple[int, ...]
    activation: str = "tanh"

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    def param_names(self) -> list[str]:
        names = []
        for i in range(len(self.widths) - 1):
            names += [f"{self.name}.W{i}", f"{self.name}.b{i}"]
        return names

    def init(self, rng: np.random.Generator, out_scale: float = 1.0) -> dict[str, np.ndarray]:
        params = {}
        n_layers = len(self.widths) - 1
        for i, (a, b) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            w = rng.normal(scale=1.0 / np.sqrt(a), size=(a, b))
            if i == n_layers - 1:
                w = w * out_scale
            params[f"{self.name}.W{i}"] = w
            params[f"{self.name}.b{i}"] = np.zeros(b)
        return params


def mlp_forward(spec: MlpSpec, p: Bound, x):
    _check_width(x, spec.n_in, spec.name)
    act = ACTIVATIONS[spec.activation]
    n_layers = len(spec.widths) - 1
    h = x
    for i in range(n_layers):
        h = ad.matmul(h, p[f"{spec.name}.W{i}"]) + p[f"{spec.name}.b{i}"]
        if i < n_layers - 1:
            h = act(h)
    return h


@dataclass(frozen=True)
class IcnnSpec:
    """Input-convex network ending in a single unit.

    Layer ``l`` computes ``act(softplus(U_l) z_l + x A_l + b_l)``; the first
    layer has no pass-through term.  ``act`` is convex and nondecreasing and
    the pass-through weights are nonnegative, so the output is convex in x.
    """

    name: str
    widths: tuple[int, ...]
    activation: str = "softplus"
    d: float = 0.1

    def __post_init__(self):
        if len(self.widths) < 2 or self.widths[-1] != 1:
            raise ValueError("ICNN widths must end in a single output unit")
        if self.activation not in ("softplus", "relu_smooth"):
            raise ValueError(f"activation {self.activation!r} is not convex-nondecreasing here")

    @property
    def n_in(self) -> int:
        return self.widths[0]

    def param_names(self) -> list[str]:
        names = []
        for i in range(len(self.widths) - 1):
            names += [f"{self.name}.A{i}", f"{self.name}.b{i}"]
            if i > 0:
                names.append(f"{self.name}.U{i}")
        return names

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        n = self.widths[0]
        params = {}
        for i, (a, b) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            params[f"{self.name}.A{i}"] = rng.normal(scale=1.0 / np.sqrt(n), size=(n, b))
            params[f"{self.name}.b{i}"] = np.zeros(b)
            if i > 0:
                # softplus(-2) ~ 0.13 keeps deep pass-through sums moderate
                params[f"{self.name}.U{i}"] = rng.normal(loc=-2.0, scale=0.5, size=(a, b))
        return params

    def _act(self, h):
        if self.activation == "softplus":
            return ad.softplus(h)
        return ad.relu_smooth(h, self.d)


def icnn_value(spec: IcnnSpec, p: Bound, x):
    """Convex scalar per row: shape ``x.shape[:-1]``."""
    _check_width(x, spec.n_in, spec.name)
    z = None
    for i in range(len(spec.widths) - 1):
        h = ad.matmul(x, p[f"{spec.name}.A{i}"]) + p[f"{spec.name}.b{i}"]
        if z is not None:
            h = h + ad.matmul(z, ad.softplus(p[f"{spec.name}.U{i}"]))
        z = spec._act(h)
    return ad.reshape(z, z.shape[:-1])


# --------------------------------------------------------------------------
# Lyapunov candidates

LYAPUNOV_MODES = ("single", "sigmoid_blend", "product")


@dataclass(frozen=True)
class LyapunovSpec:
    mode: str
    attractors: tuple[tuple[float, ...], ...]  # output space
    icnns: tuple[IcnnSpec, ...]
    gamma: float = 70.0
    delta: float = 1e-3
    d: float = 0.1

    def __post_init__(self):
        if self.mode not in LYAPUNOV_MODES:
            raise ValueError(f"unknown Lyapunov mode {self.mode!r}")
        if len(self.attractors) < 1:
            raise ValueError("at least one attractor is required")
        if self.mode == "single" and len(self.attractors) != 1:
            raise ValueError("mode 'single' takes exactly one attractor")
        if self.mode == "sigmoid_blend" and len(self.attractors) != 2:
            raise ValueError("mode 'sigmoid_blend' takes exactly two attractors")
        if len(self.icnns) != len(self.attractors):
            raise ValueError("one ICNN per attractor is required")
        if self.gamma <= 0 or self.delta <= 0 or self.d <= 0:
            raise ValueError("gamma, delta and d must be positive")

    @property
    def dim(self) -> int:
        return len(self.attractors[0])

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        params = {}
        for spec in self.icnns:
            params.update(spec.init(rng))
        return params


def _sqnorm(x):
    return ad.sum(ad.square(x), axis=-1)


def _component(lspec: LyapunovSpec, i: int, p: Bound, x, x_star: Tensor):
    spec = lspec.icnns[i]
    g_star = icnn_value(spec, p, ad.reshape(x_star, (1, x_star.shape[-1])))
    gap = icnn_value(spec, p, x) - g_star
    return ad.relu_smooth(gap, lspec.d) + ad.scale(_sqnorm(x - x_star), lspec.delta)


def blend_weight(lspec: LyapunovSpec, x, x_star: Sequence[Tensor]):
    """Weight of the first candidate: sigmoid(gamma*(|x-x2|^2 - |x-x1|^2))."""
    arg = _sqnorm(x - x_star[1]) - _sqnorm(x - x_star[0])
    return ad.sigmoid(ad.scale(arg, lspec.gamma))


def lyapunov_value(lspec: LyapunovSpec, p: Bound, x, x_star: Sequence[Tensor]):
    """V per row of the latent batch ``x`` (shape ``x.shape[:-1]``)."""
    if len(x_star) != len(lspec.attractors):
        raise ValueError(f"mode {lspec.mode!r} expects {len(lspec.attractors)} attractors, got {len(x_star)}")
    _check_width(x, lspec.dim, "lyapunov")
    comps = [_component(lspec, i, p, x, xs) for i, xs in enumerate(x_star)]
    if lspec.mode == "single":
        return comps[0]
    if lspec.mode == "product":
        v = comps[0]
        for c in comps[1:]:
            v = v * c
        return v
    w = blend_weight(lspec, x, x_star)
    return w * comps[0] + (1.0 - w) * comps[1]


def lyapunov_value_and_grad(lspec: LyapunovSpec, p: Bound, x: Tensor, x_star: Sequence[Tensor]):
    """V and its gradient for a batch ``x`` of shape (B, n).

    The gradient comes from one forward-mode pass over n stacked copies of
    the batch, one coordinate direction per copy, so it stays on the graph.
    """
    if x.ndim != 2:
        raise ShapeError(f"expected a (batch, dim) input, got shape {x.shape}")
    b, n = x.shape
    xr = ad.concat([x] * n, axis=0) if n > 1 else x
    tangent = Tensor(np.repeat(np.eye(n), b, axis=0))
    v_all, dv = ad.value_and_jvp(lambda z: lyapunov_value(lspec, p, z, x_star), xr, tangent)
    if n == 1:
        return v_all, ad.reshape(dv, (b, 1))
    v = ad.split(v_all, [b, (n - 1) * b])[0]
    cols = [ad.reshape(c, (b, 1)) for c in ad.split(dv, [b] * n)]
    return v, ad.concat(cols, axis=1)


def lyapunov_grad(lspec: LyapunovSpec, p: Bound, x: Tensor, x_star: Sequence[Tensor]):
    return lyapunov_value_and_grad(lspec, p, x, x_star)[1]


def attractor_residual(lspec: LyapunovSpec, p: Bound, x_star: Sequence[Tensor]) -> np.ndarray:
    """V evaluated at each latent attractor.

    Exactly zero in modes 'single' and 'product'; in 'sigmoid_blend' the
    other candidate leaks in through the blend weight and this is the bound.
    """
    pts = Tensor(np.stack([xs.data for xs in x_star]))
    pd = {k: Tensor(v.data) for k, v in p.items()}
    xs = [Tensor(v.data) for v in x_star]
    return lyapunov_value(lspec, pd, pts, xs).data.copy()


# --------------------------------------------------------------------------
# coupling stack


@dataclass(frozen=True)
class CouplingStack:
    name: str
    dim: int
    n_layers: int = 3
    hidden: tuple[int, ...] = (32,)
    activation: str = "tanh"

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError("coupling layers need dim >= 2; configure an identity map instead")
        if self.n_layers < 1:
            raise ValueError("a coupling stack needs at least one layer")

    @property
    def n_pass(self) -> int:
        return self.dim // 2

    @property
    def n_act(self) -> int:
        return self.dim - self.dim // 2

    def nets(self, k: int) -> tuple[MlpSpec, MlpSpec]:
        widths = (self.n_pass, *self.hidden, self.n_act)
        return (
            MlpSpec(f"{self.name}.{k}.s", widths, self.activation),
            MlpSpec(f"{self.name}.{k}.t", widths, self.activation),
        )

    def init(self, rng: np.random.Generator, out_scale: float = 0.0) -> dict[str, np.ndarray]:
        """``out_scale=0`` zeroes the last layers, so the stack starts as identity."""
        params = {}
        for k in range(self.n_layers):
            for spec in self.nets(k):
                params.update(spec.init(rng, out_scale=out_scale))
        return params

    def _halves(self, x, k: int):
        axis = x.ndim - 1
        if k % 2 == 0:
            passive, active = ad.split(x, [self.n_pass, self.n_act], axis=axis)
        else:
            active, passive = ad.split(x, [self.n_act, self.n_pass], axis=axis)
        return passive, active

    def _join(self, passive, active, k: int):
        axis = passive.ndim - 1
        if k % 2 == 0:
            return ad.concat([passive, active], axis=axis)
        return ad.concat([active, passive], axis=axis)


def coupling_forward(stack: CouplingStack, p: Bound, x):
    _check_width(x, stack.dim, stack.name)
    for k in range(stack.n_layers):
        s_net, t_net = stack.nets(k)
        passive, active = stack._halves(x, k)
        s = mlp_forward(s_net, p, passive)
        t = mlp_forward(t_net, p, passive)
        x = stack._join(passive, active * ad.exp(s) + t, k)
    return x


def coupling_inverse(stack: CouplingStack, p: Bound, z):
    _check_width(z, stack.dim, stack.name)
    for k in reversed(range(stack.n_layers)):
        s_net, t_net = stack.nets(k)
        passive, active = stack._halves(z, k)
        s = mlp_forward(s_net, p, passive)
        t = mlp_forward(t_net, p, passive)
        z = stack._join(passive, (active - t) * ad.exp(ad.neg(s)), k)
    return z
