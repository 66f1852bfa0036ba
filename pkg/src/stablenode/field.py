"""Stabilized latent vector field and the model container.

``f_hat(x) = f(x) + u(x)`` where ``u`` switches between three branches on
the sign and size of ``L(x) = grad V(x) . f(x) + alpha V(x)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from . import ad
from .ad import Tensor
from .nets import (
    Bound,
    CouplingStack,
    LyapunovSpec,
    MlpSpec,
    coupling_forward,
    coupling_inverse,
    lyapunov_value,
    lyapunov_value_and_grad,
    mlp_forward,
)


@dataclass(frozen=True)
class CorrectiveParams:
    alpha: float = 1e-3
    epsilon: float = 1e-5
    s: float = 20.0

    def __post_init__(self):
        # epsilon = 0 is admitted: the unregularised limit of the corrective term
        if self.alpha <= 0 or self.s <= 0 or self.epsilon < 0:
            raise ValueError(f"need alpha > 0, s > 0, epsilon >= 0; got {self}")

    @property
    def sublevel(self) -> float:
        """Level 1/(s alpha) of the convergence set."""
        return 1.0 / (self.s * self.alpha)


@dataclass
class StableNodeModel:
    n_x: int
    n_z: int
    nominal: MlpSpec
    lyapunov: LyapunovSpec
    corrective: CorrectiveParams = field(default_factory=CorrectiveParams)
    phi: MlpSpec | None = None
    psi: CouplingStack | None = None
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.nominal.n_in != self.n_x or self.nominal.n_out != self.n_x:
            raise ValueError("nominal field must map R^n_x to R^n_x")
        if self.lyapunov.dim != self.n_z:
            raise ValueError("attractors must live in the output space")
        if self.psi is None and self.n_x != self.n_z:
            raise ValueError("identity output map requires n_x == n_z")
        if self.psi is not None and self.psi.dim != self.n_x:
            raise ValueError("coupling stack dimension must equal n_x")
        if self.phi is not None and self.phi.n_out != self.n_x:
            raise ValueError("input map must produce latent states")

    @property
    def n_y(self) -> int:
        return self.phi.n_in if self.phi is not None else self.n_x

    @property
    def attractors(self) -> np.ndarray:
        return np.array(self.lyapunov.attractors, dtype=np.float64)

    def bind(self, graph: ad.Graph | None = None) -> dict[str, Tensor]:
        if graph is None:
            return {k: Tensor(v) for k, v in self.params.items()}
        return graph.bind(self.params)

    def with_params(self, params: Mapping[str, np.ndarray]) -> "StableNodeModel":
        return replace(self, params={k: np.array(v, dtype=np.float64) for k, v in params.items()})

    def copy(self) -> "StableNodeModel":
        return self.with_params(self.params)


def input_map(model: StableNodeModel, p: Bound, y):
    return y if model.phi is None else mlp_forward(model.phi, p, y)


def output_map(model: StableNodeModel, p: Bound, x):
    return x if model.psi is None else coupling_forward(model.psi, p, x)


def output_inverse(model: StableNodeModel, p: Bound, z):
    return z if model.psi is None else coupling_inverse(model.psi, p, z)


def latent_attractors(model: StableNodeModel, p: Bound) -> list[Tensor]:
    """Pull the output-space attractors back through the output map."""
    z = Tensor(model.attractors)
    x = output_inverse(model, p, z)
    if len(model.lyapunov.attractors) == 1:
        return [ad.reshape(x, (model.n_x,))]
    rows = ad.split(x, [1] * len(model.lyapunov.attractors), axis=0)
    return [ad.reshape(r, (model.n_x,)) for r in rows]


@dataclass
class FieldTerms:
    f: Tensor
    v: Tensor
    grad_v: Tensor
    l: Tensor
    u: Tensor

    @property
    def f_hat(self) -> Tensor:
        return self.f + self.u


def corrective_from_terms(grad_v, f, v, cp: CorrectiveParams):
    """Return ``(u, L)`` for batched gradient (B, n), nominal field (B, n), V (B,)."""
    b = v.shape[0]
    l_val = ad.sum(grad_v * f, axis=-1) + ad.scale(v, cp.alpha)
    ld = l_val.data
    active = ld > 0.0
    middle = active & (ld < 1.0 / cp.s)
    coef = ad.where(middle, ad.scale(l_val, cp.epsilon * cp.s), cp.epsilon)
    den = ad.sum(ad.square(grad_v), axis=-1) + cp.epsilon
    den = ad.where(active, den, 1.0)
    num = grad_v * ad.reshape(l_val, (b, 1)) + ad.reshape(coef, (b, 1)) * f
    u = ad.where(active[:, None], ad.neg(num / ad.reshape(den, (b, 1))), 0.0)
    return u, l_val


def field_terms(model: StableNodeModel, p: Bound, x: Tensor, x_star=None) -> FieldTerms:
    if x_star is None:
        x_star = latent_attractors(model, p)
    f = mlp_forward(model.nominal, p, x)
    v, grad_v = lyapunov_value_and_grad(model.lyapunov, p, x, x_star)
    u, l_val = corrective_from_terms(grad_v, f, v, model.corrective)
    return FieldTerms(f, v, grad_v, l_val, u)


def l_value(model: StableNodeModel, p: Bound, x: Tensor, x_star=None) -> Tensor:
    return field_terms(model, p, x, x_star).l


def corrective(model: StableNodeModel, p: Bound, x: Tensor, x_star=None) -> Tensor:
    return field_terms(model, p, x, x_star).u


def f_hat(model: StableNodeModel, p: Bound, x: Tensor, x_star=None) -> Tensor:
    return field_terms(model, p, x, x_star).f_hat


def lyapunov(model: StableNodeModel, p: Bound, x, x_star=None):
    if x_star is None:
        x_star = latent_attractors(model, p)
    return lyapunov_value(model.lyapunov, p, x, x_star)


def make_field(model: StableNodeModel, p: Bound | None = None):
    """Closure ``x -> f_hat(x)`` with the latent attractors computed once.

    Accepts (B, n) or (n,) states.
    """
    if p is None:
        p = model.bind()
    x_star = latent_attractors(model, p)

    def fn(x):
        if x.ndim == 1:
            out = f_hat(model, p, ad.reshape(x, (1, x.shape[0])), x_star)
            return ad.reshape(out, x.shape)
        return f_hat(model, p, x, x_star)

    return fn
