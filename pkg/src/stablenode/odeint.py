"""Differentiable ODE integration.

Fixed-step Euler/RK4 and adaptive Dormand-Prince 5(4) are written with
graph primitives, so a loss on the returned states can be differentiated
straight through the solver.  :func:`adjoint_gradients` is the alternative
route: forward solve without a tape, then integrate the adjoint system
backward in time.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import ad
from .ad import Tensor

log = logging.getLogger(__name__)

Field = Callable[[Tensor], Tensor]

METHODS = ("euler", "rk4", "dopri5")


class SolverError(RuntimeError):
    def __init__(self, message: str, t: float | None = None, interval: tuple[float, float] | None = None):
        super().__init__(message)
        self.t = t
        self.interval = interval


@dataclass(frozen=True)
class SolverConfig:
    method: str = "dopri5"
    dt: float = 0.01
    rtol: float = 1e-6
    atol: float = 1e-8
    max_steps: int = 10_000
    debug: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.method != "dopri5" and self.dt <= 0:
            raise ValueError("dt must be positive for fixed-step methods")
        if self.method == "dopri5" and (self.rtol <= 0 or self.atol <= 0):
            raise ValueError("rtol and atol must be positive for dopri5")
        if self.max_steps < 1:
            raise ValueError("max_steps must be positive")


@dataclass
class Rollout:
    times: np.ndarray
    states: list[Tensor]
    n_steps: int = 0
    n_rejected: int = 0
    n_evals: int = 0
    step_errors: list[float] = field(default_factory=list)

    def stacked(self, axis: int = 0) -> Tensor:
        return ad.stack(self.states, axis=axis)

    def array(self) -> np.ndarray:
        return np.stack([s.data for s in self.states])


def _check_times(times) -> np.ndarray:
    t = np.asarray(times, dtype=np.float64).reshape(-1)
    if t.size == 0:
        raise ValueError("sample_times must be nonempty")
    if np.any(np.diff(t) <= 0):
        raise ValueError("sample_times must be strictly increasing")
    return t


def _check_finite(x: Tensor, t: float) -> None:
    if not np.all(np.isfinite(x.data)):
        raise SolverError(f"non-finite state at t={t:.6g}", t=t)


def integrate(field_fn: Field, x0, times, config: SolverConfig) -> Rollout:
    if config.method == "dopri5":
        return integrate_dopri5(field_fn, x0, times, config)
    return integrate_fixed(field_fn, x0, times, config)


# --------------------------------------------------------------------------
# fixed step


def _euler(f: Field, x: Tensor, h: float) -> tuple[Tensor, int]:
    return ad.lincomb([x, f(x)], [1.0, h]), 1


def _rk4(f: Field, x: Tensor, h: float) -> tuple[Tensor, int]:
    k1 = f(x)
    k2 = f(ad.lincomb([x, k1], [1.0, 0.5 * h]))
    k3 = f(ad.lincomb([x, k2], [1.0, 0.5 * h]))
    k4 = f(ad.lincomb([x, k3], [1.0, h]))
    return ad.lincomb([x, k1, k2, k3, k4], [1.0, h / 6, h / 3, h / 3, h / 6]), 4


def integrate_fixed(field_fn: Field, x0, times, config: SolverConfig) -> Rollout:
    """Step with ``config.dt``, shortening the last step before each sample time."""
    if config.method not in ("euler", "rk4"):
        raise ValueError(f"integrate_fixed does not handle {config.method!r}")
    step = _euler if config.method == "euler" else _rk4
    times = _check_times(times)
    x = ad.as_tensor(x0)
    states = [x]
    t = times[0]
    n_steps = n_evals = 0
    for t_next in times[1:]:
        remaining = t_next - t
        tiny = 1e-12 * max(1.0, abs(t_next))
        while remaining > tiny:
            if n_steps >= config.max_steps:
                raise SolverError(f"{config.method} exceeded max_steps={config.max_steps} at t={t_next - remaining:.6g}", t=t)
            h = config.dt if remaining > config.dt * (1.0 + 1e-10) else remaining
            x, ne = step(field_fn, x, h)
            n_evals += ne
            n_steps += 1
            remaining -= h
            _check_finite(x, t_next - remaining)
        t = t_next
        states.append(x)
    return Rollout(times, states, n_steps, 0, n_evals)


# --------------------------------------------------------------------------
# Dormand-Prince 5(4)

_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
)
_B = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84)
_E = (71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40)
# dense output coefficients of the quartic continuous extension
_D = (
    -12715105075 / 11282082432,
    0.0,
    87487479700 / 32700410799,
    -10690763975 / 1880347072,
    701980252875 / 199316789632,
    -1453857185 / 822651844,
    69997945 / 29380423,
)

_SAFETY = 0.9
_EXP_NOW = 0.7 / 5
_EXP_PREV = 0.4 / 5
_FAC_MIN, _FAC_MAX = 0.2, 10.0


def _err_norm(err: np.ndarray, y0: np.ndarray, y1: np.ndarray, rtol: float, atol: float) -> float:
    """Max over batch rows of the RMS scaled error."""
    sc = atol + rtol * np.maximum(np.abs(y0), np.abs(y1))
    r = (err / sc) ** 2
    if r.ndim <= 1:
        return float(np.sqrt(np.mean(r)))
    return float(np.sqrt(r.reshape(r.shape[0], -1).mean(axis=1)).max())


def _initial_step(f: Field, x: Tensor, k1: Tensor, span: float, rtol: float, atol: float) -> float:
    y0 = x.data
    f0 = k1.data
    sc = atol + rtol * np.abs(y0)
    d0 = float(np.sqrt(np.mean((y0 / sc) ** 2)))
    d1 = float(np.sqrt(np.mean((f0 / sc) ** 2)))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    f1 = f(Tensor(y0 + h0 * f0)).data
    d2 = float(np.sqrt(np.mean(((f1 - f0) / sc) ** 2))) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / 5)
    return min(100 * h0, h1, span)


def _dense_coeffs(theta: float, h: float) -> tuple[float, ...]:
    """Weights on (y0, y1, k1..k7) of the interpolant at fraction ``theta``."""
    th1 = 1.0 - theta
    c2 = theta
    c3 = theta * th1
    c4 = theta * theta * th1
    c5 = c4 * th1
    d = _D
    return (
        1.0 - c2 + c3 - 2.0 * c4,
        c2 - c3 + 2.0 * c4,
        h * (c3 - c4 + c5 * d[0]),
        0.0,
        h * c5 * d[2],
        h * c5 * d[3],
        h * c5 * d[4],
        h * c5 * d[5],
        h * (c5 * d[6] - c4),
    )


def integrate_dopri5(field_fn: Field, x0, times, config: SolverConfig) -> Rollout:
    """Adaptive Dormand-Prince with PI step control and quartic dense output.

    Step-size decisions use detached values; only accepted steps feed the
    returned states, so rejected attempts never reach a loss gradient.
    """
    times = _check_times(times)
    rtol, atol = config.rtol, config.atol
    x = ad.as_tensor(x0)
    t0, tf = float(times[0]), float(times[-1])
    states = [x]
    roll = Rollout(times, states)
    if times.size == 1:
        return roll
    k1 = field_fn(x)
    roll.n_evals += 1
    h = _initial_step(field_fn, x, k1, tf - t0, rtol, atol)
    roll.n_evals += 1
    t = t0
    err_prev = 1e-4
    next_sample = 1
    attempts = 0
    while next_sample < times.size:
        if attempts >= config.max_steps:
            raise SolverError(
                f"dopri5 exceeded max_steps={config.max_steps} on [{t:.6g}, {tf:.6g}] (stiff latent field?)",
                t=t,
                interval=(t, tf),
            )
        attempts += 1
        last = h >= tf - t
        if last:
            h = tf - t
        ks = [k1]
        for i in range(1, 6):
            xi = ad.lincomb([x, *ks], [1.0, *(h * a for a in _A[i])])
            ks.append(field_fn(xi))
        y1 = ad.lincomb([x, *ks], [1.0, *(h * b for b in _B)])
        k7 = field_fn(y1)
        roll.n_evals += 6
        ks.append(k7)
        err = h * sum(e * k.data for e, k in zip(_E, ks) if e != 0.0)
        en = _err_norm(err, x.data, y1.data, rtol, atol)
        if not np.isfinite(en):
            raise SolverError(f"non-finite error estimate at t={t:.6g}", t=t)
        if en <= 1.0:
            t_new = tf if last else t + h
            while next_sample < times.size and times[next_sample] <= t_new:
                ts = times[next_sample]
                if ts == t_new:
                    states.append(y1)
                else:
                    c = _dense_coeffs((ts - t) / h, h)
                    states.append(ad.lincomb([x, y1, *ks], c))
                next_sample += 1
            roll.n_steps += 1
            if config.debug:
                assert en <= 1.0
                roll.step_errors.append(en)
            _check_finite(y1, t_new)
            t, x, k1 = t_new, y1, k7
            fac = _FAC_MAX if en == 0.0 else _SAFETY * en ** (-_EXP_NOW) * err_prev ** _EXP_PREV
            err_prev = max(en, 1e-4)
            h = h * min(_FAC_MAX, max(_FAC_MIN, fac))
        else:
            roll.n_rejected += 1
            h = h * max(_FAC_MIN, _SAFETY * en ** (-1.0 / 5))
        if h < 1e-14 * max(1.0, abs(t)):
            raise SolverError(f"step size underflow at t={t:.6g}", t=t, interval=(t, tf))
    return roll


# --------------------------------------------------------------------------
# gradients

FieldBuilder = Callable[[Mapping[str, Tensor], Tensor], Tensor]
LossFn = Callable[[Sequence[Tensor], Mapping[str, Tensor]], Tensor]


def tape_gradients(
    field_builder: FieldBuilder,
    params: Mapping[str, np.ndarray],
    x0,
    times,
    loss_fn: LossFn,
    config: SolverConfig,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and gradients by differentiating through the solver; key ``"x0"`` holds d loss/d x0."""
    graph = ad.Graph()
    p = graph.bind(params)
    x = graph.parameter("x0", np.asarray(x0, dtype=np.float64))
    roll = integrate(lambda s: field_builder(p, s), x, times, config)
    loss = loss_fn(roll.states, p)
    grads = ad.backward(loss)
    return loss.item(), {k: v.data for k, v in grads.items()}


def adjoint_gradients(
    field_builder: FieldBuilder,
    params: Mapping[str, np.ndarray],
    x0,
    times,
    loss_fn: LossFn,
    config: SolverConfig,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and gradients via the adjoint system integrated backward in time.

    The loss depends on the states at ``times``; each sample contributes a
    jump to the adjoint.  Between samples the state is re-integrated backward
    from the stored forward value.  Key ``"x0"`` holds d loss/d x0.
    """
    times = _check_times(times)
    names = sorted(params)
    shapes = [np.shape(params[k]) for k in names]
    sizes = [int(np.prod(s)) for s in shapes]
    x0 = np.asarray(x0, dtype=np.float64)
    xshape, xsize = x0.shape, x0.size

    pd = {k: Tensor(v) for k, v in params.items()}
    fwd = integrate(lambda s: field_builder(pd, s), Tensor(x0), times, config)
    xs = [s.data for s in fwd.states]

    graph = ad.Graph()
    p = graph.bind(params)
    st = [graph.parameter(f"__state{i}", v) for i, v in enumerate(xs)]
    loss = loss_fn(st, p)
    lg = ad.backward(loss)
    direct = {k: lg[k].data for k in names}
    jumps = [lg[f"__state{i}"].data for i in range(len(xs))]

    def aug_field(y: Tensor) -> Tensor:
        flat = y.data
        xv = flat[:xsize].reshape(xshape)
        av = flat[xsize : 2 * xsize].reshape(xshape)
        g = ad.Graph()
        pp = g.bind(params)
        xt = g.parameter("__x", xv)
        fv = field_builder(pp, xt)
        vj = ad.backward(ad.sum(fv * Tensor(av)))
        # reversed time s = -t
        parts = [-fv.data.reshape(-1), vj["__x"].data.reshape(-1)]
        parts += [vj[k].data.reshape(-1) for k in names]
        return Tensor(np.concatenate(parts))

    a = jumps[-1].reshape(-1)
    gth = np.zeros(int(np.sum(sizes)))
    for i in range(len(xs) - 1, 0, -1):
        y = np.concatenate([xs[i].reshape(-1), a, gth])
        seg = integrate(aug_field, Tensor(y), [-times[i], -times[i - 1]], config)
        yb = seg.states[-1].data
        a = yb[xsize : 2 * xsize] + jumps[i - 1].reshape(-1)
        gth = yb[2 * xsize :]

    grads = {}
    offset = 0
    for k, shp, n in zip(names, shapes, sizes):
        grads[k] = gth[offset : offset + n].reshape(shp) + direct[k]
        offset += n
    grads["x0"] = a.reshape(xshape)
    return loss.item(), grads
