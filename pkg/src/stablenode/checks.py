"""Invariant checks shared by the ``selftest`` command and the test-suite.

Every check returns a :class:`CheckResult` carrying the measured quantity
and the threshold it was held to; nothing here raises on failure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ad
from .ad import Tensor
from .field import (
    CorrectiveParams,
    corrective_from_terms,
    field_terms,
    latent_attractors,
    lyapunov,
    make_field,
    output_map,
)
from .metrics import ahd, discrete_frechet, dtwd, training_loss
from .nets import (
    CouplingStack,
    attractor_residual,
    coupling_forward,
    coupling_inverse,
    icnn_value,
    lyapunov_value,
    mlp_forward,
)
from .odeint import SolverConfig, adjoint_gradients, integrate, tape_gradients
from .trainer import ModelConfig, build_model


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: dict = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.value:.3g} (threshold {self.threshold:.3g})"


def _bind(params):
    return {k: Tensor(v) for k, v in params.items()}


def small_model(seed: int, **overrides):
    cfg = ModelConfig(nominal_hidden=(32, 32), icnn_hidden=(16, 16), **overrides)
    return build_model(cfg, seed)


# --------------------------------------------------------------------------
# corrective term


def _quadratic_terms(x, gain):
    # V = |x|^2 / 2, grad V = x, f = gain * x
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return Tensor(x), Tensor(gain * x), Tensor(0.5 * np.sum(x * x, axis=1))


def corrective_hand_cases() -> CheckResult:
    cases = [
        # (gain, alpha, s, eps, x, expected u)
        (-1.0, 1.0, 1.0, 0.0, [1.0, 0.0], [0.0, 0.0]),
        (1.0, 1.0, 1.0, 0.0, [1.0, 0.0], [-1.5, 0.0]),
        (-0.4, 1.0, 5.0, 1.0, [1.0, 0.0], [0.05, 0.0]),
    ]
    errs = []
    for gain, alpha, s, eps, x, want in cases:
        g, f, v = _quadratic_terms(x, gain)
        u, _ = corrective_from_terms(g, f, v, CorrectiveParams(alpha, eps, s))
        errs.append(float(np.max(np.abs(u.data[0] - want))))
    worst = max(errs)
    return CheckResult("corrective hand cases", worst < 1e-12, worst, 1e-12, {"errors": errs})


def _crossings(lvals: np.ndarray, level: float) -> np.ndarray:
    """Index of the first grid cell in each row where L - level changes sign (-1 if none)."""
    sign = np.sign(lvals - level)
    change = sign[:, :-1] * sign[:, 1:] < 0
    return np.where(change.any(axis=1), change.argmax(axis=1), -1)


def branch_continuity(n_paths: int = 100, seed: int = 0, n_grid: int = 64, step: float = 1e-12) -> CheckResult:
    """Jump of u across L = 0 and L = 1/s along random straight paths.

    Each crossing is located by bisection on the path parameter; u is then
    compared just before and just after it.
    """
    rng = np.random.default_rng(seed)
    jumps = {0: [], 1: []}
    model_seed = seed
    while min(len(j) for j in jumps.values()) < n_paths:
        model = small_model(model_seed, alpha=0.5, s=2.0, epsilon=1e-3)
        model_seed += 1
        p = model.bind()
        xs = latent_attractors(model, p)
        cp = model.corrective
        a = rng.uniform(-3, 3, size=(n_paths, 2))
        b = rng.uniform(-3, 3, size=(n_paths, 2))
        lam = np.linspace(0, 1, n_grid)
        pts = a[:, None, :] + lam[None, :, None] * (b - a)[:, None, :]
        lv = field_terms(model, p, Tensor(pts.reshape(-1, 2)), xs).l.data.reshape(n_paths, n_grid)

        def terms_at(a_, b_, lmb):
            return field_terms(model, p, Tensor(a_ + lmb[:, None] * (b_ - a_)), xs)

        for key, level in ((0, 0.0), (1, 1.0 / cp.s)):
            idx = _crossings(lv, level)
            ok = idx >= 0
            if not ok.any():
                continue
            a_k, b_k, i_k = a[ok], b[ok], idx[ok]
            lo, hi = lam[i_k], lam[i_k + 1]
            s_lo = np.sign(lv[ok, i_k] - level)
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                same = np.sign(terms_at(a_k, b_k, mid).l.data - level) == s_lo
                lo = np.where(same, mid, lo)
                hi = np.where(same, hi, mid)
            u_after = terms_at(a_k, b_k, hi + step).u.data
            u_before = terms_at(a_k, b_k, lo - step).u.data
            jumps[key].extend(np.max(np.abs(u_after - u_before), axis=1).tolist())
    j0 = np.array(jumps[0][:n_paths])
    j1 = np.array(jumps[1][:n_paths])
    worst = float(max(j0.max(), j1.max()))
    return CheckResult(
        "branch continuity",
        worst < 1e-9,
        worst,
        1e-9,
        {"max_jump_L0": float(j0.max()), "max_jump_L1s": float(j1.max()), "paths": n_paths},
    )


def case3_identity(n_points: int = 1000, seed: int = 0) -> CheckResult:
    """grad V . f_hat = -alpha (1 - eps/(|grad V|^2 + eps)) V wherever L >= 1/s."""
    rng = np.random.default_rng(seed)
    errs, count, model_seed = [], 0, seed
    while count < n_points:
        model = small_model(model_seed)
        model_seed += 1
        p = model.bind()
        cp = model.corrective
        x = rng.uniform(-5, 5, size=(2000, 2))
        t = field_terms(model, p, Tensor(x))
        g = t.grad_v.data
        sel = t.l.data >= 1.0 / cp.s
        lhs = np.sum(g * t.f_hat.data, axis=1)
        gg = np.sum(g * g, axis=1)
        rhs = -cp.alpha * (1 - cp.epsilon / (gg + cp.epsilon)) * t.v.data
        e = np.abs(lhs - rhs)[sel][: n_points - count]
        errs.append(e)
        count += e.size
    err = np.concatenate(errs)
    worst = float(err.max())
    return CheckResult("case-3 identity", worst < 1e-9, worst, 1e-9, {"points": int(err.size)})


def descent_cases(n_points: int = 2000, seed: int = 0) -> CheckResult:
    """Sign conditions of the other two branches on random models.

    L <= 0 gives grad V . f_hat + alpha V <= 0; 0 < L < 1/s with V above
    the sublevel gives grad V . f_hat < 0.
    """
    rng = np.random.default_rng(seed)
    worst1, worst2, n1, n2 = -np.inf, -np.inf, 0, 0
    for k in range(5):
        model = small_model(seed + k, alpha=0.05, s=2.0)
        p = model.bind()
        cp = model.corrective
        t = field_terms(model, p, Tensor(rng.uniform(-40, 40, size=(n_points, 2))))
        vdot = np.sum(t.grad_v.data * t.f_hat.data, axis=1)
        l, v = t.l.data, t.v.data
        c1 = l <= 0
        c2 = (l > 0) & (l < 1 / cp.s) & (v > cp.sublevel)
        if c1.any():
            worst1 = max(worst1, float(np.max(vdot[c1] + cp.alpha * v[c1])))
            n1 += int(c1.sum())
        if c2.any():
            worst2 = max(worst2, float(np.max(vdot[c2])))
            n2 += int(c2.sum())
    ok = n1 > 0 and worst1 <= 1e-12 and (n2 == 0 or worst2 < 0)
    return CheckResult("descent in branches 1-2", ok, max(worst1, worst2), 0.0, {"n_case1": n1, "n_case2": n2})


# --------------------------------------------------------------------------
# Lyapunov decrease along rollouts


def lyapunov_decrease(
    n_models: int = 20,
    n_starts: int = 100,
    seed: int = 0,
    box: float = 50.0,
    rtol: float = 1e-6,
    atol: float = 1e-8,
    dwell: float = 100.0,
    samples_per_dwell: int = 20,
) -> CheckResult:
    """Dopri5 rollouts of random untrained models with the default corrective constants.

    Where V > 1/(s alpha) consecutive samples must satisfy
    ``V_{k+1} <= V_k + 1e-6 + rtol * V_k`` (the last term covers local
    solver error).  The horizon allows decay at rate alpha from the largest
    initial V.  A rollout is retired once it has stayed inside the sublevel
    set for ``dwell`` time units; leaving the set after entering it counts
    as a failure.  Rollouts still outside at the horizon must sit next to a
    stationary point (|f_hat| < 1e-6).
    """
    rng = np.random.default_rng(seed)
    solver = SolverConfig("dopri5", rtol=rtol, atol=atol, max_steps=200_000)
    slack = 1e-6
    worst_increase = -np.inf
    checked = above = outside = reexits = 0
    for m in range(n_models):
        model = small_model(seed * 1000 + m)
        p = model.bind()
        level = model.corrective.sublevel
        fld = make_field(model, p)
        xs = latent_attractors(model, p)
        x = rng.uniform(-box, box, size=(n_starts, 2))
        v = lyapunov(model, p, Tensor(x), xs).data
        above += int((v > level).sum())
        horizon = 1.5 * math.log(max(v.max(), level) / level) / model.corrective.alpha + 2 * dwell
        entered = np.where(v <= level, 0.0, np.inf)
        active = np.arange(n_starts)
        t = 0.0
        while active.size and t < horizon:
            times = np.linspace(t, t + dwell, samples_per_dwell + 1)
            traj = integrate(fld, Tensor(x[active]), times, solver).array()
            vs = lyapunov(model, p, Tensor(traj.reshape(-1, 2)), xs).data.reshape(len(times), active.size)
            mask = vs[:-1] > level
            if mask.any():
                inc = (vs[1:] - vs[:-1] - slack - rtol * vs[:-1])[mask]
                worst_increase = max(worst_increase, float(inc.max()))
                checked += int(mask.sum())
            for j, row in enumerate(active):
                inside = vs[:, j] <= level + slack
                if np.isfinite(entered[row]):
                    reexits += int(not inside.all())
                elif inside.any():
                    k = int(np.argmax(inside))
                    reexits += int(not inside[k:].all())
                    entered[row] = times[k]
            x[active] = traj[-1]
            t += dwell
            active = np.array([r for r in active if not entered[r] <= t - dwell], dtype=int)
        still_out = active[~np.isfinite(entered[active])] if active.size else active
        if still_out.size:
            speed = np.linalg.norm(fld(Tensor(x[still_out])).data, axis=1)
            outside += int(np.sum(speed >= 1e-6))
    ok = above > 0 and worst_increase <= 0 and outside == 0 and reexits == 0
    return CheckResult(
        "Lyapunov decrease along rollouts",
        ok,
        worst_increase,
        0.0,
        {"starts_above_level": above, "steps_checked": checked, "terminal_outside": outside, "reexits": reexits},
    )


# --------------------------------------------------------------------------
# gradients


def gradient_checks(seed: int = 0, tol: float = 1e-4, floor: float = 1e-6) -> list[CheckResult]:
    """Backward gradients against central differences on small instances.

    Relative error is taken per component with ``floor`` guarding entries
    that are zero up to difference noise.
    """
    rng = np.random.default_rng(seed)
    model = small_model(seed, alpha=0.5, s=2.0, epsilon=1e-3, psi_layers=2, psi_hidden=(8,))
    model = model.with_params({**model.params, **model.psi.init(rng, out_scale=0.3)})
    x = rng.uniform(-1.5, 1.5, size=(4, 2))
    demo = rng.normal(size=(5, 2))
    out = []

    def param_check(label, loss, names):
        worst = 0.0
        for name in names:

            def fn(t, name=name):
                p = _bind(model.params)
                p[name] = t
                return loss(p)

            rep = ad.grad_check(fn, model.params[name], tol=tol, floor=floor)
            worst = max(worst, rep.max_rel_error)
        out.append(CheckResult(f"gradients: {label}", worst < tol, worst, tol))

    xt = Tensor(x)
    param_check("nominal MLP", lambda p: ad.sum(ad.square(mlp_forward(model.nominal, p, xt))), ["f.W0", "f.b2"])
    icnn = model.lyapunov.icnns[0]
    param_check("ICNN", lambda p: ad.sum(icnn_value(icnn, p, xt)), ["V0.A0", "V0.U1", "V0.b2"])
    param_check(
        "Lyapunov",
        lambda p: ad.sum(lyapunov_value(model.lyapunov, p, xt, latent_attractors(model, p))),
        ["V0.A1", "psi.0.t.W1"],
    )
    param_check("coupling stack", lambda p: ad.sum(ad.square(coupling_forward(model.psi, p, xt))), ["psi.1.s.W0"])
    param_check(
        "corrective field",
        lambda p: ad.sum(ad.square(field_terms(model, p, xt).f_hat)),
        ["f.W1", "V0.A0", "V0.U1"],
    )

    solver = SolverConfig("rk4", dt=0.05)
    times = np.linspace(0.0, 0.3, 4)

    def roll_loss(p, x0=xt):
        fld = make_field(model, p)
        r = integrate(fld, x0, times, solver)
        z = output_map(model, p, ad.stack(r.states, axis=1))
        return training_loss(z, np.broadcast_to(demo[: len(times)], (4, len(times), 2)), 15.0)

    param_check("fixed-step rollout", roll_loss, ["f.W0", "V0.A0", "psi.0.s.W1"])
    rep = ad.grad_check(lambda t: roll_loss(_bind(model.params), t), x, tol=tol, floor=floor)
    out.append(CheckResult("gradients: rollout initial state", rep.passed, rep.max_rel_error, tol))
    rep = ad.grad_check(lambda t: ahd(t, demo), rng.normal(size=(6, 2)), tol=tol, floor=floor)
    out.append(CheckResult("gradients: AHD loss", rep.passed, rep.max_rel_error, tol))
    return out


def adjoint_agreement(seed: int = 0, rtol: float = 1e-9) -> CheckResult:
    rng = np.random.default_rng(seed)
    model = small_model(seed, alpha=0.5, s=2.0, epsilon=1e-3)
    x0 = rng.uniform(-1, 1, size=(3, 2))
    demo = rng.normal(size=(3, 5, 2)) * 0.5
    times = np.linspace(0.0, 0.5, 5)
    solver = SolverConfig("dopri5", rtol=rtol, atol=rtol * 1e-2)

    def builder(p, x):
        return field_terms(model, p, x).f_hat

    def loss_fn(states, p):
        return training_loss(ad.stack(list(states), axis=1), demo, 15.0)

    _, g_tape = tape_gradients(builder, model.params, x0, times, loss_fn, solver)
    _, g_adj = adjoint_gradients(builder, model.params, x0, times, loss_fn, solver)
    keys = sorted(model.params)
    a = np.concatenate([g_tape[k].ravel() for k in keys])
    b = np.concatenate([g_adj[k].ravel() for k in keys])
    cos = float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
    return CheckResult("adjoint vs tape cosine", cos > 0.999, cos, 0.999)


# --------------------------------------------------------------------------
# solvers


def solver_orders() -> list[CheckResult]:
    def decay(x):
        return ad.neg(x)

    x0 = Tensor(np.array([[1.0]]))
    exact = math.exp(-1.0)
    errs = []
    for dt in (0.1, 0.05):
        r = integrate(decay, x0, [0.0, 1.0], SolverConfig("rk4", dt=dt))
        errs.append(abs(r.states[-1].item() - exact))
    ratio = errs[0] / errs[1]
    r = integrate(decay, x0, [0.0, 1.0], SolverConfig("dopri5", rtol=1e-8, atol=1e-10))
    dp = abs(r.states[-1].item() - exact)
    return [
        CheckResult("RK4 error ratio under dt halving", 8 <= ratio <= 32, ratio, 16.0, {"errors": errs}),
        CheckResult("Dopri5 error at rtol=1e-8", dp < 1e-6, dp, 1e-6),
    ]


# --------------------------------------------------------------------------
# metrics


def _warping_paths(n: int, m: int):
    def walk(i, j):
        if (i, j) == (n - 1, m - 1):
            yield [(i, j)]
            return
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            a, b = i + di, j + dj
            if a < n and b < m:
                for rest in walk(a, b):
                    yield [(i, j), *rest]

    return walk(0, 0)


def brute_dtw(p: np.ndarray, q: np.ndarray) -> float:
    return min(sum(np.linalg.norm(p[i] - q[j]) for i, j in path) for path in _warping_paths(len(p), len(q)))


def brute_frechet(p: np.ndarray, q: np.ndarray) -> float:
    return min(max(np.linalg.norm(p[i] - q[j]) for i, j in path) for path in _warping_paths(len(p), len(q)))


def metric_oracles(n_pairs: int = 200, seed: int = 0, max_len: int = 6) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    d_dtw = d_fr = 0.0
    for _ in range(n_pairs):
        p = rng.normal(size=(rng.integers(1, max_len + 1), 2))
        q = rng.normal(size=(rng.integers(1, max_len + 1), 2))
        d_dtw = max(d_dtw, abs(dtwd(p, q).raw - brute_dtw(p, q)))
        d_fr = max(d_fr, abs(discrete_frechet(p, q) - brute_frechet(p, q)))
    h1 = ahd(np.array([[0.0]]), np.array([[1.0]])).item()
    h2 = ahd(np.array([[0.0], [1.0]]), np.array([[0.0]])).item()
    return [
        CheckResult("DTW vs brute force", d_dtw < 1e-12, d_dtw, 1e-12),
        CheckResult("discrete Frechet vs brute force", d_fr < 1e-12, d_fr, 1e-12),
        CheckResult("AHD hand values", h1 == 2.0 and h2 == 0.5, abs(h1 - 2.0) + abs(h2 - 0.5), 0.0),
    ]


# --------------------------------------------------------------------------
# diffeomorphism


def round_trip(n_points: int = 1000, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    stack = CouplingStack("psi", 2, 3, (16,))
    p = _bind(stack.init(rng, out_scale=0.5))
    x = rng.normal(size=(n_points, 2)) * 2
    back = coupling_inverse(stack, p, coupling_forward(stack, p, Tensor(x))).data
    err = float(np.max(np.abs(back - x)))
    model = small_model(seed, psi_layers=3, psi_hidden=(16,), attractors=((0.0, 0.0), (0.0, -0.2)), lyapunov_mode="product")
    model = model.with_params({**model.params, **model.psi.init(rng, out_scale=0.5)})
    pm = model.bind()
    xs = latent_attractors(model, pm)
    z = output_map(model, pm, Tensor(np.stack([v.data for v in xs]))).data
    err_att = float(np.max(np.abs(z - model.attractors)))
    return [
        CheckResult("coupling round trip", err < 1e-9, err, 1e-9),
        CheckResult("latent attractor round trip", err_att < 1e-9, err_att, 1e-9),
    ]


def product_zero_at_attractors(seed: int = 0) -> CheckResult:
    model = small_model(seed, attractors=((0.0, 0.0), (0.0, -0.2)), lyapunov_mode="product")
    p = model.bind()
    res = attractor_residual(model.lyapunov, p, latent_attractors(model, p))
    worst = float(np.max(np.abs(res)))
    return CheckResult("product Lyapunov zero at attractors", worst < 1e-12, worst, 1e-12)


def quick_suite(seed: int = 0) -> list[CheckResult]:
    """The checks that finish in seconds; used by ``selftest``."""
    out = [corrective_hand_cases(), branch_continuity(20, seed), case3_identity(200, seed), descent_cases(500, seed)]
    out += solver_orders()
    out += metric_oracles(50, seed)
    out += round_trip(200, seed)
    out.append(product_zero_at_attractors(seed))
    out += gradient_checks(seed)
    out.append(adjoint_agreement(seed))
    return out
