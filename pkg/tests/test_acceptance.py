"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line."""

import time

import numpy as np
import pytest

from stablenode import checks
from stablenode.dataset import load_bundled, synth_multimodal
from stablenode.odeint import SolverConfig
from stablenode.trainer import ModelConfig, TrainConfig, build_model, evaluate, fit, simulate

EVAL = SolverConfig("dopri5", rtol=1e-5, atol=1e-7)
SHAPE_MODEL = ModelConfig(nominal_hidden=(32, 32), icnn_hidden=(16, 16))
SHAPE_TRAIN = TrainConfig(iterations=400, lr=5e-3, seed=0)
TWO_ATTRACTORS = ((0.0, 0.0), (0.0, -0.2))


def test_c1_corrective_hand_cases_and_continuity(gate):
    hand = checks.corrective_hand_cases()
    cont = checks.branch_continuity(n_paths=100, seed=0)
    gate(
        "C1 corrective hand cases + branch continuity",
        hand.passed and cont.passed,
        f"hand-case error {hand.value:.2e} (< 1e-12), max jump {cont.value:.2e} over 100 paths per boundary (< 1e-9)",
    )


def test_c2_lyapunov_decrease_on_random_models(gate):
    start = time.perf_counter()
    res = checks.lyapunov_decrease(n_models=20, n_starts=100, seed=0)
    wall = time.perf_counter() - start
    d = res.detail
    gate(
        "C2 V non-increasing above 1/(s alpha), rollouts end in the sublevel set",
        res.passed and wall < 300,
        f"worst increase beyond slack {res.value:.3g} over {d['steps_checked']} steps, "
        f"{d['starts_above_level']} starts above level, {d['terminal_outside']} outside at horizon, "
        f"{d['reexits']} re-exits, {wall:.0f}s (< 300s)",
    )


def test_c3_case3_identity(gate):
    res = checks.case3_identity(n_points=1000, seed=0)
    gate("C3 case-3 identity", res.passed, f"max error {res.value:.2e} on {res.detail['points']} points (< 1e-9)")


def test_c4_gradients(gate):
    start = time.perf_counter()
    grads = checks.gradient_checks(seed=0)
    adj = checks.adjoint_agreement(seed=0, rtol=1e-9)
    wall = time.perf_counter() - start
    worst = max(grads, key=lambda r: r.value)
    gate(
        "C4 gradients vs central differences, adjoint vs tape",
        all(r.passed for r in grads) and adj.passed and wall < 120,
        f"worst rel. error {worst.value:.2e} ({worst.name}, < 1e-4), cosine {adj.value:.6f} (> 0.999), {wall:.0f}s",
    )


def test_c5_solver_orders(gate):
    rk4, dp = checks.solver_orders()
    gate(
        "C5 solver orders",
        rk4.passed and dp.passed,
        f"RK4 error ratio {rk4.value:.2f} (in [8, 32]), Dopri5 error {dp.value:.2e} (< 1e-6)",
    )


def test_c6_metric_oracles(gate):
    dtw, fr, hand = checks.metric_oracles(n_pairs=200, seed=0)
    gate(
        "C6 metric oracles",
        dtw.passed and fr.passed and hand.passed,
        f"DTW max diff {dtw.value:.1e}, Frechet max diff {fr.value:.1e} over 200 pairs; AHD hand values exact={hand.passed}",
    )


def test_c7_diffeomorphism_round_trip(gate):
    stack, att = checks.round_trip(n_points=1000, seed=0)
    gate(
        "C7 coupling round trip",
        stack.passed and att.passed,
        f"stack error {stack.value:.1e}, attractor error {att.value:.1e} (< 1e-9)",
    )


@pytest.fixture(scope="module")
def shape_runs():
    start = time.perf_counter()
    runs = {}
    for name in ("angle", "hook"):
        demos = load_bundled(name)
        model = build_model(SHAPE_MODEL, seed=0)
        before = evaluate(model, demos, EVAL)
        trained, _ = fit(model, demos, SHAPE_TRAIN)
        runs[name] = (before, evaluate(trained, demos, EVAL))
    return runs, time.perf_counter() - start


def test_c8_desk_scale_learning(gate, shape_runs):
    runs, wall = shape_runs
    parts, ok = [], wall < 900
    for name, (before, after) in runs.items():
        red = 1 - after.mean("ahd") / before.mean("ahd")
        better = all(a.dtwd < b.dtwd for a, b in zip(after.demos, before.demos))
        ok &= red >= 0.70 and better
        parts.append(f"{name}: AHD -{100 * red:.1f}% (>= 70%), DTWD lower on every demo={better}")
    gate("C8 desk-scale learning", ok, "; ".join(parts) + f"; {wall:.0f}s (< 900s)")


def test_c9_two_attractors(gate):
    demos = synth_multimodal([load_bundled("angle"), load_bundled("hook")], TWO_ATTRACTORS)
    cfg = ModelConfig(
        nominal_hidden=(32, 32),
        icnn_hidden=(16, 16),
        lyapunov_mode="sigmoid_blend",
        attractors=TWO_ATTRACTORS,
        gamma=70.0,
    )
    trained, _ = fit(build_model(cfg, seed=0), demos, TrainConfig(iterations=600, lr=5e-3, seed=0))
    y0 = np.stack([tr.points[0] for tr in demos])
    _, z = simulate(trained, y0, [0.0, 10.0], SolverConfig("dopri5", rtol=1e-6, atol=1e-8))
    dist = np.linalg.norm(z[-1] - demos.attractors[np.array(demos.groups)], axis=1)
    frac = float(np.mean(dist < 0.05))
    prod = checks.product_zero_at_attractors(seed=0)
    gate(
        "C9 two-attractor convergence + product Lyapunov zeros",
        frac >= 0.9 and prod.passed,
        f"{100 * frac:.0f}% of starts within 0.05 of their own attractor (>= 90%, worst {dist.max():.3f}); "
        f"product V at attractors {prod.value:.1e} (< 1e-12)",
    )
