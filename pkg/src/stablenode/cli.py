"""Command-line entry point.

Exit codes: 0 success, 1 invalid input or a failed check, 2 runtime failure.
Every artifact is written atomically and accompanied by a JSON report.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import ad, checks
from .ad import Tensor
from .dataset import DemoFormatError, Trajectory, atomic_write_text, load_bundled, load_demos, trajectory_csv
from .field import CorrectiveParams, field_terms, latent_attractors, lyapunov, output_inverse
from .nets import coupling_forward
from .odeint import SolverConfig, SolverError
from .trainer import (
    ModelConfig,
    TrainConfig,
    build_model,
    evaluate,
    fit,
    load_checkpoint,
    save_checkpoint,
    simulate,
)

log = logging.getLogger("stablenode")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
RUN_KEYS = {"data", "out", "init", "model", "eval_solver"}


class UsageError(ValueError):
    pass


# --------------------------------------------------------------------------
# config parsing


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def _from_mapping(cls, doc: dict, where: str):
    if not isinstance(doc, dict):
        raise UsageError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise UsageError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**{k: _tuplify(v) for k, v in doc.items()})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{where}: {exc}") from None


def _default_eval_solver() -> SolverConfig:
    return SolverConfig("dopri5", rtol=1e-5, atol=1e-7)


@dataclasses.dataclass
class RunConfig:
    train: TrainConfig
    model: ModelConfig
    data: str
    out: str
    init: str | None = None
    eval_solver: SolverConfig = dataclasses.field(default_factory=_default_eval_solver)


def parse_run_config(doc: dict) -> RunConfig:
    """Top-level keys are TrainConfig fields plus data/out/init/model/eval_solver."""
    if not isinstance(doc, dict):
        raise UsageError("config must be a JSON object")
    train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(doc) - train_keys - RUN_KEYS
    if unknown:
        raise UsageError(f"config: unknown keys {sorted(unknown)}")
    if "seed" not in doc:
        raise UsageError("config: 'seed' must be given explicitly")
    train = {k: v for k, v in doc.items() if k in train_keys}
    if "solver" in train:
        train["solver"] = _from_mapping(SolverConfig, train["solver"], "config.solver")
    if train.get("corrective") is not None:
        train["corrective"] = _from_mapping(CorrectiveParams, train["corrective"], "config.corrective")
    tc = _from_mapping(TrainConfig, train, "config")
    mc = _from_mapping(ModelConfig, doc.get("model", {}), "config.model")
    ev = doc.get("eval_solver")
    ev = _default_eval_solver() if ev is None else _from_mapping(SolverConfig, ev, "config.eval_solver")
    return RunConfig(tc, mc, doc.get("data", ""), doc.get("out", "model.json"), doc.get("init"), ev)


def _load_data(spec: str):
    if spec.startswith("bundled:"):
        return load_bundled(spec.split(":", 1)[1])
    return load_demos(spec)


def _check_input(path: str | None, what: str, is_dir: bool = False) -> Path:
    if not path:
        raise UsageError(f"missing {what} path")
    p = Path(path)
    if is_dir and not p.is_dir():
        raise UsageError(f"{what} directory {p} does not exist")
    if not is_dir and not p.is_file():
        raise UsageError(f"{what} file {p} does not exist")
    return p


def _check_output(path: str) -> Path:
    p = Path(path)
    if not p.parent.exists():
        raise UsageError(f"output directory {p.parent} does not exist")
    if p.is_dir():
        raise UsageError(f"output path {p} is a directory")
    return p


def _report_path(out: Path) -> Path:
    return out.with_name(out.stem + ".report.json")


def _write_json(path: Path, doc) -> None:
    atomic_write_text(path, json.dumps(doc, indent=1, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if dataclasses.is_dataclass(obj):
        return dataclasses.asdict(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _floats(text: str, what: str, n: int | None = None) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"{what}: expected comma-separated numbers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise UsageError(f"{what}: expected {n} numbers, got {len(vals)}")
    return vals


# --------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    cfg_path = _check_input(args.config, "config")
    try:
        doc = json.loads(cfg_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{cfg_path}: invalid JSON ({exc})") from None
    run = parse_run_config(doc)
    data = args.data or run.data
    out = _check_output(args.out or run.out)
    if not data:
        raise UsageError("no data directory given (config 'data' or --data)")
    if not data.startswith("bundled:"):
        _check_input(data, "data", is_dir=True)
    if run.init:
        _check_input(run.init, "initial model")
    demos = _load_data(data)
    model = load_checkpoint(run.init) if run.init else build_model(run.model, run.train.seed)
    trained, report = fit(model, demos, run.train, eval_solver=run.eval_solver)
    save_checkpoint(trained, out)
    doc = {"config": doc, "model": str(out), **report.to_dict()}
    _write_json(_report_path(out), doc)
    ev = report.evaluation
    print(f"trained {len(report.losses)} iterations in {report.wall_time:.1f}s; final loss {report.losses[-1] if report.losses else float('nan'):.6g}")
    if ev is not None:
        print(f"mean DTWD {ev.mean('dtwd'):.4g}, mean AHD {ev.mean('ahd'):.4g}")
    print(f"wrote {out}")
    return EXIT_OK


def _solver_from_args(args) -> SolverConfig:
    if args.dt is not None:
        return SolverConfig("rk4", dt=args.dt, max_steps=args.max_steps)
    return SolverConfig("dopri5", rtol=args.rtol, atol=args.atol, max_steps=args.max_steps)


def cmd_rollout(args) -> int:
    _check_input(args.model, "model")
    out = _check_output(args.out)
    model = load_checkpoint(args.model)
    y0 = _floats(args.x0, "--x0", model.n_y)
    if args.horizon <= 0:
        raise UsageError("--horizon must be positive")
    step = args.sample_dt or args.dt or 0.01
    n = max(2, int(round(args.horizon / step)) + 1)
    times = np.linspace(0.0, args.horizon, n)
    try:
        solver = _solver_from_args(args)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    x, z = simulate(model, [y0], times, solver)
    atomic_write_text(out, trajectory_csv(Trajectory(times, z[:, 0, :])))
    v = lyapunov(model, model.bind(), Tensor(x[:, 0, :])).data
    _write_json(
        _report_path(out),
        {
            "model": args.model,
            "x0": y0,
            "horizon": args.horizon,
            "solver": dataclasses.asdict(solver),
            "samples": n,
            "terminal_state": z[-1, 0].tolist(),
            "terminal_v": float(v[-1]),
            "in_sublevel": bool(v[-1] <= model.corrective.sublevel),
            "v_max": float(v.max()),
        },
    )
    print(f"wrote {n} samples to {out}; terminal state {np.round(z[-1, 0], 6).tolist()}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _check_input(args.model, "model")
    if not args.data.startswith("bundled:"):
        _check_input(args.data, "data", is_dir=True)
    out = _check_output(args.out)
    model = load_checkpoint(args.model)
    demos = _load_data(args.data)
    if demos.dim != model.n_z:
        raise UsageError(f"data is {demos.dim}-D but the model outputs {model.n_z}-D")
    rep = evaluate(model, demos, SolverConfig("dopri5", rtol=args.rtol, atol=args.atol))
    _write_json(out, {"model": args.model, "data": args.data, **rep.to_dict()})
    print(f"{'demo':<16}{'DTWD':>10}{'FD':>10}{'AHD':>10}{'end dist':>10}")
    for d in rep.demos:
        if d.error:
            print(f"{d.name:<16} failed: {d.error}")
        else:
            print(f"{d.name:<16}{d.dtwd:>10.4g}{d.frechet:>10.4g}{d.ahd:>10.4g}{d.terminal_distance:>10.4g}")
    print(f"wrote {out}")
    return EXIT_OK


def portrait_grid(model, bounds, n: int = 40):
    """Output-space velocity, L(x) and grid coordinates over ``bounds``."""
    if model.n_z != 2:
        raise UsageError("portrait needs a 2-D output space")
    xmin, xmax, ymin, ymax = bounds
    gx, gy = np.meshgrid(np.linspace(xmin, xmax, n), np.linspace(ymin, ymax, n))
    z = np.stack([gx.ravel(), gy.ravel()], axis=1)
    p = model.bind()
    x = output_inverse(model, p, Tensor(z))
    terms = field_terms(model, p, x, latent_attractors(model, p))
    if model.psi is None:
        vel = terms.f_hat.data
    else:
        vel = ad.jvp(lambda t: coupling_forward(model.psi, p, t), x, terms.f_hat).data
    return gx, gy, vel.reshape(n, n, 2), terms.l.data.reshape(n, n)


def render_svg(model, bounds, n: int = 40, size: int = 600) -> tuple[str, dict]:
    xmin, xmax, ymin, ymax = bounds
    gx, gy, vel, lval = portrait_grid(model, bounds, n)
    sx = size / (xmax - xmin)
    sy = size / (ymax - ymin)

    def px(x, y):
        return (x - xmin) * sx, size - (y - ymin) * sy

    cw, ch = size / (n - 1), size / (n - 1)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
        '<g id="corrective-active" fill="#1b5e20" fill-opacity="0.35" stroke="none">',
    ]
    for i in range(n):
        for j in range(n):
            if lval[i, j] > 0:
                cx, cy = px(gx[i, j], gy[i, j])
                parts.append(f'<rect x="{cx - cw / 2:.2f}" y="{cy - ch / 2:.2f}" width="{cw:.2f}" height="{ch:.2f}"/>')
    parts.append("</g>")
    speed = np.linalg.norm(vel, axis=-1)
    scale = 0.45 * cw / max(float(speed.max()), 1e-12)
    parts.append('<g id="field" stroke="#0d47a1" stroke-width="1">')
    for i in range(n):
        for j in range(n):
            x0, y0 = px(gx[i, j], gy[i, j])
            dx, dy = vel[i, j, 0] * scale * 2, -vel[i, j, 1] * scale * 2
            parts.append(f'<line x1="{x0:.2f}" y1="{y0:.2f}" x2="{x0 + dx:.2f}" y2="{y0 + dy:.2f}"/>')
            parts.append(f'<circle cx="{x0 + dx:.2f}" cy="{y0 + dy:.2f}" r="0.9" fill="#0d47a1"/>')
    parts.append("</g>")
    parts.append('<g id="attractors" fill="#b71c1c">')
    for a in model.attractors:
        ax, ay = px(a[0], a[1])
        parts.append(f'<circle cx="{ax:.2f}" cy="{ay:.2f}" r="5"/>')
    parts.append("</g></svg>")
    info = {
        "bounds": list(bounds),
        "grid": n,
        "active_fraction": float(np.mean(lval > 0)),
        "max_speed": float(speed.max()),
        "attractors": model.attractors.tolist(),
    }
    return "\n".join(parts) + "\n", info


def cmd_portrait(args) -> int:
    _check_input(args.model, "model")
    out = _check_output(args.out)
    bounds = _floats(args.bounds, "--bounds", 4)
    if not (bounds[0] < bounds[1] and bounds[2] < bounds[3]):
        raise UsageError("--bounds must satisfy xmin < xmax and ymin < ymax")
    if args.grid < 2:
        raise UsageError("--grid must be at least 2")
    model = load_checkpoint(args.model)
    svg, info = render_svg(model, bounds, args.grid)
    atomic_write_text(out, svg)
    _write_json(_report_path(out), {"model": args.model, **info})
    print(f"wrote {out}")
    return EXIT_OK


def _run_checks(results, report: str | None) -> int:
    for r in results:
        print(r.line())
    if report:
        _write_json(_check_output(report), [dataclasses.asdict(r) for r in results])
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_INVALID


def cmd_gradcheck(args) -> int:
    return _run_checks(checks.gradient_checks(args.seed) + [checks.adjoint_agreement(args.seed)], args.report)


def cmd_selftest(args) -> int:
    return _run_checks(checks.quick_suite(args.seed), args.report)


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stablenode", description="Lyapunov-stable neural ODEs from demonstrations")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a model to demonstrations")
    p.add_argument("--config", required=True)
    p.add_argument("--data", help="demo directory or bundled:<shape>; overrides the config")
    p.add_argument("--out", help="checkpoint path; overrides the config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rollout", help="integrate a trained model from one start")
    p.add_argument("--model", required=True)
    p.add_argument("--x0", required=True, help="comma-separated start in observation space")
    p.add_argument("--horizon", type=float, required=True)
    p.add_argument("--dt", type=float, help="fixed RK4 step; adaptive Dopri5 when omitted")
    p.add_argument("--rtol", type=float, default=1e-6)
    p.add_argument("--atol", type=float, default=1e-8)
    p.add_argument("--sample-dt", type=float, help="output spacing (default: --dt or 0.01)")
    p.add_argument("--max-steps", type=int, default=100_000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("eval", help="compare rollouts with demonstrations")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rtol", type=float, default=1e-5)
    p.add_argument("--atol", type=float, default=1e-7)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("portrait", help="SVG phase portrait")
    p.add_argument("--model", required=True)
    p.add_argument("--bounds", required=True, help="xmin,xmax,ymin,ymax")
    p.add_argument("--grid", type=int, default=40)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_portrait)

    p = sub.add_parser("gradcheck", help="backward gradients against finite differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("selftest", help="run the quick invariant checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report")
    p.set_defaults(func=cmd_selftest)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, DemoFormatError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (SolverError, FloatingPointError, RuntimeError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
