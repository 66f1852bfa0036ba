"""Model construction, training loop, evaluation and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from . import ad
from .ad import Tensor
from .dataset import DemoSet, WindowBatch, atomic_write_text, make_windows
from .field import (
    CorrectiveParams,
    StableNodeModel,
    field_terms,
    input_map,
    latent_attractors,
    lyapunov,
    make_field,
    output_map,
)
from .metrics import LOSS_MODES, ahd, discrete_frechet, dtwd, training_loss
from .nets import CouplingStack, IcnnSpec, LyapunovSpec, MlpSpec
from .odeint import SolverConfig, SolverError, adjoint_gradients, integrate

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
MAX_CONSECUTIVE_FAILURES = 10


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 2
    obs_dim: int | None = None  # None selects the identity input map
    phi_hidden: tuple[int, ...] = (32,)
    nominal_hidden: tuple[int, ...] = (64, 64)
    nominal_activation: str = "tanh"
    nominal_init_scale: float = 1.0
    lyapunov_mode: str = "single"
    attractors: tuple[tuple[float, ...], ...] = ((0.0, 0.0),)
    icnn_hidden: tuple[int, ...] = (32, 32)
    icnn_activation: str = "softplus"
    gamma: float = 70.0
    delta: float = 1e-3
    smooth: float = 0.1
    psi_layers: int = 0  # 0 selects the identity output map
    psi_hidden: tuple[int, ...] = (32,)
    alpha: float = 1e-3
    epsilon: float = 1e-5
    s: float = 20.0


def build_model(cfg: ModelConfig, seed: int = 0) -> StableNodeModel:
    rng = np.random.default_rng(seed)
    n = cfg.dim
    attractors = tuple(tuple(float(v) for v in a) for a in cfg.attractors)
    nominal = MlpSpec("f", (n, *cfg.nominal_hidden, n), cfg.nominal_activation)
    icnns = tuple(
        IcnnSpec(f"V{i}", (n, *cfg.icnn_hidden, 1), cfg.icnn_activation, cfg.smooth) for i in range(len(attractors))
    )
    lspec = LyapunovSpec(cfg.lyapunov_mode, attractors, icnns, cfg.gamma, cfg.delta, cfg.smooth)
    phi = None if cfg.obs_dim is None else MlpSpec("phi", (cfg.obs_dim, *cfg.phi_hidden, n), "tanh")
    psi = None if cfg.psi_layers == 0 else CouplingStack("psi", n, cfg.psi_layers, tuple(cfg.psi_hidden))
    params = nominal.init(rng, out_scale=cfg.nominal_init_scale)
    params.update(lspec.init(rng))
    if phi is not None:
        params.update(phi.init(rng))
    if psi is not None:
        params.update(psi.init(rng))
    return StableNodeModel(n, n, nominal, lspec, CorrectiveParams(cfg.alpha, cfg.epsilon, cfg.s), phi, psi, params)


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    skipped: int = 0


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """Bias-corrected Adam on a fresh copy of ``params``.

    A non-finite gradient anywhere skips the step; ``state.skipped`` counts it.
    """
    missing = set(params) - set(grads)
    if missing:
        raise KeyError(f"no gradient for parameters {sorted(missing)}")
    if not all(np.all(np.isfinite(grads[k])) for k in params):
        return dict(params), replace(state, skipped=state.skipped + 1)
    b1, b2 = betas
    t = state.t + 1
    new_params, m, v = {}, {}, {}
    for k in sorted(params):
        g = np.asarray(grads[k], dtype=np.float64)
        m[k] = b1 * state.m.get(k, np.zeros_like(g)) + (1 - b1) * g
        v[k] = b2 * state.v.get(k, np.zeros_like(g)) + (1 - b2) * g * g
        m_hat = m[k] / (1 - b1**t)
        v_hat = v[k] / (1 - b2**t)
        new_params[k] = params[k] - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, AdamState(m, v, t, state.skipped)


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 500
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    n_batch: int = 120
    n_samples: int = 25
    solver: SolverConfig = field(default_factory=lambda: SolverConfig("dopri5", rtol=1e-3, atol=1e-4))
    corrective: CorrectiveParams | None = None
    loss: str = "ahd_composite"
    k: float = 15.0
    seed: int = 0
    gradient: str = "tape"
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.loss not in LOSS_MODES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.gradient not in ("tape", "adjoint"):
            raise ValueError(f"unknown gradient path {self.gradient!r}")


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    events: list[str] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    evaluation: "EvalReport | None" = None

    def to_dict(self) -> dict:
        return {
            "losses": self.losses,
            "wall_time": self.wall_time,
            "events": self.events,
            "checkpoints": self.checkpoints,
            "evaluation": None if self.evaluation is None else self.evaluation.to_dict(),
        }


def _group_windows(batch: WindowBatch) -> list[tuple[np.ndarray, np.ndarray]]:
    """Windows sharing a relative time grid are integrated together."""
    rel = batch.times - batch.times[:, :1]
    groups: dict[tuple, list[int]] = {}
    for i, row in enumerate(np.round(rel, 9)):
        groups.setdefault(tuple(row), []).append(i)
    return [(rel[idx[0]], np.array(idx)) for idx in groups.values()]


def window_loss(model: StableNodeModel, p, batch: WindowBatch, cfg: TrainConfig) -> Tensor:
    fn = make_field(model, p)
    total = None
    n_total = len(batch)
    for rel, idx in _group_windows(batch):
        x0 = input_map(model, p, Tensor(batch.y0[idx]))
        roll = integrate(fn, x0, rel, cfg.solver)
        z = output_map(model, p, ad.stack(roll.states, axis=1))
        part = ad.scale(training_loss(z, batch.points[idx], cfg.k, cfg.loss), len(idx) / n_total)
        total = part if total is None else total + part
    return total


def _window_grads_adjoint(model, params, batch, cfg) -> tuple[float, dict[str, np.ndarray]]:
    if model.phi is not None:
        raise NotImplementedError("adjoint gradients support identity input maps only")
    total_loss = 0.0
    total = {k: np.zeros_like(v) for k, v in params.items()}
    for rel, idx in _group_windows(batch):
        y0 = batch.y0[idx]
        demo = batch.points[idx]
        w = len(idx) / len(batch)

        def builder(p, x):
            return field_terms(model, p, x).f_hat

        def loss_fn(states, p):
            z = output_map(model, p, ad.stack(list(states), axis=1))
            return ad.scale(training_loss(z, demo, cfg.k, cfg.loss), w)

        lval, g = adjoint_gradients(builder, params, y0, rel, loss_fn, cfg.solver)
        total_loss += lval
        for k in total:
            total[k] += g[k]
    return total_loss, total


def _iteration_seed(seed: int, it: int) -> int:
    return int(np.random.SeedSequence([seed, it]).generate_state(1)[0])


def fit(model: StableNodeModel, demos: DemoSet, config: TrainConfig, eval_solver: SolverConfig | None = None):
    """Minimise the window loss with Adam; returns ``(trained_model, report)``."""
    if demos.dim != model.n_z:
        raise ValueError(f"demos are {demos.dim}-D but the model outputs {model.n_z}-D")
    if config.corrective is not None:
        model = replace(model, corrective=config.corrective)
    model = model.copy()
    report = TrainReport()
    params = dict(model.params)
    state = AdamState()
    failures = 0
    start = time.perf_counter()
    ckpt_dir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    for it in range(config.iterations):
        batch = make_windows(demos, config.n_samples, config.n_batch, _iteration_seed(config.seed, it))
        try:
            if config.gradient == "tape":
                graph = ad.Graph()
                p = graph.bind(params)
                loss = window_loss(model, p, batch, config)
                grads = {k: v.data for k, v in ad.backward(loss).items()}
                lval = loss.item()
            else:
                lval, grads = _window_grads_adjoint(model, params, batch, config)
        except SolverError as exc:
            failures += 1
            report.events.append(f"iteration {it}: solver failure ({exc}); skipped")
            report.losses.append(math.nan)
            if failures > MAX_CONSECUTIVE_FAILURES:
                raise SolverError(f"aborting after {failures} consecutive solver failures") from exc
            continue
        failures = 0
        report.losses.append(lval)
        skipped = state.skipped
        params, state = adam_step(params, grads, state, config.lr, config.betas, config.eps)
        if state.skipped > skipped:
            report.events.append(f"iteration {it}: non-finite gradient; step skipped")
        if ckpt_dir is not None and config.checkpoint_every > 0 and (it + 1) % config.checkpoint_every == 0:
            path = ckpt_dir / f"checkpoint_{it + 1:06d}.json"
            save_checkpoint(model.with_params(params), path)
            report.checkpoints.append(str(path))
        if it % 50 == 0:
            log.info("iteration %d loss %.6g", it, lval)
    report.wall_time = time.perf_counter() - start
    trained = model.with_params(params)
    if eval_solver is not None:
        report.evaluation = evaluate(trained, demos, eval_solver)
    return trained, report


# --------------------------------------------------------------------------
# rollouts and evaluation


def simulate(model: StableNodeModel, y0, times, solver: SolverConfig) -> tuple[np.ndarray, np.ndarray]:
    """Detached rollout from observations ``y0`` (B, n_y); returns latent (T, B, n_x) and output (T, B, n_z)."""
    p = model.bind()
    fld = make_field(model, p)
    x0 = input_map(model, p, Tensor(np.atleast_2d(np.asarray(y0, dtype=np.float64))))
    roll = integrate(fld, x0, times, solver)
    x = roll.array()
    z = output_map(model, p, Tensor(x)).data
    return x, z


@dataclass
class DemoMetrics:
    name: str
    dtwd: float = math.nan
    dtwd_normalized: float = math.nan
    frechet: float = math.nan
    ahd: float = math.nan
    terminal_distance: float = math.nan
    terminal_v: float = math.nan
    in_sublevel: bool = False
    error: str | None = None


@dataclass
class EvalReport:
    demos: list[DemoMetrics]
    sublevel: float

    def mean(self, key: str) -> float:
        vals = [getattr(d, key) for d in self.demos if d.error is None]
        return float(np.mean(vals)) if vals else math.nan

    def to_dict(self) -> dict:
        return {
            "sublevel": self.sublevel,
            "mean": {k: self.mean(k) for k in ("dtwd", "dtwd_normalized", "frechet", "ahd", "terminal_distance")},
            "demos": [asdict(d) for d in self.demos],
        }


def evaluate(
    model: StableNodeModel, demos: DemoSet, solver: SolverConfig, horizon_factor: float = 3.0
) -> EvalReport:
    """Roll out from each demo's first point and compare in output space.

    The extended rollout runs for ``horizon_factor`` times the demo duration
    and reports where it ends relative to the attractors and the sublevel
    set ``V <= 1/(s alpha)``.
    """
    if len(demos) == 0:
        raise ValueError("no demonstrations to evaluate")
    p = model.bind()
    x_star = latent_attractors(model, p)
    fld = make_field(model, p)
    attractors = model.attractors
    out = []
    for name, tr in zip(demos.names, demos.trajectories):
        m = DemoMetrics(name)
        try:
            x0 = input_map(model, p, Tensor(tr.points[:1]))
            roll = integrate(fld, x0, tr.times, solver)
            z = output_map(model, p, Tensor(roll.array()[:, 0, :])).data
            d = dtwd(z, tr.points)
            m.dtwd, m.dtwd_normalized = d.raw, d.normalized
            m.frechet = discrete_frechet(z, tr.points)
            m.ahd = ahd(z, tr.points).item()
            ext = integrate(fld, x0, [tr.times[0], tr.times[0] + horizon_factor * tr.duration], solver)
            xt = ext.states[-1]
            zt = output_map(model, p, xt).data[0]
            m.terminal_distance = float(np.min(np.linalg.norm(attractors - zt, axis=1)))
            m.terminal_v = float(lyapunov(model, p, xt, x_star).data[0])
            m.in_sublevel = bool(m.terminal_v <= model.corrective.sublevel)
        except (SolverError, FloatingPointError) as exc:
            m.error = str(exc)
        out.append(m)
    return EvalReport(out, model.corrective.sublevel)


# --------------------------------------------------------------------------
# checkpoints


def _mlp_desc(spec: MlpSpec | None) -> dict:
    if spec is None:
        return {"type": "identity"}
    return {"type": "mlp", "name": spec.name, "widths": list(spec.widths), "activation": spec.activation}


def _mlp_from(desc: dict) -> MlpSpec | None:
    if desc["type"] == "identity":
        return None
    return MlpSpec(desc["name"], tuple(desc["widths"]), desc["activation"])


def _psi_desc(stack: CouplingStack | None) -> dict:
    if stack is None:
        return {"type": "identity"}
    return {
        "type": "coupling",
        "name": stack.name,
        "dim": stack.dim,
        "n_layers": stack.n_layers,
        "hidden": list(stack.hidden),
        "activation": stack.activation,
    }


def _psi_from(desc: dict) -> CouplingStack | None:
    if desc["type"] == "identity":
        return None
    return CouplingStack(desc["name"], desc["dim"], desc["n_layers"], tuple(desc["hidden"]), desc["activation"])


def checkpoint_dict(model: StableNodeModel) -> dict:
    ls = model.lyapunov
    return {
        "version": CHECKPOINT_VERSION,
        "n_x": model.n_x,
        "n_z": model.n_z,
        "corrective": asdict(model.corrective),
        "maps": {"phi": _mlp_desc(model.phi), "psi": _psi_desc(model.psi), "nominal": _mlp_desc(model.nominal)},
        "lyapunov": {
            "mode": ls.mode,
            "gamma": ls.gamma,
            "delta": ls.delta,
            "d": ls.d,
            "icnns": [
                {"name": s.name, "widths": list(s.widths), "activation": s.activation, "d": s.d} for s in ls.icnns
            ],
        },
        "params": {
            k: {"shape": list(v.shape), "data": [float(x) for x in np.ravel(v)]} for k, v in sorted(model.params.items())
        },
        "attractors": [list(a) for a in ls.attractors],
    }


def model_from_dict(doc: dict) -> StableNodeModel:
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    lsd = doc["lyapunov"]
    icnns = tuple(IcnnSpec(d["name"], tuple(d["widths"]), d["activation"], d["d"]) for d in lsd["icnns"])
    attractors = tuple(tuple(float(v) for v in a) for a in doc["attractors"])
    lspec = LyapunovSpec(lsd["mode"], attractors, icnns, lsd["gamma"], lsd["delta"], lsd["d"])
    params = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in doc["params"].items()}
    return StableNodeModel(
        doc["n_x"],
        doc["n_z"],
        _mlp_from(doc["maps"]["nominal"]),
        lspec,
        CorrectiveParams(**doc["corrective"]),
        _mlp_from(doc["maps"]["phi"]),
        _psi_from(doc["maps"]["psi"]),
        params,
    )


def save_checkpoint(model: StableNodeModel, path) -> None:
    atomic_write_text(path, json.dumps(checkpoint_dict(model)) + "\n")


def load_checkpoint(path) -> StableNodeModel:
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
