"""Two-attractor experiment: angle demos end at [0, 0], hook demos at [0, -0.2].

Trains a sigmoid-blend Lyapunov model on the combined set and reports, for
each demo start, the distance of a long rollout's end point to the demo's
own attractor.

    python3 scripts/two_attractors.py --iterations 600
"""

import argparse
import json
import logging

import numpy as np

from stablenode.dataset import load_bundled, synth_multimodal
from stablenode.odeint import SolverConfig
from stablenode.trainer import ModelConfig, TrainConfig, build_model, fit, save_checkpoint, simulate

ATTRACTORS = ((0.0, 0.0), (0.0, -0.2))


def combined_demos():
    return synth_multimodal([load_bundled("angle"), load_bundled("hook")], ATTRACTORS)


def model_config(**overrides) -> ModelConfig:
    base = dict(
        nominal_hidden=(32, 32),
        icnn_hidden=(16, 16),
        lyapunov_mode="sigmoid_blend",
        attractors=ATTRACTORS,
        gamma=70.0,
    )
    base.update(overrides)
    return ModelConfig(**base)


def own_attractor_distances(model, demos, horizon: float, solver: SolverConfig) -> np.ndarray:
    y0 = np.stack([tr.points[0] for tr in demos])
    _, z = simulate(model, y0, [0.0, horizon], solver)
    own = demos.attractors[np.array(demos.groups)]
    return np.linalg.norm(z[-1] - own, axis=1)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--iterations", type=int, default=600)
    ap.add_argument("--lr", type=float, default=5e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--horizon", type=float, default=10.0)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    demos = combined_demos()
    model = build_model(model_config(), seed=args.seed)
    trained, report = fit(model, demos, TrainConfig(iterations=args.iterations, lr=args.lr, seed=args.seed))
    dist = own_attractor_distances(trained, demos, args.horizon, SolverConfig("dopri5", rtol=1e-6, atol=1e-8))
    print(
        json.dumps(
            {
                "wall_time": report.wall_time,
                "distances": dict(zip(demos.names, np.round(dist, 4).tolist())),
                "fraction_within_0.05": float(np.mean(dist < 0.05)),
            },
            indent=1,
        )
    )
    if args.out:
        save_checkpoint(trained, args.out)


if __name__ == "__main__":
    main()
