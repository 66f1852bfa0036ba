"""Train on one bundled shape and print before/after evaluation metrics.

    python3 scripts/train_shape.py angle --iterations 600 --lr 3e-3
"""

import argparse
import json
import logging

from stablenode.dataset import load_bundled
from stablenode.odeint import SolverConfig
from stablenode.trainer import ModelConfig, TrainConfig, build_model, evaluate, fit, save_checkpoint


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("shape")
    ap.add_argument("--iterations", type=int, default=600)
    ap.add_argument("--lr", type=float, default=3e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None, help="checkpoint path")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    demos = load_bundled(args.shape)
    model = build_model(ModelConfig(), seed=args.seed)
    solver = SolverConfig("dopri5", rtol=1e-5, atol=1e-7)
    before = evaluate(model, demos, solver)
    trained, report = fit(model, demos, TrainConfig(iterations=args.iterations, lr=args.lr, seed=args.seed))
    after = evaluate(trained, demos, solver)
    summary = {
        "wall_time": report.wall_time,
        "final_loss": report.losses[-1] if report.losses else None,
        "before": before.to_dict()["mean"],
        "after": after.to_dict()["mean"],
        "in_sublevel": [d.in_sublevel for d in after.demos],
    }
    print(json.dumps(summary, indent=1))
    if args.out:
        save_checkpoint(trained, args.out)


if __name__ == "__main__":
    main()
