"""Run the desk-scale comparison of the learned graph against a fixed-graph baseline.

    python scripts/run_comparative.py --out runs/comparative
    python scripts/run_comparative.py --out runs/conn --baseline connectivity --epochs 10

Writes datasets, checkpoints, per-run reports and ``summary.json`` under ``--out``.
"""

import argparse
import json
from dataclasses import replace

from astgl.experiment import ExperimentConfig, run_comparative


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--out", default="runs/comparative")
    ap.add_argument("--seed", type=int, default=0, help="grid and data seed")
    ap.add_argument("--train-seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--baseline", choices=["admittance", "connectivity"], default="admittance")
    ap.add_argument("--epochs", type=int, help="override the default epoch count")
    args = ap.parse_args()

    cfg = ExperimentConfig(seed=args.seed, train_seeds=tuple(args.train_seeds), baseline=args.baseline)
    if args.epochs is not None:
        cfg.hyperparams = replace(cfg.hyperparams, epochs=args.epochs)
    summary = run_comparative(cfg, args.out)
    summary.pop("runs")
    print(json.dumps(summary, indent=1, sort_keys=True))


if __name__ == "__main__":
    main()
