"""Accuracy as a function of the observation window length.

Generates one dataset with 1.0 s windows, then trains and scores a model for
each prefix length T_win in 0.1..1.0 s. Prints a table and writes
``twin_sweep.csv`` under ``--out``.

    python scripts/twin_sweep.py --out runs/twin --epochs 10
"""

import argparse
import csv
from dataclasses import replace
from pathlib import Path

from astgl.dataset import GenerationConfig, concat, generate_dataset
from astgl.evaluation import evaluate
from astgl.simulator import build_grid
from astgl.training import Hyperparams, train


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--out", default="runs/twin")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--scale", type=float, default=0.5, help="fraction of the default case counts")
    args = ap.parse_args()

    gen = GenerationConfig(T_win=1.0)
    gen = replace(gen, counts={g: max(4, int(n * args.scale)) for g, n in gen.counts.items()})
    sets = generate_dataset(build_grid(seed=args.seed), gen, args.seed)
    train_set = concat([sets[g].split("train") for g in ("A", "B")])
    test_set = concat([sets[g].split("test") for g in sorted(sets)])

    rows = []
    for i in range(1, 11):
        T_win = round(0.1 * i, 1)
        hp = Hyperparams(T_win=T_win, epochs=args.epochs, seed=args.seed)
        res = train(train_set.window(T_win), hp)
        report = evaluate(res.best, test_set.window(T_win))
        row = {"T_win": T_win, **{g: report.get("test", g)["Acc"] for g in ("all", "A", "B", "C")}}
        rows.append(row)
        print("  ".join(f"{k} {v:.3f}" if k != "T_win" else f"T_win {v:.1f}" for k, v in row.items()),
              flush=True)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "twin_sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


if __name__ == "__main__":
    main()
