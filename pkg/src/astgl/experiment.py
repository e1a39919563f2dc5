"""Desk-scale comparative experiment: learned graph vs a fixed base-topology graph.

Models train on the train splits of groups A and B (known topologies) and are
scored on the A and B test splits and on group C, whose trips never appear in
training. Every output file is deterministic given the configuration.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import GenerationConfig, concat, generate_dataset, load_dataset, save_dataset
from .evaluation import EvalReport, evaluate, inspect_adaptive_graph
from .simulator import SurrogateConstants, build_grid
from .training import Hyperparams, train


@dataclass
class ExperimentConfig:
    seed: int = 0  # grid and data generation
    train_seeds: tuple = (0, 1, 2)
    n_buses: int = 12
    hyperparams: Hyperparams = field(default_factory=lambda: Hyperparams(epochs=25))
    baseline: str = "admittance"
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    surrogate: SurrogateConstants = field(default_factory=SurrogateConstants)


def _scores(report: EvalReport) -> dict:
    return {r["group"]: r["Acc"] for r in report.rows if r["group"] != "all"}


def file_digests(root) -> dict:
    """sha256 of every file under ``root`` keyed by relative path."""
    root = Path(root)
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name != "timing.json"}


def build_data(cfg: ExperimentConfig, out: Path, log=print) -> dict:
    topology = build_grid(cfg.n_buses, cfg.seed)
    sets = generate_dataset(topology, cfg.generation, cfg.seed, cfg.surrogate)
    for g, ds in sets.items():
        save_dataset(ds, out / "data" / g, cfg.surrogate, cfg.generation)
    # reload so the experiment runs on exactly what is on disk
    return {g: load_dataset(out / "data" / g) for g in sets}


def run_comparative(cfg: ExperimentConfig, out_dir, log=print) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.process_time()
    sets = build_data(cfg, out, log)
    t_data = time.process_time() - t0
    train_set = concat([sets[g].split("train") for g in sorted(sets) if len(sets[g].split("train"))])
    test_set = concat([sets[g].split("test") for g in sorted(sets)])
    runs = []
    inspection = None
    for seed in cfg.train_seeds:
        for name, graph in (("ASTGL", "adaptive"), (f"STGCN-{cfg.baseline}", cfg.baseline)):
            hp = replace(cfg.hyperparams, seed=seed, graph=graph)
            run_dir = out / "runs" / f"seed{seed}" / name
            run_dir.mkdir(parents=True, exist_ok=True)
            res = train(train_set, hp, log_path=run_dir / "train_log.csv")
            res.final.save(run_dir / "final.ckpt")
            res.best.save(run_dir / "best.ckpt")
            report = evaluate(res.best, test_set, "test", name)
            report.save(run_dir / "report")
            acc = _scores(report)
            runs.append({"seed": seed, "model": name, "acc": acc,
                         "best_epoch": res.best.best_epoch, "val_acc": res.best.best_val_acc})
            log(f"seed {seed} {name}: " + ", ".join(f"{g} {100 * a:.2f}" for g, a in acc.items()))
            if inspection is None and graph == "adaptive":
                inspection = inspect_adaptive_graph(res.best, test_set, run_dir / "inspect")["summary"]
    summary = _summarize(runs, cfg)
    summary["inspection"] = inspection
    summary["data_digests"] = {g: sets[g].digest() for g in sorted(sets)}
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1), encoding="utf-8")
    timing = {"data_cpu_s": t_data, "total_cpu_s": time.process_time() - t0}
    (out / "timing.json").write_text(json.dumps(timing, indent=1), encoding="utf-8")
    summary["timing"] = timing
    return summary


def _summarize(runs: list, cfg: ExperimentConfig) -> dict:
    models = sorted({r["model"] for r in runs})
    med = {}
    for m in models:
        accs = [r["acc"] for r in runs if r["model"] == m]
        med[m] = {g: float(np.median([a[g] for a in accs])) for g in sorted(accs[0])}
    ours, base = med["ASTGL"], med[f"STGCN-{cfg.baseline}"]
    return {
        "runs": runs,
        "median_acc": med,
        "B_acc": ours.get("B"),
        "B_minus_C_pp": 100 * (ours["B"] - ours["C"]) if "B" in ours and "C" in ours else None,
        "C_margin_over_baseline_pp": 100 * (ours["C"] - base["C"]) if "C" in ours else None,
    }
