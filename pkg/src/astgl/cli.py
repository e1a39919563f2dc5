"""Command-line entry point: ``astgl {gen-data,train,eval,hpo,inspect}``.

Every command reads an optional JSON config, applies flag overrides, writes
the fully resolved config to ``<out>/<command>/resolved_config.json`` and
exits with 0 (success), 2 (config error), 3 (data error) or 4 (numerical
failure). Output layout under ``--out``::

    data/<group>/          ASTGL-DS v1 datasets (gen-data)
    train/                 best.ckpt, final.ckpt, train_log.csv (train)
    eval/                  report.json/.csv, baseline_<variant>.json/.csv (eval)
    hpo/                   trials.csv, best_config.json (hpo)
    inspect/               A_adp.csv, alpha_sp.csv, A_sp.csv, sign_test.json,
                           embeddings_L1..L4.csv (inspect)
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .dataset import DatasetError, GenerationConfig, concat, generate_dataset, load_dataset
from .dataset import save_dataset, summary_table
from .evaluation import LAYERS, baseline_fixed_adjacency, evaluate, export_embeddings
from .evaluation import inspect_adaptive_graph
from .simulator import GROUPS, SimulationError, SurrogateConstants, build_grid
from .training import Checkpoint, Hyperparams, SearchError, SearchSpace, TrainingError
from .training import random_search_hpo
from .training import train, write_table

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


def _dc_defaults(cls) -> dict:
    out = {}
    for f in fields(cls):
        v = getattr(cls(), f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def default_config() -> dict:
    hp = _dc_defaults(Hyperparams)
    hp.pop("seed")
    return {
        "seed": 0,
        "threads": 1,
        "grid": {"n_buses": 12, "n_regions": 3, "candidates_per_group": 5},
        "generation": _dc_defaults(GenerationConfig),
        "surrogate": _dc_defaults(SurrogateConstants),
        "hyperparams": hp,
        "train": {"groups": ["A", "B"]},
        "eval": {"group": "all", "baseline": "none"},
        "hpo": {"budget": 8, "epoch_cap": 5, "space": SearchSpace().choices},
        "inspect": {"group": "all", "layers": list(LAYERS)},
        "paths": {"data": None, "checkpoint": None},
    }


def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"{where}: unknown key")
        if isinstance(base[k], dict) and k not in ("counts", "space"):
            if not isinstance(v, dict):
                raise ConfigError(f"{where}: expected an object")
            out[k] = _merge(base[k], v, where + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_set(item: str) -> tuple[list, object]:
    if "=" not in item:
        raise ConfigError(f"--set expects key.path=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def resolve_config(args) -> dict:
    cfg = default_config()
    if args.config:
        try:
            user = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {args.config}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        cfg = _merge(cfg, user)
    for item in args.set or []:
        keys, value = _parse_set(item)
        patch: dict = {}
        node = patch
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
        cfg = _merge(cfg, patch)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.threads is not None:
        cfg["threads"] = args.threads
    if getattr(args, "group", None) is not None:
        cfg["eval"]["group"] = args.group
        cfg["inspect"]["group"] = args.group
    if getattr(args, "baseline", None) is not None:
        cfg["eval"]["baseline"] = args.baseline
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed: must be a non-negative integer")
    if not isinstance(cfg["threads"], int) or cfg["threads"] < 1:
        raise ConfigError("threads: must be a positive integer")
    return cfg


def _build(cls, section: dict, name: str, **extra):
    try:
        kwargs = {k: (tuple(v) if isinstance(v, list) and k != "counts" else v)
                  for k, v in section.items()}
        obj = cls(**kwargs, **extra)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc
    if hasattr(obj, "validate"):
        try:
            obj.validate()
        except ValueError as exc:
            raise ConfigError(f"{name}: {exc}") from exc
    return obj


def hyperparams_of(cfg: dict) -> Hyperparams:
    return _build(Hyperparams, cfg["hyperparams"], "hyperparams", seed=cfg["seed"])


def _write_resolved(cfg: dict, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(json.dumps(cfg, sort_keys=True, indent=1),
                                              encoding="utf-8")


def _data_dir(cfg: dict, out: Path) -> Path:
    return Path(cfg["paths"]["data"]) if cfg["paths"]["data"] else out / "data"


def _load_groups(cfg: dict, out: Path, groups) -> dict:
    root = _data_dir(cfg, out)
    if not root.exists():
        raise DatasetError(f"dataset directory {root} does not exist")
    found = {g: load_dataset(root / g) for g in groups if (root / g).exists()}
    if not found:
        raise DatasetError(f"no datasets for groups {list(groups)} under {root}")
    return found


def _checkpoint(cfg: dict, out: Path) -> Checkpoint:
    path = Path(cfg["paths"]["checkpoint"]) if cfg["paths"]["checkpoint"] else out / "train" / "best.ckpt"
    if not path.exists():
        raise DatasetError(f"checkpoint {path} does not exist")
    return Checkpoint.load(path)


def _eval_groups(choice: str) -> list:
    if choice == "all":
        return list(GROUPS)
    if choice not in GROUPS:
        raise ConfigError(f"eval.group: must be one of A, B, C, all; got {choice!r}")
    return [choice]


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg: dict, out: Path) -> int:
    _write_resolved(cfg, out / "gen-data")
    gen = _build(GenerationConfig, dict(cfg["generation"], threads=cfg["threads"]), "generation")
    const = _build(SurrogateConstants, cfg["surrogate"], "surrogate")
    try:
        topology = build_grid(seed=cfg["seed"], **cfg["grid"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"grid: {exc}") from exc
    sets = generate_dataset(topology, gen, cfg["seed"], const,
                            log=lambda m: print(m, file=sys.stderr))
    root = _data_dir(cfg, out)
    digests = {g: save_dataset(ds, root / g, const, gen) for g, ds in sets.items()}
    table = summary_table(sets)
    (root / "summary.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    for g, d in sorted(digests.items()):
        print(f"{g}: manifest sha256 {d}")
    return EXIT_OK


def cmd_train(cfg: dict, out: Path) -> int:
    run = out / "train"
    _write_resolved(cfg, run)
    hp = hyperparams_of(cfg)
    sets = _load_groups(cfg, out, cfg["train"]["groups"])
    parts = [ds.split("train") for ds in sets.values() if len(ds.split("train"))]
    if not parts:
        raise DatasetError("selected groups have no training split")
    result = train(concat(parts), hp, log_path=run / "train_log.csv",
                   on_epoch=lambda h: print(f"epoch {h['epoch']}: total {h['total']:.6f} "
                                            f"train_acc {h['train_acc']:.4f} val_acc {h['val_acc']:.4f}",
                                            file=sys.stderr))
    result.final.save(run / "final.ckpt")
    result.best.save(run / "best.ckpt")
    last = result.final.history[-1] if result.final.history else {}
    print(f"final train_acc {last.get('train_acc', float('nan')):.4f} "
          f"val_acc {last.get('val_acc', float('nan')):.4f}; "
          f"best val_acc {result.best.best_val_acc:.4f} at epoch {result.best.best_epoch}")
    return EXIT_OK


def _test_sets(cfg: dict, out: Path) -> dict:
    groups = _eval_groups(cfg["eval"]["group"])
    sets = _load_groups(cfg, out, groups)
    return {g: ds.split("test") for g, ds in sets.items()}


def cmd_eval(cfg: dict, out: Path) -> int:
    run = out / "eval"
    _write_resolved(cfg, run)
    baseline = cfg["eval"]["baseline"]
    if baseline not in ("none", "connectivity", "admittance"):
        raise ConfigError(f"eval.baseline: must be none, connectivity or admittance; got {baseline!r}")
    _eval_groups(cfg["eval"]["group"])
    ckpt = _checkpoint(cfg, out)
    tests = _test_sets(cfg, out)
    test_all = concat(list(tests.values()))
    if test_all.N != ckpt.N:
        raise DatasetError(f"checkpoint expects {ckpt.N} buses, dataset has {test_all.N}")
    report = evaluate(ckpt, test_all, "test", "ASTGL")
    report.save(run / "report")
    print(report.table())
    rows = {r["group"]: r["Acc"] for r in report.rows}
    known = [rows[g] for g in ("A", "B") if g in rows]
    if known and "C" in rows:
        gap = 100 * (float(np.mean(known)) - rows["C"])
        print(f"known-vs-unknown accuracy gap: {gap:.2f} percentage points")
    if baseline != "none":
        hp = ckpt.hyperparams
        train_sets = _load_groups(cfg, out, cfg["train"]["groups"])
        train_set = concat([d.split("train") for d in train_sets.values() if len(d.split("train"))])
        result, base_report = baseline_fixed_adjacency(train_set, {"test": test_all}, baseline, hp)
        result.best.save(run / f"baseline_{baseline}.ckpt")
        base_report.save(run / f"baseline_{baseline}")
        print(base_report.table())
    return EXIT_OK


def cmd_hpo(cfg: dict, out: Path) -> int:
    run = out / "hpo"
    _write_resolved(cfg, run)
    h = cfg["hpo"]
    if not isinstance(h["budget"], int) or h["budget"] < 1:
        raise ConfigError("hpo.budget: must be an integer >= 1")
    space = SearchSpace(h["space"])
    try:
        space.validate()
    except ValueError as exc:
        raise ConfigError(f"hpo.space: {exc}") from exc
    hp = hyperparams_of(cfg)
    sets = _load_groups(cfg, out, cfg["train"]["groups"])
    data = concat([d.split("train") for d in sets.values() if len(d.split("train"))])
    table, best = random_search_hpo(data, space, h["budget"], cfg["seed"], hp, h["epoch_cap"],
                                    log=lambda m: print(m, file=sys.stderr))
    write_table(table, run / "trials.csv")
    best_cfg = copy.deepcopy(cfg)
    best_cfg["hyperparams"] = {k: v for k, v in asdict(best).items() if k != "seed"}
    best_cfg["hyperparams"]["epochs"] = cfg["hyperparams"]["epochs"]
    (run / "best_config.json").write_text(json.dumps(best_cfg, sort_keys=True, indent=1),
                                          encoding="utf-8")
    for r in table:
        print(", ".join(f"{k}={v}" for k, v in r.items() if k != "error"))
    return EXIT_OK


def cmd_inspect(cfg: dict, out: Path) -> int:
    run = out / "inspect"
    _write_resolved(cfg, run)
    groups = _eval_groups(cfg["inspect"]["group"])
    ckpt = _checkpoint(cfg, out)
    sets = _load_groups(cfg, out, groups)
    test_all = concat([d.split("test") for d in sets.values()])
    layers = cfg["inspect"]["layers"]
    for layer in layers:
        if layer not in LAYERS:
            raise ConfigError(f"inspect.layers: unknown layer {layer!r}")
    if ckpt.hyperparams.adaptive:
        result = inspect_adaptive_graph(ckpt, test_all, run)
        s = result["summary"]
        print(f"fault-region mass sign test: {s['positive']} higher, {s['negative']} lower, "
              f"{s['ties']} ties over {s['pairs']} pairs; one-sided p = {s['p_value']:.3g}")
    for layer in layers:
        n = export_embeddings(ckpt, test_all, layer, run / f"embeddings_{layer}.csv")
        print(f"embeddings {layer}: {n} rows")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "hpo": cmd_hpo, "inspect": cmd_inspect}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="astgl", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="top-level seed (all random streams derive from it)")
        p.add_argument("--out", default="runs", help="output directory (default: runs)")
        p.add_argument("--threads", type=int, help="worker cap")
        p.add_argument("--set", action="append", metavar="KEY.PATH=VALUE",
                       help="override any config value, e.g. hyperparams.epochs=5")
        if name in ("eval", "inspect"):
            p.add_argument("--group", choices=["A", "B", "C", "all"])
        if name == "eval":
            p.add_argument("--baseline", choices=["none", "connectivity", "admittance"])
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    out = Path(args.out)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, SearchError, SimulationError, T.NonFiniteError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
