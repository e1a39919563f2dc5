"""Confusion metrics, evaluation reports, fixed-graph baselines and learned-graph inspection."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from .dataset import Dataset, DatasetError
from .stgcn import forward
from .training import (
    Checkpoint,
    Hyperparams,
    TrainResult,
    fixed_adjacency_for,
    predict_labels,
    predict_proba,
    train,
)

LAYERS = ("L1", "L2", "L3", "L4")


@dataclass(frozen=True)
class ConfusionCounts:
    """``TP`` counts unstable cases recognised as unstable."""

    TP: int = 0
    TN: int = 0
    FP: int = 0
    FN: int = 0

    def __post_init__(self):
        for k in ("TP", "TN", "FP", "FN"):
            v = getattr(self, k)
            if int(v) != v or v < 0:
                raise ValueError(f"{k} must be a non-negative integer, got {v}")

    @property
    def total(self) -> int:
        return self.TP + self.TN + self.FP + self.FN

    @classmethod
    def from_labels(cls, y_true, y_pred) -> "ConfusionCounts":
        t = np.asarray(y_true).astype(int)
        p = np.asarray(y_pred).astype(int)
        if t.shape != p.shape:
            raise ValueError("label arrays differ in length")
        return cls(int(np.sum((t == 1) & (p == 1))), int(np.sum((t == 0) & (p == 0))),
                   int(np.sum((t == 0) & (p == 1))), int(np.sum((t == 1) & (p == 0))))

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.TP + other.TP, self.TN + other.TN,
                               self.FP + other.FP, self.FN + other.FN)


def metrics(c: ConfusionCounts) -> dict:
    """Acc, F1, Pre, Rec as fractions; undefined ratios are NaN, never 0."""
    if c.total == 0:
        raise ValueError("cannot score an empty evaluation set")
    acc = (c.TP + c.TN) / c.total
    pre = c.TP / (c.TP + c.FP) if c.TP + c.FP else math.nan
    rec = c.TP / (c.TP + c.FN) if c.TP + c.FN else math.nan
    if math.isnan(pre) or math.isnan(rec):
        f1 = math.nan
    elif pre + rec == 0:
        f1 = 0.0
    else:
        f1 = 2 * pre * rec / (pre + rec)
    return {"Acc": acc, "F1": f1, "Pre": pre, "Rec": rec}


@dataclass
class EvalReport:
    model: str
    dataset_digest: str
    rows: list = field(default_factory=list)  # one entry per (split, group)

    def add(self, split: str, group: str, counts: ConfusionCounts) -> None:
        self.rows.append({"split": split, "group": group, **asdict(counts), **metrics(counts)})

    def get(self, split: str, group: str) -> dict:
        for r in self.rows:
            if r["split"] == split and r["group"] == group:
                return r
        raise KeyError(f"no row for split {split!r}, group {group!r}")

    def to_json(self) -> str:
        def clean(v):
            return None if isinstance(v, float) and math.isnan(v) else v

        body = {"model": self.model, "dataset_digest": self.dataset_digest,
                "rows": [{k: clean(v) for k, v in r.items()} for r in self.rows]}
        return json.dumps(body, sort_keys=True, indent=1)

    def to_csv(self) -> str:
        cols = ["model", "split", "group", "TP", "TN", "FP", "FN", "Acc", "F1", "Pre", "Rec"]
        lines = [",".join(cols)]
        for r in self.rows:
            vals = [self.model] + [r[c] for c in cols[1:]]
            lines.append(",".join(f"{v:.17g}" if isinstance(v, float) else str(v) for v in vals))
        return "\n".join(lines) + "\n"

    def save(self, stem) -> None:
        stem = Path(stem)
        stem.with_suffix(".json").write_text(self.to_json(), encoding="utf-8")
        stem.with_suffix(".csv").write_text(self.to_csv(), encoding="utf-8")

    def table(self) -> str:
        def pct(v):
            return "   n/a" if math.isnan(v) else f"{100 * v:6.2f}"

        out = [f"{'model':<22}{'split':<7}{'group':<6}{'Acc':>7}{'F1':>7}{'Pre':>7}{'Rec':>7}"]
        for r in self.rows:
            out.append(f"{self.model:<22}{r['split']:<7}{r['group']:<6}{pct(r['Acc']):>7}"
                       f"{pct(r['F1']):>7}{pct(r['Pre']):>7}{pct(r['Rec']):>7}")
        return "\n".join(out)


def _check_sizes(ckpt: Checkpoint, dataset: Dataset) -> Dataset:
    if dataset.N != ckpt.N:
        raise DatasetError(f"checkpoint expects {ckpt.N} buses, dataset has {dataset.N}")
    data = dataset.window(ckpt.hyperparams.T_win)
    if data.L != ckpt.L:
        raise DatasetError(f"checkpoint expects L={ckpt.L}, dataset window gives {data.L}")
    return data


def predict(ckpt: Checkpoint, dataset: Dataset, best: bool = True) -> np.ndarray:
    data = _check_sizes(ckpt, dataset)
    fixed = fixed_adjacency_for(ckpt.hyperparams, data)
    X = ckpt.prepare(data.X)
    return predict_labels(predict_proba(ckpt.model(best), ckpt.config(), X, fixed))


def evaluate(ckpt: Checkpoint, dataset: Dataset, split: str = "test", model: str = "ASTGL",
             best: bool = True) -> EvalReport:
    """Counts and metrics over ``dataset`` overall and per scenario group."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    pred = predict(ckpt, dataset, best)
    report = EvalReport(model, dataset.digest())
    groups = dataset.groups()
    report.add(split, "all", ConfusionCounts.from_labels(dataset.y, pred))
    for g in sorted(set(groups)):
        m = groups == g
        report.add(split, str(g), ConfusionCounts.from_labels(dataset.y[m], pred[m]))
    return report


def baseline_fixed_adjacency(train_set: Dataset, eval_sets: dict, variant: str,
                             hp: Hyperparams) -> tuple[TrainResult, EvalReport]:
    """Same network and harness with the base-topology matrix in place of the learned graph."""
    if variant not in ("connectivity", "admittance"):
        raise ValueError(f"variant must be connectivity or admittance, got {variant!r}")
    if train_set.topology is None:
        raise ValueError("dataset has no topology")
    hp_b = replace(hp, graph=variant)
    result = train(train_set, hp_b)
    name = {"connectivity": "STGCN-connectivity", "admittance": "STGCN-admittance"}[variant]
    report = EvalReport(name, "")
    for split, ds in eval_sets.items():
        part = evaluate(result.best, ds, split, name)
        report.rows += part.rows
    return result, report


# ---------------------------------------------------------------- inspection


def fault_region_mass(A_sp: np.ndarray, fault_bus: int, region_buses) -> float:
    """Share of row ``fault_bus`` of ``A_sp`` falling on buses in ``region_buses``."""
    row = np.asarray(A_sp)[fault_bus]
    total = row.sum()
    if total <= 0:
        raise ValueError("row has no mass")
    return float(row[list(region_buses)].sum() / total)


def sign_test(diffs) -> dict:
    """One-sided exact sign test of ``median(diffs) > 0``; zero differences are dropped."""
    d = np.asarray(diffs, dtype=float)
    pos, neg = int(np.sum(d > 0)), int(np.sum(d < 0))
    n = pos + neg
    p = stats.binomtest(pos, n, 0.5, alternative="greater").pvalue if n else 1.0
    return {"n_pairs": int(d.size), "positive": pos, "negative": neg, "ties": int(d.size - n),
            "p_value": float(p)}


def graph_matrices(ckpt: Checkpoint, X: np.ndarray, best: bool = True):
    """``(A_adp, alpha_sp, A_sp)`` arrays, one matrix per case."""
    if not ckpt.hyperparams.adaptive:
        raise ValueError("fixed-graph checkpoints have no learned graph to inspect")
    params, cfg = ckpt.model(best), ckpt.config()
    X = ckpt.prepare(X)
    outs = [[], [], []]
    for i in range(0, len(X), 64):
        g = forward(X[i:i + 64], params, cfg).graph
        for k, t in enumerate((g.A_adp, g.alpha_sp, g.A_sp)):
            outs[k].append(t.numpy())
    return tuple(np.concatenate(o) for o in outs)


def write_matrix_csv(path, mats: np.ndarray, case_ids: list) -> None:
    """Rows ``case_id, i, m_i0 .. m_i(N-1)`` with 17 significant digits."""
    n = mats.shape[-1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["case_id", "row"] + [f"c{j}" for j in range(n)])
        for cid, m in zip(case_ids, mats):
            for i in range(n):
                w.writerow([cid, i] + [f"{v:.17g}" for v in m[i]])


def read_matrix_csv(path) -> tuple[list, np.ndarray]:
    ids, rows = [], {}
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        next(r)
        for rec in r:
            if rec[0] not in rows:
                ids.append(rec[0])
                rows[rec[0]] = []
            rows[rec[0]].append([float(v) for v in rec[2:]])
    return ids, np.array([rows[i] for i in ids])


def inspect_adaptive_graph(ckpt: Checkpoint, dataset: Dataset, out_dir=None,
                           best: bool = True) -> dict:
    """Per-case matrices plus the fault-region mass sign test.

    Pairs match every fault-in-region case with a fault-elsewhere case:
    for a case faulted at bus ``f`` in region ``R``, ``M`` is the share of
    ``A_sp[f]`` on ``R``; its partner is the next case, in seed order, whose
    fault lies outside ``R``, scored at the same row ``f`` over the same ``R``.
    """
    if any(c.fault_bus is None for c in dataset.cases):
        raise ValueError("cases lack fault metadata")
    data = _check_sizes(ckpt, dataset)
    A_adp, alpha, A_sp = graph_matrices(ckpt, data.X, best)
    regions = data.topology.regions
    ids = [c.id for c in data.cases]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, m in (("A_adp", A_adp), ("alpha_sp", alpha), ("A_sp", A_sp)):
            write_matrix_csv(out / f"{name}.csv", m, ids)

    order = sorted(range(len(data)), key=lambda i: (data.cases[i].group, data.cases[i].seed))
    used: set[int] = set()
    pairs = []
    for i in order:
        ci = data.cases[i]
        region = regions[ci.fault_region]
        for j in order:
            cj = data.cases[j]
            if j == i or j in used or cj.fault_region == ci.fault_region:
                continue
            used.add(j)
            m_in = fault_region_mass(A_sp[i], ci.fault_bus, region)
            m_out = fault_region_mass(A_sp[j], ci.fault_bus, region)
            pairs.append({"case_in": ci.id, "case_out": cj.id, "fault_bus": ci.fault_bus,
                          "region": ci.fault_region, "M_in": m_in, "M_out": m_out})
            break
    test = sign_test([p["M_in"] - p["M_out"] for p in pairs])
    masses = [fault_region_mass(A_sp[i], c.fault_bus, regions[c.fault_region])
              for i, c in enumerate(data.cases)]
    summary = {"pairs": len(pairs), **test, "mean_M": float(np.mean(masses)) if masses else math.nan}
    if out_dir is not None:
        with open(Path(out_dir) / "fault_region_pairs.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=["case_in", "case_out", "fault_bus", "region",
                                               "M_in", "M_out"])
            w.writeheader()
            for p in pairs:
                w.writerow({k: (f"{v:.17g}" if isinstance(v, float) else v) for k, v in p.items()})
        (Path(out_dir) / "sign_test.json").write_text(json.dumps(summary, sort_keys=True, indent=1),
                                                      encoding="utf-8")
    return {"summary": summary, "pairs": pairs, "A_adp": A_adp, "alpha_sp": alpha, "A_sp": A_sp}


def layer_features(ckpt: Checkpoint, X: np.ndarray, layer: str, best: bool = True,
                   fixed: np.ndarray | None = None) -> np.ndarray:
    """Flattened activations: L1 block-1 graph conv, L2 block-1 output,
    L3 last block output, L4 logits. ``fixed`` is the matrix of a fixed-graph model."""
    if layer not in LAYERS:
        raise ValueError(f"layer must be one of {LAYERS}, got {layer!r}")
    hp = ckpt.hyperparams
    if layer == "L3" and hp.num_blocks < 2:
        raise ValueError("layer L3 needs at least two blocks")
    if not hp.adaptive and fixed is None:
        raise ValueError("fixed-graph checkpoints need their adjacency matrix")
    params, cfg = ckpt.model(best), ckpt.config()
    X = ckpt.prepare(X)
    out = []
    for i in range(0, len(X), 64):
        tr = forward(X[i:i + 64], params, cfg, None if hp.adaptive else fixed)
        t = {"L1": tr.Z_s[0], "L2": tr.Z_st_prime[0], "L3": tr.Z_st_prime[-1], "L4": tr.logits}[layer]
        a = t.numpy()
        out.append(a.reshape(a.shape[0], -1))
    return np.concatenate(out)


def export_embeddings(ckpt: Checkpoint, dataset: Dataset, layer: str, path, best: bool = True) -> int:
    """CSV rows ``case_id, group, label, f0 ..``; returns the row count."""
    data = _check_sizes(ckpt, dataset)
    feats = layer_features(ckpt, data.X, layer, best, fixed_adjacency_for(ckpt.hyperparams, data))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["case_id", "group", "label"] + [f"f{j}" for j in range(feats.shape[1])])
        for c, y, f in zip(data.cases, data.y, feats):
            w.writerow([c.id, c.group, int(y)] + [f"{v:.17g}" for v in f])
    return len(feats)
