"""Parameter initialisation, Adam, the training loop, checkpoints and random-search HPO."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .dataset import Dataset, stratified_split
from .graph import AdaptiveGraphParams, AttentionParams
from .seeds import stream
from .stgcn import PROB_CLAMP, ModelConfig, ModelParams, StgcnParams, forward, losses
from .tensor import Tensor

GRAPH_MODES = ("adaptive", "connectivity", "admittance")
LOG_COLUMNS = ("epoch", "batch", "l_agl", "l_cm", "total", "train_acc", "val_acc", "val_loss")


class TrainingError(RuntimeError):
    """Training aborted; ``checkpoint`` holds the state before the failing step."""

    def __init__(self, message: str, checkpoint: "Checkpoint | None" = None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class Hyperparams:
    T_win: float = 0.5
    K_s: int = 3
    K_t: int = 3
    f_gcn: int = 16
    f_tcn: int = 16
    num_blocks: int = 2
    lam: float = 1e-4
    gamma: float = 1.0
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 20
    shared_W_a: bool = False
    seed: int = 0
    val_fraction: float = 0.1
    graph: str = "adaptive"  # or a fixed base-topology matrix: connectivity | admittance
    literal_softmax: bool = False
    # W_a = 0 gives an exactly uniform first graph but a dead gradient (relu'(0) = 0)
    W_a_init: float = 1e-3
    standardize: bool = True  # per-channel z-score fitted on the training part

    def __post_init__(self):
        for name in ("K_s", "K_t", "f_gcn", "f_tcn", "num_blocks", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.T_win <= 0 or self.learning_rate <= 0:
            raise ValueError("T_win and learning_rate must be positive")
        if self.lam < 0 or self.gamma < 0:
            raise ValueError("lam and gamma must be non-negative")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.graph not in GRAPH_MODES:
            raise ValueError(f"graph must be one of {GRAPH_MODES}, got {self.graph!r}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.W_a_init < 0:
            raise ValueError("W_a_init must be >= 0")

    @property
    def adaptive(self) -> bool:
        return self.graph == "adaptive"

    def model_config(self, N: int, L: int) -> ModelConfig:
        return ModelConfig(L=L, N=N, F_in=3, K_s=self.K_s, K_t=self.K_t, f_gcn=self.f_gcn,
                           f_tcn=self.f_tcn, num_blocks=self.num_blocks,
                           shared_W_a=self.shared_W_a, lam=self.lam, gamma=self.gamma,
                           literal_softmax=self.literal_softmax)

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown hyperparameter(s): {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- parameters


def glorot_bound(shape: tuple) -> float:
    """``sqrt(6 / (fan_in + fan_out))`` with the last axis as fan-out."""
    fan_out = shape[-1]
    fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else 1
    return math.sqrt(6.0 / (fan_in + fan_out))


def _uniform(rng: np.random.Generator, shape: tuple, name: str) -> Tensor:
    b = glorot_bound(shape)
    return Tensor(rng.uniform(-b, b, size=shape), requires_grad=True, name=name)


def _zeros(shape: tuple, name: str) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def init_params(hp: Hyperparams, N: int, L: int, seed: int | None = None) -> ModelParams:
    """Glorot-uniform filters and dense weights, zero biases, constant ``W_a``.

    With ``W_a_init = 0`` every adaptive score is 0 and the first adjacency is
    exactly uniform at ``1/(L N)``; the ReLU then passes no gradient to ``W_a``,
    so the default starts it at a small positive constant instead.
    """
    rng = stream(hp.seed if seed is None else seed, "init")
    cfg = hp.model_config(N, L)
    thetas, phis, res = [], [], []
    for i, c_in in enumerate(cfg.block_channels()):
        thetas.append(_uniform(rng, (cfg.K_s, c_in, cfg.f_gcn), f"theta{i}"))
        phis.append(_uniform(rng, (cfg.K_t, cfg.f_gcn, cfg.f_tcn), f"phi{i}"))
        res.append(_uniform(rng, (cfg.K_t, c_in, cfg.f_tcn), f"phi_res{i}"))
    stgcn = StgcnParams(thetas, phis, res, _uniform(rng, (cfg.feature_size, 2), "w_cm"),
                        _zeros((2,), "b_cm"))
    if not hp.adaptive:
        return ModelParams(stgcn)
    w_shape = (3, L) if hp.shared_W_a else (N, N, 3, L)
    W_a = Tensor(np.full(w_shape, hp.W_a_init), requires_grad=True, name="W_a")
    graph = AdaptiveGraphParams(W_a, shared=hp.shared_W_a, lam=hp.lam)
    attention = AttentionParams(_uniform(rng, (N, N), "w_sp"), _zeros((N,), "b_sp"))
    return ModelParams(stgcn, graph, attention)


def param_count(params: ModelParams) -> int:
    return int(sum(t.size for t in params.tensors()))


def params_to_arrays(params: ModelParams) -> dict:
    return {name: np.array(t.data) for name, t in params.named()}


def params_from_arrays(arrays: dict, hp: Hyperparams) -> ModelParams:
    def leaf(name):
        if name not in arrays:
            raise KeyError(f"checkpoint lacks parameter {name!r}")
        return Tensor(arrays[name], requires_grad=True, name=name)

    n_blocks = hp.num_blocks
    stgcn = StgcnParams([leaf(f"theta{i}") for i in range(n_blocks)],
                        [leaf(f"phi{i}") for i in range(n_blocks)],
                        [leaf(f"phi_res{i}") for i in range(n_blocks)],
                        leaf("w_cm"), leaf("b_cm"))
    if not hp.adaptive:
        return ModelParams(stgcn)
    return ModelParams(stgcn, AdaptiveGraphParams(leaf("W_a"), shared=hp.shared_W_a, lam=hp.lam),
                       AttentionParams(leaf("w_sp"), leaf("b_sp")))


# ---------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: ModelParams, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, applied in place to every named parameter."""
    named = params.named()
    for name, p in named:
        g = grads.get(name)
        if g is None or g.shape != p.shape:
            raise ValueError(f"gradient for {name} missing or mis-shaped")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter group {name}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in named:
        g = grads[name]
        m = beta1 * state.m.get(name, np.zeros_like(g)) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(g)) + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        new = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new.setflags(write=False)
        p.data = new


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"ASTGLCKP"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    hyperparams: Hyperparams
    N: int
    L: int
    params: dict
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    adam_t: int = 0
    epoch: int = 0  # completed epochs
    history: list = field(default_factory=list)  # per-epoch mean losses and accuracies
    best_val_acc: float = -1.0
    best_val_loss: float = math.inf
    best_epoch: int = -1
    best_params: dict = field(default_factory=dict)
    dataset_digest: str = ""
    norm: dict = field(default_factory=dict)  # "mean", "std" per channel when standardizing

    def prepare(self, X: np.ndarray) -> np.ndarray:
        """Apply the stored input standardisation (identity when there is none)."""
        if not self.norm:
            return X
        return (X - self.norm["mean"]) / self.norm["std"]

    def model(self, best: bool = False) -> ModelParams:
        arrays = self.best_params if best and self.best_params else self.params
        return params_from_arrays(arrays, self.hyperparams)

    def config(self) -> ModelConfig:
        return self.hyperparams.model_config(self.N, self.L)

    def to_bytes(self) -> bytes:
        blobs: list[tuple[str, np.ndarray]] = []
        for prefix, d in (("param", self.params), ("m", self.adam_m), ("v", self.adam_v),
                          ("best", self.best_params), ("norm", self.norm)):
            blobs += [(f"{prefix}/{k}", d[k]) for k in sorted(d)]
        index, offset = [], 0
        for key, arr in blobs:
            index.append({"key": key, "shape": list(arr.shape), "offset": offset})
            offset += arr.size * 8
        header = {
            "hyperparams": asdict(self.hyperparams),
            "N": self.N, "L": self.L, "adam_t": self.adam_t, "epoch": self.epoch,
            "history": self.history, "best_val_acc": self.best_val_acc,
            "best_val_loss": self.best_val_loss,
            "best_epoch": self.best_epoch, "dataset_digest": self.dataset_digest,
            "tensors": index,
        }
        text = json.dumps(header, sort_keys=True).encode("utf-8")
        buf = io.BytesIO()
        buf.write(CKPT_MAGIC)
        buf.write(struct.pack("<II", CKPT_VERSION, len(text)))
        buf.write(text)
        for _, arr in blobs:
            buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if raw[:8] != CKPT_MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        version, n = struct.unpack("<II", raw[8:16])
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(raw[16:16 + n].decode("utf-8"))
        base = 16 + n
        groups: dict[str, dict] = {"param": {}, "m": {}, "v": {}, "best": {}, "norm": {}}
        for e in header["tensors"]:
            size = int(np.prod(e["shape"])) if e["shape"] else 1
            start = base + e["offset"]
            arr = np.frombuffer(raw[start:start + size * 8], dtype="<f8").reshape(e["shape"])
            prefix, key = e["key"].split("/", 1)
            groups[prefix][key] = arr.astype(np.float64)
        return cls(Hyperparams.from_dict(header["hyperparams"]), header["N"], header["L"],
                   groups["param"], groups["m"], groups["v"], header["adam_t"], header["epoch"],
                   header["history"], header["best_val_acc"], header["best_val_loss"],
                   header["best_epoch"],
                   groups["best"], header["dataset_digest"], groups["norm"])

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


# ---------------------------------------------------------------- training


def fixed_adjacency_for(hp: Hyperparams, dataset: Dataset) -> np.ndarray | None:
    """Base-topology matrix for fixed-graph models (never any tripped state)."""
    if hp.adaptive:
        return None
    return dataset.topology.adjacency(weighted=hp.graph == "admittance")


def predict_proba(params: ModelParams, cfg: ModelConfig, X: np.ndarray,
                  fixed: np.ndarray | None = None, batch_size: int = 64) -> np.ndarray:
    out = []
    for i in range(0, len(X), batch_size):
        out.append(forward(X[i:i + batch_size], params, cfg, fixed).y_hat.numpy())
    return np.concatenate(out) if out else np.zeros((0, 2))


def predict_labels(proba: np.ndarray) -> np.ndarray:
    """Argmax with ties going to unstable (1)."""
    return (proba[:, 1] >= proba[:, 0]).astype(np.uint8)


def _accuracy(proba: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(predict_labels(proba) == y)) if len(y) else float("nan")


def _cross_entropy(proba: np.ndarray, y: np.ndarray) -> float:
    p = np.maximum(proba[np.arange(len(y)), y.astype(int)], PROB_CLAMP)
    return float(-np.mean(np.log(p)))


def train_val_split(dataset: Dataset, fraction: float) -> tuple[Dataset, Dataset]:
    """Stratified by label, spread over scenarios; independent of the seed."""
    if fraction == 0:
        return dataset, dataset.subset([])
    keys = [(c.scenario, c.group, c.seed) for c in dataset.cases]
    val = stratified_split(dataset.y, keys, fraction)
    return dataset.subset(np.flatnonzero(~val)), dataset.subset(np.flatnonzero(val))


@dataclass
class TrainResult:
    final: Checkpoint
    best: Checkpoint
    log: list  # rows keyed by LOG_COLUMNS


def fit_standardization(X: np.ndarray) -> dict:
    """Per-channel mean and std over cases, time and buses; zero std maps to 1."""
    mean = X.mean(axis=(0, 1, 2))
    std = X.std(axis=(0, 1, 2))
    return {"mean": mean, "std": np.where(std > 0, std, 1.0)}


def _snapshot(hp, N, L, params, adam, epoch, history, best, best_epoch, best_params, digest,
              norm):
    return Checkpoint(hp, N, L, params_to_arrays(params),
                      {k: np.array(v) for k, v in adam.m.items()},
                      {k: np.array(v) for k, v in adam.v.items()}, adam.t, epoch,
                      [dict(h) for h in history], best[0], best[1], best_epoch,
                      {k: np.array(v) for k, v in best_params.items()}, digest,
                      {k: np.array(v) for k, v in norm.items()})


def train(dataset: Dataset, hp: Hyperparams, resume: Checkpoint | None = None,
          log_path=None, stop_after: int | None = None, on_epoch=None) -> TrainResult:
    """Minibatch Adam on ``gamma * l_agl + l_cm`` with a seeded shuffle per epoch.

    ``dataset`` is the training split; ``val_fraction`` of it is held out for
    checkpoint selection. ``stop_after`` ends the run after that many epochs
    in total (used to exercise resumption). Shuffles come from a stream keyed
    by ``(seed, epoch)``, so a resumed run replays the same batch order.
    """
    if len(dataset) == 0:
        raise ValueError("training split is empty")
    data = dataset.window(hp.T_win)
    if len(np.unique(data.y)) < 2:
        raise ValueError("training split needs both stable and unstable cases")
    tr, va = train_val_split(data, hp.val_fraction)
    norm = fit_standardization(tr.X) if hp.standardize else {}
    scaler = Checkpoint(hp, data.N, data.L, {}, norm=norm)
    X_tr, X_va = scaler.prepare(tr.X), scaler.prepare(va.X)
    N, L = data.N, data.L
    cfg = hp.model_config(N, L)
    fixed = fixed_adjacency_for(hp, data)
    digest = dataset.digest()

    if resume is None:
        params = init_params(hp, N, L)
        adam = AdamState()
        start, history, best, best_epoch = 0, [], (-1.0, math.inf), -1
        best_params = params_to_arrays(params)
    else:
        if resume.hyperparams != hp or (resume.N, resume.L) != (N, L):
            raise ValueError("checkpoint hyperparameters or sizes differ from this run")
        if resume.dataset_digest != digest:
            raise ValueError("checkpoint was trained on a different dataset")
        params = resume.model()
        adam = AdamState({k: np.array(v) for k, v in resume.adam_m.items()},
                         {k: np.array(v) for k, v in resume.adam_v.items()}, resume.adam_t)
        start, history = resume.epoch, [dict(h) for h in resume.history]
        best, best_epoch = (resume.best_val_acc, resume.best_val_loss), resume.best_epoch
        best_params = {k: np.array(v) for k, v in resume.best_params.items()}

    rows: list[dict] = []
    log_fh = None
    if log_path is not None:
        log_fh = open(log_path, "a" if resume is not None else "w", newline="", encoding="utf-8")
        writer = csv.DictWriter(log_fh, fieldnames=LOG_COLUMNS)
        if resume is None:
            writer.writeheader()
    end = hp.epochs if stop_after is None else min(hp.epochs, stop_after)
    names = [n for n, _ in params.named()]
    try:
        for epoch in range(start, end):
            order = stream(hp.seed, "shuffle", epoch).permutation(len(tr))
            n_batches = max(1, math.ceil(len(tr) / hp.batch_size))
            sums = np.zeros(3)
            correct = 0
            for b in range(n_batches):
                idx = order[b * hp.batch_size:(b + 1) * hp.batch_size]
                Xb, yb = X_tr[idx], tr.y[idx]
                where = f"epoch {epoch} batch {b}"
                try:
                    l_agl, l_cm, total, trace = losses(Xb, yb, params, cfg, fixed)
                    if not np.isfinite(total.item()):
                        raise T.NonFiniteError("loss is not finite")
                    grads = T.backward(total, [t for _, t in params.named()])
                    adam_step(params, dict(zip(names, grads)), adam, hp.learning_rate)
                except (T.NonFiniteError, FloatingPointError) as exc:
                    ckpt = _snapshot(hp, N, L, params, adam, epoch, history, best,
                                     best_epoch, best_params, digest, norm)
                    raise TrainingError(f"numerical failure at {where}: {exc}", ckpt) from exc
                batch_correct = int(np.sum(predict_labels(trace.y_hat.numpy()) == yb))
                correct += batch_correct
                vals = (l_agl.item(), l_cm.item(), total.item())
                sums += np.array(vals) * len(idx)
                row = {"epoch": epoch, "batch": b, "l_agl": vals[0], "l_cm": vals[1],
                       "total": vals[2], "train_acc": batch_correct / len(idx), "val_acc": "",
                       "val_loss": ""}
                if b == n_batches - 1 and len(va):
                    proba = predict_proba(params, cfg, X_va, fixed)
                    row["val_acc"], row["val_loss"] = _accuracy(proba, va.y), _cross_entropy(proba, va.y)
                rows.append(row)
                if log_fh is not None:
                    writer.writerow({k: (repr(v) if isinstance(v, float) else v)
                                     for k, v in row.items()})
            if len(va):
                val_acc, val_loss = rows[-1]["val_acc"], rows[-1]["val_loss"]
            else:
                val_acc, val_loss = correct / len(tr), sums[1] / len(tr)
            history.append({"epoch": epoch, "l_agl": sums[0] / len(tr), "l_cm": sums[1] / len(tr),
                            "total": sums[2] / len(tr), "train_acc": correct / len(tr),
                            "val_acc": val_acc, "val_loss": val_loss})
            # accuracy first; the validation loss separates the frequent ties
            if (val_acc, -val_loss) > (best[0], -best[1]):
                best, best_epoch = (float(val_acc), float(val_loss)), epoch
                best_params = params_to_arrays(params)
            if on_epoch is not None:
                on_epoch(history[-1])
    finally:
        if log_fh is not None:
            log_fh.close()
    final = _snapshot(hp, N, L, params, adam, end if end > start else start, history,
                      best, best_epoch, best_params, digest, norm)
    best = replace(final, params={k: np.array(v) for k, v in best_params.items()})
    return TrainResult(final, best, rows)


# ---------------------------------------------------------------- random search


@dataclass
class SearchSpace:
    """Discrete choices per hyperparameter; anything absent keeps its base value."""

    choices: dict = field(default_factory=lambda: {
        "lam": [1e-5, 1e-4, 1e-3],
        "K_s": [1, 2, 3, 4, 5],
        "T_win": [round(0.1 * i, 1) for i in range(1, 11)],
    })

    def validate(self) -> None:
        known = {f.name for f in fields(Hyperparams)}
        if not self.choices:
            raise ValueError("search space is empty")
        for k, v in self.choices.items():
            if k not in known:
                raise ValueError(f"search space names unknown hyperparameter {k!r}")
            if not isinstance(v, (list, tuple)) or len(v) == 0:
                raise ValueError(f"search space for {k!r} has no values")

    def draw(self, rng: np.random.Generator) -> dict:
        return {k: v[int(rng.integers(len(v)))] for k, v in sorted(self.choices.items())}


class SearchError(RuntimeError):
    pass


def random_search_hpo(dataset: Dataset, space: SearchSpace, budget: int, seed: int,
                      base: Hyperparams = Hyperparams(), epoch_cap: int = 5, log=None):
    """Seeded independent draws, each trained for at most ``epoch_cap`` epochs.

    Returns ``(table, best_hyperparams)``; ``table`` rows are ranked by
    validation accuracy, then smaller parameter count, then trial index.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    space.validate()
    rows = []
    for trial in range(budget):
        draw = space.draw(stream(seed, "hpo", trial))
        row = {"trial": trial, **draw, "n_params": "", "val_acc": "", "status": "ok", "error": ""}
        try:
            hp = replace(base, **draw, epochs=min(base.epochs, epoch_cap))
            data = dataset.window(hp.T_win)
            res = train(data, hp)
            row["n_params"] = param_count(res.best.model())
            row["val_acc"] = res.best.best_val_acc
            row["_hp"] = hp
        except Exception as exc:  # a failed trial is recorded, not fatal
            row["status"] = "failed"
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
        if log:
            log(f"trial {trial}: {draw} -> {row['status']} {row['val_acc']}")
    ok = [r for r in rows if r["status"] == "ok"]
    if not ok:
        detail = "; ".join(f"trial {r['trial']}: {r['error']}" for r in rows)
        raise SearchError(f"all {budget} trials failed: {detail}")
    ok.sort(key=lambda r: (-r["val_acc"], r["n_params"], r["trial"]))
    failed = [r for r in rows if r["status"] != "ok"]
    ranked = ok + failed
    for rank, r in enumerate(ranked, 1):
        r["rank"] = rank if r["status"] == "ok" else ""
    best = ok[0]["_hp"]
    table = [{k: v for k, v in r.items() if k != "_hp"} for r in ranked]
    return table, best


def write_table(rows: list, path) -> None:
    if not rows:
        raise ValueError("no rows to write")
    cols = list(rows[0].keys())
    for r in rows[1:]:
        cols += [k for k in r if k not in cols]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
