"""Labeled transient datasets: generation, stratified splitting and ASTGL-DS v1 I/O.

On-disk layout of one dataset directory::

    manifest.json    UTF-8 JSON, sorted keys (schema in ``docs/dataset_format.md``)
    topology.json    grid the cases were simulated on
    <split>.bin      little-endian: int32 cases, int32 L, int32 N*3,
                     float64 payload (cases, L, N, 3) row-major,
                     then one uint8 label per case
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .seeds import stream
from .simulator import (
    FAULT_CLASSES,
    FAULT_DURATIONS,
    GROUPS,
    MOTOR_FRACTIONS,
    FaultSpec,
    GridTopology,
    SurrogateConstants,
    TopologyScenario,
    enumerate_scenarios,
    integrate,
    make_batch,
)

FORMAT = "ASTGL-DS v1"
CHANNELS = ("P", "Q", "V")
SPLITS = ("train", "test")
_HEADER = np.dtype("<i4")
_PAYLOAD = np.dtype("<f8")


class DatasetError(RuntimeError):
    """Malformed, inconsistent or unreachable dataset."""


@dataclass
class GenerationConfig:
    """Per-group case targets are per label; ``test_only`` groups skip the train split."""

    counts: dict = field(default_factory=lambda: {"A": 479, "B": 481, "C": 96})
    test_only: tuple = ("C",)
    test_fraction: float = 0.2
    T_win: float = 0.5
    dt_sample: float = 0.01
    load_range: tuple = (0.8, 1.2)
    deep_dip_fraction: float = 0.1
    max_k: int = 2
    attempt_factor: float = 6.0
    chunk: int = 256
    threads: int = 1

    def validate(self) -> None:
        for g, n in self.counts.items():
            if g not in GROUPS:
                raise ValueError(f"unknown scenario group {g!r}")
            if int(n) < 1:
                raise ValueError(f"counts[{g}] must be >= 1, got {n}")
        if not 0 <= self.test_fraction < 1:
            raise ValueError("test_fraction must lie in [0, 1)")
        ratio = self.T_win / self.dt_sample
        if self.T_win <= 0 or abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("T_win must be a positive multiple of dt_sample")
        if not 0 <= self.deep_dip_fraction <= 1:
            raise ValueError("deep_dip_fraction must lie in [0, 1]")
        if self.attempt_factor < 1 or self.chunk < 1 or self.threads < 1:
            raise ValueError("attempt_factor, chunk and threads must be >= 1")

    @property
    def L(self) -> int:
        return int(round(self.T_win / self.dt_sample)) + 1


@dataclass
class CaseMeta:
    id: str
    group: str
    seed: int
    scenario: str
    tripped: list
    fault_bus: int
    fault_region: int
    fault_class: str
    depth: float
    duration: float
    load_level: float
    motor_fraction: float
    label: int
    split: str

    def fault(self) -> FaultSpec:
        return FaultSpec(self.fault_bus, self.depth, self.duration, self.load_level,
                         self.motor_fraction, self.fault_class)


@dataclass
class Dataset:
    """Windows ``X`` of shape ``(cases, L, N, 3)``, labels and per-case metadata."""

    X: np.ndarray
    y: np.ndarray
    cases: list
    topology: GridTopology
    T_win: float
    dt_sample: float
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.X.ndim != 4 or self.X.shape[-1] != 3:
            raise DatasetError(f"X must have shape (cases, L, N, 3), got {self.X.shape}")
        if len(self.y) != len(self.X) or len(self.cases) != len(self.X):
            raise DatasetError("X, y and case metadata disagree on the case count")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def L(self) -> int:
        return self.X.shape[1]

    @property
    def N(self) -> int:
        return self.X.shape[2]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.X[idx], self.y[idx], [self.cases[i] for i in idx], self.topology,
                       self.T_win, self.dt_sample, dict(self.info))

    def split(self, name: str) -> "Dataset":
        return self.subset([i for i, c in enumerate(self.cases) if c.split == name])

    def groups(self) -> np.ndarray:
        return np.array([c.group for c in self.cases])

    def window(self, T_win: float) -> "Dataset":
        """Leading ``T_win`` seconds of every window (a prefix, no resampling)."""
        ratio = T_win / self.dt_sample
        if abs(ratio - round(ratio)) > 1e-9 or T_win <= 0:
            raise DatasetError(f"T_win {T_win} is not a positive multiple of {self.dt_sample}")
        L = int(round(ratio)) + 1
        if L > self.L:
            raise DatasetError(f"T_win {T_win} s needs {L} samples, dataset has {self.L}")
        return Dataset(self.X[:, :L], self.y, self.cases, self.topology, T_win,
                       self.dt_sample, dict(self.info))

    def counts(self) -> dict:
        out = {}
        for s in SPLITS:
            ys = [c.label for c in self.cases if c.split == s]
            if ys:
                out[s] = {"stable": ys.count(0), "unstable": ys.count(1)}
        return out

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.X, dtype=_PAYLOAD).tobytes())
        h.update(np.asarray(self.y, dtype=np.uint8).tobytes())
        h.update(json.dumps([asdict(c) for c in self.cases], sort_keys=True).encode())
        h.update(self.topology.digest().encode())
        return h.hexdigest()


def concat(datasets: list) -> Dataset:
    if not datasets:
        raise DatasetError("nothing to concatenate")
    first = datasets[0]
    for d in datasets[1:]:
        if d.topology.digest() != first.topology.digest():
            raise DatasetError("datasets were generated on different grids")
        if d.X.shape[1:] != first.X.shape[1:]:
            raise DatasetError(f"window shapes differ: {d.X.shape[1:]} vs {first.X.shape[1:]}")
    return Dataset(np.concatenate([d.X for d in datasets]), np.concatenate([d.y for d in datasets]),
                   [c for d in datasets for c in d.cases], first.topology, first.T_win,
                   first.dt_sample, {})


# ---------------------------------------------------------------- generation

_GROUP_STREAM = {"A": 0, "B": 1, "C": 2}


def draw_case(topology: GridTopology, scenarios: list, group: str, index: int,
              seed: int, cfg: GenerationConfig) -> tuple[TopologyScenario, FaultSpec]:
    """Operating point for case ``index``; depends only on ``(seed, group, index)``."""
    rng = stream(seed, "generation", _GROUP_STREAM[group], index)
    scenario = scenarios[int(rng.integers(len(scenarios)))]
    fault_buses = [b.id for b in topology.buses if b.kind != "generator"]
    fault_class = "deep_dip" if rng.random() < cfg.deep_dip_fraction else "ac"
    lo, hi = FAULT_CLASSES[fault_class]
    fault = FaultSpec(
        fault_bus=int(fault_buses[int(rng.integers(len(fault_buses)))]),
        depth=float(rng.uniform(lo, hi)),
        duration=float(FAULT_DURATIONS[int(rng.integers(len(FAULT_DURATIONS)))]),
        load_level=float(rng.uniform(*cfg.load_range)),
        motor_fraction=float(MOTOR_FRACTIONS[int(rng.integers(len(MOTOR_FRACTIONS)))]),
        fault_class=fault_class,
    )
    return scenario, fault


def simulate_windows(topology: GridTopology, cases: list, const: SurrogateConstants,
                     T_win: float, dt_sample: float):
    """Batched simulation returning ``(X, labels, valid)``; X windows start at clearing."""
    stride = int(round(dt_sample / const.dt))
    if abs(stride * const.dt - dt_sample) > 1e-12 or stride < 1:
        raise ValueError("dt_sample must be a multiple of the integration step")
    batch = make_batch(topology, cases, const)
    t0 = float(batch.duration.min())
    L = int(round(T_win / dt_sample)) + 1
    res = integrate(batch, const, record_every=stride, record_from=t0,
                    record_to=float(batch.duration.max()) + T_win)
    stacked = np.stack([res.P, res.Q, res.V], axis=-1)  # (B, T, N, 3)
    offsets = np.rint((batch.duration - t0) / dt_sample).astype(int)
    X = np.stack([stacked[i, o:o + L] for i, o in enumerate(offsets)])
    labels = np.any(res.last_below == res.n_steps, axis=1).astype(np.uint8)
    return X, labels, res.valid


def _simulate_chunked(topology, cases, const, cfg):
    parts = [cases[i:i + max(1, math.ceil(len(cases) / cfg.threads))]
             for i in range(0, len(cases), max(1, math.ceil(len(cases) / cfg.threads)))]
    if cfg.threads == 1 or len(parts) == 1:
        results = [simulate_windows(topology, p, const, cfg.T_win, cfg.dt_sample) for p in parts]
    else:
        with ThreadPoolExecutor(cfg.threads) as pool:
            # map keeps submission order, so the merge is deterministic
            results = list(pool.map(lambda p: simulate_windows(topology, p, const, cfg.T_win,
                                                               cfg.dt_sample), parts))
    return (np.concatenate([r[0] for r in results]), np.concatenate([r[1] for r in results]),
            np.concatenate([r[2] for r in results]))


def stratified_split(labels, keys, test_fraction: float) -> np.ndarray:
    """Boolean test mask: per label, cases sorted by key, evenly spaced test picks.

    Sorting by ``(scenario, seed)`` spreads the test picks across scenarios.
    """
    labels = np.asarray(labels)
    mask = np.zeros(len(labels), dtype=bool)
    for lab in np.unique(labels):
        idx = [i for i in np.flatnonzero(labels == lab)]
        idx.sort(key=lambda i: keys[i])
        n_test = int(round(test_fraction * len(idx)))
        if n_test == 0:
            continue
        picks = np.floor((np.arange(n_test) + 0.5) * len(idx) / n_test).astype(int)
        mask[[idx[p] for p in picks]] = True
    return mask


def generate_group(topology: GridTopology, group: str, per_label: int, seed: int,
                   cfg: GenerationConfig, const: SurrogateConstants = SurrogateConstants(),
                   log=None) -> Dataset:
    """Simulate seeded draws until both labels reach ``per_label`` accepted cases."""
    scenarios = enumerate_scenarios(topology, group, cfg.max_k)
    budget = int(math.ceil(cfg.attempt_factor * 2 * per_label))
    kept: dict[int, list] = {0: [], 1: []}
    invalid = 0
    index = 0
    while min(len(v) for v in kept.values()) < per_label and index < budget:
        n = min(cfg.chunk, budget - index)
        draws = [draw_case(topology, scenarios, group, index + j, seed, cfg) for j in range(n)]
        X, labels, valid = _simulate_chunked(topology, draws, const, cfg)
        for j in range(n):
            if not valid[j]:
                invalid += 1
                continue
            lab = int(labels[j])
            if len(kept[lab]) < per_label:
                kept[lab].append((index + j, draws[j], X[j]))
        index += n
        if log:
            log(f"group {group}: {index} simulated, stable {len(kept[0])}, unstable {len(kept[1])}")
    starved = [name for lab, name in ((0, "stable"), (1, "unstable")) if len(kept[lab]) < per_label]
    if starved:
        raise DatasetError(
            f"group {group}: label(s) {', '.join(starved)} starved after {index} attempts "
            f"(stable {len(kept[0])}, unstable {len(kept[1])}, target {per_label})"
        )
    rows = sorted(kept[0] + kept[1], key=lambda r: r[0])
    label_of = {r[0]: lab for lab in (0, 1) for r in kept[lab]}
    labels = np.array([label_of[r[0]] for r in rows], dtype=np.uint8)
    if group in cfg.test_only:
        is_test = np.ones(len(rows), dtype=bool)
    else:
        keys = [(r[1][0].name, r[0]) for r in rows]
        is_test = stratified_split(labels, keys, cfg.test_fraction)
    cases = []
    for (idx, (sc, fs), _), lab, test in zip(rows, labels, is_test):
        cases.append(CaseMeta(
            id=f"{group}-{idx:06d}", group=group, seed=idx, scenario=sc.name,
            tripped=list(sc.tripped), fault_bus=fs.fault_bus,
            fault_region=topology.region_of(fs.fault_bus), fault_class=fs.fault_class,
            depth=fs.depth, duration=fs.duration, load_level=fs.load_level,
            motor_fraction=fs.motor_fraction, label=int(lab), split="test" if test else "train",
        ))
    info = {"attempts": index, "invalid": invalid, "seed": seed, "group": group}
    ds = Dataset(np.stack([r[2] for r in rows]), labels, cases, topology, cfg.T_win,
                 cfg.dt_sample, info)
    # canonical order is the on-disk order: split, then case seed
    order = sorted(range(len(cases)), key=lambda i: (SPLITS.index(cases[i].split), cases[i].seed))
    return ds.subset(order)


def generate_dataset(topology: GridTopology, cfg: GenerationConfig, seed: int,
                     const: SurrogateConstants = SurrogateConstants(), log=None) -> dict:
    """One balanced dataset per configured group, keyed by group name."""
    cfg.validate()
    return {g: generate_group(topology, g, int(n), seed, cfg, const, log)
            for g, n in sorted(cfg.counts.items())}


# ---------------------------------------------------------------- I/O


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_split(path: Path, X: np.ndarray, y: np.ndarray) -> None:
    n, L, N, F = X.shape
    with open(path, "wb") as fh:
        fh.write(np.array([n, L, N * F], dtype=_HEADER).tobytes())
        fh.write(np.ascontiguousarray(X, dtype=_PAYLOAD).tobytes())
        fh.write(np.asarray(y, dtype=np.uint8).tobytes())


def read_split(path: Path, N: int) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise DatasetError(f"{path}: truncated header")
    n, L, width = (int(v) for v in np.frombuffer(raw[:12], dtype=_HEADER))
    if width != N * len(CHANNELS):
        raise DatasetError(f"{path}: row width {width} does not match {N} buses x 3 channels")
    expected = 12 + n * L * width * 8 + n
    if len(raw) != expected:
        raise DatasetError(f"{path}: {len(raw)} bytes, expected {expected}")
    X = np.frombuffer(raw[12:12 + n * L * width * 8], dtype=_PAYLOAD).reshape(n, L, N, 3)
    y = np.frombuffer(raw[12 + n * L * width * 8:], dtype=np.uint8)
    if np.any(y > 1):
        raise DatasetError(f"{path}: labels must be 0 or 1")
    return X.astype(np.float64), y.astype(np.uint8)


def manifest_dict(ds: Dataset, const: SurrogateConstants, cfg: GenerationConfig | None,
                  files: dict) -> dict:
    composition: dict[str, int] = {}
    for c in ds.cases:
        composition[c.scenario] = composition.get(c.scenario, 0) + 1
    return {
        "format": FORMAT,
        "channels": list(CHANNELS),
        "L": ds.L,
        "N": ds.N,
        "T_win": ds.T_win,
        "dt_sample": ds.dt_sample,
        "counts": ds.counts(),
        "composition": composition,
        "grid_digest": ds.topology.digest(),
        "surrogate": asdict(const),
        # worker count never changes the data, so it stays out of the manifest
        "generation": None if cfg is None else {
            k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg).items()
            if k != "threads"
        },
        "info": ds.info,
        "files": files,
        "cases": [asdict(c) for c in ds.cases],
    }


def save_dataset(ds: Dataset, directory, const: SurrogateConstants = SurrogateConstants(),
                 cfg: GenerationConfig | None = None) -> str:
    """Write an ASTGL-DS v1 directory; returns the manifest digest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "topology.json").write_text(ds.topology.to_json(), encoding="utf-8")
    files = {}
    for s in SPLITS:
        part = ds.split(s)
        if len(part) == 0:
            continue
        path = d / f"{s}.bin"
        write_split(path, part.X, part.y)
        files[s] = {"file": path.name, "sha256": _sha256(path), "cases": len(part)}
    text = json.dumps(manifest_dict(ds, const, cfg, files), sort_keys=True, indent=1)
    (d / "manifest.json").write_text(text, encoding="utf-8")
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def manifest_digest(directory) -> str:
    return _sha256(Path(directory) / "manifest.json")


def load_dataset(directory) -> Dataset:
    """Read and cross-check an ASTGL-DS v1 directory."""
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
        topo_text = (d / "topology.json").read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise DatasetError(f"missing dataset file: {exc.filename}") from exc
    if manifest.get("format") != FORMAT:
        raise DatasetError(f"unsupported format {manifest.get('format')!r}")
    topology = GridTopology.from_json(topo_text)
    if topology.digest() != manifest["grid_digest"]:
        raise DatasetError("topology file does not match the manifest grid digest")
    metas = [CaseMeta(**c) for c in manifest["cases"]]
    Xs, ys, cases = [], [], []
    for s in SPLITS:
        if s not in manifest["files"]:
            continue
        entry = manifest["files"][s]
        path = d / entry["file"]
        if _sha256(path) != entry["sha256"]:
            raise DatasetError(f"{path.name} does not match its manifest checksum")
        X, y = read_split(path, manifest["N"])
        split_cases = [c for c in metas if c.split == s]
        if len(split_cases) != len(y) or any(c.label != int(v) for c, v in zip(split_cases, y)):
            raise DatasetError(f"{path.name}: labels disagree with the manifest case list")
        Xs.append(X)
        ys.append(y)
        cases += split_cases
    if not Xs:
        raise DatasetError("dataset has no splits")
    ds = Dataset(np.concatenate(Xs), np.concatenate(ys), cases, topology, manifest["T_win"],
                 manifest["dt_sample"], manifest.get("info", {}))
    if ds.counts() != manifest["counts"]:
        raise DatasetError("stored cases do not match the manifest counts")
    return ds


def export_csv(ds: Dataset, path) -> None:
    """Long-format mirror of the binary files: one row per case and time sample."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        header = ["case_id", "split", "group", "label", "k"]
        header += [f"{ch}_{i}" for i in range(ds.N) for ch in CHANNELS]
        w.writerow(header)
        for c, x in zip(ds.cases, ds.X):
            for k in range(ds.L):
                w.writerow([c.id, c.split, c.group, c.label, k]
                           + [f"{v:.17g}" for v in x[k].reshape(-1)])


def summary_table(datasets: dict) -> str:
    """Plain-text counts table: dataset, split, stable, unstable, total."""
    lines = [f"{'dataset':<8}{'split':<7}{'stable':>8}{'unstable':>10}{'total':>8}"]
    for g, ds in sorted(datasets.items()):
        for s, c in ds.counts().items():
            lines.append(f"{g:<8}{s:<7}{c['stable']:>8}{c['unstable']:>10}"
                         f"{c['stable'] + c['unstable']:>8}")
    return "\n".join(lines)
