"""Motor-slip surrogate for post-fault voltage trajectories.

The grid is reduced to a reactive-power voltage sensitivity ``Z = (B + G + eps I)^-1``
where ``B`` is the susceptance Laplacian of in-service lines and ``G`` grounds
generator buses through their internal reactance. Every load bus carries a
lumped induction motor with one slip state::

    ds/dt = (T_m(s) - T_e(V, s)) / (2 H)
    T_e   = k V^2 s / (s^2 + s_crit^2)
    T_m   = T_0                            (constant mechanical torque)
    V     = 1 - Z q(s) - fault depression
    q_i   = m c_q s_i * load_level

A deep enough or long enough voltage dip pushes slips past the unstable
equilibrium; the motor then stalls, draws reactive power and holds voltages
below the 0.8 pu recovery threshold. A stalled rotor locks at ``s = 1``.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import asdict, dataclass, replace

import networkx as nx
import numpy as np
from scipy import optimize

from .seeds import stream

MOTOR_FRACTIONS = (0.6, 0.75, 0.9, 0.95)
FAULT_DURATIONS = (0.1, 0.2, 0.3)
GROUPS = ("A", "B", "C")
# depth range per fault class; deep dips model faults without an AC analogue
FAULT_CLASSES = {"ac": (0.05, 0.3), "deep_dip": (0.0, 0.05)}


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str  # generator | tie | load
    region: int
    motor_fraction: float = 0.0


@dataclass(frozen=True)
class Line:
    id: int
    a: int
    b: int
    x: float
    status: str = "in"


@dataclass
class GridTopology:
    buses: list[Bus]
    lines: list[Line]
    group_odd: list[int]
    group_even: list[int]
    seed: int = 0

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def load_buses(self) -> list[int]:
        return [b.id for b in self.buses if b.kind == "load"]

    @property
    def generator_buses(self) -> list[int]:
        return [b.id for b in self.buses if b.kind == "generator"]

    @property
    def regions(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for b in self.buses:
            out.setdefault(b.region, []).append(b.id)
        return out

    def region_of(self, bus: int) -> int:
        return self.buses[bus].region

    def in_service(self, tripped=()) -> list[Line]:
        tripped = set(tripped)
        return [ln for ln in self.lines if ln.status == "in" and ln.id not in tripped]

    def adjacency(self, weighted: bool, tripped=()) -> np.ndarray:
        """0/1 connectivity or 1/x admittance weights, zero diagonal."""
        a = np.zeros((self.n_buses, self.n_buses))
        for ln in self.in_service(tripped):
            w = 1.0 / ln.x if weighted else 1.0
            a[ln.a, ln.b] += w
            a[ln.b, ln.a] += w
        return a

    def to_dict(self) -> dict:
        return {
            "format": "ASTGL-topology v1",
            "seed": self.seed,
            "buses": [asdict(b) for b in self.buses],
            "lines": [asdict(ln) for ln in self.lines],
            "group_odd": list(self.group_odd),
            "group_even": list(self.group_even),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "GridTopology":
        return cls(
            buses=[Bus(**b) for b in d["buses"]],
            lines=[Line(**ln) for ln in d["lines"]],
            group_odd=list(d["group_odd"]),
            group_even=list(d["group_even"]),
            seed=d.get("seed", 0),
        )

    @classmethod
    def from_json(cls, text: str) -> "GridTopology":
        return cls.from_dict(json.loads(text))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()


def _graph(n: int, lines) -> nx.MultiGraph:
    g = nx.MultiGraph()
    g.add_nodes_from(range(n))
    g.add_edges_from((ln.a, ln.b, ln.id) for ln in lines)
    return g


def is_connected(n: int, lines) -> bool:
    return nx.is_connected(_graph(n, lines))


def non_bridge_lines(n: int, lines) -> list[int]:
    g = _graph(n, lines)
    simple = nx.Graph(g)
    bridge_pairs = {frozenset(e) for e in nx.bridges(simple)}
    out = []
    for ln in lines:
        pair = frozenset((ln.a, ln.b))
        # a doubled line is never a bridge
        if pair not in bridge_pairs or g.number_of_edges(ln.a, ln.b) > 1:
            out.append(ln.id)
    return out


def build_grid(n_buses: int = 12, seed: int = 0, n_regions: int = 3,
               candidates_per_group: int = 5) -> GridTopology:
    """Meshed test grid: one generator per region, loads in regional rings.

    Regions are rings (generator plus loads) with a chord per four buses;
    neighbouring regions are joined through tie buses when there is room
    (``n_buses >= 10``), otherwise directly, and the last region closes the
    loop back to the first. Trip candidates are non-bridge lines whose every
    same-group pair keeps the grid connected.
    """
    if n_buses < 2 * n_regions:
        raise ValueError(f"need at least {2 * n_regions} buses, got {n_buses}")
    rng = stream(seed, "grid")
    n_ties = n_regions - 1 if n_buses >= 10 else 0
    n_loads = n_buses - n_regions - n_ties
    per_region = [n_loads // n_regions + (1 if r < n_loads % n_regions else 0)
                  for r in range(n_regions)]

    buses: list[Bus] = []
    members: list[list[int]] = []
    for r in range(n_regions):
        ids = [len(buses)]
        buses.append(Bus(len(buses), "generator", r))
        for _ in range(per_region[r]):
            m = float(rng.choice(MOTOR_FRACTIONS))
            ids.append(len(buses))
            buses.append(Bus(len(buses), "load", r, m))
        members.append(ids)

    edges: list[tuple[int, int, float]] = []

    def intra():
        return float(np.round(rng.uniform(0.08, 0.24), 4))

    def inter():
        return float(np.round(rng.uniform(0.20, 0.40), 4))

    for ids in members:
        k = len(ids)
        if k == 2:
            edges.append((ids[0], ids[1], intra()))
            continue
        for i in range(k):
            edges.append((ids[i], ids[(i + 1) % k], intra()))
        for c in range(k // 4):
            a = 1 + c
            b = a + k // 2
            edges.append((ids[a], ids[b % k], intra()))

    def border(r: int, last: bool) -> int:
        ids = members[r]
        return ids[-1] if last else ids[len(ids) // 2]

    for r in range(n_regions):
        nxt = (r + 1) % n_regions
        if r < n_ties:
            tie = len(buses)
            buses.append(Bus(tie, "tie", r))
            edges.append((border(r, True), tie, inter()))
            edges.append((tie, border(nxt, False), inter()))
        else:
            edges.append((border(r, True), border(nxt, False), inter()))

    lines = [Line(i, a, b, x) for i, (a, b, x) in enumerate(edges)]
    n = len(buses)
    if not is_connected(n, lines):
        raise ValueError("generated grid is not connected")
    candidates = non_bridge_lines(n, lines)
    if not candidates:
        raise ValueError("grid is a tree; no line can be tripped")

    order = [candidates[i] for i in rng.permutation(len(candidates))]
    by_id = {ln.id: ln for ln in lines}
    groups: list[list[int]] = [[], []]

    def compatible(group: list[int], lid: int) -> bool:
        for other in group:
            rest = [ln for ln in lines if ln.id not in (other, lid)]
            if not is_connected(n, rest):
                return False
        return True

    for lid in order:
        if all(len(g) >= candidates_per_group for g in groups):
            break
        # spread each group over regions before doubling up
        pref = sorted(range(2), key=lambda gi: len(groups[gi]))
        for gi in pref:
            g = groups[gi]
            if len(g) >= candidates_per_group:
                continue
            regions_used = {buses[by_id[o].a].region for o in g}
            spread = len(regions_used) < n_regions and buses[by_id[lid].a].region in regions_used
            if spread and len(order) > 2 * candidates_per_group:
                continue
            if compatible(g, lid):
                g.append(lid)
                break
    # second pass without the spreading preference
    for lid in order:
        for gi in range(2):
            g = groups[gi]
            if lid in groups[0] or lid in groups[1] or len(g) >= candidates_per_group:
                continue
            if compatible(g, lid):
                g.append(lid)
    if not groups[0] or not groups[1]:
        raise ValueError("not enough trippable lines for two candidate groups")
    return GridTopology(buses, lines, sorted(groups[0]), sorted(groups[1]), seed)


# ---------------------------------------------------------------- scenarios


@dataclass(frozen=True)
class TopologyScenario:
    group: str
    tripped: tuple[int, ...] = ()

    @property
    def name(self) -> str:
        if not self.tripped:
            return f"{self.group}:base"
        return f"{self.group}:" + "+".join(f"L{t}" for t in self.tripped)


def enumerate_scenarios(topology: GridTopology, group: str, max_k: int = 2) -> list[TopologyScenario]:
    """Base case for A; all single and connectivity-preserving double trips for B/C."""
    if group not in GROUPS:
        raise ValueError(f"unknown scenario group {group!r}")
    if group == "A":
        return [TopologyScenario("A")]
    pool = topology.group_odd if group == "B" else topology.group_even
    out = []
    for k in range(1, max_k + 1):
        for combo in itertools.combinations(pool, k):
            if is_connected(topology.n_buses, topology.in_service(combo)):
                out.append(TopologyScenario(group, tuple(combo)))
    return out


# ---------------------------------------------------------------- dynamics


@dataclass(frozen=True)
class SurrogateConstants:
    H: float = 0.6
    s_crit: float = 0.15
    k: float = 0.40
    T0: float = 1.0
    c_q: float = 1.2
    x_gen: float = 0.1
    eps: float = 1e-6
    dt: float = 1e-3
    horizon: float = 10.0
    v_threshold: float = 0.8
    v_max: float = 1.2
    s_blowup: float = 1.5


@dataclass(frozen=True)
class FaultSpec:
    fault_bus: int
    depth: float  # faulted-bus voltage during the fault, pu
    duration: float  # s
    load_level: float = 1.0
    motor_fraction: float | None = None  # None: per-bus values from the topology
    fault_class: str = "ac"  # "deep_dip" stands in for converter blocking faults

    def validate(self, topology: GridTopology | None = None, strict: bool = True) -> None:
        if self.fault_class not in FAULT_CLASSES:
            raise ValueError(f"unknown fault class {self.fault_class!r}")
        if strict:
            lo, hi = FAULT_CLASSES[self.fault_class]
            if not lo <= self.depth <= hi and self.depth != 1.0:
                raise ValueError(f"{self.fault_class} fault depth {self.depth} outside [{lo}, {hi}]")
            if self.duration not in FAULT_DURATIONS:
                raise ValueError(f"fault duration {self.duration} not in {FAULT_DURATIONS}")
            if not 0.8 <= self.load_level <= 1.2:
                raise ValueError(f"load level {self.load_level} outside [0.8, 1.2]")
            if self.motor_fraction is not None and self.motor_fraction not in MOTOR_FRACTIONS:
                raise ValueError(f"motor fraction {self.motor_fraction} not in {MOTOR_FRACTIONS}")
        if topology is not None and not 0 <= self.fault_bus < topology.n_buses:
            raise ValueError(f"fault bus {self.fault_bus} does not exist")


class SimulationError(RuntimeError):
    """Operating point infeasible or integration blew up."""


def sensitivity(topology: GridTopology, tripped=(), const: SurrogateConstants = SurrogateConstants()) -> np.ndarray:
    lines = topology.in_service(tripped)
    if not is_connected(topology.n_buses, lines):
        raise ValueError(f"tripping {tuple(tripped)} disconnects the grid")
    b = np.zeros((topology.n_buses, topology.n_buses))
    for ln in lines:
        y = 1.0 / ln.x
        b[ln.a, ln.a] += y
        b[ln.b, ln.b] += y
        b[ln.a, ln.b] -= y
        b[ln.b, ln.a] -= y
    for g in topology.generator_buses:
        b[g, g] += 1.0 / const.x_gen
    b += const.eps * np.eye(topology.n_buses)
    return np.linalg.inv(b)


@dataclass
class CaseBatch:
    """Per-case arrays for vectorised integration (leading axis = case)."""

    Z: np.ndarray  # (B, N, N)
    fault_bus: np.ndarray  # (B,)
    depth: np.ndarray
    duration: np.ndarray
    load_level: np.ndarray
    motor: np.ndarray  # (B, n_load)
    load_idx: np.ndarray
    gen_idx: np.ndarray


class _Dynamics:
    def __init__(self, batch: CaseBatch, const: SurrogateConstants):
        self.b = batch
        self.c = const
        n = batch.Z.shape[1]
        rows = np.arange(batch.Z.shape[0])
        zf = batch.Z[rows, :, batch.fault_bus]  # column of the faulted bus
        self.fault_shape = zf / batch.Z[rows, batch.fault_bus, batch.fault_bus][:, None]
        self.Z_load = batch.Z[:, :, batch.load_idx]  # (B, N, n_load)
        self.q_gain = batch.motor * const.c_q * batch.load_level[:, None]
        self.rows = rows
        self.n = n

    def voltages(self, s: np.ndarray, fault_on: np.ndarray) -> np.ndarray:
        q = s * self.q_gain
        v = 1.0 - np.einsum("bij,bj->bi", self.Z_load, q)
        if np.any(fault_on):
            vf = v[self.rows, self.b.fault_bus]
            dep = np.maximum(vf - self.b.depth, 0.0) * fault_on
            v = v - dep[:, None] * self.fault_shape
        return np.clip(v, 0.0, self.c.v_max)

    def torque_e(self, v_load, s):
        c = self.c
        return c.k * v_load * v_load * s / (s * s + c.s_crit ** 2)

    def rhs(self, s, fault_on):
        v = self.voltages(s, fault_on)
        vl = v[:, self.b.load_idx]
        ds = (self.c.T0 - self.torque_e(vl, s)) / (2.0 * self.c.H)
        # locked rotor: slip cannot grow past standstill
        return np.where((s >= 1.0) & (ds > 0.0), 0.0, ds)

    def channels(self, s, fault_on):
        """P, Q, V per bus, each (B, N)."""
        v = self.voltages(s, fault_on)
        vl = v[:, self.b.load_idx]
        te = self.torque_e(vl, s)
        ll = self.b.load_level[:, None]
        p_load = self.b.motor * te * (1.0 - s) * ll
        q_load = s * self.q_gain
        P = np.zeros_like(v)
        Q = np.zeros_like(v)
        P[:, self.b.load_idx] = p_load
        Q[:, self.b.load_idx] = q_load
        n_gen = max(len(self.b.gen_idx), 1)
        P[:, self.b.gen_idx] = (p_load.sum(axis=1) / n_gen)[:, None]
        Q[:, self.b.gen_idx] = (q_load.sum(axis=1) / n_gen)[:, None]
        return P, Q, v


def equilibrium(dyn: _Dynamics) -> tuple[np.ndarray, np.ndarray]:
    """Pre-fault slips per case; returns ``(s0, feasible)``."""
    c = dyn.c
    nb, nl = dyn.b.motor.shape
    no_fault = np.zeros(nb)
    s = np.full((nb, nl), 0.02)
    grid = np.linspace(1e-6, c.s_crit, 400)
    feasible = np.ones(nb, dtype=bool)
    active = np.ones(nb, dtype=bool)
    for _ in range(60):
        v = dyn.voltages(s, no_fault)[:, dyn.b.load_idx]
        # stable root of T_m = T_e on the low-slip branch, per motor
        f = c.T0 - c.k * v[..., None] ** 2 * grid / (grid ** 2 + c.s_crit ** 2)
        crossed = f <= 0
        ok = crossed.any(axis=-1)
        feasible &= ok.all(axis=1)
        idx = np.where(ok, crossed.argmax(axis=-1), len(grid) - 1)
        lo = grid[np.maximum(idx - 1, 0)]
        hi = grid[idx]
        flo = np.take_along_axis(f, np.maximum(idx - 1, 0)[..., None], -1)[..., 0]
        fhi = np.take_along_axis(f, idx[..., None], -1)[..., 0]
        s_new = lo + (hi - lo) * flo / np.where(flo - fhi == 0, 1.0, flo - fhi)
        # per-case stopping keeps each result independent of the batch it ran in
        moving = np.max(np.abs(s_new - s), axis=1) >= 1e-13
        s = np.where(active[:, None], s_new, s)
        active &= moving
        if not active.any():
            break
    # polish so ds/dt vanishes to rounding
    for i in np.flatnonzero(feasible):
        sub = _subset(dyn, i)
        fun = lambda x: sub.rhs(x[None], np.zeros(1))[0]
        sol = optimize.root(fun, s[i], tol=1e-14)
        if np.max(np.abs(fun(sol.x))) < 1e-12 and np.all(sol.x > 0) and np.all(sol.x < c.s_crit):
            s[i] = sol.x
        else:
            feasible[i] = False
    return s, feasible


def _subset(dyn: _Dynamics, i: int) -> _Dynamics:
    b = dyn.b
    sl = slice(i, i + 1)
    return _Dynamics(CaseBatch(b.Z[sl], b.fault_bus[sl], b.depth[sl], b.duration[sl],
                               b.load_level[sl], b.motor[sl], b.load_idx, b.gen_idx), dyn.c)


@dataclass
class IntegrationResult:
    t: np.ndarray  # recorded sample times
    P: np.ndarray  # (B, T, N)
    Q: np.ndarray
    V: np.ndarray
    s: np.ndarray  # (B, T, n_load)
    last_below: np.ndarray  # (B, n_load) last step index with V < threshold, -1 if never
    n_steps: int
    valid: np.ndarray  # (B,)


def integrate(batch: CaseBatch, const: SurrogateConstants = SurrogateConstants(),
              record_every: int = 1, record_from: float = 0.0,
              record_to: float | None = None) -> IntegrationResult:
    """Fixed-step RK4 over ``[0, horizon]``; the fault acts on ``[0, duration)``.

    Step boundaries are aligned with fault clearing, so the fault flag is
    constant within every step. Samples are kept every ``record_every`` steps
    inside ``[record_from, record_to]``.
    """
    dyn = _Dynamics(batch, const)
    dt = const.dt
    n_steps = int(round(const.horizon / dt))
    clear_step = np.rint(batch.duration / dt).astype(int)
    if not np.allclose(clear_step * dt, batch.duration, atol=1e-12):
        raise ValueError("fault durations must be multiples of the step size")
    s, feasible = equilibrium(dyn)
    record_to = const.horizon if record_to is None else record_to
    first = int(round(record_from / dt))
    last = int(round(record_to / dt))
    rec_steps = [i for i in range(first, last + 1) if i % record_every == 0]
    nb = s.shape[0]
    out_P, out_Q, out_V, out_s = [], [], [], []
    last_below = np.full(s.shape, -1)
    valid = feasible.copy()
    load_idx = batch.load_idx
    rec_set = set(rec_steps)
    for i in range(n_steps + 1):
        fault_on = (i < clear_step).astype(float)
        if i in rec_set:
            P, Q, V = dyn.channels(s, fault_on)
            out_P.append(P)
            out_Q.append(Q)
            out_V.append(V)
            out_s.append(s.copy())
            vl = V[:, load_idx]
        else:
            vl = dyn.voltages(s, fault_on)[:, load_idx]
        last_below[vl < const.v_threshold] = i
        if i == n_steps:
            break
        k1 = dyn.rhs(s, fault_on)
        k2 = dyn.rhs(s + 0.5 * dt * k1, fault_on)
        k3 = dyn.rhs(s + 0.5 * dt * k2, fault_on)
        k4 = dyn.rhs(s + dt * k3, fault_on)
        s = np.minimum(s + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4), 1.0)
        bad = ~np.all(np.isfinite(s), axis=1) | np.any(np.abs(s) > const.s_blowup, axis=1)
        if np.any(bad):
            valid &= ~bad
            s[bad] = 0.0
    stack = lambda xs: np.stack(xs, axis=1) if xs else np.zeros((nb, 0, 0))
    return IntegrationResult(
        t=np.array(rec_steps) * dt,
        P=stack(out_P), Q=stack(out_Q), V=stack(out_V), s=stack(out_s),
        last_below=last_below, n_steps=n_steps, valid=valid,
    )


def make_batch(topology: GridTopology, cases: list[tuple[TopologyScenario, FaultSpec]],
               const: SurrogateConstants = SurrogateConstants()) -> CaseBatch:
    z_cache: dict[tuple, np.ndarray] = {}
    zs, motors = [], []
    load_idx = np.array(topology.load_buses)
    base_m = np.array([topology.buses[i].motor_fraction for i in load_idx])
    for sc, fs in cases:
        if sc.tripped not in z_cache:
            z_cache[sc.tripped] = sensitivity(topology, sc.tripped, const)
        zs.append(z_cache[sc.tripped])
        motors.append(base_m if fs.motor_fraction is None else np.full(len(load_idx), fs.motor_fraction))
    return CaseBatch(
        Z=np.stack(zs),
        fault_bus=np.array([fs.fault_bus for _, fs in cases]),
        depth=np.array([fs.depth for _, fs in cases], dtype=float),
        duration=np.array([fs.duration for _, fs in cases], dtype=float),
        load_level=np.array([fs.load_level for _, fs in cases], dtype=float),
        motor=np.stack(motors),
        load_idx=load_idx,
        gen_idx=np.array(topology.generator_buses),
    )


@dataclass
class Trajectories:
    t: np.ndarray  # (T,)
    P: np.ndarray  # (T, N)
    Q: np.ndarray
    V: np.ndarray
    s: np.ndarray  # (T, n_load)
    load_idx: np.ndarray
    t_clear: float
    valid: bool = True


def simulate_case(topology: GridTopology, scenario: TopologyScenario, fault: FaultSpec,
                  seed: int = 0, const: SurrogateConstants = SurrogateConstants()) -> Trajectories:
    """Full-resolution trajectories on ``[0, horizon]`` for one case.

    The surrogate is deterministic; ``seed`` is carried for provenance only.
    """
    fault.validate(topology, strict=False)
    res = integrate(make_batch(topology, [(scenario, fault)], const), const)
    if not res.valid[0]:
        raise SimulationError("operating point infeasible or slip diverged")
    return Trajectories(res.t, res.P[0], res.Q[0], res.V[0], res.s[0],
                        np.array(topology.load_buses), fault.duration)


def recovery_times(t: np.ndarray, V_load: np.ndarray, threshold: float = 0.8) -> np.ndarray:
    """Per bus, the earliest time after which voltage stays at or above threshold.

    ``inf`` when the final sample is still below the threshold.
    """
    below = V_load < threshold
    out = np.empty(V_load.shape[1])
    for j in range(V_load.shape[1]):
        idx = np.flatnonzero(below[:, j])
        if idx.size == 0:
            out[j] = t[0]
        elif idx[-1] == len(t) - 1:
            out[j] = np.inf
        else:
            out[j] = t[idx[-1] + 1]
    return out


def label_case(traj: Trajectories, horizon: float = 10.0, threshold: float = 0.8) -> int:
    """0 if every load bus sustains >= threshold from some t <= horizon onward."""
    if traj.t[-1] < horizon - 1e-9:
        raise ValueError(f"trajectory ends at {traj.t[-1]} s, shorter than {horizon} s")
    keep = traj.t <= horizon + 1e-9
    rec = recovery_times(traj.t[keep], traj.V[keep][:, traj.load_idx], threshold)
    return int(not np.all(rec <= horizon))


def window_case(traj: Trajectories, t_c: float, T_win: float = 0.5, dt_sample: float = 0.01) -> np.ndarray:
    """Samples at ``t_c + k dt_sample``, ``k = 0..T_win/dt_sample``; shape ``(L, N, 3)``."""
    ratio = T_win / dt_sample
    if abs(ratio - round(ratio)) > 1e-9:
        raise ValueError("T_win must be a multiple of the sampling interval")
    L = int(round(ratio)) + 1
    step = traj.t[1] - traj.t[0]
    stride = int(round(dt_sample / step))
    start = int(round((t_c - traj.t[0]) / step))
    stop = start + (L - 1) * stride
    if start < 0 or stop >= len(traj.t):
        raise ValueError("window exceeds the simulated horizon")
    idx = np.arange(start, stop + 1, stride)
    return np.stack([traj.P[idx], traj.Q[idx], traj.V[idx]], axis=-1)


def with_dt(const: SurrogateConstants, dt: float) -> SurrogateConstants:
    return replace(const, dt=dt)
