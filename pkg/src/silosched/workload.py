"""Synthetic DAG application generator with silo-profile-dependent workloads.

Applications are layered DAGs: tasks carry CPU (megacycles), memory (MB) and
storage (MB) demands; edges carry data volumes (MB). Each profile skews the
demand distributions so that different silo archetypes see systematically
different workloads. Apps serialize to JSON-lines, one app per line:

    {"id": 0, "arrival_ms": 0.0, "deadline_ms": 1234.5, "ideal_ms": 500.0,
     "tasks": [[f_req, m_req, d_req], ...],
     "edges": [[pred, succ, data_mb], ...]}
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np


@dataclass(frozen=True)
class TaskNode:
    id: int
    f_req: float  # megacycles
    m_req: float  # MB
    d_req: float  # MB

    def __post_init__(self):
        if self.f_req <= 0 or self.m_req <= 0 or self.d_req <= 0:
            raise ValueError(f"task {self.id}: demands must be positive")


@dataclass
class DagApp:
    id: int
    tasks: List[TaskNode]
    edges: List[Tuple[int, int, float]]  # (pred, succ, data_mb)
    deadline_ms: float
    arrival_ms: float = 0.0
    ideal_ms: float = 0.0  # zero-contention critical path used to set the deadline

    preds: Dict[int, List[int]] = field(default_factory=dict, repr=False)
    succs: Dict[int, List[int]] = field(default_factory=dict, repr=False)
    edge_data: Dict[Tuple[int, int], float] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.deadline_ms <= 0:
            raise ValueError("deadline must be positive")
        n = len(self.tasks)
        self.preds = {t.id: [] for t in self.tasks}
        self.succs = {t.id: [] for t in self.tasks}
        self.edge_data = {}
        for u, v, mb in self.edges:
            if mb <= 0:
                raise ValueError(f"edge ({u},{v}): data volume must be positive")
            if u not in self.preds or v not in self.preds:
                raise ValueError(f"edge ({u},{v}) references unknown task")
            self.preds[v].append(u)
            self.succs[u].append(v)
            self.edge_data[(u, v)] = mb
        self._topo_order = self._kahn()
        if len(self._topo_order) != n:
            raise ValueError("edge set contains a cycle")
        if not self.source_ids() or not self.sink_ids():
            raise ValueError("app needs at least one source and one sink")

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    def source_ids(self) -> List[int]:
        return [t.id for t in self.tasks if not self.preds[t.id]]

    def sink_ids(self) -> List[int]:
        return [t.id for t in self.tasks if not self.succs[t.id]]

    def topological_order(self) -> List[int]:
        return self._topo_order

    def _kahn(self) -> List[int]:
        """Kahn's algorithm; returns fewer than n ids iff the graph has a cycle."""
        indeg = {t.id: len(self.preds[t.id]) for t in self.tasks}
        frontier = sorted(tid for tid, d in indeg.items() if d == 0)
        order: List[int] = []
        while frontier:
            u = frontier.pop(0)
            order.append(u)
            for v in self.succs[u]:
                indeg[v] -= 1
                if indeg[v] == 0:
                    frontier.append(v)
            frontier.sort()
        return order

    def critical_path_ms(self, freq_ghz: float) -> float:
        """Longest path of processing times at freq_ghz, ignoring transfers and queues."""
        finish: Dict[int, float] = {}
        for tid in self.topological_order():
            proc = self.tasks[tid].f_req / freq_ghz
            start = max((finish[p] for p in self.preds[tid]), default=0.0)
            finish[tid] = start + proc
        return max(finish.values())


@dataclass(frozen=True)
class WorkloadProfile:
    name: str
    task_count_range: Tuple[int, int]
    cpu_range: Tuple[float, float]      # megacycles per task
    mem_range: Tuple[float, float]      # MB per task
    data_mb_range: Tuple[float, float]  # MB per edge
    deadline_tightness: float           # deadline = tightness * ideal critical path
    arrival_rate: float                 # apps per simulated second
    ref_freq_ghz: float                 # fastest-resource assumption for the ideal path

    def __post_init__(self):
        for lo, hi in (self.task_count_range, self.cpu_range, self.mem_range, self.data_mb_range):
            if lo > hi or lo <= 0:
                raise ValueError(f"profile {self.name}: bad range ({lo}, {hi})")
        if self.deadline_tightness <= 1.0:
            raise ValueError("deadline_tightness must exceed 1")
        if self.arrival_rate <= 0 or self.ref_freq_ghz <= 0:
            raise ValueError("arrival_rate and ref_freq_ghz must be positive")


# Default archetype profiles. Demand ranges create the cross-silo Non-IID skew:
# cloud-dominant silos see compute-heavy apps, IoT-dense silos see light,
# latency-sensitive ones.
PROFILES: Dict[str, WorkloadProfile] = {
    "cloud_dominant": WorkloadProfile(
        "cloud_dominant", (4, 8), (800.0, 4000.0), (200.0, 1500.0), (0.5, 20.0),
        deadline_tightness=2.8, arrival_rate=0.5, ref_freq_ghz=3.2),
    "edge_dominant": WorkloadProfile(
        "edge_dominant", (3, 7), (100.0, 800.0), (50.0, 500.0), (0.5, 6.0),
        deadline_tightness=3.0, arrival_rate=0.6, ref_freq_ghz=2.6),
    "balanced": WorkloadProfile(
        "balanced", (3, 8), (100.0, 4000.0), (50.0, 1500.0), (0.5, 20.0),
        deadline_tightness=2.8, arrival_rate=0.55, ref_freq_ghz=3.2),
    "iot_dense": WorkloadProfile(
        "iot_dense", (3, 6), (50.0, 400.0), (20.0, 200.0), (0.5, 5.0),
        deadline_tightness=2.5, arrival_rate=0.9, ref_freq_ghz=1.6),
}

SKIP_EDGE_PROB = 0.2
MAX_ENUM_TASKS = 20


def generate_app(
    profile: WorkloadProfile,
    rng: np.random.Generator,
    app_id: int = 0,
    arrival_ms: float = 0.0,
) -> DagApp:
    """Build one layered DAG whose statistics fall inside the profile ranges."""
    lo, hi = profile.task_count_range
    n = int(rng.integers(lo, hi + 1))

    f_req = rng.uniform(*profile.cpu_range, size=n)
    m_req = rng.uniform(*profile.mem_range, size=n)
    d_frac = rng.uniform(0.25, 1.0, size=n)
    tasks = [TaskNode(tid, float(f_req[tid]), float(m_req[tid]),
                      float(m_req[tid] * d_frac[tid])) for tid in range(n)]

    edges: List[Tuple[int, int, float]] = []
    if n > 1:
        n_layers = min(int(rng.integers(2, 6)), n)
        # split n tasks into n_layers non-empty layers (stars and bars)
        cuts = np.sort(rng.choice(np.arange(1, n), size=n_layers - 1, replace=False))
        bounds = [0, *cuts.tolist(), n]
        layers = [range(bounds[i], bounds[i + 1]) for i in range(n_layers)]
        pairs: List[Tuple[int, int]] = []
        for li in range(1, n_layers):
            prev = layers[li - 1]
            earlier_end = bounds[li]
            for v in layers[li]:
                parent = int(prev[rng.integers(len(prev))])
                extra = rng.random(earlier_end) < SKIP_EDGE_PROB
                extra[parent] = True
                pairs.extend((u, v) for u in np.flatnonzero(extra))
        volumes = rng.uniform(*profile.data_mb_range, size=len(pairs))
        edges = [(int(u), int(v), float(mb)) for (u, v), mb in zip(pairs, volumes)]

    app = DagApp(app_id, tasks, edges, deadline_ms=1.0, arrival_ms=arrival_ms)
    ideal = app.critical_path_ms(profile.ref_freq_ghz)
    app.ideal_ms = ideal
    app.deadline_ms = profile.deadline_tightness * ideal
    return app


def generate_batch(
    profile: WorkloadProfile, n_apps: int, rng: np.random.Generator
) -> List[DagApp]:
    """Apps with Poisson arrivals (first at t=0), ids 0..n_apps-1."""
    gaps = rng.exponential(1000.0 / profile.arrival_rate, size=n_apps)
    arrivals = np.concatenate([[0.0], np.cumsum(gaps[:-1])])
    return [generate_app(profile, rng, app_id=k, arrival_ms=float(arrivals[k]))
            for k in range(n_apps)]


def app_paths(app: DagApp, max_tasks: int = MAX_ENUM_TASKS) -> List[List[int]]:
    """Enumerate every source-to-sink path. Oracle use only; capped by max_tasks."""
    if app.n_tasks > max_tasks:
        raise ValueError(f"path enumeration capped at {max_tasks} tasks")
    sinks = set(app.sink_ids())
    paths: List[List[int]] = []

    def walk(prefix: List[int]):
        u = prefix[-1]
        if u in sinks:
            paths.append(list(prefix))
        for v in sorted(app.succs[u]):
            prefix.append(v)
            walk(prefix)
            prefix.pop()

    for s in sorted(app.source_ids()):
        walk([s])
    return paths


# ---------------------------------------------------------------- serialization


def app_to_record(app: DagApp) -> dict:
    return {
        "id": app.id,
        "arrival_ms": app.arrival_ms,
        "deadline_ms": app.deadline_ms,
        "ideal_ms": app.ideal_ms,
        "tasks": [[t.f_req, t.m_req, t.d_req] for t in app.tasks],
        "edges": [[u, v, mb] for u, v, mb in app.edges],
    }


def app_from_record(rec: dict) -> DagApp:
    tasks = [TaskNode(i, *demands) for i, demands in enumerate(rec["tasks"])]
    edges = [(int(u), int(v), float(mb)) for u, v, mb in rec["edges"]]
    return DagApp(
        int(rec["id"]), tasks, edges,
        deadline_ms=float(rec["deadline_ms"]),
        arrival_ms=float(rec["arrival_ms"]),
        ideal_ms=float(rec.get("ideal_ms", 0.0)),
    )


def save_apps(path, apps: Sequence[DagApp]) -> None:
    with open(path, "w") as fh:
        for app in apps:
            fh.write(json.dumps(app_to_record(app)) + "\n")


def load_apps(path) -> List[DagApp]:
    apps = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                apps.append(app_from_record(json.loads(line)))
    return apps
