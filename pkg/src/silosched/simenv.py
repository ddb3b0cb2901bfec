"""Per-silo discrete-event scheduling environment.

One environment owns one silo. Apps arrive as a Poisson batch; every task,
once its predecessors finish, becomes a pending decision. step() assigns the
current task to a resource, starts the inbound transfers, and advances the
event queue until the next decision point. Compute is serial per resource
(FIFO by arrival at the resource); memory/storage are held from assignment
until task completion; battery budgets are debited for compute, transfer
endpoints, and standby drain.

Rewards are assembled after the episode so the per-step sum telescopes
exactly to -(weighted normalized cost) - penalty * (#deadline misses):
a dense per-decision energy share plus a terminal per-app response/tail/
deadline component credited to the app's final scheduling decision.

Event ties resolve by (timestamp, event rank, app id, task id); events at a
decision's timestamp are drained before the decision is presented.
"""
from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .infra import Resource, Silo
from .numerics import empirical_cvar
from .workload import DagApp, TaskNode, generate_batch

EV_COMPLETE = 0
EV_DATA_READY = 1
EV_ARRIVAL = 2


class InfeasibleActionError(RuntimeError):
    """The learner emitted an action outside the feasibility mask."""


def proc_time(task: TaskNode, res: Resource) -> float:
    """Processing time in ms: megacycles / GHz."""
    return task.f_req / res.f_ghz


def comm_time(data_mb: float, src: int, dst: int, silo: Silo) -> float:
    """Transfer time in ms; co-located tasks skip the network entirely."""
    if src == dst:
        return 0.0
    return data_mb / silo.bw[src, dst] * 1000.0 + silo.rtt[src, dst]


@dataclass
class SimParams:
    apps_per_episode: int = 12
    cvar_alpha: float = 0.95
    cvar_beta: float = 0.3
    lambda_rt: float = 0.5
    lambda_energy: float = 0.5
    deadline_penalty: float = 10.0
    log_events: bool = False


@dataclass
class CostNormalizer:
    """Frozen min/max scale for episode costs (min-max, clamped to [0, 1]).

    Warmup episodes under a random policy record raw episode costs; freeze()
    fixes the extrema at [0, margin * warmup peak]. The zero floor is a true
    lower bound, so trained policies keep a live gradient signal instead of
    saturating the clamp.
    """

    rt_min: float = 0.0
    rt_max: float = 1.0
    e_min: float = 0.0
    e_max: float = 1.0
    frozen: bool = False
    _peak_rt: float = field(default=0.0, repr=False)
    _peak_e: float = field(default=0.0, repr=False)

    def warm(self, l_rt_raw: float, l_energy_raw: float) -> None:
        if self.frozen:
            raise RuntimeError("normalizer already frozen")
        self._peak_rt = max(self._peak_rt, l_rt_raw)
        self._peak_e = max(self._peak_e, l_energy_raw)

    def freeze(self, margin: float = 1.25) -> None:
        if self._peak_rt <= 0 or self._peak_e <= 0:
            raise RuntimeError("freeze() before any warmup episode")
        self.rt_min = 0.0
        self.rt_max = margin * self._peak_rt
        self.e_min = 0.0
        self.e_max = margin * self._peak_e
        self.frozen = True

    def norm_rt(self, raw: float) -> float:
        return min(1.0, max(0.0, (raw - self.rt_min) / (self.rt_max - self.rt_min)))

    def norm_energy(self, raw: float) -> float:
        return min(1.0, max(0.0, (raw - self.e_min) / (self.e_max - self.e_min)))


@dataclass
class PendingDecision:
    app_id: int
    task_id: int
    ready_ms: float
    feasible_mask: np.ndarray
    used_fallback: bool = False


@dataclass
class ObservedState:
    """Snapshot of the silo at a decision point (all fractions in [0, 1])."""

    mem_util: np.ndarray
    disk_util: np.ndarray
    energy_frac: np.ndarray  # remaining battery fraction; 1 for mains
    busy: np.ndarray         # 0/1 compute-active flags
    queue_len: np.ndarray    # running + waiting tasks per resource
    queue_ms: np.ndarray     # outstanding work per resource
    pending_apps: int
    now_ms: float


@dataclass
class StepOutcome:
    index: int
    energy_j: float
    completed: List[Tuple[int, float, bool]]  # (app_id, realized_ms, violated)
    done: bool


@dataclass
class EpisodeLedger:
    app_times: List[float]
    violations: List[bool]
    step_energies: List[float]
    app_last_step: Dict[int, int]
    active_energy: float
    idle_energy: float
    horizon_ms: float


@dataclass
class CostBreakdown:
    l_rt: float
    l_energy: float
    l_rt_norm: float
    l_energy_norm: float
    weighted: float
    eta_ms: float
    cvar_ms: float
    app_costs: List[float]


def raw_costs(ledger: EpisodeLedger, params: SimParams):
    """(l_rt, l_energy, eta, cvar, per-app costs) before normalization.

    Per-app cost t + beta * (eta + (t - eta)_+ / (1 - alpha)) sums to the
    batch total: sum(t) + B * beta * CVaR.
    """
    if not ledger.app_times:
        raise ValueError("cost of an empty window")
    a, b = params.cvar_alpha, params.cvar_beta
    eta, cvar = empirical_cvar(ledger.app_times, a)
    app_costs = [t + b * (eta + max(0.0, t - eta) / (1.0 - a)) for t in ledger.app_times]
    l_rt = float(sum(app_costs))
    l_energy = ledger.active_energy + ledger.idle_energy
    return l_rt, l_energy, eta, cvar, app_costs


def silo_cost(ledger: EpisodeLedger, params: SimParams, norm: CostNormalizer) -> CostBreakdown:
    """Episode cost: per-app response + beta * CVaR tail, energy, both min-max scaled."""
    l_rt, l_energy, eta, cvar, app_costs = raw_costs(ledger, params)
    l_rt_n = norm.norm_rt(l_rt)
    l_e_n = norm.norm_energy(l_energy)
    weighted = params.lambda_rt * l_rt_n + params.lambda_energy * l_e_n
    return CostBreakdown(l_rt, l_energy, l_rt_n, l_e_n, weighted, eta, cvar, app_costs)


@dataclass
class EpisodeResult:
    rewards: np.ndarray
    cost: CostBreakdown
    ledger: EpisodeLedger
    mean_response_ms: float
    violation_rate: float
    n_decisions: int
    event_log: Optional[List[tuple]] = None


class SiloEnv:
    """Discrete-event MDP for one silo. Single-owner; not thread-safe."""

    def __init__(self, silo: Silo, params: SimParams, normalizer: Optional[CostNormalizer] = None):
        self.silo = silo
        self.params = params
        self.normalizer = normalizer if normalizer is not None else CostNormalizer()
        n = silo.n_resources
        self.f_ghz = np.array([r.f_ghz for r in silo.resources])
        self.p_comp = np.array([r.p_comp for r in silo.resources])
        self.p_send = np.array([r.p_send for r in silo.resources])
        self.p_recv = np.array([r.p_recv for r in silo.resources])
        self.p_standby = np.array([r.p_standby for r in silo.resources])
        self.mem_cap = np.array([r.mem_mb for r in silo.resources])
        self.disk_cap = np.array([r.disk_mb for r in silo.resources])
        self.energy_budget = np.array([r.energy_j for r in silo.resources])
        self.battery = np.isfinite(self.energy_budget)
        self.n = n
        self.apps: List[DagApp] = []
        self.done = True

    # ------------------------------------------------------------ lifecycle

    def reset(
        self,
        rng: Optional[np.random.Generator] = None,
        apps: Optional[List[DagApp]] = None,
    ) -> Optional[PendingDecision]:
        """Start an episode: fresh Poisson batch from rng, or replay preset apps."""
        if apps is None:
            if rng is None:
                raise ValueError("reset needs an rng or preset apps")
            apps = generate_batch(self.silo.profile, self.params.apps_per_episode, rng)
        self.apps = apps
        self.now = 0.0
        self.mem_free = self.mem_cap.copy()
        self.disk_free = self.disk_cap.copy()
        self.energy_committed = np.zeros(self.n)
        self.busy = np.zeros(self.n, dtype=bool)
        self.busy_finish = np.zeros(self.n)
        self.queues: List[List[Tuple[float, int, int, float]]] = [[] for _ in range(self.n)]
        self.queued_ms = np.zeros(self.n)
        self.queue_count = np.zeros(self.n)
        self.compute_busy_ms = np.zeros(self.n)
        self._inv_budget = np.where(self.battery, 1.0 / self.energy_budget, 0.0)

        self._assign: List[Dict[int, int]] = [dict() for _ in self.apps]
        self._finish: List[Dict[int, float]] = [dict() for _ in self.apps]
        self._pred_left: List[Dict[int, int]] = [
            {t.id: len(app.preds[t.id]) for t in app.tasks} for app in self.apps]
        self._done_tasks = [0] * len(self.apps)
        self._arrived = [False] * len(self.apps)
        self._complete = [False] * len(self.apps)
        self._last_completion = 0.0

        self._events: List[tuple] = []
        self._pending: List[Tuple[float, int, int]] = []
        self._steps: List[Tuple[int, int, float]] = []
        self._app_last_step: Dict[int, int] = {}
        self._completed_in_order: List[Tuple[int, float, bool]] = []
        self._log: Optional[List[tuple]] = [] if self.params.log_events else None

        for app in self.apps:
            heapq.heappush(self._events, (app.arrival_ms, EV_ARRIVAL, app.id, -1, -1, 0.0))
        self.done = False
        self._current = self._advance()
        return self._current

    @property
    def decision(self) -> Optional[PendingDecision]:
        return self._current

    # ------------------------------------------------------------ dynamics

    def feasibility_mask(self, app_id: int, task_id: int) -> Tuple[np.ndarray, bool]:
        """Hard-constraint mask; deterministic single-resource fallback when empty."""
        app = self.apps[app_id]
        task = app.tasks[task_id]
        ok = (self.mem_free >= task.m_req) & (self.disk_free >= task.d_req)

        standby_so_far = self.p_standby * self.now / 1000.0
        draw = self.p_comp * (task.f_req / self.f_ghz) / 1000.0  # compute energy per candidate
        for u in app.preds[task_id]:
            r_u = self._assign[app_id][u]
            ct = app.edge_data[(u, task_id)] / self.silo.bw[r_u] * 1000.0 + self.silo.rtt[r_u]
            ct[r_u] = 0.0
            draw = draw + self.p_recv * ct / 1000.0
            if self.battery[r_u]:
                send = self.p_send[r_u] * ct / 1000.0
                ok &= (self.energy_committed[r_u] + standby_so_far[r_u] + send
                       <= self.energy_budget[r_u])
        ok &= self.energy_committed + standby_so_far + draw <= self.energy_budget

        if ok.any():
            return ok, False
        headroom_e = self.energy_budget - self.energy_committed
        headroom_m = self.mem_free.copy()
        order = sorted(range(self.n), key=lambda i: (-headroom_e[i], -headroom_m[i], i))
        fallback = np.zeros(self.n, dtype=bool)
        fallback[order[0]] = True
        return fallback, True

    def queue_time(self, res_id: int) -> float:
        """Outstanding work at a resource: remaining run of the active task plus waiting tasks."""
        remaining = self.busy_finish[res_id] - self.now if self.busy[res_id] else 0.0
        return max(0.0, remaining) + self.queued_ms[res_id]

    def observe(self) -> ObservedState:
        busy = self.busy.astype(np.float64)
        remaining = np.maximum(self.busy_finish - self.now, 0.0) * busy
        e_frac = np.clip(1.0 - self.energy_committed * self._inv_budget, 0.0, 1.0)
        pending_apps = sum(1 for k in range(len(self.apps))
                           if self._arrived[k] and not self._complete[k])
        return ObservedState(
            mem_util=1.0 - self.mem_free / self.mem_cap,
            disk_util=1.0 - self.disk_free / self.disk_cap,
            energy_frac=e_frac,
            busy=busy,
            queue_len=self.queue_count + busy,
            queue_ms=remaining + self.queued_ms,
            pending_apps=pending_apps,
            now_ms=self.now,
        )

    def step(self, action: int) -> StepOutcome:
        dec = self._current
        if dec is None:
            raise RuntimeError("step() on a finished episode")
        if not dec.feasible_mask[action]:
            raise InfeasibleActionError(
                f"resource {action} infeasible for app {dec.app_id} task {dec.task_id}")
        app = self.apps[dec.app_id]
        task = app.tasks[dec.task_id]
        t = dec.ready_ms

        self._assign[dec.app_id][dec.task_id] = action
        self.mem_free[action] -= task.m_req
        self.disk_free[action] -= task.d_req

        proc = task.f_req / self.f_ghz[action]
        e_comp = self.p_comp[action] * proc / 1000.0
        self.energy_committed[action] += e_comp
        energy = e_comp

        max_ct = 0.0
        for u in app.preds[dec.task_id]:
            r_u = self._assign[dec.app_id][u]
            ct = comm_time(app.edge_data[(u, dec.task_id)], r_u, action, self.silo)
            if ct > 0.0:
                e_send = self.p_send[r_u] * ct / 1000.0
                e_recv = self.p_recv[action] * ct / 1000.0
                self.energy_committed[r_u] += e_send
                self.energy_committed[action] += e_recv
                energy += e_send + e_recv
                if self._log is not None:
                    self._log.append(("xfer", t, dec.app_id, dec.task_id, r_u, action, ct,
                                      e_send, e_recv))
            max_ct = max(max_ct, ct)

        heapq.heappush(self._events,
                       (t + max_ct, EV_DATA_READY, dec.app_id, dec.task_id, action, proc))
        if self._log is not None:
            self._log.append(("decide", t, dec.app_id, dec.task_id, action))

        idx = len(self._steps)
        self._steps.append((dec.app_id, dec.task_id, energy))
        self._app_last_step[dec.app_id] = idx

        before = len(self._completed_in_order)
        self._current = self._advance()
        done = self._current is None
        if done:
            self.done = True
        return StepOutcome(idx, energy, self._completed_in_order[before:], done)

    # ------------------------------------------------------------ event engine

    def _advance(self) -> Optional[PendingDecision]:
        while True:
            if self._pending:
                t_dec = self._pending[0][0]
                if not self._events or self._events[0][0] > t_dec:
                    ready, app_id, task_id = heapq.heappop(self._pending)
                    self.now = max(self.now, ready)
                    mask, fb = self.feasibility_mask(app_id, task_id)
                    return PendingDecision(app_id, task_id, ready, mask, fb)
                self._process_event()
            elif self._events:
                self._process_event()
            else:
                return None

    def _process_event(self) -> None:
        t, kind, app_id, task_id, res, proc = heapq.heappop(self._events)
        self.now = max(self.now, t)
        if kind == EV_ARRIVAL:
            self._arrived[app_id] = True
            if self._log is not None:
                self._log.append(("arrival", t, app_id))
            for src in self.apps[app_id].source_ids():
                heapq.heappush(self._pending, (t, app_id, src))
        elif kind == EV_DATA_READY:
            if self.busy[res]:
                self.queues[res].append((t, app_id, task_id, proc))
                self.queued_ms[res] += proc
                self.queue_count[res] += 1
            else:
                self._start_compute(t, app_id, task_id, res, proc)
        else:  # EV_COMPLETE
            self._on_complete(t, app_id, task_id, res)

    def _start_compute(self, t: float, app_id: int, task_id: int, res: int, proc: float) -> None:
        self.busy[res] = True
        self.busy_finish[res] = t + proc
        self.compute_busy_ms[res] += proc
        heapq.heappush(self._events, (t + proc, EV_COMPLETE, app_id, task_id, res, proc))
        if self._log is not None:
            self._log.append(("start", t, app_id, task_id, res, proc))

    def _on_complete(self, t: float, app_id: int, task_id: int, res: int) -> None:
        app = self.apps[app_id]
        task = app.tasks[task_id]
        self._finish[app_id][task_id] = t
        self.mem_free[res] += task.m_req
        self.disk_free[res] += task.d_req
        self.busy[res] = False
        if self._log is not None:
            self._log.append(("finish", t, app_id, task_id, res))

        if self.queues[res]:
            ready, a2, t2, proc2 = self.queues[res].pop(0)
            self.queued_ms[res] -= proc2
            self.queue_count[res] -= 1
            self._start_compute(t, a2, t2, res, proc2)

        for v in app.succs[task_id]:
            self._pred_left[app_id][v] -= 1
            if self._pred_left[app_id][v] == 0:
                heapq.heappush(self._pending, (t, app_id, v))

        self._done_tasks[app_id] += 1
        if self._done_tasks[app_id] == app.n_tasks:
            self._complete[app_id] = True
            realized = t - app.arrival_ms
            violated = realized > app.deadline_ms + 1e-9
            self._completed_in_order.append((app_id, realized, violated))
            self._last_completion = max(self._last_completion, t)

    # ------------------------------------------------------------ episode wrap-up

    def finalize(self) -> EpisodeResult:
        if not self.done:
            raise RuntimeError("finalize() before the episode completed")
        horizon = self._last_completion
        idle_ms = np.maximum(horizon - self.compute_busy_ms, 0.0)
        idle_e = self.p_standby * idle_ms / 1000.0
        # a drained battery stops idling: clamp standby drain at the remaining budget
        room = np.maximum(self.energy_budget - self.energy_committed, 0.0)
        idle_e = np.where(self.battery, np.minimum(idle_e, room), idle_e)

        by_app = {app_id: (rt, viol) for app_id, rt, viol in self._completed_in_order}
        app_times = [by_app[k][0] for k in range(len(self.apps))]
        violations = [by_app[k][1] for k in range(len(self.apps))]
        ledger = EpisodeLedger(
            app_times=app_times,
            violations=violations,
            step_energies=[e for _, _, e in self._steps],
            app_last_step=dict(self._app_last_step),
            active_energy=float(self.energy_committed.sum()),
            idle_energy=float(idle_e.sum()),
            horizon_ms=horizon,
        )
        cost = silo_cost(ledger, self.params, self.normalizer)

        rewards = np.zeros(len(self._steps))
        denom_e = sum(ledger.step_energies) + ledger.idle_energy
        scale_e = self.params.lambda_energy * cost.l_energy_norm / denom_e
        for i, e in enumerate(ledger.step_energies):
            rewards[i] -= scale_e * e
        rewards[-1] -= scale_e * ledger.idle_energy
        total_rt = sum(cost.app_costs)
        for app_id, c in enumerate(cost.app_costs):
            r = -self.params.lambda_rt * cost.l_rt_norm * (c / total_rt)
            if violations[app_id]:
                r -= self.params.deadline_penalty
            rewards[ledger.app_last_step[app_id]] += r

        return EpisodeResult(
            rewards=rewards,
            cost=cost,
            ledger=ledger,
            mean_response_ms=float(np.mean(app_times)),
            violation_rate=float(np.mean(violations)),
            n_decisions=len(self._steps),
            event_log=self._log,
        )


# ---------------------------------------------------------------- event-log tools


def dump_event_log(path, log: List[tuple]) -> None:
    with open(path, "w") as fh:
        for rec in log:
            fh.write(json.dumps(rec) + "\n")


def check_episode_invariants(silo: Silo, apps: List[DagApp], log: List[tuple]) -> List[str]:
    """Post-hoc verification of precedence, serial compute, capacity and battery budget.

    Returns one message per violation; an empty list means the episode is clean.
    """
    eps = 1e-6
    problems: List[str] = []
    start: Dict[Tuple[int, int], float] = {}
    finish: Dict[Tuple[int, int], float] = {}
    res_of: Dict[Tuple[int, int], int] = {}
    decide: Dict[Tuple[int, int], float] = {}
    proc_of: Dict[Tuple[int, int], float] = {}
    xfer_dur: Dict[Tuple[int, int, int], float] = {}
    energy = np.zeros(silo.n_resources)
    horizon = 0.0

    for rec in log:
        kind = rec[0]
        if kind == "decide":
            _, t, a, v, r = rec
            decide[(a, v)] = t
            res_of[(a, v)] = r
        elif kind == "start":
            _, t, a, v, r, proc = rec
            start[(a, v)] = t
            proc_of[(a, v)] = proc
            energy[r] += silo.resources[r].p_comp * proc / 1000.0
        elif kind == "finish":
            _, t, a, v, r = rec
            finish[(a, v)] = t
            horizon = max(horizon, t)
        elif kind == "xfer":
            _, t, a, v, src, dst, dur, e_s, e_r = rec
            xfer_dur[(a, v, src)] = dur
            energy[src] += e_s
            energy[dst] += e_r

    for app in apps:
        for u, v, _mb in app.edges:
            dur = xfer_dur.get((app.id, v, res_of[(app.id, u)]), 0.0)
            if res_of[(app.id, u)] == res_of[(app.id, v)]:
                dur = 0.0
            if finish[(app.id, u)] + dur > start[(app.id, v)] + eps:
                problems.append(
                    f"precedence: app {app.id} edge {u}->{v} "
                    f"finish+comm {finish[(app.id, u)] + dur:.6f} > start {start[(app.id, v)]:.6f}")

    by_res: Dict[int, List[Tuple[float, float]]] = {}
    for key, s in start.items():
        by_res.setdefault(res_of[key], []).append((s, s + proc_of[key]))
    for r, intervals in by_res.items():
        intervals.sort()
        for (s1, f1), (s2, _f2) in zip(intervals, intervals[1:]):
            if s2 < f1 - eps:
                problems.append(f"serial-compute: resource {r} overlap at {s2:.6f} < {f1:.6f}")

    for r, res in enumerate(silo.resources):
        events: List[Tuple[float, int, float, float]] = []
        for app in apps:
            for task in app.tasks:
                key = (app.id, task.id)
                if res_of.get(key) == r:
                    events.append((decide[key], 1, task.m_req, task.d_req))
                    events.append((finish[key], 0, -task.m_req, -task.d_req))
        events.sort()
        mem = stor = 0.0
        for _t, _k, dm, dd in events:
            mem += dm
            stor += dd
            if mem > res.mem_mb + eps or stor > res.disk_mb + eps:
                problems.append(f"capacity: resource {r} over-admitted at t={_t:.6f}")
        if math.isfinite(res.energy_j):
            busy = sum(proc_of[k] for k in start if res_of[k] == r)
            idle_e = min(res.p_standby * max(horizon - busy, 0.0) / 1000.0,
                         max(res.energy_j - energy[r], 0.0))
            if energy[r] + idle_e > res.energy_j + eps:
                problems.append(f"energy-budget: resource {r} exceeded {res.energy_j} J")

    return problems
