"""Fleet model: silos of heterogeneous IoT/edge/cloud resources plus networks.

Frequencies are effective GHz (megacycles/ms), memory/storage in GB, power in
watts, battery budgets in joules (math.inf for mains-powered tiers). Intra-silo
bandwidth (MB/s) and RTT (ms) matrices are symmetric; inter-silo RTTs live on
the fleet. Fleets serialize to JSON so experiments can pin identical
infrastructure across algorithm variants.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np

from .workload import PROFILES, WorkloadProfile


class Tier(str, Enum):
    IOT = "iot"
    EDGE = "edge"
    CLOUD = "cloud"


@dataclass
class Resource:
    id: int
    tier: Tier
    f_ghz: float
    mem_gb: float
    disk_gb: float
    energy_j: float  # math.inf for stable power supplies
    p_comp: float
    p_send: float
    p_recv: float
    p_standby: float

    def __post_init__(self):
        if min(self.f_ghz, self.mem_gb, self.disk_gb) <= 0:
            raise ValueError(f"resource {self.id}: capacities must be positive")
        if math.isfinite(self.energy_j) and self.tier != Tier.IOT:
            raise ValueError(f"resource {self.id}: only IoT devices have finite batteries")
        if not self.p_standby < self.p_comp:
            raise ValueError(f"resource {self.id}: standby power must be below compute power")

    @property
    def mem_mb(self) -> float:
        return self.mem_gb * 1024.0

    @property
    def disk_mb(self) -> float:
        return self.disk_gb * 1024.0


@dataclass
class Silo:
    id: int
    resources: List[Resource]
    bw: np.ndarray   # MB/s, [n, n]
    rtt: np.ndarray  # ms, [n, n]
    profile: WorkloadProfile

    def __post_init__(self):
        n = len(self.resources)
        self.bw = np.asarray(self.bw, dtype=np.float64)
        self.rtt = np.asarray(self.rtt, dtype=np.float64)
        if self.bw.shape != (n, n) or self.rtt.shape != (n, n):
            raise ValueError(f"silo {self.id}: matrices must be {n}x{n}")
        if (self.bw <= 0).any() or (self.rtt < 0).any():
            raise ValueError(f"silo {self.id}: bandwidth must be positive, rtt non-negative")
        if np.diag(self.rtt).any():
            raise ValueError(f"silo {self.id}: rtt diagonal must be zero")

    @property
    def n_resources(self) -> int:
        return len(self.resources)


@dataclass
class Fleet:
    silos: List[Silo]
    inter_rtt: np.ndarray  # ms, [M, M], symmetric, zero diagonal

    def __post_init__(self):
        m = len(self.silos)
        self.inter_rtt = np.asarray(self.inter_rtt, dtype=np.float64)
        if self.inter_rtt.shape != (m, m):
            raise ValueError("inter-silo rtt matrix shape mismatch")
        if not np.allclose(self.inter_rtt, self.inter_rtt.T):
            raise ValueError("inter-silo rtt matrix must be symmetric")
        if np.diag(self.inter_rtt).any():
            raise ValueError("inter-silo rtt diagonal must be zero")

    @property
    def n_silos(self) -> int:
        return len(self.silos)


# archetype -> tier mix, cycled over silo ids
ARCHETYPES: List[Tuple[str, Dict[Tier, float]]] = [
    ("cloud_dominant", {Tier.CLOUD: 0.70, Tier.EDGE: 0.15, Tier.IOT: 0.15}),
    ("edge_dominant", {Tier.EDGE: 0.60, Tier.CLOUD: 0.20, Tier.IOT: 0.20}),
    ("balanced", {Tier.IOT: 1 / 3, Tier.EDGE: 1 / 3, Tier.CLOUD: 1 / 3}),
    ("iot_dense", {Tier.IOT: 0.60, Tier.EDGE: 0.20, Tier.CLOUD: 0.20}),
]

# per-tier hardware ranges: f GHz, mem GB, disk GB, p_comp W
TIER_HW = {
    Tier.IOT: ((0.8, 1.4), (0.5, 2.0), (2.0, 16.0), (2.0, 5.0)),
    Tier.EDGE: ((2.0, 3.0), (8.0, 32.0), (64.0, 512.0), (15.0, 45.0)),
    Tier.CLOUD: ((2.5, 4.0), (8.0, 128.0), (128.0, 2048.0), (60.0, 150.0)),
}

IOT_BATTERY_J = (10_000.0, 50_000.0)

# (rtt ms range, bw MB/s range) keyed by unordered tier pair
TIER_NET = {
    frozenset({Tier.IOT, Tier.EDGE}): ((1.0, 6.0), (10.0, 25.0)),
    frozenset({Tier.IOT, Tier.CLOUD}): ((6.0, 25.0), (14.0, 22.0)),
    frozenset({Tier.EDGE, Tier.CLOUD}): ((6.0, 25.0), (15.0, 22.0)),
    frozenset({Tier.IOT}): ((1.0, 6.0), (10.0, 25.0)),
    frozenset({Tier.EDGE}): ((1.0, 6.0), (15.0, 25.0)),
    frozenset({Tier.CLOUD}): ((1.0, 10.0), (20.0, 40.0)),
}

INTER_SILO_RTT_RANGE = (5.0, 100.0)


def _tier_counts(mix: Dict[Tier, float], n: int) -> Dict[Tier, int]:
    """Largest-remainder apportionment; every tier in the mix gets at least one."""
    counts = {t: max(1, int(math.floor(frac * n))) for t, frac in mix.items()}
    while sum(counts.values()) > n:
        t = max(counts, key=lambda t: (counts[t], t.value))
        counts[t] -= 1
    remainders = sorted(
        mix, key=lambda t: (mix[t] * n - math.floor(mix[t] * n)), reverse=True)
    i = 0
    while sum(counts.values()) < n:
        counts[remainders[i % len(remainders)]] += 1
        i += 1
    return counts


def _make_resource(rid: int, tier: Tier, rng: np.random.Generator) -> Resource:
    (f_lo, f_hi), (m_lo, m_hi), (d_lo, d_hi), (p_lo, p_hi) = TIER_HW[tier]
    p_comp = float(rng.uniform(p_lo, p_hi))
    energy = float(rng.uniform(*IOT_BATTERY_J)) if tier == Tier.IOT else math.inf
    return Resource(
        id=rid,
        tier=tier,
        f_ghz=float(rng.uniform(f_lo, f_hi)),
        mem_gb=float(rng.uniform(m_lo, m_hi)),
        disk_gb=float(rng.uniform(d_lo, d_hi)),
        energy_j=energy,
        p_comp=p_comp,
        p_send=p_comp * float(rng.uniform(0.10, 0.20)),
        p_recv=p_comp * float(rng.uniform(0.10, 0.20)),
        p_standby=p_comp * float(rng.uniform(0.05, 0.10)),
    )


def _make_silo(sid: int, rng: np.random.Generator, resources_range: Tuple[int, int]) -> Silo:
    arch_name, mix = ARCHETYPES[sid % len(ARCHETYPES)]
    n = int(rng.integers(resources_range[0], resources_range[1] + 1))
    counts = _tier_counts(mix, n)
    tiers: List[Tier] = []
    for tier in (Tier.IOT, Tier.EDGE, Tier.CLOUD):
        tiers.extend([tier] * counts.get(tier, 0))
    resources = [_make_resource(i, tiers[i], rng) for i in range(n)]

    rtt = np.zeros((n, n))
    bw = np.full((n, n), 1e6)  # co-located transfers never touch the diagonal
    for i in range(n):
        for j in range(i + 1, n):
            key = frozenset({resources[i].tier, resources[j].tier})
            (r_lo, r_hi), (b_lo, b_hi) = TIER_NET[key]
            rtt[i, j] = rtt[j, i] = rng.uniform(r_lo, r_hi)
            bw[i, j] = bw[j, i] = rng.uniform(b_lo, b_hi)
    return Silo(sid, resources, bw, rtt, PROFILES[arch_name])


def build_fleet(
    m: int, seed: int, resources_range: Tuple[int, int] = (6, 14)
) -> Fleet:
    """m silos cycled over the four archetypes, with sampled networks and hardware."""
    if m < 2:
        raise ValueError("a fleet needs at least two silos")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF1EE7]))
    silos = [_make_silo(sid, rng, resources_range) for sid in range(m)]
    inter = np.zeros((m, m))
    for i in range(m):
        for j in range(i + 1, m):
            inter[i, j] = inter[j, i] = rng.uniform(*INTER_SILO_RTT_RANGE)
    return Fleet(silos, inter)


def measure_rtt(
    fleet: Fleet, i: int, j: int, rng: Optional[np.random.Generator] = None
) -> float:
    """One RTT probe between silos: base matrix entry with +-10% jitter.

    Pass rng=None for the deterministic (jitter-free) mode.
    """
    if i == j:
        raise ValueError("rtt to self is undefined")
    base = float(fleet.inter_rtt[i, j])
    if rng is None:
        return base
    return base * float(rng.uniform(0.9, 1.1))


# ---------------------------------------------------------------- serialization


def fleet_to_json(fleet: Fleet) -> dict:
    return {
        "inter_rtt": fleet.inter_rtt.tolist(),
        "silos": [
            {
                "id": s.id,
                "profile": s.profile.name,
                "bw": s.bw.tolist(),
                "rtt": s.rtt.tolist(),
                "resources": [
                    {
                        "id": r.id,
                        "tier": r.tier.value,
                        "f_ghz": r.f_ghz,
                        "mem_gb": r.mem_gb,
                        "disk_gb": r.disk_gb,
                        "energy_j": None if math.isinf(r.energy_j) else r.energy_j,
                        "p_comp": r.p_comp,
                        "p_send": r.p_send,
                        "p_recv": r.p_recv,
                        "p_standby": r.p_standby,
                    }
                    for r in s.resources
                ],
            }
            for s in fleet.silos
        ],
    }


def fleet_from_json(doc: dict) -> Fleet:
    silos = []
    for sd in doc["silos"]:
        resources = [
            Resource(
                id=rd["id"],
                tier=Tier(rd["tier"]),
                f_ghz=rd["f_ghz"],
                mem_gb=rd["mem_gb"],
                disk_gb=rd["disk_gb"],
                energy_j=math.inf if rd["energy_j"] is None else rd["energy_j"],
                p_comp=rd["p_comp"],
                p_send=rd["p_send"],
                p_recv=rd["p_recv"],
                p_standby=rd["p_standby"],
            )
            for rd in sd["resources"]
        ]
        silos.append(Silo(sd["id"], resources, np.array(sd["bw"]), np.array(sd["rtt"]),
                          PROFILES[sd["profile"]]))
    return Fleet(silos, np.array(doc["inter_rtt"]))


def save_fleet(path, fleet: Fleet) -> None:
    with open(path, "w") as fh:
        json.dump(fleet_to_json(fleet), fh)


def load_fleet(path) -> Fleet:
    with open(path) as fh:
        return fleet_from_json(json.load(fh))
