"""Per-round metrics records and their CSV serialization.

Column order is fixed: `round`, the fleet-mean block, the fleet-level
training diagnostics, then one block per silo. Floats are written with
repr-level precision so identical runs produce byte-identical files.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

PER_SILO_FIELDS = (
    "cost",
    "response_ms",
    "energy_j",
    "cvar_ms",
    "violation_rate",
    "anomaly_precision",
    "anomaly_recall",
    "clip_fraction",
)
FLEET_ONLY_FIELDS = ("episode_return", "mean_advantage", "critic_loss")


@dataclass
class MetricsRecord:
    round: int
    fleet: Dict[str, float]                 # PER_SILO_FIELDS + FLEET_ONLY_FIELDS
    per_silo: List[Dict[str, float]]        # PER_SILO_FIELDS each

    def validate(self) -> "MetricsRecord":
        for name in ("violation_rate", "anomaly_precision", "anomaly_recall", "clip_fraction"):
            v = self.fleet[name]
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"fleet {name}={v} outside [0, 1]")
        for v in self.fleet.values():
            if v != v or v in (float("inf"), float("-inf")):
                raise ValueError("non-finite metric value")
        return self


def header(n_silos: int) -> List[str]:
    cols = ["round"]
    cols += [f"fleet_{f}" for f in PER_SILO_FIELDS]
    cols += [f"fleet_{f}" for f in FLEET_ONLY_FIELDS]
    for i in range(n_silos):
        cols += [f"s{i}_{f}" for f in PER_SILO_FIELDS]
    return cols


def to_row(rec: MetricsRecord) -> List[str]:
    row = [str(rec.round)]
    row += [repr(rec.fleet[f]) for f in PER_SILO_FIELDS]
    row += [repr(rec.fleet[f]) for f in FLEET_ONLY_FIELDS]
    for silo in rec.per_silo:
        row += [repr(silo[f]) for f in PER_SILO_FIELDS]
    return row


def write_csv(path, records: Sequence[MetricsRecord], n_silos: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header(n_silos))
        for rec in records:
            w.writerow(to_row(rec))


def read_csv(path) -> List[MetricsRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty metrics file")
    cols = rows[0]
    n_silos = sum(1 for c in cols if c.endswith("_cost") and c.startswith("s"))
    records = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(cols):
            raise ValueError(f"{path}:{lineno}: expected {len(cols)} columns, got {len(row)}")
        values = dict(zip(cols, row))
        fleet = {f: float(values[f"fleet_{f}"]) for f in PER_SILO_FIELDS + FLEET_ONLY_FIELDS}
        per_silo = [
            {f: float(values[f"s{i}_{f}"]) for f in PER_SILO_FIELDS}
            for i in range(n_silos)
        ]
        records.append(MetricsRecord(int(values["round"]), fleet, per_silo))
    return records


def fleet_series(records: Sequence[MetricsRecord], name: str) -> List[float]:
    return [r.fleet[name] for r in records]


def final_value(records: Sequence[MetricsRecord], name: str, tail: int = 3) -> float:
    """Mean of the last `tail` rounds; damps single-round episode noise."""
    series = fleet_series(records, name)
    if not series:
        raise ValueError("no records")
    window = series[-min(tail, len(series)):]
    return sum(window) / len(window)
