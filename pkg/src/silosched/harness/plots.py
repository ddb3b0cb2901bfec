"""SVG line charts for metrics files: one chart per metric, one polyline per run."""
from __future__ import annotations

import logging
import os
from typing import Dict, List, Optional, Sequence, Tuple

from .metrics import read_csv

log = logging.getLogger(__name__)

DEFAULT_METRICS = ("cost", "response_ms", "energy_j", "cvar_ms", "violation_rate")

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")

W, H = 640, 400
ML, MR, MT, MB = 64, 16, 32, 44  # margins


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def svg_line_chart(series: Dict[str, Tuple[List[float], List[float]]], title: str) -> str:
    """Minimal SVG: axes, 5 ticks each way, one polyline and legend entry per series."""
    xs_all = [x for xs, _ in series.values() for x in xs]
    ys_all = [y for _, ys in series.values() for y in ys]
    x_lo, x_hi = min(xs_all), max(xs_all)
    y_lo, y_hi = min(ys_all), max(ys_all)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0

    def sx(x: float) -> float:
        return ML + (x - x_lo) / (x_hi - x_lo) * (W - ML - MR)

    def sy(y: float) -> float:
        return H - MB - (y - y_lo) / (y_hi - y_lo) * (H - MT - MB)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
        f'viewBox="0 0 {W} {H}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2:.1f}" y="20" text-anchor="middle" font-size="14" '
        f'font-family="sans-serif">{title}</text>',
        f'<line x1="{ML}" y1="{H - MB}" x2="{W - MR}" y2="{H - MB}" stroke="black"/>',
        f'<line x1="{ML}" y1="{MT}" x2="{ML}" y2="{H - MB}" stroke="black"/>',
    ]
    for k in range(5):
        xv = x_lo + k * (x_hi - x_lo) / 4
        yv = y_lo + k * (y_hi - y_lo) / 4
        parts.append(
            f'<text x="{sx(xv):.1f}" y="{H - MB + 16}" text-anchor="middle" '
            f'font-size="10" font-family="sans-serif">{_fmt(xv)}</text>')
        parts.append(
            f'<text x="{ML - 6}" y="{sy(yv) + 3:.1f}" text-anchor="end" '
            f'font-size="10" font-family="sans-serif">{_fmt(yv)}</text>')

    for idx, (label, (xs, ys)) in enumerate(series.items()):
        color = PALETTE[idx % len(PALETTE)]
        points = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                     f'points="{points}"/>')
        ly = MT + 14 * idx
        parts.append(f'<line x1="{W - MR - 150}" y1="{ly}" x2="{W - MR - 130}" '
                     f'y2="{ly}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{W - MR - 124}" y="{ly + 4}" font-size="11" '
                     f'font-family="sans-serif">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def emit_plots(
    csv_paths: Sequence[str],
    out_dir: str,
    metric_names: Optional[Sequence[str]] = None,
    labels: Optional[Sequence[str]] = None,
) -> List[str]:
    """One SVG per metric across the given metrics files; returns written paths."""
    if not csv_paths:
        raise ValueError("emit_plots needs at least one metrics file")
    metric_names = list(metric_names or DEFAULT_METRICS)
    if labels is None:
        labels = [os.path.basename(os.path.dirname(p)) or
                  os.path.splitext(os.path.basename(p))[0] for p in csv_paths]
    runs = [read_csv(p) for p in csv_paths]

    os.makedirs(out_dir, exist_ok=True)
    written = []
    for metric in metric_names:
        series: Dict[str, Tuple[List[float], List[float]]] = {}
        for label, records in zip(labels, runs):
            xs = [float(r.round) for r in records]
            ys = [r.fleet[metric] for r in records]
            if xs:
                series[label] = (xs, ys)
        if not series:
            log.warning("metric %s has no data in any input; chart omitted", metric)
            continue
        path = os.path.join(out_dir, f"{metric}.svg")
        with open(path, "w") as fh:
            fh.write(svg_line_chart(series, metric))
        written.append(path)
    return written
