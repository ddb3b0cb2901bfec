#!/usr/bin/env python3
"""Convergence comparison on the desk preset: full pipeline vs the two
internal baselines (isolated learning, naive averaging), averaged over seeds.

Writes per-run metrics, suite.json and SVG curves under --out.
"""
import argparse
import json
import os

from silosched.harness.config import ExperimentConfig, apply_preset
from silosched.harness.metrics import write_csv
from silosched.harness.plots import emit_plots
from silosched.harness.runner import run_variant_suite


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/convergence")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n-seeds", type=int, default=5)
    ap.add_argument("--jobs", type=int, default=0)
    args = ap.parse_args()

    cfg = apply_preset(ExperimentConfig(), "desk")
    variants = ["full", "no_aggregation", "naive_averaging"]
    seeds = [args.seed + k for k in range(args.n_seeds)]
    suite, results = run_variant_suite(cfg, variants, seeds, jobs=args.jobs)

    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "suite.json"), "w") as fh:
        json.dump(suite, fh, indent=2, sort_keys=True)
    first_runs = []
    for res in results:
        d = os.path.join(args.out, f"{res.config.variant}_seed{res.config.seed}")
        os.makedirs(d, exist_ok=True)
        write_csv(os.path.join(d, "metrics.csv"), res.records, res.config.m_silos)
        if res.config.seed == seeds[0]:
            first_runs.append((res.config.variant, os.path.join(d, "metrics.csv")))
    emit_plots([p for _, p in first_runs], os.path.join(args.out, "plots"),
               labels=[v for v, _ in first_runs])
    for v in suite["ordering"]:
        print(f"{v:18s} final cost {suite['variants'][v]['final_cost_mean']:.4f}")


if __name__ == "__main__":
    main()
