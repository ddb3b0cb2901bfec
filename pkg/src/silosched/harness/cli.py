"""Command-line entry point.

Subcommands:
  run     one experiment -> metrics.csv, summary.json, config.json, fleet.json
  ablate  variant suite over shared seeds -> per-run dirs + suite.json
  scale   sweep the silo count -> per-run dirs + scale.json
  attack  adversary roster sweep -> per-run dirs + attack.json
  plot    render SVG line charts from metrics.csv files

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 internal error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from typing import List, Optional

from .config import ConfigError, ExperimentConfig, apply_preset, load_config
from .metrics import write_csv
from .plots import DEFAULT_METRICS, emit_plots
from .runner import run_experiment, run_scale_sweep, run_variant_suite


def _int_list(text: str) -> List[int]:
    return [int(tok) for tok in text.split(",") if tok.strip()]


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (fields of ExperimentConfig)")
    p.add_argument("--preset", choices=("desk", "paper20"), default="desk")
    p.add_argument("--seed", type=int, help="base seed override")
    p.add_argument("--rounds", type=int, help="round-count override")
    p.add_argument("--out", default="runs", help="output directory")
    p.add_argument("--jobs", type=int, default=0, help="parallel worker processes (0 = auto)")


def _base_config(args) -> ExperimentConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = apply_preset(ExperimentConfig(), args.preset)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.rounds is not None:
        overrides["rounds"] = args.rounds
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    return cfg.validate()


def _seeds(args, cfg: ExperimentConfig) -> List[int]:
    return [cfg.seed + k for k in range(args.n_seeds)]


def _write_runs(results, out_dir: str) -> None:
    for res in results:
        tag = f"{res.config.variant}_m{res.config.m_silos}_seed{res.config.seed}"
        d = os.path.join(out_dir, tag)
        os.makedirs(d, exist_ok=True)
        write_csv(os.path.join(d, "metrics.csv"), res.records, res.config.m_silos)
        with open(os.path.join(d, "summary.json"), "w") as fh:
            json.dump(res.summary, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _dump(doc: dict, out_dir: str, name: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, name), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_run(args) -> int:
    cfg = _base_config(args)
    res = run_experiment(cfg, out_dir=args.out)
    if res.records:
        print(f"final cost {res.summary['final_cost']:.4f} "
              f"violation rate {res.summary['final_violation_rate']:.4f}")
    print(f"wrote {args.out}/metrics.csv ({len(res.records)} rounds)")
    return 0


def cmd_ablate(args) -> int:
    cfg = _base_config(args)
    variants = args.variants.split(",")
    suite, results = run_variant_suite(cfg, variants, _seeds(args, cfg), jobs=args.jobs)
    _dump(suite, args.out, "suite.json")
    _write_runs(results, args.out)
    for v in suite["ordering"]:
        print(f"{v:18s} final cost {suite['variants'][v]['final_cost_mean']:.4f}")
    return 0


def cmd_scale(args) -> int:
    cfg = _base_config(args)
    variants = args.variants.split(",")
    sweep, results = run_scale_sweep(cfg, args.m_list, variants, _seeds(args, cfg),
                                     jobs=args.jobs)
    _dump(sweep, args.out, "scale.json")
    _write_runs(results, args.out)
    for v, per_m in sweep["variants"].items():
        line = "  ".join(f"M={m}: {c:.4f}" for m, c in per_m.items())
        print(f"{v:18s} {line}")
    return 0


def cmd_attack(args) -> int:
    cfg = _base_config(args)
    cfg = dataclasses.replace(
        cfg, adversary_fraction=args.adv_fraction, adversary_mode=args.adv_mode).validate()
    variants = args.variants.split(",")
    suite, results = run_variant_suite(cfg, variants, _seeds(args, cfg), jobs=args.jobs)
    _dump(suite, args.out, "attack.json")
    _write_runs(results, args.out)
    for v in suite["ordering"]:
        print(f"{v:18s} final cost {suite['variants'][v]['final_cost_mean']:.4f}")
    return 0


def cmd_plot(args) -> int:
    written = emit_plots(args.inputs, args.out, metric_names=args.metrics.split(","))
    for path in written:
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="silosched", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment")
    _add_common(p)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("ablate", help="run the variant suite")
    _add_common(p)
    p.add_argument("--variants", default="full,no_asap,no_gae_clip,no_gf,no_gt")
    p.add_argument("--n-seeds", type=int, default=5)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("scale", help="sweep the silo count")
    _add_common(p)
    p.add_argument("--m-list", type=_int_list, default=[4, 8, 12])
    p.add_argument("--variants", default="full,naive_averaging")
    p.add_argument("--n-seeds", type=int, default=5)
    p.set_defaults(fn=cmd_scale)

    p = sub.add_parser("attack", help="run with an adversary roster")
    _add_common(p)
    p.add_argument("--adv-fraction", type=float, default=0.3)
    p.add_argument("--adv-mode", choices=("reversal", "noise", "drop"), default="reversal")
    p.add_argument("--variants", default="full,no_defense")
    p.add_argument("--n-seeds", type=int, default=5)
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("plot", help="render SVG charts from metrics files")
    p.add_argument("--inputs", nargs="+", required=True, help="metrics.csv paths")
    p.add_argument("--out", default="plots")
    p.add_argument("--metrics", default=",".join(DEFAULT_METRICS))
    p.set_defaults(fn=cmd_plot)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
