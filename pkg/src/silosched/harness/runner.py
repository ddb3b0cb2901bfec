"""Experiment orchestration: seeded runs, variant suites, scale and attack sweeps.

A run is fully determined by its config: the fleet, workloads, parameter
initialization, exploration, gossip and adversary draws all derive from
config.seed through named substreams. Variants that must be comparable
(ablations, baselines, attacks) share the fleet/workload streams because the
variant name never enters any seed.
"""
from __future__ import annotations

import dataclasses
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..federation import (
    AdversarySpec,
    AggregationOptions,
    FederationState,
    SiloRoundInput,
    DROP,
    NOISE,
    REVERSAL,
)
from ..infra import build_fleet, save_fleet
from ..learner import (
    AgnosticActor,
    FixedHeadActor,
    LearnerParams,
    SiloLearner,
)
from ..policy import CriticParams
from ..simenv import SimParams, check_episode_invariants
from .config import ExperimentConfig
from .metrics import (
    FLEET_ONLY_FIELDS,
    PER_SILO_FIELDS,
    MetricsRecord,
    final_value,
    write_csv,
)

_ADV_MODE = {"reversal": REVERSAL, "noise": NOISE, "drop": DROP}


@dataclass
class RunResult:
    config: ExperimentConfig
    records: List[MetricsRecord]
    summary: dict


def make_adversaries(cfg: ExperimentConfig) -> Dict[int, AdversarySpec]:
    """Deterministic roster: fraction * M silos (nearest whole, at least one).

    Rounding to nearest keeps each neighborhood's attacker prevalence close
    to the nominal fraction; rounding up would hand attackers local
    majorities in small fleets, where median-based detection cannot work.
    """
    if cfg.adversary_fraction <= 0.0:
        return {}
    k = min(cfg.m_silos - 1, max(1, round(cfg.adversary_fraction * cfg.m_silos)))
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xAD7]))
    ids = sorted(int(i) for i in rng.choice(cfg.m_silos, size=k, replace=False))
    spec = AdversarySpec(_ADV_MODE[cfg.adversary_mode],
                         noise_scale=cfg.noise_scale, drop_prob=cfg.drop_prob)
    return {i: spec for i in ids}


def _variant_pieces(cfg: ExperimentConfig):
    v = cfg.variant
    lp = LearnerParams(
        gamma=cfg.gamma,
        gae_lambda=cfg.gae_lambda,
        clip_epsilon=cfg.clip_epsilon,
        actor_lr=cfg.actor_lr,
        critic_lr=cfg.critic_lr,
        normalize_advantages=cfg.normalize_advantages and v != "no_gae_clip",
        use_gae=v != "no_gae_clip",
        use_clip=v != "no_gae_clip",
        fingerprint_window=cfg.fingerprint_window,
        hidden=cfg.hidden,
        critic_hidden=cfg.critic_hidden,
        warmup_decisions=cfg.warmup_decisions,
    )
    aggregate = v != "no_aggregation"
    opts = AggregationOptions(
        d_max=cfg.effective_d_max,
        k_sample=cfg.effective_k_sample,
        nu=cfg.nu,
        xi=cfg.xi,
        alpha_agg=cfg.alpha_agg,
        alpha_cag=cfg.alpha_cag,
        similarity_weights=v not in ("no_gf", "naive_averaging", "no_defense"),
        filter_anomalies=v not in ("no_gf", "naive_averaging", "no_defense"),
        critic_mode="average" if v in ("no_gt", "naive_averaging") else "tracking",
        partial_fraction=cfg.partial_gossip_fraction,
    )
    return lp, opts, aggregate


def _anomaly_counts(log, truth: set) -> Tuple[int, int, int]:
    flagged = set(log.anomalous)
    present = set(log.received)
    tp = len(flagged & truth)
    fp = len(flagged - truth)
    fn = len((present & truth) - flagged)
    return tp, fp, fn


def _ratio(num: int, den: int) -> float:
    return num / den if den else 1.0


def _build_record(round_idx: int, results, logs, adversaries) -> MetricsRecord:
    truth = set(adversaries)
    per_silo = []
    tp_all = fp_all = fn_all = 0
    for i, res in enumerate(results):
        stats = res.stats
        mean = lambda f: float(np.mean([getattr(s, f) for s in stats]))
        if logs is not None:
            tp, fp, fn = _anomaly_counts(logs[i], truth)
            if i not in truth:
                tp_all, fp_all, fn_all = tp_all + tp, fp_all + fp, fn_all + fn
            precision, recall = _ratio(tp, tp + fp), _ratio(tp, tp + fn)
        else:
            precision = recall = 1.0
        per_silo.append({
            "cost": mean("weighted_cost"),
            "response_ms": mean("mean_response_ms"),
            "energy_j": mean("energy_j"),
            "cvar_ms": mean("cvar_ms"),
            "violation_rate": mean("violation_rate"),
            "anomaly_precision": precision,
            "anomaly_recall": recall,
            "clip_fraction": mean("clip_fraction"),
        })
    fleet = {f: float(np.mean([s[f] for s in per_silo])) for f in PER_SILO_FIELDS}
    fleet["anomaly_precision"] = _ratio(tp_all, tp_all + fp_all)
    fleet["anomaly_recall"] = _ratio(tp_all, tp_all + fn_all)
    for f in FLEET_ONLY_FIELDS:
        fleet[f] = float(np.mean([getattr(s, f) for res in results for s in res.stats]))
    return MetricsRecord(round_idx, fleet, per_silo).validate()


def run_experiment(cfg: ExperimentConfig, out_dir: Optional[str] = None) -> RunResult:
    cfg.validate()
    fleet = build_fleet(cfg.m_silos, cfg.seed, (cfg.resources_min, cfg.resources_max))
    sim = SimParams(
        apps_per_episode=cfg.apps_per_episode,
        cvar_alpha=cfg.cvar_alpha,
        cvar_beta=cfg.cvar_beta,
        lambda_rt=cfg.lambda_rt,
        lambda_energy=cfg.lambda_energy,
        deadline_penalty=cfg.deadline_penalty,
        log_events=cfg.check_invariants,
    )
    lp, opts, aggregate = _variant_pieces(cfg)

    max_actions = max(s.n_resources for s in fleet.silos)
    actor_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xA0]))
    if cfg.variant == "no_asap":
        shared = FixedHeadActor.create(actor_rng, cfg.hidden, max_actions)
        actors = [FixedHeadActor(shared.params, s.n_resources) for s in fleet.silos]
    else:
        shared = AgnosticActor.create(actor_rng, cfg.hidden, max_actions)
        actors = [shared for _ in fleet.silos]

    learners = []
    for silo, actor in zip(fleet.silos, actors):
        critic_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xC1, silo.id]))
        critic = CriticParams.random(critic_rng, cfg.critic_hidden)
        learners.append(SiloLearner(silo, sim, lp, actor, critic, root_seed=cfg.seed))

    for l in learners:
        l.check_invariants = cfg.check_invariants
        l.warmup()

    fed = None
    if aggregate:
        critic_dim = learners[0].critic.n_params
        fed = FederationState(fleet, opts, critic_dim, cfg.seed)
    adversaries = make_adversaries(cfg)
    # reversal senders ship their parameters mirrored through the initial
    # point: stepping opposite the entire learned local progress
    init_flats = [l.actor.flatten() for l in learners]

    records: List[MetricsRecord] = []
    protocol: List[dict] = []
    for r in range(cfg.rounds):
        results = [l.local_round(cfg.omega) for l in learners]
        logs = None
        if fed is not None:
            inputs = [
                SiloRoundInput(
                    actor_flat=l.actor.flatten(),
                    critic_flat=l.critic.flatten(),
                    fingerprint=res.fingerprint,
                    critic_grad=res.critic_grad,
                    actor_delta=l.actor.flatten() - init_flats[i],
                )
                for i, (l, res) in enumerate(zip(learners, results))
            ]
            outputs, logs = fed.gossip_round(inputs, adversaries)
            for l, out in zip(learners, outputs):
                l.actor = l.actor.with_flat(out.actor_flat)
                l.critic = l.critic.load_flat(out.critic_flat)
            protocol.extend({"round": r, **lg.to_record()} for lg in logs)
        records.append(_build_record(r, results, logs, adversaries))

    summary = {
        "variant": cfg.variant,
        "seed": cfg.seed,
        "m_silos": cfg.m_silos,
        "rounds": cfg.rounds,
        "adversaries": sorted(adversaries),
    }
    if records:
        summary.update({
            "final_cost": final_value(records, "cost"),
            "final_response_ms": final_value(records, "response_ms"),
            "final_energy_j": final_value(records, "energy_j"),
            "final_cvar_ms": final_value(records, "cvar_ms"),
            "final_violation_rate": final_value(records, "violation_rate"),
            "recall_after_10": float(np.mean(
                [r.fleet["anomaly_recall"] for r in records if r.round > 10]))
            if len(records) > 11 else None,
        })

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_csv(os.path.join(out_dir, "metrics.csv"), records, cfg.m_silos)
        with open(os.path.join(out_dir, "summary.json"), "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(os.path.join(out_dir, "config.json"), "w") as fh:
            json.dump(cfg.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        save_fleet(os.path.join(out_dir, "fleet.json"), fleet)
        with open(os.path.join(out_dir, "protocol.jsonl"), "w") as fh:
            for rec in protocol:
                fh.write(json.dumps(rec) + "\n")

    return RunResult(cfg, records, summary)


# ---------------------------------------------------------------- sweeps


def _pool_worker(cfg: ExperimentConfig):
    res = run_experiment(cfg)
    return cfg, res.records, res.summary


def run_many(cfgs: Sequence[ExperimentConfig], jobs: int = 0) -> List[RunResult]:
    jobs = jobs or os.cpu_count() or 1
    if jobs == 1 or len(cfgs) == 1:
        return [run_experiment(c) for c in cfgs]
    with ProcessPoolExecutor(max_workers=min(jobs, len(cfgs))) as pool:
        out = list(pool.map(_pool_worker, cfgs))
    return [RunResult(cfg, records, summary) for cfg, records, summary in out]


def run_variant_suite(
    base: ExperimentConfig,
    variants: Sequence[str],
    seeds: Sequence[int],
    jobs: int = 0,
) -> Tuple[dict, List[RunResult]]:
    """Run every (variant, seed) pair on shared fleet/workload streams."""
    cfgs = [dataclasses.replace(base, variant=v, seed=s) for v in variants for s in seeds]
    results = run_many(cfgs, jobs)
    by_variant: Dict[str, List[RunResult]] = {}
    for res in results:
        by_variant.setdefault(res.config.variant, []).append(res)

    out = {"seeds": list(seeds), "variants": {}}
    for v in variants:
        runs = sorted(by_variant[v], key=lambda r: r.config.seed)
        finals = [r.summary["final_cost"] for r in runs]
        curves = np.array([[rec.fleet["cost"] for rec in r.records] for r in runs])
        out["variants"][v] = {
            "final_cost_mean": float(np.mean(finals)),
            "final_costs": {str(r.config.seed): f for r, f in zip(runs, finals)},
            "final_violation_rate_mean": float(np.mean(
                [r.summary["final_violation_rate"] for r in runs])),
            "cost_curve_mean": curves.mean(axis=0).tolist(),
        }
    out["ordering"] = sorted(variants, key=lambda v: out["variants"][v]["final_cost_mean"])
    return out, results


def run_scale_sweep(
    base: ExperimentConfig,
    m_list: Sequence[int],
    variants: Sequence[str],
    seeds: Sequence[int],
    jobs: int = 0,
) -> Tuple[dict, List[RunResult]]:
    cfgs = [
        dataclasses.replace(base, m_silos=m, variant=v, seed=s)
        for m in m_list for v in variants for s in seeds
    ]
    results = run_many(cfgs, jobs)
    out = {"m_list": list(m_list), "seeds": list(seeds), "variants": {}}
    for v in variants:
        per_m = {}
        for m in m_list:
            runs = [r for r in results if r.config.variant == v and r.config.m_silos == m]
            per_m[str(m)] = float(np.mean([r.summary["final_cost"] for r in runs]))
        out["variants"][v] = per_m
    return out, results
