import dataclasses
import json
import os
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from silosched.harness.cli import main
from silosched.harness.config import (
    PRESETS,
    ConfigError,
    ExperimentConfig,
    apply_preset,
    load_config,
    save_config,
)
from silosched.harness.metrics import (
    MetricsRecord,
    PER_SILO_FIELDS,
    final_value,
    header,
    read_csv,
    write_csv,
)
from silosched.harness.plots import emit_plots
from silosched.harness.runner import make_adversaries, run_experiment, run_variant_suite


def tiny_config(**kw):
    base = dict(
        m_silos=4, resources_min=4, resources_max=5, apps_per_episode=4,
        rounds=2, omega=1, actor_lr=0.5, critic_lr=0.05, hidden=16,
        critic_hidden=8, warmup_decisions=20, seed=3,
    )
    base.update(kw)
    return ExperimentConfig(**base).validate()


# ---------------------------------------------------------------- config


def test_defaults_are_published_values():
    cfg = ExperimentConfig()
    assert cfg.cvar_alpha == 0.95 and cfg.cvar_beta == 0.3
    assert cfg.lambda_rt == 0.5 and cfg.lambda_energy == 0.5
    assert cfg.gamma == 0.99 and cfg.gae_lambda == 0.95
    assert cfg.actor_lr == 3e-4 and cfg.critic_lr == 1e-3
    assert cfg.clip_epsilon == 0.2
    assert cfg.d_max == 5 and cfg.k_sample == 10
    assert cfg.fingerprint_window == 100
    assert cfg.nu == 0.1 and cfg.xi == 3.0
    assert cfg.alpha_agg == 0.3 and cfg.alpha_cag == 0.1


def test_validation_errors_carry_field_names():
    with pytest.raises(ConfigError, match="variant"):
        tiny_config(variant="bogus")
    with pytest.raises(ConfigError, match="adversary_fraction"):
        tiny_config(adversary_fraction=1.5)
    with pytest.raises(ConfigError, match="k_sample"):
        tiny_config(k_sample=2, d_max=5)
    with pytest.raises(ConfigError, match="lambda"):
        tiny_config(lambda_rt=0.9, lambda_energy=0.5)
    with pytest.raises(ConfigError, match="m_silos"):
        tiny_config(m_silos=1)


def test_presets():
    desk = apply_preset(ExperimentConfig(), "desk")
    assert desk.m_silos == 8
    paper = apply_preset(ExperimentConfig(), "paper20")
    assert paper.m_silos == 20 and paper.rounds == 100
    with pytest.raises(ConfigError):
        apply_preset(ExperimentConfig(), "nope")


def test_config_file_round_trip(tmp_path):
    cfg = tiny_config(variant="no_gt", seed=11)
    path = tmp_path / "cfg.json"
    save_config(path, cfg)
    assert load_config(path) == cfg


def test_config_unknown_field(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"m_silos": 4, "bogus_field": 1}))
    with pytest.raises(ConfigError, match="bogus_field"):
        load_config(path)


def test_config_invalid_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(path)


def test_effective_degree_clamp():
    cfg = tiny_config(m_silos=4)
    assert cfg.effective_d_max == 3
    assert cfg.effective_k_sample == 3


def test_make_adversaries_deterministic():
    cfg = tiny_config(m_silos=8, adversary_fraction=0.3)
    a = make_adversaries(cfg)
    b = make_adversaries(cfg)
    assert a.keys() == b.keys()
    assert len(a) == 2  # round(0.3 * 8), keeping local prevalence near 30%
    assert len(make_adversaries(tiny_config(m_silos=20, adversary_fraction=0.3))) == 6
    assert make_adversaries(tiny_config()) == {}


# ---------------------------------------------------------------- metrics csv


def fake_record(r, n_silos=2, value=0.5):
    fleet = {f: value for f in PER_SILO_FIELDS}
    fleet.update(episode_return=-1.0, mean_advantage=0.0, critic_loss=0.25)
    per_silo = [{f: value for f in PER_SILO_FIELDS} for _ in range(n_silos)]
    return MetricsRecord(r, fleet, per_silo)


def test_metrics_round_trip(tmp_path):
    records = [fake_record(r, value=0.1 * r + 0.05) for r in range(5)]
    path = tmp_path / "m.csv"
    write_csv(path, records, n_silos=2)
    back = read_csv(path)
    assert len(back) == 5
    for a, b in zip(records, back):
        assert a.round == b.round
        assert a.fleet == b.fleet
        assert a.per_silo == b.per_silo


def test_metrics_validation():
    rec = fake_record(0)
    rec.fleet["violation_rate"] = 1.5
    with pytest.raises(ValueError):
        rec.validate()


def test_final_value_tail_mean():
    records = [fake_record(r, value=float(r)) for r in range(6)]
    assert final_value(records, "cost") == pytest.approx((3 + 4 + 5) / 3)


def test_read_csv_reports_line_numbers(tmp_path):
    path = tmp_path / "m.csv"
    write_csv(path, [fake_record(0)], n_silos=2)
    with open(path, "a") as fh:
        fh.write("1,2,3\n")
    with pytest.raises(ValueError, match=":3"):
        read_csv(path)


# ---------------------------------------------------------------- runner


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = tiny_config()
    res = run_experiment(cfg, out_dir=str(out))
    return cfg, res, out


def test_run_outputs(tiny_run):
    cfg, res, out = tiny_run
    assert len(res.records) == cfg.rounds
    for name in ("metrics.csv", "summary.json", "config.json", "fleet.json",
                 "protocol.jsonl"):
        assert (out / name).exists()
    assert res.summary["final_cost"] == pytest.approx(
        final_value(res.records, "cost"))
    for rec in res.records:
        assert all(np.isfinite(v) for v in rec.fleet.values())


def test_run_deterministic(tiny_run, tmp_path):
    cfg, res, out = tiny_run
    out2 = tmp_path / "again"
    run_experiment(cfg, out_dir=str(out2))
    assert (out / "metrics.csv").read_bytes() == (out2 / "metrics.csv").read_bytes()


def test_zero_round_run(tmp_path):
    cfg = tiny_config(rounds=0)
    res = run_experiment(cfg, out_dir=str(tmp_path))
    assert res.records == []
    lines = (tmp_path / "metrics.csv").read_text().strip().splitlines()
    assert len(lines) == 1
    assert lines[0].split(",") == header(cfg.m_silos)
    assert "final_cost" not in res.summary


def test_variant_suite_pairing():
    cfg = tiny_config(rounds=2)
    suite, results = run_variant_suite(cfg, ["full", "no_gae_clip"], [3, 4], jobs=1)
    assert set(suite["variants"]) == {"full", "no_gae_clip"}
    for v in suite["variants"].values():
        assert len(v["cost_curve_mean"]) == 2
        assert set(v["final_costs"]) == {"3", "4"}
    assert len(suite["ordering"]) == 2
    assert len(results) == 4


def test_invariant_checked_run():
    cfg = tiny_config(check_invariants=True, rounds=1)
    res = run_experiment(cfg)
    assert len(res.records) == 1


# ---------------------------------------------------------------- plots


def polylines(svg_path):
    tree = ET.parse(svg_path)
    ns = {"svg": "http://www.w3.org/2000/svg"}
    return tree.getroot().findall(".//svg:polyline", ns)


def test_plot_single_run_single_metric(tiny_run, tmp_path):
    _, _, out = tiny_run
    written = emit_plots([str(out / "metrics.csv")], str(tmp_path), metric_names=["cost"])
    assert len(written) == 1
    assert len(polylines(written[0])) == 1


def test_plot_multiple_runs_legend(tiny_run, tmp_path):
    _, _, out = tiny_run
    paths = [str(out / "metrics.csv")] * 3
    written = emit_plots(paths, str(tmp_path), metric_names=["violation_rate"],
                         labels=["a", "b", "c"])
    svg = open(written[0]).read()
    assert len(polylines(written[0])) == 3
    for label in ("a", "b", "c"):
        assert f">{label}</text>" in svg


def test_plot_empty_metric_omitted(tmp_path, caplog):
    empty = tmp_path / "empty.csv"
    write_csv(empty, [], n_silos=2)
    with caplog.at_level("WARNING"):
        written = emit_plots([str(empty)], str(tmp_path / "charts"))
    assert written == []
    assert any("omitted" in r.message for r in caplog.records)


# ---------------------------------------------------------------- cli


def test_cli_run_and_plot(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    save_config(cfg_path, tiny_config())
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg_path), "--out", str(out)]) == 0
    assert (out / "metrics.csv").exists()
    plots_dir = tmp_path / "plots"
    assert main(["plot", "--inputs", str(out / "metrics.csv"),
                 "--out", str(plots_dir), "--metrics", "cost"]) == 0
    assert (plots_dir / "cost.svg").exists()


def test_cli_rounds_and_seed_overrides(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    save_config(cfg_path, tiny_config())
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg_path), "--rounds", "1",
                 "--seed", "9", "--out", str(out)]) == 0
    saved = json.loads((out / "config.json").read_text())
    assert saved["rounds"] == 1 and saved["seed"] == 9


def test_cli_config_error_exit_code(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"variant": "bogus"}))
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_cli_io_error_exit_code(tmp_path):
    assert main(["plot", "--inputs", str(tmp_path / "missing.csv"),
                 "--out", str(tmp_path / "p")]) == 3
