from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np
import pytest

from bpel import experiments
from bpel.errors import ConfigError, EmptySupportError
from bpel.experiments import (
    METRIC_FIELDS,
    ExperimentConfig,
    config_from_dict,
    config_to_dict,
    load_config,
    method_label,
    mse_from_starts,
    replication_data,
    resolve_threads,
    run_efficiency,
    run_estimate,
    run_experiment,
    run_mse1,
    run_mse2,
)
from bpel.likelihood import PosteriorSpec
from bpel.model import IvSimConfig, iv_moment_model
from bpel.penalty import PenaltySpec
from bpel.samplers import RwProposal, count_proposals, mh_sample, chain_mean

TOML = """
kind = "mse1"
replications = 1
seed = 5
methods = ["grid_mode", "mh", "mamis", "simplex"]

[dgp]
n = 60
r = 10
link = "linear"

[penalty]
kind = "l1"
nu = 0.05

[mh]
sizes = [200, 300]
burnin = 100

[mamis]
sizes = [300]
stages = 3

[starts]
per_dim = 2
lo = -1.0
hi = 2.0

[grid]
points = 11
"""


@pytest.fixture
def small_mse1(tmp_path):
    path = tmp_path / "cfg.toml"
    path.write_text(TOML)
    return load_config(path)


def _small_efficiency(**changes):
    base = {"kind": "efficiency", "replications": 2, "seed": 3, "dgp": {"n": 60},
            "efficiency": {"r_values": [20, 40], "cap": 3000}}
    base.update(changes)
    return config_from_dict(base)


def test_toml_and_json_configs_agree(small_mse1, tmp_path):
    assert small_mse1.kind == "mse1" and small_mse1.nu == 0.05
    assert small_mse1.dgp.n == 60 and small_mse1.mh.sizes == (200, 300)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(config_to_dict(small_mse1)))
    again = load_config(path)
    assert config_to_dict(again) == config_to_dict(small_mse1)


@pytest.mark.parametrize(
    "doc",
    [
        {"kind": "mse1", "colour": 1},
        {"kind": "mse1", "mh": {"size": [1]}},
        {"kind": "mse1", "penalty": {"kind": "scad"}},
        {"kind": "bogus"},
        {"replications": 2},
        {"kind": "mse1", "replications": 0},
        {"kind": "mse1", "starts": {"lo": -9.0}},
        {"kind": "mse2", "methods": ["simplex"]},
        {"kind": "mse1", "nu": None},
        {"kind": "mse1", "nu_grid": 1},
    ],
)
def test_invalid_configs(doc):
    with pytest.raises(ConfigError):
        config_from_dict(doc)


def test_unreadable_config(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("kind = [")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_default_design():
    cfg = ExperimentConfig("mse1")
    assert len(cfg.starts.points()) == 49
    assert cfg.replications == 20 and cfg.mh.sizes == (1500, 2500, 3500)
    assert cfg.efficiency.cap == 200_000 and cfg.efficiency.sigma2 == 1e-4
    assert cfg.methods == ("mh", "mamis", "simplex")
    assert method_label("M-H", 3500) == "M-H-3" and method_label("MAMIS", 400) == "MAMIS[400]"


def test_resolve_threads(monkeypatch):
    monkeypatch.delenv("BPEL_THREADS", raising=False)
    assert resolve_threads(None, 3) == 3
    monkeypatch.setenv("BPEL_THREADS", "2")
    assert resolve_threads(None, 3) == 2
    assert resolve_threads(4, 3) == 4
    monkeypatch.setenv("BPEL_THREADS", "many")
    with pytest.raises(ConfigError):
        resolve_threads(None)


def test_efficiency_rows_replay_from_seed():
    cfg = _small_efficiency()
    metrics, runs = run_efficiency(cfg)
    assert [(m.method, m.r) for m in metrics] == [("EL", 20), ("PEL", 20), ("EL", 40), ("PEL", 40)]
    assert all(m.value >= cfg.efficiency.accepts for m in metrics)
    r, rep, arm, nu, count, censored, seed, _ = runs[3]
    data = replication_data(cfg, rep, r)
    post = PosteriorSpec(iv_moment_model(r), data, PenaltySpec.l1(nu) if nu else None, cfg.dgp.space)
    again = count_proposals(post, RwProposal(1e-4), (0.3, 0.3), 5, cfg.efficiency.cap, seed)
    assert again == (count, bool(censored))
    assert run_efficiency(cfg)[1] == runs


def test_threads_do_not_change_results():
    cfg = _small_efficiency(replications=3)
    assert run_efficiency(cfg, threads=1)[1] == run_efficiency(cfg, threads=2)[1]


def test_wall_time_grows_with_replications():
    one = run_efficiency(_small_efficiency(replications=1, timing=True))[0]
    three = run_efficiency(_small_efficiency(replications=3, timing=True))[0]
    assert sum(m.wall_time_s for m in three) >= sum(m.wall_time_s for m in one) > 0
    assert all(m.wall_time_s == 0.0 for m in run_efficiency(_small_efficiency(replications=1))[0])


def test_mse1_rows_and_recomputation(small_mse1, tmp_path):
    files = run_experiment(small_mse1, tmp_path / "out")
    metrics = {row["method"]: row for row in csv.DictReader(open(files["metrics"]))}
    assert list(metrics) == ["grid_mode", "M-H[200]", "M-H[300]", "MAMIS[300]", "simplex"]
    assert float(metrics["grid_mode"]["value"]) == 0.0
    for method, row in metrics.items():
        assert abs(float(row["value"]) - mse_from_starts(files["starts"], method)) <= 1e-12
    assert json.loads(open(files["failures"]).read()) == dict.fromkeys(metrics, 0)
    assert open(files["metrics"]).readline().strip() == ",".join(METRIC_FIELDS)


def test_mse1_row_replays_from_seed(small_mse1):
    _, rows, _ = run_mse1(small_mse1)
    row = next(r for r in rows if r[4] == "M-H[300]" and r[1] == 2)
    rep, start = row[0], np.array(row[2:4])
    post = experiments._posterior(small_mse1, replication_data(small_mse1, rep), small_mse1.nu)
    chain = mh_sample(post, RwProposal.n_logr(10.0), start, 300, 100, row[12])
    np.testing.assert_array_equal(chain_mean(chain), row[8:10])


def test_mse2_perfect_estimator_scores_zero(monkeypatch):
    cfg = config_from_dict({"kind": "mse2", "replications": 2, "dgp": {"n": 60, "r": 10},
                            "methods": ["mh"], "mh": {"sizes": [50], "burnin": 10},
                            "starts": {"per_dim": 2}})
    monkeypatch.setattr(experiments, "chain_mean", lambda chain, k=None: np.array(cfg.dgp.theta0))
    metrics, _, failures = run_mse2(cfg)
    assert metrics[0].value == 0.0 and failures == {"M-H[50]": 0}


def test_mse2_standard_el_rows():
    cfg = config_from_dict({"kind": "mse2", "replications": 1, "dgp": {"n": 60, "r": 10},
                            "methods": ["standard_el"], "starts": {"per_dim": 2}})
    metrics, rows, _ = run_mse2(cfg)
    assert metrics[0].method == "standard_el" and len(rows) == 4
    assert all(row[11] == "ok" for row in rows)


def test_estimate_recovers_truth_with_tiny_noise():
    cov = (np.array(IvSimConfig().error_cov) * 1e-4).tolist()
    cfg = config_from_dict({"kind": "estimate", "dgp": {"n": 5000, "r": 8, "error_cov": cov},
                            "penalty": {"nu": 1e-4}, "estimate": {"draws": 1000}})
    report = run_estimate(cfg)
    data = experiments._estimate_data(cfg)
    X = data.observations
    y, U, Z = X[:, 0], X[:, 1:3], X[:, 3:]
    PU = Z @ np.linalg.solve(Z.T @ Z, Z.T @ U)
    tsls = np.linalg.solve(PU.T @ U, PU.T @ y)
    assert np.abs(report.theta_corrected - 0.5).max() < 1e-2
    assert np.abs(report.theta_corrected - tsls).max() < 1e-2


def test_estimate_with_huge_nu_reports_empty_support():
    cfg = config_from_dict({"kind": "estimate", "dgp": {"n": 60, "r": 10}, "penalty": {"nu": 50.0},
                            "estimate": {"draws": 200}})
    with pytest.raises(EmptySupportError):
        run_estimate(cfg)


def test_estimate_json_is_reproducible(tmp_path):
    cfg = config_from_dict({"kind": "estimate", "dgp": {"n": 80, "r": 10}, "estimate": {"draws": 400}})
    a = run_experiment(cfg, tmp_path / "a")
    b = run_experiment(cfg, tmp_path / "b")
    for key in ("report", "report_csv", "config"):
        assert a[key].read_bytes() == b[key].read_bytes()


def test_tune_writes_trace(tmp_path):
    cfg = config_from_dict({"kind": "tune", "dgp": {"n": 80, "r": 10}, "nu_grid": 3,
                            "estimate": {"draws": 300}})
    files = run_experiment(cfg, tmp_path)
    lines = files["trace"].read_text().splitlines()
    assert lines[0] == "nu,bic,support_size,theta_hat_1,theta_hat_2" and len(lines) == 4
    assert all(math.isfinite(float(line.split(",")[1])) for line in lines[1:])


@pytest.mark.parametrize("path", sorted((Path(__file__).parents[1] / "configs").glob("*.toml")), ids=lambda p: p.stem)
def test_shipped_configs_load(path):
    cfg = load_config(path)
    assert cfg.replications >= 1
