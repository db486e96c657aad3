import json
import time

import numpy as np
import pytest

from invreg import (
    ConfigError, DataError, EvalReport, LinearScmSpec, ProtocolConfig, loeo_hyperparam_select,
    make_mean_shift_suite, run_loeo_protocol, simulate_dataset, split_views,
)
from invreg.evaluation import _pick, trial_seed

from conftest import random_dataset


def _scm_dataset(seed, p=5, n=100, shift=4.0):
    spec = LinearScmSpec([], [1.0, 0.5, 0.2], np.zeros((3, 0)), 1.0, np.eye(3))
    rng = np.random.default_rng(seed)
    perts = make_mean_shift_suite(p, np.diag([shift**2, 1.0, 0.1]), rng)
    return simulate_dataset(spec, perts, n, rng)


def test_select_single_value():
    lab, unl = split_views(random_dataset(0))
    sel = loeo_hyperparam_select(lab, unl, "MIR", [3.0])
    assert sel.value == 3.0 and sel.index == 0
    assert np.array(sel.fold_scores).shape == (1, 4)


def test_select_duplicate_values_first():
    lab, unl = split_views(random_dataset(1))
    sel = loeo_hyperparam_select(lab, unl, "RIDGE", [0.5, 0.5, 0.5])
    assert sel.index == 0


def test_tie_rule_prefers_smallest():
    assert _pick([10.0, 1.0, 5.0], [2.0, 2.0 + 1e-13, 3.0]) == 1
    assert _pick([10.0, 1.0], [1.0, 1.5]) == 0
    assert _pick([(1.0, 2.0), (0.5, 0.5)], [1.0, 1.0]) == 1


def test_select_needs_two_envs():
    lab, unl = split_views(random_dataset(2), ["e1"])
    with pytest.raises(DataError):
        loeo_hyperparam_select(lab, unl, "MIR", [1.0])


def test_select_strong_mean_shift_prefers_regularization():
    grid = [0.0, 0.1, 1.0, 10.0, 100.0]
    chosen = []
    for seed in range(20):
        lab, unl = split_views(_scm_dataset(seed))
        chosen.append(loeo_hyperparam_select(lab, unl, "MIR", grid).value)
    assert sum(g > 0 for g in chosen) >= 15


def test_inner_folds_keep_all_unlabeled_environments():
    # the regularizer must not change when an inner fold drops a labeled environment
    ds = random_dataset(3, p=4, labeled=["e1", "e2", "e3"])
    lab, unl = split_views(ds)
    seen = []

    import invreg.evaluation as ev
    original = ev.fit_method

    def spy(method, labeled, unlabeled, hp, weighting, **opts):
        seen.append(unlabeled.envs)
        return original(method, labeled, unlabeled, hp, weighting, **opts)

    ev.fit_method = spy
    try:
        loeo_hyperparam_select(lab, unl, "MIR", [1.0, 2.0])
    finally:
        ev.fit_method = original
    assert seen and all(s == ("e1", "e2", "e3", "e4") for s in seen)


def test_record_counts():
    ds = random_dataset(4, p=3, n=20)
    rep = run_loeo_protocol(ds, ProtocolConfig("MIR", [1.0], n_labeled=2, trials=1))
    assert len(rep.records) == 3
    rep = run_loeo_protocol(ds, ProtocolConfig("MIR", [1.0], n_labeled=2, trials=5))
    assert len(rep.records) == 3  # n_labeled = p - 1 needs no repeats
    ds = random_dataset(5, p=5, n=20)
    rep = run_loeo_protocol(ds, ProtocolConfig("MIR", [0.1, 1.0], n_labeled=2, trials=4))
    assert len(rep.records) == 5 * 4
    assert sorted({r["trial"] for r in rep.records}) == [0, 1, 2, 3]


def test_oracle_mode_dominates_and_shares_seeds():
    ds = _scm_dataset(6, p=5, n=60)
    grid = [0.0, 0.1, 1.0, 10.0]
    cv = run_loeo_protocol(ds, ProtocolConfig("MIR", grid, n_labeled=3, trials=3, seed=9))
    orc = run_loeo_protocol(ds, ProtocolConfig("MIR", grid, n_labeled=3, trials=3, seed=9, oracle_mode=True))
    assert orc.records[0]["method"] == "MIR-Oracle"
    for a, b in zip(cv.records, orc.records):
        assert (a["test_env"], a["trial"], a["trial_seed"], a["labeled_envs"]) == \
               (b["test_env"], b["trial"], b["trial_seed"], b["labeled_envs"])
        assert b["mse"] <= a["mse"] + 1e-12


def test_deterministic():
    ds = random_dataset(7, p=4, n=25)
    cfg = ProtocolConfig("RIDGE", [0.1, 1.0], n_labeled=2, trials=3, seed=3)
    assert run_loeo_protocol(ds, cfg).records == run_loeo_protocol(ds, cfg).records


def test_trial_seed_derivation():
    assert trial_seed(0, 1, 2) == int(np.random.SeedSequence([0, 1, 2]).generate_state(1, dtype=np.uint64)[0])
    assert trial_seed(0, 1, 2) != trial_seed(0, 2, 1)


def test_unlabeled_test_envs_skipped_and_labels_masked():
    ds = random_dataset(8, p=5, n=20, labeled=["e1", "e2", "e3", "e4"])
    rep = run_loeo_protocol(ds, ProtocolConfig("OLS", [None], n_labeled=2, trials=2))
    assert {r["test_env"] for r in rep.records} == {"e1", "e2", "e3", "e4"}
    for r in rep.records:
        assert len(r["labeled_envs"]) == 2 and r["test_env"] not in r["labeled_envs"]
        assert "e5" not in r["labeled_envs"]


def test_config_validation():
    with pytest.raises(ConfigError):
        ProtocolConfig("MIR", [])
    with pytest.raises(ConfigError):
        ProtocolConfig("MIR", [1.0], trials=0)
    with pytest.raises(ConfigError):
        ProtocolConfig("GENERAL_LOSS", [1.0])
    with pytest.raises(ConfigError):
        run_loeo_protocol(random_dataset(9, p=3), ProtocolConfig("MIR", [1.0], n_labeled=3))
    with pytest.raises(ConfigError):
        run_loeo_protocol(random_dataset(9, p=3), ProtocolConfig("MIR", [1.0, 2.0], n_labeled=1))


def test_smoothing_window_applied():
    ds = random_dataset(10, p=3, n=30)
    raw = run_loeo_protocol(ds, ProtocolConfig("OLS", [None], n_labeled=2))
    smooth = run_loeo_protocol(ds, ProtocolConfig("OLS", [None], n_labeled=2, smoothing_window=5))
    assert any(a["mse"] != b["mse"] for a, b in zip(raw.records, smooth.records))


def test_aggregates_and_serialization(tmp_path):
    ds = random_dataset(11, p=4, n=30)
    rep = EvalReport()
    for m, grid in (("OLS", [None]), ("MIR", [0.1, 1.0])):
        rep.extend(run_loeo_protocol(ds, ProtocolConfig(m, grid, n_labeled=2, trials=2)))
    aggs = rep.aggregates()
    assert [(a["method"], a["n_labeled"]) for a in aggs] == [("OLS", 2), ("MIR", 2)]
    for a in aggs:
        v = np.array([r["rmse"] for r in rep.records if r["method"] == a["method"]])
        assert a["rmse_mean"] == pytest.approx(v.mean())
        assert a["rmse_se"] == pytest.approx(v.std(ddof=1) / np.sqrt(v.size))
        assert a["nmse_cvar_0"] == pytest.approx(a["nmse_mean"])
        assert a["nmse_cvar_0.9"] >= a["nmse_cvar_0.5"] >= a["nmse_cvar_0"] - 1e-12
    rep.to_csv(tmp_path / "r.csv")
    rep.to_json(tmp_path / "r.json")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert len(lines) == 1 + len(rep.records)
    assert len(json.loads((tmp_path / "r.json").read_text())["aggregates"]) == 2


def test_all_methods_smoke_bound():
    rng = np.random.default_rng(12)
    d = 10
    spec = LinearScmSpec(rng.standard_normal(2), rng.standard_normal(d), rng.standard_normal((d, 2)), 1.0,
                         np.eye(d))
    ds = simulate_dataset(spec, make_mean_shift_suite(4, np.eye(d) * 4, rng), 400, rng)
    grids = {"MIR": [0.1, 1.0], "VIR": [0.1, 1.0], "MIR_VIR": [(0.1, 0.1), (1.0, 1.0)], "OLS": [None],
             "RIDGE": [0.1, 1.0], "ANCHOR": [0.5, 2.0], "GROUP_DRO": [0.01, 0.1]}
    t = time.perf_counter()
    for m, grid in grids.items():
        rep = run_loeo_protocol(ds, ProtocolConfig(m, grid, n_labeled=3, trials=1))
        assert len(rep.records) == 4
        assert all(np.isfinite(r["mse"]) for r in rep.records)
    assert time.perf_counter() - t < 30
