"""Experiment runners: configs, determinism, aggregation, CLI exit codes."""

import csv
import json
from pathlib import Path

import numpy as np
import pytest

import chainsim.theory
from chainsim import cli
from chainsim.experiments import (
    ConfigError,
    ExplainSweepConfig,
    FairnessSweepConfig,
    RawParseError,
    TheorySuiteConfig,
    aggregate_file,
    aggregate_rows,
    default_alpha_grid,
    load_config,
    load_config_file,
    read_raw_rows,
    resolve_threads,
    run_explanation_experiment,
    run_explanation_unit,
    run_fairness_sweep,
    run_theory_suite,
    tree_explanations,
)
from chainsim.explain import LimeConfig, end_to_end_explanation, supply_chain_explanation
from chainsim.models import TreeSpec, build_tree_chain, generate_features, train_tree_models
from chainsim.rng import mix_seed, rng_from, splitmix64


class TestSeeding:
    def test_mix_seed_is_stable_across_calls(self):
        assert mix_seed(1, "alpha", 7) == mix_seed(1, "alpha", 7)
        assert mix_seed(1, "alpha", 7) != mix_seed(1, "alpha", 8)
        assert mix_seed("x") == mix_seed("x")

    def test_splitmix_avalanche(self):
        a, b = splitmix64(0), splitmix64(1)
        assert a != b
        assert bin(a ^ b).count("1") > 16  # near-half the bits should flip

    def test_rng_from_streams_differ(self):
        a = rng_from(5, "u").standard_normal(4)
        b = rng_from(5, "v").standard_normal(4)
        assert not np.allclose(a, b)


class TestConfigLoading:
    def test_defaults_validate(self):
        for cfg in (ExplainSweepConfig(), TheorySuiteConfig(), FairnessSweepConfig()):
            cfg.validate()

    def test_default_alpha_grid_shape(self):
        grid = default_alpha_grid()
        assert grid[0] == 0.0
        assert grid[-1] == pytest.approx(25.6)
        assert len(grid) == 10

    def test_unknown_kind_rejected(self):
        with pytest.raises(ConfigError):
            load_config({"kind": "nope"})

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError):
            load_config({"kind": "explanations", "bananas": 3})

    def test_lists_become_tuples(self):
        cfg = load_config({"kind": "explanations", "depths": [1, 2], "trials": 2})
        assert cfg.depths == (1, 2)

    def test_theory_kind_selects_checks(self):
        cfg = load_config({"kind": "eigen"})
        assert cfg.checks == ("eigen",)
        cfg = load_config({"kind": "theory1"})
        assert set(cfg.checks) == {"error_recursion", "tightness"}

    def test_invalid_values_rejected(self):
        with pytest.raises(ConfigError):
            load_config({"kind": "explanations", "trials": 0})
        with pytest.raises(ConfigError):
            load_config({"kind": "fairness", "proportions": [0.5, 0.5, 0.5, 0.5]})

    def test_missing_file(self):
        with pytest.raises(ConfigError):
            load_config_file("/nonexistent/config.json")

    def test_threads_resolution(self, monkeypatch):
        assert resolve_threads(3) == 3
        monkeypatch.setenv("CHAINSIM_THREADS", "5")
        assert resolve_threads(0) == 5
        monkeypatch.delenv("CHAINSIM_THREADS")
        assert resolve_threads(0) == 1


TINY = dict(depths=(1, 2), degrees=(1,), lime_samples=(20,), lime_radii=(0.2,),
            trials=2, points=4, feat_dim=4)


class TestExplanationRunner:
    def test_row_count_single_cell(self):
        rows = run_explanation_unit(1, 1, 4, 20, 0.2, 5, 1000.0, trial_seed=3)
        assert len(rows) == 5

    def test_unit_replay_is_byte_identical(self):
        a = run_explanation_unit(2, 2, 4, 20, 0.2, 4, 1000.0, trial_seed=9)
        b = run_explanation_unit(2, 2, 4, 20, 0.2, 4, 1000.0, trial_seed=9)
        assert a == b

    def test_batched_matches_public_api(self):
        spec = TreeSpec(degree=2, depth=2, feat_dim=4, seed=31)
        graph, models = build_tree_chain(spec)
        train_tree_models(graph, models, spec)
        queries = generate_features(3, 4, seed=5).features
        seeds = [mix_seed(77, "point", p) for p in range(3)]
        w_sc, w_e2e = tree_explanations(graph, models, 0, queries, 0.2, 25, seeds)
        for p in range(3):
            cfg = LimeConfig(radius=0.2, n_samples=25, seed=seeds[p])
            sc = supply_chain_explanation(graph, models, 0, queries[p], cfg)
            e2e = end_to_end_explanation(graph, models, 0, queries[p], cfg)
            assert np.allclose(w_sc[p], sc.weights[:, 0], atol=1e-9)
            assert np.allclose(w_e2e[p], e2e.weights[:, 0], atol=1e-9)

    def test_depth_one_supply_equals_end_to_end(self):
        rows = run_explanation_unit(1, 3, 4, 20, 0.2, 6, 1000.0, trial_seed=13)
        for _, cos, mse, rec in rows:
            assert cos == pytest.approx(1.0)
            assert mse == pytest.approx(0.0, abs=1e-18)
            assert rec == 0.0

    def test_full_run_writes_deterministic_files(self, tmp_path):
        outs = []
        for name in ("a", "b"):
            cfg = ExplainSweepConfig(master_seed=77, out_dir=str(tmp_path / name),
                                     threads=1, **TINY)
            manifest = run_explanation_experiment(cfg)
            assert manifest["complete"]
            outs.append((Path(cfg.out_dir, "raw.csv").read_bytes(),
                         Path(cfg.out_dir, "aggregate.csv").read_bytes()))
        assert outs[0] == outs[1]

    def test_parallel_run_matches_serial_bytes(self, tmp_path):
        paths = {}
        for threads in (1, 2):
            cfg = ExplainSweepConfig(master_seed=99, threads=threads,
                                     out_dir=str(tmp_path / f"t{threads}"), **TINY)
            run_explanation_experiment(cfg)
            paths[threads] = Path(cfg.out_dir)
        assert (paths[1] / "raw.csv").read_bytes() == (paths[2] / "raw.csv").read_bytes()
        assert (paths[1] / "aggregate.csv").read_bytes() == \
            (paths[2] / "aggregate.csv").read_bytes()

    def test_aggregate_is_pure_function_of_raw(self, tmp_path):
        cfg = ExplainSweepConfig(master_seed=5, threads=1,
                                 out_dir=str(tmp_path / "run"), **TINY)
        run_explanation_experiment(cfg)
        raw = Path(cfg.out_dir, "raw.csv")
        shipped = Path(cfg.out_dir, "aggregate.csv").read_bytes()
        redone = tmp_path / "again.csv"
        aggregate_file(raw, redone)
        assert redone.read_bytes() == shipped

    def test_partial_results_flushed_on_failure(self, tmp_path, monkeypatch):
        import chainsim.experiments as exp

        real = exp.run_explanation_unit
        calls = {"n": 0}

        def fail_on_third(*args):
            calls["n"] += 1
            if calls["n"] == 3:
                raise RuntimeError("synthetic failure")
            return real(*args)

        monkeypatch.setattr(exp, "run_explanation_unit", fail_on_third)
        cfg = ExplainSweepConfig(master_seed=3, threads=1,
                                 out_dir=str(tmp_path / "p"), **TINY)
        with pytest.raises(exp.ExperimentFailure):
            run_explanation_experiment(cfg)
        manifest = json.loads((tmp_path / "p" / "manifest.json").read_text())
        assert manifest["complete"] is False
        assert "synthetic failure" in manifest["error"]
        rows = read_raw_rows(tmp_path / "p" / "raw.csv")
        assert len(rows) == 2 * cfg.points  # two units finished before the abort

    def test_raw_rows_recomputable_from_trial_seed(self, tmp_path):
        cfg = ExplainSweepConfig(master_seed=123, threads=1,
                                 out_dir=str(tmp_path / "r"), **TINY)
        run_explanation_experiment(cfg)
        rows = read_raw_rows(Path(cfg.out_dir, "raw.csv"))
        probe = rows[-1]
        redo = run_explanation_unit(probe["depth"], probe["degree"], cfg.feat_dim,
                                    probe["lime_samples"], probe["lime_radius"],
                                    cfg.points, cfg.recourse_cap,
                                    probe["trial_seed"])
        point, cos, mse, rec = redo[probe["point"]]
        assert (cos, mse, rec) == (probe["cos_sim"], probe["mse"],
                                   probe["recourse_error"])


def _raw_row(depth, degree, trial, point, cos, mse, rec, seed=11):
    return {"experiment": "explanations", "depth": depth, "degree": degree,
            "lime_samples": 50, "lime_radius": 0.2, "trial": trial,
            "point": point, "cos_sim": cos, "mse": mse, "recourse_error": rec,
            "trial_seed": seed}


class TestAggregation:
    def test_three_trial_hand_dataset(self):
        # one cell, three trials, two points each; medians by hand
        rows = []
        medians = []
        for trial, (a, b) in enumerate([(0.2, 0.4), (0.6, 0.8), (0.1, 0.9)]):
            rows.append(_raw_row(1, 1, trial, 0, a, 0.0, 0.0))
            rows.append(_raw_row(1, 1, trial, 1, b, 0.0, 0.0))
            medians.append((a + b) / 2)  # linear-interp median of two points
        agg = aggregate_rows(rows)
        cos_p50 = [r for r in agg if r["metric"] == "cos_sim"
                   and r["percentile"] == 50][0]
        mean = sum(medians) / 3
        sd = np.std(medians, ddof=1)
        assert cos_p50["mean"] == pytest.approx(mean, rel=1e-12)
        assert cos_p50["ci95_low"] == pytest.approx(mean - 1.96 * sd / np.sqrt(3))
        assert cos_p50["ci95_high"] == pytest.approx(mean + 1.96 * sd / np.sqrt(3))
        assert cos_p50["n_trials"] == 3

    def test_single_trial_reports_mean_only(self):
        rows = [_raw_row(1, 1, 0, p, 0.5, 0.0, 0.0) for p in range(3)]
        agg = aggregate_rows(rows)
        assert all(r["ci95_low"] is None and r["ci95_high"] is None for r in agg)
        assert all(r["n_trials"] == 1 for r in agg)

    def test_constant_metric_percentiles_collapse(self):
        rows = [_raw_row(2, 1, t, p, 0.7, 0.3, 1.5)
                for t in range(2) for p in range(5)]
        agg = aggregate_rows(rows)
        for r in agg:
            expected = {"cos_sim": 0.7, "mse": 0.3, "recourse_error": 1.5}[r["metric"]]
            assert r["mean"] == pytest.approx(expected)

    def test_schema_violation_reports_row(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("experiment,depth,degree,lime_samples,lime_radius,trial,"
                        "point,cos_sim,mse,recourse_error,trial_seed\n"
                        "explanations,1,1,50,0.2,0,0,oops,0.0,0.0,5\n")
        with pytest.raises(RawParseError, match="row 2"):
            read_raw_rows(path)

    def test_wrong_header_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(RawParseError, match="row 1"):
            read_raw_rows(path)


SMALL_THEORY = dict(master_seed=42, depths=(1, 2, 3), dims=(2,), sigma2s=(0.01,),
                    trials=2000, tightness_c1s=(1.0,), eigen_depths=(1, 2, 3),
                    eigen_dim=3, theorem2_instances=2, theorem2_basis=6,
                    theorem2_kz=2, theorem2_rho=4, theorem2_samples=2000)


class TestTheorySuite:
    def test_default_small_grid_passes(self, tmp_path):
        cfg = TheorySuiteConfig(out_dir=str(tmp_path), **SMALL_THEORY)
        report, ok = run_theory_suite(cfg)
        assert ok
        assert report["all_passed"]
        assert (tmp_path / "theory_report.json").exists()
        assert (tmp_path / "theory_summary.csv").exists()

    def test_sigma_zero_grid_all_errors_zero(self, tmp_path):
        cfg = TheorySuiteConfig(out_dir=str(tmp_path), master_seed=1,
                                depths=(1, 2), dims=(2,), sigma2s=(0.0,),
                                trials=100, checks=("error_recursion",))
        report, ok = run_theory_suite(cfg)
        assert ok
        for cell in report["checks"]["error_recursion"]:
            assert all(r["mean_sq_error"] == 0.0 for r in cell["rows"])

    def test_corrupted_bound_constant_fails_suite(self, tmp_path, monkeypatch):
        real = chainsim.theory.bound_rhs

        def halved_c1(d, c1, c2, dim_delta, sigma2, upstream_err):
            return real(d, c1 / 2.0, c2, dim_delta, sigma2, upstream_err)

        monkeypatch.setattr(chainsim.theory, "bound_rhs", halved_c1)
        cfg = TheorySuiteConfig(out_dir=str(tmp_path), checks=("error_recursion",),
                                **{k: v for k, v in SMALL_THEORY.items()
                                   if k not in ()})
        report, ok = run_theory_suite(cfg)
        assert not ok


FAIR_TINY = dict(master_seed=7, seeds=(0, 1), alpha_p_grid=(0.0, 25.6),
                 alpha_v_grid=(0.0, 1.6), n_rows=600, feat_dim=6, epochs=5,
                 batch_size=128, widths=(12, 12),
                 upstream_kinds=("demographic_parity", "equalized_fpr"),
                 downstream_kinds=("demographic_parity", "equalized_fpr"))


class TestFairnessSweep:
    def test_outputs_and_row_count(self, tmp_path):
        cfg = FairnessSweepConfig(out_dir=str(tmp_path), threads=1, **FAIR_TINY)
        manifest = run_fairness_sweep(cfg)
        assert manifest["complete"]
        assert manifest["errors"] == []
        with open(tmp_path / "outcomes.csv") as fh:
            rows = list(csv.DictReader(fh))
        # seeds x upstream kinds x alpha_p x downstream kinds x alpha_v
        assert len(rows) == 2 * 2 * 2 * 2 * 2
        assert set(rows[0]) == {"seed", "upstream_kind", "alpha_p",
                                "downstream_kind", "alpha_v", "accuracy",
                                "dp_gap", "fpr_gap", "eo_gap"}
        assert (tmp_path / "frontiers.json").exists()
        assert (tmp_path / "reversibility.json").exists()
        notes = manifest["notes"]
        assert "desk scale" in notes["data"]

    def test_alpha_zero_collapses_kinds(self, tmp_path):
        cfg = FairnessSweepConfig(out_dir=str(tmp_path), threads=1,
                                  master_seed=7, seeds=(0,),
                                  alpha_p_grid=(0.0,), alpha_v_grid=(0.0,),
                                  n_rows=600, feat_dim=6, epochs=5,
                                  batch_size=128, widths=(12, 12))
        run_fairness_sweep(cfg)
        with open(tmp_path / "outcomes.csv") as fh:
            rows = list(csv.DictReader(fh))
        metrics = {(r["upstream_kind"], r["downstream_kind"]):
                   (r["accuracy"], r["dp_gap"]) for r in rows}
        assert len(set(metrics.values())) == 1

    def test_deterministic_outputs(self, tmp_path):
        blobs = []
        for name in ("x", "y"):
            cfg = FairnessSweepConfig(out_dir=str(tmp_path / name), threads=1,
                                      **FAIR_TINY)
            run_fairness_sweep(cfg)
            blobs.append((tmp_path / name / "outcomes.csv").read_bytes())
        assert blobs[0] == blobs[1]


class TestCli:
    def test_aggregate_command(self, tmp_path, capsys):
        cfg = ExplainSweepConfig(master_seed=5, threads=1,
                                 out_dir=str(tmp_path / "run"), **TINY)
        run_explanation_experiment(cfg)
        out = tmp_path / "agg2.csv"
        code = cli.main(["aggregate", str(tmp_path / "run" / "raw.csv"),
                         "--out", str(out)])
        assert code == 0
        assert out.exists()

    def test_explain_sweep_from_config_file(self, tmp_path):
        payload = {"kind": "explanations", "out_dir": str(tmp_path / "o"),
                   "threads": 1, **{k: list(v) if isinstance(v, tuple) else v
                                    for k, v in TINY.items()}}
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(payload))
        code = cli.main(["explain-sweep", "--config", str(cfg_path), "--seed", "3"])
        assert code == 0
        manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
        assert manifest["master_seed"] == 3

    def test_bad_config_exits_one(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"kind": "explanations", "trials": 0}))
        assert cli.main(["explain-sweep", "--config", str(cfg_path)]) == 1

    def test_kind_command_mismatch_exits_one(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"kind": "fairness"}))
        assert cli.main(["explain-sweep", "--config", str(cfg_path)]) == 1

    def test_theory_failure_exits_two(self, tmp_path, monkeypatch):
        real = chainsim.theory.bound_rhs
        monkeypatch.setattr(
            chainsim.theory, "bound_rhs",
            lambda d, c1, c2, dd, s2, u: real(d, c1 / 2.0, c2, dd, s2, u))
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(
            {"kind": "theory1", "out_dir": str(tmp_path / "t"), "trials": 500,
             "depths": [1, 2, 3], "dims": [2], "sigma2s": [0.01],
             "tightness_c1s": [1.0]}))
        assert cli.main(["theory", "--config", str(cfg_path)]) == 2

    def test_theory_success_exits_zero(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(
            {"kind": "theory1", "out_dir": str(tmp_path / "t"), "trials": 500,
             "depths": [1, 2], "dims": [2], "sigma2s": [0.01],
             "tightness_c1s": [1.0]}))
        assert cli.main(["theory", "--config", str(cfg_path)]) == 0

    def test_mid_run_failure_exits_three(self, tmp_path, monkeypatch):
        import chainsim.experiments as exp

        def boom(*args):
            raise RuntimeError("synthetic failure")

        monkeypatch.setattr(exp, "run_explanation_unit", boom)
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(
            {"kind": "explanations", "out_dir": str(tmp_path / "o"), "threads": 1,
             "depths": [1], "degrees": [1], "lime_samples": [10],
             "lime_radii": [0.2], "trials": 1, "points": 2, "feat_dim": 3}))
        assert cli.main(["explain-sweep", "--config", str(cfg_path)]) == 3
        manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
        assert manifest["complete"] is False
