"""End-to-end command-line pipeline: fit -> synth -> eval, plus budget."""

import json
import os
import subprocess
import sys

import numpy as np
import pytest
import yaml

from dptwin.cli import EXIT_BUDGET, EXIT_CONFIG, EXIT_SCHEMA, main

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def make_cohort_csv(path, n=1200, seed=0):
    sys.path.insert(0, os.path.join(REPO, "scripts"))
    try:
        from make_demo_data import simulate
    finally:
        sys.path.pop(0)
    import csv

    header = ["gender", "dead", "insulin", "oad", "ard_death", "start_year", "followup_years"]
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        writer.writerows(simulate(n, seed))


@pytest.fixture
def workdir(tmp_path):
    data = tmp_path / "cohort.csv"
    make_cohort_csv(str(data))
    config = {
        "data": str(data),
        "schema": os.path.join(REPO, "configs", "ard_demo_schema.yaml"),
        "family": "mixture",
        "seed": 3,
        "out": str(tmp_path / "model.json"),
        "privacy": {"epsilon": 1.0, "delta": 1e-6, "stratum_prior_epsilon": 0.1},
        "dpvi": {
            "components": 3,
            "iterations": 25,
            "sampling_ratio": 0.05,
            "clip_norm": 1.0,
            "learning_rate": 0.01,
        },
    }
    cfg_path = tmp_path / "run.yaml"
    cfg_path.write_text(yaml.safe_dump(config))
    return tmp_path, cfg_path, config


class TestFit:
    def test_fit_writes_model_and_privacy_report(self, workdir, capsys):
        tmp, cfg_path, config = workdir
        assert main(["fit", "--config", str(cfg_path)]) == 0
        out = capsys.readouterr().out
        assert "epsilon spent" in out
        payload = json.loads((tmp / "model.json").read_text())
        assert payload["format"] == "dptwin-mixture-model"
        report = json.loads((tmp / "model.json.privacy.json").read_text())
        assert report["epsilon_spent"] <= 1.0 + 1e-9
        kinds = [r["kind"] for r in report["records"]]
        assert "subsampled_gaussian" in kinds and "laplace" in kinds

    def test_missing_schema_is_usage_error(self, workdir):
        tmp, cfg_path, config = workdir
        config.pop("schema")
        cfg_path.write_text(yaml.safe_dump(config))
        assert main(["fit", "--config", str(cfg_path)]) == EXIT_CONFIG

    def test_budget_overrun_refused(self, workdir):
        tmp, cfg_path, config = workdir
        # explicit noise multiplier far too small for the target epsilon
        config["dpvi"]["noise_multiplier"] = 0.3
        config["dpvi"]["iterations"] = 4000
        config["dpvi"]["sampling_ratio"] = 0.5
        cfg_path.write_text(yaml.safe_dump(config))
        assert main(["fit", "--config", str(cfg_path)]) == EXIT_BUDGET

    def test_privbayes_family(self, workdir):
        tmp, cfg_path, config = workdir
        config["family"] = "privbayes"
        config["privbayes"] = {"max_parents": 2, "bins": 4}
        config["out"] = str(tmp / "net.json")
        cfg_path.write_text(yaml.safe_dump(config))
        assert main(["fit", "--config", str(cfg_path)]) == 0
        payload = json.loads((tmp / "net.json").read_text())
        assert payload["format"] == "dptwin-bayes-network"
        assert payload["n_total"] == 1200

    def test_shipped_demo_configs_carry_study_deltas(self):
        ard = yaml.safe_load(open(os.path.join(REPO, "configs", "ard_demo.yaml")))
        adult = yaml.safe_load(open(os.path.join(REPO, "configs", "adult_demo.yaml")))
        assert ard["privacy"]["delta"] == 1e-6
        assert adult["privacy"]["delta"] == 1e-5


class TestSynth:
    def fit_model(self, workdir):
        tmp, cfg_path, config = workdir
        assert main(["fit", "--config", str(cfg_path)]) == 0
        return tmp / "model.json"

    def test_synth_defaults_to_training_count(self, workdir, capsys):
        tmp, _, _ = workdir
        model = self.fit_model(workdir)
        out = tmp / "synth.csv"
        assert main(["synth", "--model", str(model), "--out", str(out)]) == 0
        lines = out.read_text().strip().splitlines()
        assert len(lines) - 1 == 1200

    def test_seed_repeats_bit_identically(self, workdir):
        tmp, _, _ = workdir
        model = self.fit_model(workdir)
        outs = []
        for name in ("a.csv", "b.csv"):
            path = tmp / name
            assert main(
                ["synth", "--model", str(model), "--out", str(path), "--seed", "9",
                 "--m", "500"]
            ) == 0
            outs.append(path.read_text())
        assert outs[0] == outs[1]

    def test_stratification_columns_present(self, workdir):
        tmp, _, _ = workdir
        model = self.fit_model(workdir)
        out = tmp / "synth.csv"
        main(["synth", "--model", str(model), "--out", str(out), "--m", "200"])
        header = out.read_text().splitlines()[0].split(",")
        assert "gender" in header and "dead" in header

    def test_corrupted_artifact_detected(self, workdir, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"format": "something-else", "version": 9}))
        out = tmp_path / "x.csv"
        assert main(["synth", "--model", str(bad), "--out", str(out)]) != 0


class TestEval:
    def prepared(self, workdir):
        tmp, cfg_path, config = workdir
        main(["fit", "--config", str(cfg_path)])
        synth = tmp / "synth.csv"
        main(["synth", "--model", str(tmp / "model.json"), "--out", str(synth), "--seed", "1"])
        spec = {
            "schema": os.path.join(REPO, "configs", "ard_demo_schema.yaml"),
            "metrics": ["frobenius", "poisson", "bootstrap"],
            "regression": {
                "response": "ard_death",
                "regressors": ["insulin", "oad", "gender"],
                "designated": ["insulin", "oad"],
                "family": "poisson",
            },
            "bootstrap": {"iterations": 10},
        }
        spec_path = tmp / "eval.yaml"
        spec_path.write_text(yaml.safe_dump(spec))
        return tmp, synth, spec_path

    def test_identical_files_zero_frobenius(self, workdir):
        tmp, synth, spec_path = self.prepared(workdir)
        data = tmp / "cohort.csv"
        out = tmp / "report"
        assert main(
            ["eval", "--original", str(data), "--synthetic", str(data),
             "--spec", str(spec_path), "--out", str(out)]
        ) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["frobenius"]["mean"] == 0.0

    def test_full_metric_run(self, workdir):
        tmp, synth, spec_path = self.prepared(workdir)
        out = tmp / "report"
        assert main(
            ["eval", "--original", str(tmp / "cohort.csv"), "--synthetic", str(synth),
             "--spec", str(spec_path), "--out", str(out)]
        ) == 0
        report = json.loads((out / "report.json").read_text())
        assert "poisson" in report and "bootstrap" in report
        assert len(report["poisson"]["synthetic"]) == 1

    def test_unknown_metric_lists_valid_ones(self, workdir, capsys):
        tmp, synth, spec_path = self.prepared(workdir)
        spec = yaml.safe_load(spec_path.read_text())
        spec["metrics"] = ["nonsense"]
        spec_path.write_text(yaml.safe_dump(spec))
        code = main(
            ["eval", "--original", str(tmp / "cohort.csv"), "--synthetic", str(synth),
             "--spec", str(spec_path), "--out", str(tmp / "r")]
        )
        assert code == EXIT_CONFIG
        assert "frobenius" in capsys.readouterr().err

    def test_schema_mismatch_reported(self, workdir, tmp_path):
        tmp, synth, spec_path = self.prepared(workdir)
        wrong = tmp_path / "wrong.csv"
        wrong.write_text("a,b\n1,2\n")
        code = main(
            ["eval", "--original", str(wrong), "--synthetic", str(synth),
             "--spec", str(spec_path), "--out", str(tmp_path / "r")]
        )
        assert code == EXIT_SCHEMA


class TestBudget:
    def test_projection_without_data(self, workdir, capsys):
        tmp, cfg_path, config = workdir
        config["data"] = "does-not-exist.csv"  # budget must not read it
        cfg_path.write_text(yaml.safe_dump(config))
        assert main(["budget", "--config", str(cfg_path)]) == 0
        out = capsys.readouterr().out
        assert "projected epsilon" in out
        assert "OK" in out


class TestEntryPoint:
    def test_module_invocation(self):
        result = subprocess.run(
            [sys.executable, "-m", "dptwin.cli", "--help"],
            capture_output=True,
            text=True,
        )
        assert result.returncode == 0
        assert "fit" in result.stdout and "budget" in result.stdout
