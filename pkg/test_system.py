# test_system.py
"""End-to-end tests of the experiment orchestrator and its command line."""

import json
import os
import sys

import pandas as pd
import pytest

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import orchestrator as orchestrator_module
from orchestrator import EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, ExperimentOrchestrator, exit_code, main
from gppbed.config import THREADS_ENV, load_config

TOY = "experiment=linear-toy\nN=20\nJ=20\ntoy_designs=2\nseed=9\n"
PARAMETRIC = ("experiment=parametric\nN=10\nJ=10\ngrid_size=32\nbelief_size=5\ncandidate_size=3\n"
              "stages=1\ntraining_steps=2\nseed=4\n")


@pytest.fixture(autouse=True)
def isolated_env(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv(THREADS_ENV, raising=False)


def write_config(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def run_cli(*argv):
    return main(list(argv))


def test_linear_toy_run_writes_oracle_tables(tmp_path):
    out = tmp_path / "toy"
    assert run_cli("run", "--config", write_config(tmp_path, TOY), "--out", str(out)) == EXIT_OK

    for name in ("manifest.json", "ledger.csv", "ess.csv", "ess_histogram.csv", "grouping.json",
                 "oracle_comparison.csv", "distances.csv", "gradient_check.csv"):
        assert (out / name).exists(), name

    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "success"
    assert manifest["forward_solves"] == manifest["ledger_total"] == 120
    assert manifest["truth_solves"] == 0
    assert manifest["schemas"]["gradient_check.csv"]["version"] == 1

    check = pd.read_csv(out / "gradient_check.csv")
    assert len(check) == 4
    assert (check["standard_error"] > 0).all()

    oracle = pd.read_csv(out / "oracle_comparison.csv")
    assert list(oracle["quantity"]) == ["mean_0", "var_0", "mean_1", "var_1"]
    assert (oracle["abs_deviation"] >= 0).all()

    distances = pd.read_csv(out / "distances.csv")
    assert len(distances) == 20
    assert (distances[["w2_prior", "w2_pooled", "kl_prior", "kl_pooled"]] >= 0).all().all()


def test_same_seed_gives_identical_tables(tmp_path):
    config = write_config(tmp_path, TOY)
    assert run_cli("run", "--config", config, "--out", str(tmp_path / "a")) == EXIT_OK
    assert run_cli("run", "--config", config, "--out", str(tmp_path / "b"), "--threads", "2") == EXIT_OK
    for name in ("ledger.csv", "ess.csv", "oracle_comparison.csv", "distances.csv", "gradient_check.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_seed_override_changes_results(tmp_path):
    config = write_config(tmp_path, TOY)
    run_cli("run", "--config", config, "--out", str(tmp_path / "a"))
    run_cli("run", "--config", config, "--out", str(tmp_path / "b"), "--seed", "10")
    assert (tmp_path / "a" / "gradient_check.csv").read_bytes() != (tmp_path / "b" / "gradient_check.csv").read_bytes()


def test_parametric_run_ledger_matches_counter(tmp_path):
    config = load_config(write_config(tmp_path, PARAMETRIC), output_dir=str(tmp_path / "par"))
    orchestrator = ExperimentOrchestrator(config)
    result = orchestrator.run()

    assert result["status"] == "success"
    assert result["ledger_total"] == result["forward_solves"] == orchestrator.counter.count
    assert orchestrator.truth_counter.count == 3

    ledger = pd.read_csv(tmp_path / "par" / "ledger.csv")
    by_column = ledger.groupby("column")["solves"].sum()
    assert by_column["oracle"] == 2
    assert by_column["physical_design"] == 25
    assert by_column["snapshot"] == 1

    stages = pd.read_csv(tmp_path / "par" / "stages.csv")
    assert list(stages["stage"]) == [1]
    assert stages["time"].iloc[0] == pytest.approx(0.055)
    posterior = pd.read_csv(tmp_path / "par" / "posterior.csv")
    assert len(posterior) == 25
    assert posterior["weight"].sum() == pytest.approx(1.0)
    assert len(pd.read_csv(tmp_path / "par" / "field_error.csv")) == 32 * 32
    assert (tmp_path / "par" / "stages" / "stage_001.json").exists()
    assert (tmp_path / "par" / "oracle_comparison.csv").exists()


def test_diagnose_writes_ess_report(tmp_path):
    out = tmp_path / "diag"
    config = write_config(tmp_path, PARAMETRIC)
    assert run_cli("diagnose", "--config", config, "--out", str(out)) == EXIT_OK

    ess = pd.read_csv(out / "ess.csv")
    assert len(ess) == 10
    grouping = json.loads((out / "grouping.json").read_text())
    merged = sorted(grouping["ok"] + [i for g in grouping["groups"] for i in g])
    assert merged == list(range(10))
    assert not (out / "stages.csv").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["forward_solves"] == manifest["ledger_total"] == 10 + 10


def test_invalid_config_exits_with_config_error(tmp_path, capsys):
    config = write_config(tmp_path, "experiment=parametric\nbogus_knob=1\n")
    assert run_cli("run", "--config", config) == EXIT_CONFIG
    assert "Configuration error" in capsys.readouterr().err
    assert run_cli("run", "--config", str(tmp_path / "missing.cfg")) == EXIT_CONFIG


def test_unwritable_output_is_config_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("not a directory")
    config = write_config(tmp_path, TOY)
    assert run_cli("run", "--config", config, "--out", str(blocker / "out")) == EXIT_CONFIG


def test_numerical_failure_writes_diagnostic(tmp_path):
    out = tmp_path / "fail"
    config = write_config(tmp_path, TOY + "J=1\n")
    assert run_cli("run", "--config", config, "--out", str(out)) == EXIT_NUMERICAL

    failure = json.loads((out / "failure.json").read_text())
    assert failure["error"] == "DegenerateEnsemble"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "failed"


def test_unexpected_error_still_closes_manifest(tmp_path, monkeypatch):
    def broken(*args, **kwargs):
        raise ValueError("proposal sets do not cover every outer sample")

    monkeypatch.setattr(orchestrator_module, "eig_value_gaussian_linear", broken)
    config = load_config(write_config(tmp_path, TOY), output_dir=str(tmp_path / "broken"))
    result = ExperimentOrchestrator(config).run()

    assert result["status"] == "failed"
    assert "ValueError" in result["error"]
    assert exit_code(result) == EXIT_CONFIG
    manifest = json.loads((tmp_path / "broken" / "manifest.json").read_text())
    assert manifest["status"] == "failed"
    assert manifest["ledger_total"] == manifest["forward_solves"]


def test_report_renders_summary(tmp_path):
    out = tmp_path / "toy"
    run_cli("run", "--config", write_config(tmp_path, TOY), "--out", str(out))
    assert run_cli("report", "--out", str(out)) == EXIT_OK

    summary = (out / "summary.md").read_text()
    assert "# Experiment Summary Report" in summary
    assert "linear-toy" in summary
    assert "## Oracle Comparison" in summary


def test_report_without_run_fails(tmp_path):
    assert run_cli("report", "--out", str(tmp_path / "empty")) == EXIT_CONFIG
