"""Tests for the pipeline agents and the memory module."""

import json

import numpy as np
import pandas as pd
import pytest

from agents import (
    CalibrationAgent,
    DiagnosticsAgent,
    GradientAgent,
    MemoryModule,
    OuterSamplerAgent,
    ProposalAgent,
    SummaryAgent,
)
from agents.memory_module import SCHEMAS
from gppbed.eig import GradientProblem
from gppbed.forward import EvalCounter, Measurement, linear_toy_model
from gppbed.seqbed import SeqState, SequentialSetup
from gppbed.statcore import STREAM_OUTER, Gaussian, RngStream

PRIOR = Gaussian(np.zeros(2), np.eye(2))


@pytest.fixture
def toy():
    return {
        "model": linear_toy_model(),
        "prior": PRIOR,
        "measurement": Measurement(np.array([0.3, 0.7]), noise_var=0.25),
    }


def outer_for(toy, counter, n=20, seed=5):
    result = OuterSamplerAgent().execute({**toy, "n_outer": n, "rng": RngStream(seed).spawn(STREAM_OUTER),
                                          "counter": counter})
    assert result["status"] == "success"
    return result


def test_outer_sampler_counts_one_solve_per_sample(toy):
    counter = EvalCounter()
    result = outer_for(toy, counter)
    assert result["cost"] == 20
    assert result["outer"].size == 20
    assert counter.count == 20


def test_missing_fields_fail_without_raising():
    result = OuterSamplerAgent().execute({"n_outer": 3})
    assert result["status"] == "failed"
    assert result["kind"] == "input"
    assert "model" in result["error"]


def test_unknown_operations_are_rejected():
    for agent in (ProposalAgent(), GradientAgent(), MemoryModule()):
        result = agent.execute({"operation": "bogus"})
        assert result["status"] == "failed"
        assert result["kind"] == "input"


def test_numerical_errors_become_failure_dicts(toy):
    result = ProposalAgent().execute({**toy, "operation": "predict", "n_inner": 1, "rng": RngStream(1),
                                      "counter": EvalCounter()})
    assert result["status"] == "failed"
    assert result["kind"] == "numerical"
    assert result["diagnostic"]["error"] == "DegenerateEnsemble"


def test_predict_propose_and_gradient_chain(toy):
    counter = EvalCounter()
    rng = RngStream(8)
    outer = outer_for(toy, counter)["outer"]

    predicted = ProposalAgent().execute({**toy, "operation": "predict", "n_inner": 15, "rng": rng,
                                         "counter": counter})
    assert predicted["status"] == "success"
    assert predicted["cost"] == 15

    proposed = ProposalAgent().execute({"operation": "propose", "outer": outer, "stats": predicted["stats"],
                                        "rng": rng})
    assert proposed["status"] == "success"
    assert proposed["cost"] == 0
    assert len(proposed["proposals"]) == 1

    before = counter.count
    gradient = GradientAgent().execute({"operation": "gradient", "outer": outer,
                                        "proposals": proposed["proposals"], "model": toy["model"],
                                        "measurement": toy["measurement"], "counter": counter})
    assert gradient["status"] == "success"
    assert gradient["cost"] == 15
    assert counter.count - before == 15
    assert gradient["estimate"].value.shape == (2,)


def test_diagnostics_ranks_by_conservative_ess(toy):
    counter = EvalCounter()
    outer = outer_for(toy, counter)["outer"]
    stats = ProposalAgent().execute({**toy, "operation": "predict", "n_inner": 15, "rng": RngStream(2),
                                     "counter": counter})["stats"]
    result = DiagnosticsAgent().execute({"outer": outer, "stats": stats, "bins": 5})
    assert result["status"] == "success"
    ranked = result["ranked"]
    assert list(ranked["rank"]) == list(range(1, 21))
    assert np.all(np.diff(ranked["ess_conservative"].to_numpy()) >= 0)
    assert int(ranked["problematic"].sum()) == result["n_problematic"]
    assert int(result["histogram"]["count"].sum()) == 20
    result["grouping"].validate(20)


def test_variance_study_reports_three_variants(toy):
    counter = EvalCounter()
    rng = RngStream(3)
    outer = outer_for(toy, counter, n=10)["outer"]
    problem = GradientProblem(model=toy["model"], prior=PRIOR, n_outer=10, n_inner=10)
    before = counter.count
    result = GradientAgent().execute({"operation": "variance_study", "problem": problem, "outer": outer,
                                      "measurement": toy["measurement"], "rng": rng, "counter": counter,
                                      "repeats": 5})
    assert result["status"] == "success"
    assert result["cost"] == counter.count - before
    assert len(result["table"]) == 6
    assert (result["table"]["std"] >= 0).all()


def test_calibration_agent_advances_one_stage():
    setup = SequentialSetup(grid_size=32, belief_size=5, candidate_size=3, n_outer=10, n_inner=10,
                            training_steps=2, chunk=8)
    state = SeqState.initial(setup, 0)
    counter, truth = EvalCounter(), EvalCounter()
    result = CalibrationAgent().execute({"state": state, "setup": setup, "seed": 0, "counter": counter,
                                         "truth_counter": truth})
    assert result["status"] == "success"
    assert result["state"].stage == 1
    assert sum(result["report"].ledger.values()) == counter.count


def test_memory_module_manifest_and_ledger(tmp_path):
    memory = MemoryModule(str(tmp_path / "out"))
    memory.start_run({"seed": 1}, "abc", 1, "run")
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["status"] == "running"

    memory.record_cost(1, "outer", 10)
    memory.record_cost(1, "predict", 5)
    memory.write_table("ess.csv", pd.DataFrame({"rank": [1]}))
    memory.write_json("stages/stage_001.json", {"stage": 1})
    assert memory.ledger_total() == 15
    assert memory.execute({"operation": "get_ledger"})["total"] == 15

    memory.finish_run("success", forward_total=15, truth_total=3)
    manifest = memory.load_manifest()
    assert manifest["status"] == "success"
    assert manifest["ledger_total"] == manifest["forward_solves"] == 15
    assert "ledger.csv" in manifest["files"]
    assert manifest["schemas"]["ess.csv"] == SCHEMAS["ess.csv"]
    assert "stages/stage_001.json" not in manifest["schemas"]
    ledger = pd.read_csv(tmp_path / "out" / "ledger.csv")
    assert list(ledger.columns) == ["stage", "column", "solves"]


def test_memory_module_without_manifest(tmp_path):
    result = MemoryModule(str(tmp_path)).execute({"operation": "get_manifest"})
    assert result["status"] == "failed"


def test_summary_agent_renders_ledger(tmp_path):
    memory = MemoryModule(str(tmp_path))
    memory.start_run({"experiment": "linear-toy"}, "0123456789abcdef0123", 4, "run")
    memory.record_cost(0, "outer", 20)
    memory.write_table("oracle_comparison.csv", pd.DataFrame({
        "quantity": ["mean_0"], "oracle": [0.5], "estimate": [0.49],
        "abs_deviation": [0.01], "max_deviation": [0.01],
    }))
    memory.finish_run("success", forward_total=20, truth_total=0)

    result = SummaryAgent().execute({"output_dir": str(tmp_path)})
    assert result["status"] == "success"
    summary = result["summary"]
    assert "linear-toy" in summary
    assert "| outer | 20 | 20 |" in summary
    assert "mean_0" in summary


def test_summary_agent_needs_manifest(tmp_path):
    assert SummaryAgent().execute({"output_dir": str(tmp_path)})["status"] == "failed"
