# orchestrator.py
"""Experiment orchestrator and command-line entry point."""

import argparse
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from agents.calibration_agent import CalibrationAgent
from agents.diagnostics_agent import DiagnosticsAgent
from agents.gradient_agent import GradientAgent
from agents.memory_module import MemoryModule
from agents.outer_sampler_agent import OuterSamplerAgent
from agents.proposal_agent import ProposalAgent
from agents.summary_agent import SummaryAgent
from gppbed.config import RunConfig, config_hash, load_config
from gppbed.eig import GradientProblem, eig_value_gaussian_linear
from gppbed.errors import ConfigError, GppBedError
from gppbed.forward import EvalCounter, Measurement, eval_parameter_sensitivity, linear_toy_model
from gppbed.isampling import Grouping
from gppbed.oracle import ConjugateSpec, distance_table, fd_gradient, pooled_posterior_closed_form
from gppbed.seqbed import SeqState, stage_time
from gppbed.statcore import STREAM_OUTER, Gaussian, RngStream

logging.basicConfig(level=logging.INFO)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
CHECK_DESIGN = (0.5, 0.5)


class ExperimentOrchestrator:
    """Coordinates the agents for one configured run."""

    def __init__(self, config: RunConfig):
        """Initialize the orchestrator and all agents.

        Args:
            config: Validated run configuration
        """
        self.logger = logging.getLogger("ExperimentOrchestrator")
        self.config = config
        self.counter = EvalCounter()
        self.truth_counter = EvalCounter()
        self.rng = RngStream(config.seed)

        self.outer_sampler = OuterSamplerAgent()
        self.proposal_agent = ProposalAgent()
        self.diagnostics_agent = DiagnosticsAgent()
        self.gradient_agent = GradientAgent()
        self.calibration_agent = CalibrationAgent()
        self.memory = MemoryModule(config.output_dir)

        self.logger.info(f"Orchestrator initialized for experiment {config.experiment}")

    # ------------------------------------------------------------------
    # Entry points
    # ------------------------------------------------------------------
    def run(self) -> Dict[str, Any]:
        """Run the configured experiment end to end."""
        handlers = {
            "linear-toy": self._run_linear_toy,
            "parametric": self._run_sequential,
            "structural": self._run_sequential,
            "diagnostics": self._run_diagnostics,
        }
        return self._managed("run", handlers[self.config.experiment])

    def diagnose(self) -> Dict[str, Any]:
        """ESS and grouping report at one design, without design ascent."""
        return self._managed("diagnose", self._run_diagnostics)

    def _managed(self, command: str, handler) -> Dict[str, Any]:
        self.memory.start_run(self.config.model_dump(mode="json"), config_hash(self.config),
                              self.config.seed, command)
        try:
            result = handler()
        except GppBedError as e:
            result = {"error": str(e), "kind": "numerical", "diagnostic": e.to_dict(), "status": "failed"}
        except Exception as e:
            self.logger.error(f"Error during {command}: {e}")
            result = {"error": f"{type(e).__name__}: {e}", "kind": "input", "status": "failed"}

        if result.get("status") != "success":
            self.logger.error(f"Run failed: {result.get('error')}")
            if result.get("kind") == "numerical":
                self.memory.write_json("failure.json", result.get("diagnostic", {"error": result.get("error")}))
        self.memory.finish_run(result.get("status", "failed"), self.counter.count, self.truth_counter.count)
        result["forward_solves"] = self.counter.count
        result["ledger_total"] = self.memory.ledger_total()
        return result

    # ------------------------------------------------------------------
    # Shared pipeline steps
    # ------------------------------------------------------------------
    def _pipeline(self, model, prior: Gaussian, meas: Measurement, rng: RngStream, stage: int,
                  with_gradient: bool = True, grouping_enabled: Optional[bool] = None) -> Dict[str, Any]:
        """Outer samples, prediction, diagnostic, proposals and (optionally) the gradient."""
        config = self.config
        common = {"model": model, "prior": prior, "measurement": meas, "counter": self.counter,
                  "threads": config.threads}

        outer_result = self.outer_sampler.execute({**common, "n_outer": config.outer_size,
                                                   "rng": rng.spawn(STREAM_OUTER)})
        if outer_result.get("status") != "success":
            return outer_result
        self.memory.record_cost(stage, "outer", outer_result["cost"])
        outer = outer_result["outer"]

        predict_result = self.proposal_agent.execute({**common, "operation": "predict",
                                                      "n_inner": config.inner_size, "rng": rng})
        if predict_result.get("status") != "success":
            return predict_result
        self.memory.record_cost(stage, "predict", predict_result["cost"])
        stats = predict_result["stats"]

        diagnostics = self.diagnostics_agent.execute({
            "outer": outer, "stats": stats, "threshold": config.threshold,
            "n_groups": config.n_groups, "trigger_fraction": config.trigger_fraction,
        })
        if diagnostics.get("status") != "success":
            return diagnostics

        use_grouping = config.use_grouping if grouping_enabled is None else grouping_enabled
        grouping: Optional[Grouping] = diagnostics["grouping"] if use_grouping else None
        results = {"outer": outer, "stats": stats, "diagnostics": diagnostics, "status": "success"}
        if not with_gradient:
            return results

        proposal_result = self.proposal_agent.execute({"operation": "propose", "outer": outer, "stats": stats,
                                                       "grouping": grouping, "rng": rng})
        if proposal_result.get("status") != "success":
            return proposal_result
        results["proposals"] = proposal_result["proposals"]

        gradient_result = self.gradient_agent.execute({**common, "operation": "gradient", "outer": outer,
                                                       "proposals": results["proposals"]})
        if gradient_result.get("status") != "success":
            return gradient_result
        self.memory.record_cost(stage, "proposal", gradient_result["cost"])
        results["estimate"] = gradient_result["estimate"]
        return results

    def _save_diagnostics(self, diagnostics: Dict[str, Any]):
        self.memory.write_table("ess.csv", diagnostics["ranked"])
        self.memory.write_table("ess_histogram.csv", diagnostics["histogram"])
        self.memory.write_json("grouping.json", diagnostics["grouping"].to_dict())

    # ------------------------------------------------------------------
    # Experiments
    # ------------------------------------------------------------------
    def _run_diagnostics(self) -> Dict[str, Any]:
        setup = self.config.setup()
        state = SeqState.initial(setup, self.config.seed)
        model = setup.error_model(np.asarray(setup.truth_location))
        prior = setup.error_prior(state.theta_error)
        meas = Measurement(CHECK_DESIGN, stage_time(1), setup.noise_var)

        results = self._pipeline(model, prior, meas, self.rng, stage=0, with_gradient=False)
        if results.get("status") != "success":
            return results
        self._save_diagnostics(results["diagnostics"])
        return {
            "status": "success",
            "message": "Diagnostics completed",
            "n_problematic": results["diagnostics"]["n_problematic"],
            "n_groups": results["diagnostics"]["grouping"].n_groups,
        }

    def _run_linear_toy(self) -> Dict[str, Any]:
        config = self.config
        model = linear_toy_model(noise_var=config.toy_noise_var)
        prior = Gaussian(np.zeros(model.parameter_dim), np.eye(model.parameter_dim))
        designs = np.stack([np.linspace(-0.5, 1.5, config.toy_designs),
                            np.full(config.toy_designs, 0.3)], axis=1)

        check_rows: List[Dict[str, Any]] = []
        for k, design in enumerate(designs):
            meas = Measurement(design, noise_var=config.toy_noise_var)
            results = self._pipeline(model, prior, meas, self.rng.spawn(k), stage=k)
            if results.get("status") != "success":
                return results

            def eig_at(d):
                return eig_value_gaussian_linear(prior, model.design_map, model.noise.cov, d)

            reference = fd_gradient(eig_at, design, h=1e-4)
            estimate = results["estimate"]
            for c in range(design.size):
                check_rows.append({
                    "design_x": design[0], "design_y": design[1], "component": c,
                    "estimate": estimate.value[c], "finite_difference": reference[c],
                    "standard_error": estimate.standard_error[c],
                })

            if k == 0:
                self._save_diagnostics(results["diagnostics"])
                self._linear_oracle_tables(model, prior, design, results)

        self.memory.write_table("gradient_check.csv", pd.DataFrame(check_rows))
        return {"status": "success", "message": "Linear-Gaussian toy completed"}

    def _linear_oracle_tables(self, model, prior: Gaussian, design: np.ndarray, results: Dict[str, Any]):
        """EKI-vs-closed-form comparison and the per-sample distance scatter."""
        outer = results["outer"]
        spec = ConjugateSpec(prior, model.matrix(design), model.noise.cov)

        global_proposal = self.proposal_agent.execute({"operation": "propose", "outer": outer,
                                                       "stats": results["stats"], "rng": self.rng})
        ensemble = global_proposal["proposals"][0].ensemble
        self._oracle_rows(pooled_posterior_closed_form(spec, outer), ensemble.members)

        grouping = results["diagnostics"]["grouping"]
        labels = grouping.labels()
        group_posteriors = {label: pooled_posterior_closed_form(spec, outer.subset(idx))
                            for label, idx in grouping.index_sets()}
        self.memory.write_table("distances.csv", distance_table(spec, outer, labels, group_posteriors))

    def _oracle_rows(self, oracle: Gaussian, members: np.ndarray):
        mean = members.mean(axis=0)
        var = members.var(axis=0, ddof=1)
        rows = []
        for k in range(oracle.dim):
            rows.append({"quantity": f"mean_{k}", "oracle": oracle.mean[k], "estimate": mean[k]})
            rows.append({"quantity": f"var_{k}", "oracle": oracle.cov[k, k], "estimate": var[k]})
        table = pd.DataFrame(rows)
        table["abs_deviation"] = (table["estimate"] - table["oracle"]).abs()
        table["max_deviation"] = table["abs_deviation"].max()
        self.memory.write_table("oracle_comparison.csv", table)

    def _pooled_check(self, setup, state: SeqState) -> Dict[str, Any]:
        """Pooled-posterior reproduction for the strength parameter before the first stage."""
        model = setup.error_model(np.asarray(setup.truth_location))
        prior = setup.error_prior(state.theta_error)
        meas = Measurement(CHECK_DESIGN, stage_time(1), setup.noise_var)
        rng = self.rng.spawn(0)

        results = self._pipeline(model, prior, meas, rng, stage=0, with_gradient=False,
                                 grouping_enabled=False)
        if results.get("status") != "success":
            return results
        proposal = self.proposal_agent.execute({"operation": "propose", "outer": results["outer"],
                                                "stats": results["stats"], "rng": rng})
        if proposal.get("status") != "success":
            return proposal

        start = self.counter.count
        _, sensitivity = eval_parameter_sensitivity(model, state.theta_error, meas, self.counter)
        self.memory.record_cost(0, "oracle", self.counter.count - start)
        spec = ConjugateSpec(prior, sensitivity, model.noise_covariance(meas))
        self._oracle_rows(pooled_posterior_closed_form(spec, results["outer"]),
                          proposal["proposals"][0].ensemble.members)
        return {"status": "success"}

    def _variance_check(self, setup, state: SeqState) -> Dict[str, Any]:
        model = setup.error_model(np.asarray(setup.truth_location))
        problem = GradientProblem(
            model=model, prior=setup.error_prior(state.theta_error),
            n_outer=setup.n_outer, n_inner=setup.n_inner, n_groups=setup.n_groups,
            threshold=setup.threshold, trigger_fraction=setup.trigger_fraction, threads=setup.threads,
        )
        meas = Measurement(CHECK_DESIGN, stage_time(1), setup.noise_var)
        outer_result = self.outer_sampler.execute({
            "model": model, "prior": problem.prior, "measurement": meas, "n_outer": setup.n_outer,
            "rng": self.rng.spawn(0).spawn(STREAM_OUTER), "counter": self.counter, "threads": setup.threads,
        })
        if outer_result.get("status") != "success":
            return outer_result
        self.memory.record_cost(0, "variance_outer", outer_result["cost"])
        study = self.gradient_agent.execute({
            "operation": "variance_study", "problem": problem, "outer": outer_result["outer"],
            "measurement": meas, "rng": self.rng.spawn(0), "counter": self.counter,
            "repeats": self.config.repeats,
        })
        if study.get("status") != "success":
            return study
        self.memory.record_cost(0, "variance_study", study["cost"])
        self.memory.write_table("gradient_std.csv", study["table"])
        return {"status": "success"}

    def _run_sequential(self) -> Dict[str, Any]:
        config = self.config
        setup = config.setup()
        state = SeqState.initial(setup, config.seed)

        if setup.case == "parametric":
            check = self._pooled_check(setup, state)
            if check.get("status") != "success":
                return check
        if config.variance_study:
            check = self._variance_check(setup, state)
            if check.get("status") != "success":
                return check

        nodes = setup.belief_nodes()
        zx, zy = setup.truth().mesh
        stage_rows, posterior_rows, field_rows = [], [], []

        for _ in range(config.stages):
            result = self.calibration_agent.execute({
                "state": state, "setup": setup, "seed": config.seed,
                "counter": self.counter, "truth_counter": self.truth_counter,
            })
            if result.get("status") != "success":
                return result
            state, report = result["state"], result["report"]
            for column, solves in report.ledger.items():
                self.memory.record_cost(report.stage, column, solves)

            self.memory.write_json(f"stages/stage_{report.stage:03d}.json", report.to_dict())
            stage_rows.append({
                "stage": report.stage, "time": report.time,
                "d_phys_x": report.design_physical[0], "d_phys_y": report.design_physical[1],
                "d_err_x": report.design_error[0], "d_err_y": report.design_error[1],
                "map_x": report.map_location[0], "map_y": report.map_location[1],
                "theta_error_norm": float(np.linalg.norm(report.theta_error)),
            })
            posterior_rows.append(pd.DataFrame({
                "stage": report.stage, "theta_x": nodes[:, 0], "theta_y": nodes[:, 1],
                "weight": state.posterior,
            }))
            field_rows.append(pd.DataFrame({
                "stage": report.stage, "z_x": zx.ravel(), "z_y": zy.ravel(),
                "rel_error": report.field_error.ravel(),
            }))

        self.memory.write_table("stages.csv", pd.DataFrame(stage_rows))
        self.memory.write_table("posterior.csv", pd.concat(posterior_rows, ignore_index=True))
        self.memory.write_table("field_error.csv", pd.concat(field_rows, ignore_index=True))
        return {
            "status": "success",
            "message": f"{setup.case.capitalize()} sequential design completed",
            "final_map": state.map_location.tolist(),
            "final_theta_error": state.theta_error.tolist(),
        }


def exit_code(result: Dict[str, Any]) -> int:
    if result.get("status") == "success":
        return EXIT_OK
    return EXIT_NUMERICAL if result.get("kind") == "numerical" else EXIT_CONFIG


def _finish(result: Dict[str, Any]) -> int:
    printable = {k: v for k, v in result.items() if k != "diagnostic"}
    print(json.dumps(printable, indent=2, default=str))
    return exit_code(result)


def run_experiment(config: RunConfig) -> int:
    """Run the configured experiment and return its exit code."""
    return _finish(ExperimentOrchestrator(config).run())


def diagnose(config: RunConfig) -> int:
    """ESS and grouping report at the check design; costs N + J forward solves."""
    return _finish(ExperimentOrchestrator(config).diagnose())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Grouped pooled-posterior experimental design runner")
    commands = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("run", "run the configured experiment"),
                            ("diagnose", "ESS and grouping report without design ascent"),
                            ("report", "render summary.md from an output directory")):
        sub = commands.add_parser(name, help=help_text)
        sub.add_argument('--config', type=str, default=None, help='KEY=VALUE configuration file')
        sub.add_argument('--seed', type=int, default=None, help='seed override (unsigned 64-bit)')
        sub.add_argument('--out', type=str, default=None, help='output directory override')
        sub.add_argument('--threads', type=int, default=None, help='worker threads for forward batches')
    return parser


def report(output_dir: str) -> int:
    result = SummaryAgent().execute({"output_dir": output_dir})
    if result.get("status") != "success":
        print(result.get("error"), file=sys.stderr)
        return EXIT_CONFIG
    with open(os.path.join(output_dir, "summary.md"), 'w') as f:
        f.write(result["summary"])
    print(f"Wrote {os.path.join(output_dir, 'summary.md')}")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point for CLI usage."""
    args = build_parser().parse_args(argv)

    try:
        config = load_config(args.config, seed=args.seed, output_dir=args.out, threads=args.threads)
    except ConfigError as e:
        print(f"Configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "report":
        return report(config.output_dir)

    try:
        os.makedirs(config.output_dir, exist_ok=True)
    except OSError as e:
        print(f"Output directory not writable: {e}", file=sys.stderr)
        return EXIT_CONFIG

    return run_experiment(config) if args.command == "run" else diagnose(config)


if __name__ == "__main__":
    sys.exit(main())
