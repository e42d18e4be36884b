# agents/gradient_agent.py
"""Gradient Agent for grouped EIG design gradients and estimator-variance studies."""

from typing import Any, Dict

from gppbed.eig import eig_gradient, variance_study
from gppbed.errors import GppBedError
from .base_agent import BaseAgent


class GradientAgent(BaseAgent):
    """Agent responsible for estimating the EIG design gradient."""

    def __init__(self):
        super().__init__(
            name="GradientAgent",
            description="Estimates EIG design gradients with pooled importance sampling"
        )

    def execute(self, input_data: Dict[str, Any]) -> Dict[str, Any]:
        """Estimate a gradient or run a variance study.

        Args:
            input_data: Dictionary with 'operation' ('gradient' or 'variance_study').
                gradient needs 'outer', 'proposals', 'model', 'measurement', 'counter'.
                variance_study needs 'problem', 'outer', 'measurement', 'rng',
                'counter' and optional 'repeats'.

        Returns:
            Dictionary with the estimate or the std table
        """
        operation = input_data.get('operation', 'gradient')
        try:
            if operation == 'gradient':
                return self._gradient(input_data)
            elif operation == 'variance_study':
                return self._variance_study(input_data)
        except GppBedError as e:
            return self.numerical_failure(e)
        return {"error": f"Unknown operation: {operation}", "kind": "input", "status": "failed"}

    def _gradient(self, input_data: Dict[str, Any]) -> Dict[str, Any]:
        failure = self.missing_fields(input_data, ['outer', 'proposals', 'model', 'measurement', 'counter'])
        if failure:
            return failure
        estimate = eig_gradient(
            input_data['outer'], input_data['proposals'], input_data['model'],
            input_data['measurement'], input_data['counter'], threads=input_data.get('threads', 1),
        )
        self.log_execution(f"Gradient {estimate.value} from {estimate.n_sets} proposal sets "
                           f"({estimate.forward_cost} forward solves)")
        return {
            "estimate": estimate,
            "cost": estimate.forward_cost,
            "status": "success"
        }

    def _variance_study(self, input_data: Dict[str, Any]) -> Dict[str, Any]:
        failure = self.missing_fields(input_data, ['problem', 'outer', 'measurement', 'rng', 'counter'])
        if failure:
            return failure
        counter = input_data['counter']
        repeats = int(input_data.get('repeats', 10))
        self.log_execution(f"Variance study with {repeats} inner reseeds")
        start = counter.count
        table = variance_study(input_data['problem'], input_data['outer'], input_data['measurement'],
                               input_data['rng'], counter, repeats=repeats)
        return {
            "table": table,
            "cost": counter.count - start,
            "status": "success"
        }
