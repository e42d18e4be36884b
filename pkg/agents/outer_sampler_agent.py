# agents/outer_sampler_agent.py
"""Outer Sampler Agent for drawing joint (parameter, observation) samples."""

from typing import Any, Dict

from gppbed.eig import generate_outer
from gppbed.errors import GppBedError
from .base_agent import BaseAgent


class OuterSamplerAgent(BaseAgent):
    """Agent responsible for simulating outer samples at a design."""

    def __init__(self):
        super().__init__(
            name="OuterSamplerAgent",
            description="Draws prior parameters and simulates noisy observations at a design"
        )

    def execute(self, input_data: Dict[str, Any]) -> Dict[str, Any]:
        """Generate the outer set.

        Args:
            input_data: Dictionary with 'model', 'prior', 'measurement', 'n_outer',
                'rng' and 'counter'; optional 'threads'

        Returns:
            Dictionary with the outer set and its forward cost
        """
        failure = self.missing_fields(input_data, ['model', 'prior', 'measurement', 'n_outer', 'rng', 'counter'])
        if failure:
            return failure

        n_outer = int(input_data['n_outer'])
        counter = input_data['counter']
        self.log_execution(f"Simulating {n_outer} outer samples at design {input_data['measurement'].design}")

        start = counter.count
        try:
            outer = generate_outer(
                input_data['prior'], input_data['model'], input_data['measurement'], n_outer,
                input_data['rng'], counter, threads=input_data.get('threads', 1),
            )
        except GppBedError as e:
            return self.numerical_failure(e)

        cost = counter.count - start
        self.log_execution(f"Generated {outer.size} outer samples ({cost} forward solves)")

        return {
            "outer": outer,
            "cost": cost,
            "status": "success"
        }
