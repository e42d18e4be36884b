# agents/calibration_agent.py
"""Calibration Agent for one stage of the sequential design loop."""

from typing import Any, Dict

from gppbed.errors import GppBedError
from gppbed.seqbed import run_stage
from .base_agent import BaseAgent


class CalibrationAgent(BaseAgent):
    """Agent responsible for advancing the sequential design state by one stage."""

    def __init__(self):
        super().__init__(
            name="CalibrationAgent",
            description="Designs and assimilates the physical and error measurements of a stage"
        )

    def execute(self, input_data: Dict[str, Any]) -> Dict[str, Any]:
        """Run one stage.

        Args:
            input_data: Dictionary containing 'state', 'setup', 'seed', 'counter'
                and 'truth_counter'

        Returns:
            Dictionary with the new state and the stage report
        """
        failure = self.missing_fields(input_data, ['state', 'setup', 'seed', 'counter', 'truth_counter'])
        if failure:
            return failure

        state = input_data['state']
        self.log_execution(f"Starting stage {state.stage + 1}")
        try:
            new_state, report = run_stage(state, input_data['setup'], int(input_data['seed']),
                                          input_data['counter'], input_data['truth_counter'])
        except GppBedError as e:
            return self.numerical_failure(e)

        self.log_execution(
            f"Stage {report.stage} done: MAP {report.map_location.tolist()}, "
            f"{sum(report.ledger.values())} forward solves"
        )
        return {
            "state": new_state,
            "report": report,
            "status": "success"
        }
