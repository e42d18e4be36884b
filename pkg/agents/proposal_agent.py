# agents/proposal_agent.py
"""Proposal Agent for building pooled EKI proposal ensembles."""

from typing import Any, Dict

from gppbed.eki import predict
from gppbed.errors import GppBedError
from gppbed.isampling import build_proposals, trivial_grouping
from gppbed.statcore import STREAM_EKI, STREAM_PRIOR, sample_gaussian
from .base_agent import BaseAgent


class ProposalAgent(BaseAgent):
    """Agent responsible for the EKI prediction step and the pooled updates."""

    def __init__(self):
        super().__init__(
            name="ProposalAgent",
            description="Runs one EKI prediction and maps the prior ensemble to pooled proposals"
        )

    def execute(self, input_data: Dict[str, Any]) -> Dict[str, Any]:
        """Run an EKI operation.

        Args:
            input_data: Dictionary with 'operation' ('predict' or 'propose').
                predict needs 'model', 'prior', 'measurement', 'n_inner', 'rng', 'counter'.
                propose needs 'outer', 'stats', 'rng'; 'grouping' defaults to a single
                global proposal.

        Returns:
            Dictionary with statistics or proposal sets
        """
        operation = input_data.get('operation', 'predict')
        try:
            if operation == 'predict':
                return self._predict(input_data)
            elif operation == 'propose':
                return self._propose(input_data)
        except GppBedError as e:
            return self.numerical_failure(e)
        return {
            "error": f"Unknown operation: {operation}",
            "kind": "input",
            "status": "failed"
        }

    def _predict(self, input_data: Dict[str, Any]) -> Dict[str, Any]:
        failure = self.missing_fields(input_data, ['model', 'prior', 'measurement', 'n_inner', 'rng', 'counter'])
        if failure:
            return failure
        counter = input_data['counter']
        n_inner = int(input_data['n_inner'])
        self.log_execution(f"Predicting with a prior ensemble of {n_inner} members")

        start = counter.count
        ensemble = sample_gaussian(input_data['prior'], n_inner, input_data['rng'].spawn(STREAM_PRIOR))
        stats = predict(ensemble, input_data['model'], input_data['measurement'], counter,
                        threads=input_data.get('threads', 1))
        return {
            "stats": stats,
            "cost": counter.count - start,
            "status": "success"
        }

    def _propose(self, input_data: Dict[str, Any]) -> Dict[str, Any]:
        failure = self.missing_fields(input_data, ['outer', 'stats', 'rng'])
        if failure:
            return failure
        outer = input_data['outer']
        grouping = input_data.get('grouping') or trivial_grouping(outer.size)
        proposals = build_proposals(outer, grouping, input_data['stats'], input_data['rng'].spawn(STREAM_EKI),
                                    perturb=input_data.get('perturb', True))
        self.log_execution(f"Built {len(proposals)} pooled proposals without forward solves")
        return {
            "proposals": proposals,
            "cost": 0,
            "status": "success"
        }
