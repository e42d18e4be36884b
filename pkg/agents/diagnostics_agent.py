# agents/diagnostics_agent.py
"""Diagnostics Agent for ranking outer samples by ESS and grouping the weak ones."""

from typing import Any, Dict, List

import numpy as np
import pandas as pd

from gppbed.errors import GppBedError
from gppbed.isampling import DEFAULT_GROUPS, DEFAULT_TRIGGER_FRACTION, ess_histogram, make_grouping
from gppbed.pooling import PoolingWeights, make_pooled
from .base_agent import BaseAgent


class DiagnosticsAgent(BaseAgent):
    """Agent responsible for the conservative ESS diagnostic and the induced grouping."""

    def __init__(self):
        super().__init__(
            name="DiagnosticsAgent",
            description="Ranks outer samples by conservative ESS and clusters the problematic ones"
        )

    def execute(self, input_data: Dict[str, Any]) -> Dict[str, Any]:
        """Diagnose proposal quality per outer sample.

        Args:
            input_data: Dictionary containing 'outer' and 'stats'; optional
                'threshold' (defaults to the parameter dimension), 'n_groups',
                'trigger_fraction', 'bins'

        Returns:
            Dictionary with the grouping, a ranked ESS table and histogram rows
        """
        failure = self.missing_fields(input_data, ['outer', 'stats'])
        if failure:
            return failure

        outer = input_data['outer']
        stats = input_data['stats']
        J = stats.size
        threshold = input_data.get('threshold') or float(stats.ensemble.dim)

        self.log_execution(f"Diagnosing {outer.size} outer samples (threshold {threshold})")

        try:
            pooled = make_pooled(outer, PoolingWeights.uniform(outer.size))
            grouping = make_grouping(
                outer, pooled, outer.noise_covs[0], stats, J, threshold,
                n_groups=input_data.get('n_groups', DEFAULT_GROUPS),
                trigger_fraction=input_data.get('trigger_fraction', DEFAULT_TRIGGER_FRACTION),
            )
        except GppBedError as e:
            return self.numerical_failure(e)

        ranked = self._rank(outer.observations, grouping.ess, grouping.labels(), threshold)
        counts, edges = ess_histogram(grouping.ess, J, bins=input_data.get('bins', 20))
        histogram = pd.DataFrame({
            "bin_left": edges[:-1],
            "bin_right": edges[1:],
            "count": counts,
        })

        n_problematic = int(grouping.problematic.size)
        self.log_execution(
            f"{n_problematic} problematic samples; {grouping.n_groups} groups formed"
        )

        return {
            "grouping": grouping,
            "ranked": ranked,
            "histogram": histogram,
            "n_problematic": n_problematic,
            "pooled": pooled,
            "status": "success"
        }

    def _rank(self, observations: np.ndarray, ess: np.ndarray, labels: List[str],
              threshold: float) -> pd.DataFrame:
        """Table of outer samples sorted by conservative ESS (lowest first)."""
        table = pd.DataFrame({
            "sample": np.arange(ess.size),
            "y": observations[:, 0],
            "ess_conservative": ess,
            "problematic": ess < threshold,
            "group": labels,
        })
        table = table.sort_values(["ess_conservative", "sample"], kind="mergesort").reset_index(drop=True)
        table.insert(0, "rank", np.arange(1, len(table) + 1))
        return table
