# agents/memory_module.py
"""Memory Module for the run manifest, the cost ledger and result files."""

import json
import os
from typing import Any, Dict, List, Optional
from datetime import datetime

import pandas as pd

from gppbed import __version__
from .base_agent import BaseAgent

# Column units per result table; versioned in the manifest.
SCHEMAS: Dict[str, Dict[str, Any]] = {
    "ledger.csv": {"version": 1, "columns": {"stage": "index", "column": "label", "solves": "count"}},
    "ess.csv": {"version": 1, "columns": {"rank": "index", "sample": "index", "y": "observation units",
                                          "ess_conservative": "samples", "problematic": "bool",
                                          "group": "label"}},
    "ess_histogram.csv": {"version": 1, "columns": {"bin_left": "samples", "bin_right": "samples",
                                                    "count": "count"}},
    "posterior.csv": {"version": 1, "columns": {"stage": "index", "theta_x": "length", "theta_y": "length",
                                                "weight": "probability"}},
    "field_error.csv": {"version": 1, "columns": {"stage": "index", "z_x": "length", "z_y": "length",
                                                  "rel_error": "ratio"}},
    "stages.csv": {"version": 1, "columns": {"stage": "index", "time": "time", "d_phys_x": "length",
                                             "d_phys_y": "length", "d_err_x": "length", "d_err_y": "length",
                                             "map_x": "length", "map_y": "length",
                                             "theta_error_norm": "parameter units"}},
    "gradient_std.csv": {"version": 1, "columns": {"method": "label", "inner_size": "samples",
                                                   "total_inner": "samples", "component": "index",
                                                   "std": "gradient units"}},
    "distances.csv": {"version": 1, "columns": {"sample": "index", "y": "observation units",
                                                "w2_prior": "parameter units", "w2_pooled": "parameter units",
                                                "kl_prior": "nats", "kl_pooled": "nats", "group": "label",
                                                "w2_grouped": "parameter units", "kl_grouped": "nats"}},
    "oracle_comparison.csv": {"version": 1, "columns": {"quantity": "label", "oracle": "parameter units",
                                                        "estimate": "parameter units",
                                                        "abs_deviation": "parameter units",
                                                        "max_deviation": "parameter units"}},
    "gradient_check.csv": {"version": 1, "columns": {"design_x": "length", "design_y": "length",
                                                     "component": "index", "estimate": "nats/length",
                                                     "finite_difference": "nats/length",
                                                     "standard_error": "nats/length"}},
}


class MemoryModule(BaseAgent):
    """Module responsible for persisting run artifacts in the output directory."""

    def __init__(self, output_dir: str = "results"):
        super().__init__(
            name="MemoryModule",
            description="Writes the manifest, cost ledger and result tables of a run"
        )
        self.output_dir = output_dir
        self.ledger: List[Dict[str, Any]] = []
        self.files: List[str] = []
        self.manifest: Dict[str, Any] = {}
        self._started: Optional[datetime] = None

    def path(self, name: str) -> str:
        return os.path.join(self.output_dir, name)

    def start_run(self, config_dump: Dict[str, Any], config_hash: str, seed: int, command: str):
        """Create the output directory and write the manifest before any result."""
        os.makedirs(self.output_dir, exist_ok=True)
        self._started = datetime.now()
        self.manifest = {
            "status": "running",
            "command": command,
            "config_hash": config_hash,
            "seed": seed,
            "library_version": __version__,
            "started": self._started.isoformat(),
            "config": config_dump,
        }
        self._write_manifest()
        self.log_execution(f"Run started in {self.output_dir}")

    def record_cost(self, stage: int, column: str, solves: int):
        """Append one ledger entry."""
        self.ledger.append({"stage": int(stage), "column": column, "solves": int(solves)})

    def ledger_total(self) -> int:
        return int(sum(entry["solves"] for entry in self.ledger))

    def write_table(self, name: str, table: pd.DataFrame):
        table.to_csv(self.path(name), index=False)
        self._track(name)

    def write_json(self, name: str, payload: Any):
        target = self.path(name)
        os.makedirs(os.path.dirname(target), exist_ok=True)
        with open(target, 'w') as f:
            json.dump(payload, f, indent=2)
        self._track(name)

    def write_text(self, name: str, text: str):
        with open(self.path(name), 'w') as f:
            f.write(text)
        self._track(name)

    def finish_run(self, status: str, forward_total: int, truth_total: int,
                   extra: Optional[Dict[str, Any]] = None):
        """Write the ledger and close the manifest with cost totals and wall time."""
        self.write_table("ledger.csv", pd.DataFrame(self.ledger, columns=["stage", "column", "solves"]))
        wall = (datetime.now() - self._started).total_seconds() if self._started else 0.0
        self.manifest.update({
            "status": status,
            "forward_solves": int(forward_total),
            "truth_solves": int(truth_total),
            "ledger_total": self.ledger_total(),
            "wall_time_s": wall,
            "files": sorted(self.files),
            "schemas": {name: SCHEMAS[name] for name in sorted(self.files) if name in SCHEMAS},
        })
        if extra:
            self.manifest.update(extra)
        self._write_manifest()
        self.log_execution(f"Run finished with status {status} ({forward_total} forward solves)")

    def load_manifest(self) -> Dict[str, Any]:
        """Read the manifest of an existing output directory."""
        with open(self.path("manifest.json"), 'r') as f:
            return json.load(f)

    def _track(self, name: str):
        if name not in self.files:
            self.files.append(name)

    def _write_manifest(self):
        os.makedirs(self.output_dir, exist_ok=True)
        with open(self.path("manifest.json"), 'w') as f:
            json.dump(self.manifest, f, indent=2)

    def execute(self, input_data: Dict[str, Any]) -> Dict[str, Any]:
        """Execute memory operations.

        Args:
            input_data: Dictionary with operation type ('get_manifest' or 'get_ledger')

        Returns:
            Dictionary with the requested data
        """
        operation = input_data.get('operation', 'get_manifest')

        if operation == 'get_manifest':
            try:
                manifest = self.manifest or self.load_manifest()
            except (OSError, json.JSONDecodeError) as e:
                return {"error": f"No manifest in {self.output_dir}: {e}", "kind": "input", "status": "failed"}
            return {"manifest": manifest, "status": "success"}
        elif operation == 'get_ledger':
            return {"ledger": list(self.ledger), "total": self.ledger_total(), "status": "success"}
        else:
            return {
                "error": f"Unknown operation: {operation}",
                "kind": "input",
                "status": "failed"
            }
