# agents/summary_agent.py
"""Summary Writer Agent for generating run reports."""

import json
import os
from typing import Any, Dict, Optional

import pandas as pd

from .base_agent import BaseAgent


class SummaryAgent(BaseAgent):
    """Agent responsible for generating the markdown report of a finished run."""

    def __init__(self):
        super().__init__(
            name="SummaryAgent",
            description="Generates markdown summary reports from a run's output directory"
        )

    def execute(self, input_data: Dict[str, Any]) -> Dict[str, Any]:
        """Generate summary report.

        Args:
            input_data: Dictionary containing 'output_dir'

        Returns:
            Dictionary with markdown summary
        """
        failure = self.missing_fields(input_data, ['output_dir'])
        if failure:
            return failure

        output_dir = input_data['output_dir']
        manifest_path = os.path.join(output_dir, "manifest.json")
        if not os.path.exists(manifest_path):
            return {"error": f"No manifest found in {output_dir}", "kind": "input", "status": "failed"}

        self.log_execution(f"Generating summary report for {output_dir}")
        with open(manifest_path, 'r') as f:
            manifest = json.load(f)

        summary = self._generate_markdown_summary(manifest, output_dir)
        self.log_execution("Summary report generated")

        return {
            "summary": summary,
            "status": "success"
        }

    def _read(self, output_dir: str, name: str) -> Optional[pd.DataFrame]:
        path = os.path.join(output_dir, name)
        return pd.read_csv(path) if os.path.exists(path) else None

    def _generate_markdown_summary(self, manifest: Dict[str, Any], output_dir: str) -> str:
        """Generate markdown formatted summary.

        Args:
            manifest: Parsed manifest.json
            output_dir: Directory holding the result tables

        Returns:
            Markdown formatted summary string
        """
        config = manifest.get("config", {})
        summary = f"""# Experiment Summary Report

## Run Information
- **Experiment**: {config.get('experiment', 'unknown')}
- **Status**: {manifest.get('status')}
- **Seed**: {manifest.get('seed')}
- **Config hash**: `{manifest.get('config_hash', '')[:16]}`
- **Library version**: {manifest.get('library_version')}
- **Forward solves**: {manifest.get('forward_solves', 'N/A')} (truth system: {manifest.get('truth_solves', 'N/A')})
- **Wall time**: {manifest.get('wall_time_s', 0.0):.1f} s
"""

        ledger = self._read(output_dir, "ledger.csv")
        if ledger is not None and not ledger.empty:
            table = ledger.pivot_table(index="column", columns="stage", values="solves",
                                       aggfunc="sum", fill_value=0)
            summary += "\n## Forward-Solve Ledger\n\n| Column | " + " | ".join(
                f"Stage {s}" for s in table.columns) + " | Total |\n"
            summary += "|" + "---|" * (len(table.columns) + 2) + "\n"
            for column, row in table.iterrows():
                summary += f"| {column} | " + " | ".join(str(int(v)) for v in row) + f" | {int(row.sum())} |\n"

        stages = self._read(output_dir, "stages.csv")
        if stages is not None and not stages.empty:
            summary += "\n## Stages\n\n| Stage | Time | Physical design | Error design | MAP location |\n"
            summary += "|---|---|---|---|---|\n"
            for _, row in stages.iterrows():
                summary += (f"| {int(row['stage'])} | {row['time']:.3f} | ({row['d_phys_x']:.3f}, {row['d_phys_y']:.3f}) "
                            f"| ({row['d_err_x']:.3f}, {row['d_err_y']:.3f}) | ({row['map_x']:.3f}, {row['map_y']:.3f}) |\n")

        ess = self._read(output_dir, "ess.csv")
        if ess is not None and not ess.empty:
            n_problematic = int(ess["problematic"].sum())
            groups = sorted(g for g in ess["group"].dropna().unique() if str(g).startswith("group"))
            summary += (f"\n## ESS Diagnostic\n- **Outer samples**: {len(ess)}\n"
                        f"- **Problematic**: {n_problematic}\n"
                        f"- **Groups**: {', '.join(groups) if groups else 'none'}\n"
                        f"- **Lowest conservative ESS**: {ess['ess_conservative'].min():.2f}\n")

        oracle = self._read(output_dir, "oracle_comparison.csv")
        if oracle is not None and not oracle.empty:
            summary += "\n## Oracle Comparison\n\n| Quantity | Oracle | Estimate | Deviation |\n|---|---|---|---|\n"
            for _, row in oracle.iterrows():
                summary += f"| {row['quantity']} | {row['oracle']:.4f} | {row['estimate']:.4f} | {row['abs_deviation']:.2e} |\n"

        std = self._read(output_dir, "gradient_std.csv")
        if std is not None and not std.empty:
            summary += "\n## Gradient Standard Deviation\n\n| Method | Inner size | Total inner | Std per component |\n|---|---|---|---|\n"
            for (method, inner, total), block in std.groupby(["method", "inner_size", "total_inner"], sort=False):
                values = ", ".join(f"{v:.4g}" for v in block.sort_values("component")["std"])
                summary += f"| {method} | {inner} | {total} | [{values}] |\n"

        summary += "\n---\n*Generated from the files in this output directory.*\n"
        return summary
