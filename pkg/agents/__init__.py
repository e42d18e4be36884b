# agents/__init__.py
"""Experiment Pipeline Agents Package."""

from .base_agent import BaseAgent
from .outer_sampler_agent import OuterSamplerAgent
from .proposal_agent import ProposalAgent
from .diagnostics_agent import DiagnosticsAgent
from .gradient_agent import GradientAgent
from .calibration_agent import CalibrationAgent
from .summary_agent import SummaryAgent
from .memory_module import MemoryModule

__all__ = [
    'BaseAgent',
    'OuterSamplerAgent',
    'ProposalAgent',
    'DiagnosticsAgent',
    'GradientAgent',
    'CalibrationAgent',
    'SummaryAgent',
    'MemoryModule'
]
