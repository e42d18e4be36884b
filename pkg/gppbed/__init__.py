"""Grouped pooled-posterior proposals for Bayesian experimental design."""

__version__ = "0.1.0"

from .errors import GppBedError
from .statcore import Ensemble, Gaussian, RngStream

__all__ = ["Ensemble", "Gaussian", "GppBedError", "RngStream", "__version__"]
