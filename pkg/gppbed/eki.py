"""One-step stochastic ensemble Kalman inversion towards (grouped) pooled posteriors.

The prediction step is the only place forward solves happen. Every update,
including the per-group updates that build grouped proposals, is an affine map
of the same prior ensemble and the same predictions.
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Union
import logging

import numpy as np
from scipy import linalg

from .errors import GainSolveFailure
from .forward import EvalCounter, ForwardModel, Measurement, eval_forward_batch
from .pooling import OuterSet, PooledObservation, PoolingWeights, stacked_covariance, stacked_observation
from .statcore import Ensemble, Gaussian, RngStream, cross_covariance, sample_gaussian

logger = logging.getLogger(__name__)

GAIN_JITTER = 1e-10
FORMULATIONS = ("mean", "stacked")


@dataclass(frozen=True, eq=False)
class EkiStats:
    """Prediction-step statistics; ``ensemble`` carries the predictions they came from."""

    ensemble: Ensemble
    forecast_mean: np.ndarray
    P_thetaF: np.ndarray
    P_FF: np.ndarray

    @property
    def predictions(self) -> np.ndarray:
        return self.ensemble.predictions

    @property
    def size(self) -> int:
        return self.ensemble.size

    def stacked(self, n_blocks: int) -> "EkiStats":
        """Statistics of the N-fold replicated prediction used by the stacked system."""
        return EkiStats(
            ensemble=self.ensemble.with_predictions(np.tile(self.predictions, (1, n_blocks))),
            forecast_mean=np.tile(self.forecast_mean, n_blocks),
            P_thetaF=np.tile(self.P_thetaF, (1, n_blocks)),
            P_FF=np.kron(np.ones((n_blocks, n_blocks)), self.P_FF),
        )


@dataclass(frozen=True, eq=False)
class StackedTarget:
    """Stacked observation vector (y_1, ..., y_N) with block covariance Sigma_i / nu_i."""

    observations: np.ndarray
    cov: np.ndarray
    n_blocks: int
    label: Optional[str] = None

    @classmethod
    def from_outer(cls, outer: OuterSet, nu: PoolingWeights, label: Optional[str] = None) -> "StackedTarget":
        return cls(stacked_observation(outer), stacked_covariance(outer, nu), outer.size, label)

    @property
    def mean(self) -> np.ndarray:
        return self.observations


@dataclass(frozen=True)
class EkiUpdateSpec:
    formulation: str
    perturb: bool
    target: Union[PooledObservation, StackedTarget]

    def __post_init__(self):
        if self.formulation not in FORMULATIONS:
            raise ValueError(f"formulation must be one of {FORMULATIONS}")
        if self.formulation == "stacked" and not isinstance(self.target, StackedTarget):
            raise ValueError("the stacked formulation needs a stacked target")
        if self.formulation == "mean" and not isinstance(self.target, PooledObservation):
            raise ValueError("the mean-observation formulation needs a pooled observation")


def stats_from_predictions(ensemble: Ensemble) -> EkiStats:
    """Sample statistics of an ensemble whose predictions are already computed."""
    if ensemble.predictions is None:
        raise ValueError("ensemble has no predictions")
    predictions = ensemble.predictions
    return EkiStats(
        ensemble=ensemble,
        forecast_mean=predictions.mean(axis=0),
        P_thetaF=cross_covariance(ensemble.members, predictions),
        P_FF=cross_covariance(predictions, predictions),
    )


def predict(ensemble: Ensemble, model: ForwardModel, meas: Measurement,
            counter: EvalCounter, threads: int = 1) -> EkiStats:
    """Evaluate the ensemble once (J solves) and form P_thetaF, P_FF."""
    evaluated = eval_forward_batch(model, ensemble.without_predictions(), meas, counter, threads=threads)
    return stats_from_predictions(evaluated)


def kalman_gain(P_thetaF: np.ndarray, P_FF: np.ndarray, noise_cov: np.ndarray) -> np.ndarray:
    """K = P_thetaF (P_FF + Sigma)^-1 through a Cholesky solve, jittered once on failure."""
    innovation = P_FF + noise_cov
    innovation = 0.5 * (innovation + innovation.T)
    try:
        factor = linalg.cho_factor(innovation)
    except linalg.LinAlgError:
        jitter = GAIN_JITTER * abs(np.trace(innovation))
        logger.info(f"Innovation covariance not positive definite; adding jitter {jitter:.3e}")
        try:
            factor = linalg.cho_factor(innovation + jitter * np.eye(innovation.shape[0]))
        except linalg.LinAlgError as exc:
            raise GainSolveFailure("innovation covariance is singular beyond regularization") from exc
    return linalg.cho_solve(factor, P_thetaF.T).T


def update(ensemble: Ensemble, stats: EkiStats, spec: EkiUpdateSpec, rng: RngStream) -> Ensemble:
    """theta_j + K (y_target - f(theta_j) - eta_j); no forward solves."""
    if stats.size != ensemble.size:
        raise ValueError("statistics were computed from a different ensemble")
    target = spec.target
    used = stats.stacked(target.n_blocks) if spec.formulation == "stacked" else stats
    if target.mean.size != used.forecast_mean.size:
        raise ValueError(
            f"target dimension {target.mean.size} does not match predictions {used.forecast_mean.size}"
        )

    gain = kalman_gain(used.P_thetaF, used.P_FF, target.cov)
    innovation = target.mean - used.predictions
    if spec.perturb:
        noise = Gaussian(np.zeros(target.mean.size), target.cov)
        innovation = innovation - sample_gaussian(noise, ensemble.size, rng).members
    members = ensemble.members + innovation @ gain.T
    return Ensemble(members, tag=target.label)


def update_per_group(ensemble: Ensemble, stats: EkiStats, groups: Sequence[PooledObservation],
                     rng: RngStream, perturb: bool = True) -> List[Ensemble]:
    """One updated ensemble per pooled group, all from the same predictions.

    Group k draws its perturbations from ``rng.spawn(k)``.
    """
    out = []
    for k, pooled in enumerate(groups):
        spec = EkiUpdateSpec("mean", perturb, pooled)
        out.append(update(ensemble, stats, spec, rng.spawn(k)))
    logger.debug(f"Built {len(out)} pooled ensembles from one prediction step")
    return out
