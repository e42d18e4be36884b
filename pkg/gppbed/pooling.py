"""Geometric pooled posterior algebra.

A pooled posterior raises each outer-sample likelihood to the power nu_i and
multiplies them with the prior. For Gaussian likelihoods this collapses to a
single Gaussian likelihood on a precision-weighted mean observation.
"""

from dataclasses import dataclass
from typing import Optional, Sequence
import logging

import numpy as np
from scipy import linalg

from .errors import GppBedError, SingularCovariance, SingularNoise, WeightSumError, ZeroWeight
from .forward import EvalCounter, ForwardModel, Measurement, eval_forward
from .statcore import Gaussian, check_invertible

logger = logging.getLogger(__name__)

WEIGHT_SUM_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class OuterSet:
    """Outer samples (theta_i, y_i) with their noise covariances.

    ``noise_draws`` keeps eps_i = y_i - f(theta_i) so the set can be regenerated at
    another design with the same randomness. ``predictions`` and
    ``design_jacobians`` cache f(theta_i) and its design derivative.
    """

    observations: np.ndarray
    noise_covs: np.ndarray
    parameters: Optional[np.ndarray] = None
    noise_draws: Optional[np.ndarray] = None
    predictions: Optional[np.ndarray] = None
    design_jacobians: Optional[np.ndarray] = None

    def __post_init__(self):
        obs = np.asarray(self.observations, dtype=float)
        if obs.ndim == 1:
            obs = obs[:, None]
        if obs.shape[0] < 1:
            raise ValueError("an outer set needs at least one observation")
        if not np.all(np.isfinite(obs)):
            raise ValueError("observations must be finite")
        covs = np.asarray(self.noise_covs, dtype=float)
        if covs.ndim < 3:
            covs = np.broadcast_to(np.atleast_2d(covs), (obs.shape[0],) + np.atleast_2d(covs).shape)
        if covs.shape != (obs.shape[0], obs.shape[1], obs.shape[1]):
            raise ValueError(f"noise covariances of shape {covs.shape} do not match observations {obs.shape}")
        object.__setattr__(self, "observations", obs)
        object.__setattr__(self, "noise_covs", np.array(covs))
        if self.parameters is not None:
            params = np.asarray(self.parameters, dtype=float)
            object.__setattr__(self, "parameters", params[:, None] if params.ndim == 1 else params)

    @classmethod
    def homoskedastic(cls, observations, noise_cov, **kwargs) -> "OuterSet":
        obs = np.asarray(observations, dtype=float)
        return cls(obs, np.atleast_2d(np.asarray(noise_cov, dtype=float)), **kwargs)

    @property
    def size(self) -> int:
        return self.observations.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.observations.shape[1]

    @property
    def is_homoskedastic(self) -> bool:
        return bool(np.all(self.noise_covs == self.noise_covs[0]))

    def subset(self, indices: Sequence[int]) -> "OuterSet":
        idx = np.asarray(indices, dtype=int)

        def pick(a):
            return None if a is None else a[idx]

        return OuterSet(
            self.observations[idx], self.noise_covs[idx],
            parameters=pick(self.parameters), noise_draws=pick(self.noise_draws),
            predictions=pick(self.predictions), design_jacobians=pick(self.design_jacobians),
        )


@dataclass(frozen=True, eq=False)
class PoolingWeights:
    values: np.ndarray

    def __post_init__(self):
        values = np.atleast_1d(np.asarray(self.values, dtype=float))
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise WeightSumError("pooling weights must be finite and nonnegative")
        if abs(values.sum() - 1.0) > WEIGHT_SUM_TOL:
            raise WeightSumError(f"pooling weights sum to {values.sum():.15f}, not 1")
        object.__setattr__(self, "values", values)

    @classmethod
    def uniform(cls, n: int) -> "PoolingWeights":
        return cls(np.full(n, 1.0 / n))

    @classmethod
    def one_hot(cls, n: int, index: int) -> "PoolingWeights":
        values = np.zeros(n)
        values[index] = 1.0
        return cls(values)

    def restricted(self, indices: Sequence[int]) -> "PoolingWeights":
        """Weights of a group renormalized to sum to one within the group."""
        sub = self.values[np.asarray(indices, dtype=int)]
        total = sub.sum()
        if total <= 0:
            raise WeightSumError("group carries no pooling weight")
        return PoolingWeights(sub / total)

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True, eq=False)
class PooledObservation:
    """Mean observation y_bar and effective covariance Sigma_nu of one pooled posterior."""

    mean: np.ndarray
    cov: np.ndarray
    indices: Optional[np.ndarray] = None
    label: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "mean", np.atleast_1d(np.asarray(self.mean, dtype=float)))
        object.__setattr__(self, "cov", np.atleast_2d(np.asarray(self.cov, dtype=float)))


def _check_weights(outer: OuterSet, nu: PoolingWeights) -> None:
    if len(nu) != outer.size:
        raise ValueError(f"{len(nu)} pooling weights for {outer.size} outer samples")


def _check_noise(outer: OuterSet) -> None:
    for i, cov in enumerate(outer.noise_covs):
        try:
            check_invertible(cov, "noise covariance")
        except SingularCovariance as exc:
            raise SingularNoise(str(exc), sample_index=i) from exc


def make_pooled(outer: OuterSet, nu: PoolingWeights, label: Optional[str] = None,
                indices: Optional[np.ndarray] = None) -> PooledObservation:
    """Precision-weighted mean observation; equal noise gives Sigma_nu = Sigma exactly."""
    _check_weights(outer, nu)
    _check_noise(outer)
    if outer.is_homoskedastic:
        return PooledObservation(nu.values @ outer.observations, outer.noise_covs[0].copy(),
                                 indices, label)
    precisions = np.stack([linalg.inv(c) for c in outer.noise_covs])
    precision = np.einsum("i,ijk->jk", nu.values, precisions)
    cov = linalg.inv(precision)
    cov = 0.5 * (cov + cov.T)
    weighted = np.einsum("i,ijk,ik->j", nu.values, precisions, outer.observations)
    return PooledObservation(cov @ weighted, cov, indices, label)


def group_pooled(outer: OuterSet, indices: Sequence[int], nu: Optional[PoolingWeights] = None,
                 label: Optional[str] = None) -> PooledObservation:
    """Pooled observation of a subset of the outer samples with renormalized weights."""
    idx = np.asarray(indices, dtype=int)
    nu = nu or PoolingWeights.uniform(outer.size)
    return make_pooled(outer.subset(idx), nu.restricted(idx), label=label, indices=idx)


def stacked_covariance(outer: OuterSet, nu: PoolingWeights) -> np.ndarray:
    """Block-diagonal covariance with blocks Sigma_i / nu_i."""
    _check_weights(outer, nu)
    zero = np.flatnonzero(nu.values == 0)
    if zero.size:
        raise ZeroWeight("stacked form needs strictly positive weights", sample_index=int(zero[0]))
    return linalg.block_diag(*[c / w for c, w in zip(outer.noise_covs, nu.values)])


def stacked_observation(outer: OuterSet) -> np.ndarray:
    return outer.observations.ravel()


def _mahalanobis_sq(residual: np.ndarray, cov: np.ndarray) -> float:
    factor = linalg.cho_factor(cov)
    return float(residual @ linalg.cho_solve(factor, residual))


def pooled_loglik_sum(prediction: np.ndarray, outer: OuterSet, nu: PoolingWeights) -> float:
    """-1/2 sum_i nu_i |y_i - f|^2_{Sigma_i}."""
    total = 0.0
    for w, y, cov in zip(nu.values, outer.observations, outer.noise_covs):
        if w > 0:
            total += w * _mahalanobis_sq(y - prediction, cov)
    return -0.5 * total


def pooled_loglik_mean(prediction: np.ndarray, pooled: PooledObservation) -> float:
    """-1/2 |y_bar - f|^2_{Sigma_nu}; differs from the sum form by a constant in f."""
    return -0.5 * _mahalanobis_sq(pooled.mean - prediction, pooled.cov)


def pooled_logdensity_unnorm(theta: np.ndarray, outer: OuterSet, nu: PoolingWeights,
                             model: ForwardModel, meas: Measurement, counter: EvalCounter,
                             prior: Optional[Gaussian] = None, form: str = "sum") -> float:
    """log prior(theta) + sum_i nu_i log p(y_i | theta), up to a constant.

    Without a prior only the likelihood part is returned. ``form="mean"`` uses the
    mean-observation rewriting instead of the per-sample sum.
    """
    _check_weights(outer, nu)
    try:
        prediction = eval_forward(model, theta, meas, counter)
    except GppBedError:
        logger.debug(f"Forward failure at theta={theta}")
        raise
    if form == "sum":
        value = pooled_loglik_sum(prediction, outer, nu)
    elif form == "mean":
        value = pooled_loglik_mean(prediction, make_pooled(outer, nu))
    else:
        raise ValueError(f"unknown form {form!r}")
    if prior is not None:
        value += float(prior.logpdf(np.atleast_1d(theta))[0])
    return value
