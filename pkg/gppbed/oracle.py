"""Closed-form and brute-force references for the linear-Gaussian setting."""

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional
import logging

import numpy as np
import pandas as pd
from scipy import linalg

from .errors import SingularInnovation
from .isampling import WeightVector, normalize_logweights
from .pooling import OuterSet, PoolingWeights, make_pooled
from .statcore import Gaussian, gaussian_kl, gaussian_w2

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ConjugateSpec:
    """theta ~ prior, y = A theta + eps, eps ~ N(0, noise_cov)."""

    prior: Gaussian
    A: np.ndarray
    noise_cov: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        noise_cov = np.atleast_2d(np.asarray(self.noise_cov, dtype=float))
        if A.shape[1] != self.prior.dim or noise_cov.shape != (A.shape[0], A.shape[0]):
            raise ValueError("inconsistent dimensions")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "noise_cov", noise_cov)


def posterior_closed_form(spec: ConjugateSpec, y: np.ndarray,
                          noise_cov: Optional[np.ndarray] = None) -> Gaussian:
    """Conjugate update with gain C0 A^T (A C0 A^T + Sigma)^-1."""
    noise_cov = spec.noise_cov if noise_cov is None else np.atleast_2d(noise_cov)
    C0, A = spec.prior.cov, spec.A
    innovation = A @ C0 @ A.T + noise_cov
    try:
        factor = linalg.cho_factor(innovation)
    except linalg.LinAlgError as exc:
        raise SingularInnovation("innovation covariance is not positive definite") from exc
    gain = linalg.cho_solve(factor, A @ C0).T
    mean = spec.prior.mean + gain @ (np.atleast_1d(y) - A @ spec.prior.mean)
    cov = C0 - gain @ A @ C0
    return Gaussian(mean, 0.5 * (cov + cov.T))


def pooled_posterior_closed_form(spec: ConjugateSpec, outer: OuterSet,
                                 nu: Optional[PoolingWeights] = None) -> Gaussian:
    """Posterior of the mean observation y_bar under the effective covariance Sigma_nu."""
    pooled = make_pooled(outer, nu or PoolingWeights.uniform(outer.size))
    return posterior_closed_form(spec, pooled.mean, pooled.cov)


def sequential_assimilation(spec: ConjugateSpec, outer: OuterSet, nu: PoolingWeights) -> Gaussian:
    """Assimilate y_i one at a time with covariance Sigma_i / nu_i."""
    current = spec
    posterior = spec.prior
    for y, cov, w in zip(outer.observations, outer.noise_covs, nu.values):
        posterior = posterior_closed_form(current, y, cov / w)
        current = ConjugateSpec(posterior, spec.A, spec.noise_cov)
    return posterior


def snis_bruteforce(members: np.ndarray, target_logpdf: Callable[[np.ndarray], np.ndarray],
                    proposal_logpdf: Callable[[np.ndarray], np.ndarray]) -> WeightVector:
    """Weights from explicit target and proposal log densities."""
    members = np.atleast_2d(members)
    return normalize_logweights(target_logpdf(members) - proposal_logpdf(members))


def fd_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    grad = np.zeros(x.size)
    for k in range(x.size):
        step = np.zeros(x.size)
        step[k] = h
        grad[k] = (fn(x + step) - fn(x - step)) / (2.0 * h)
    return grad


def distance_table(spec: ConjugateSpec, outer: OuterSet,
                   group_labels: Optional[List[str]] = None,
                   group_posteriors: Optional[Dict[str, Gaussian]] = None) -> pd.DataFrame:
    """Per outer sample: W2 and KL from its individual posterior to the prior, the
    global pooled posterior and (optionally) the pooled posterior of its group."""
    pooled = pooled_posterior_closed_form(spec, outer)
    rows = []
    for i, y in enumerate(outer.observations):
        individual = posterior_closed_form(spec, y, outer.noise_covs[i])
        row = {
            "sample": i,
            "y": float(y[0]) if y.size == 1 else None,
            "w2_prior": gaussian_w2(individual, spec.prior),
            "w2_pooled": gaussian_w2(individual, pooled),
            "kl_prior": gaussian_kl(individual, spec.prior),
            "kl_pooled": gaussian_kl(individual, pooled),
        }
        if group_labels is not None and group_posteriors is not None:
            grouped = group_posteriors[group_labels[i]]
            row["group"] = group_labels[i]
            row["w2_grouped"] = gaussian_w2(individual, grouped)
            row["kl_grouped"] = gaussian_kl(individual, grouped)
        rows.append(row)
    return pd.DataFrame(rows)
