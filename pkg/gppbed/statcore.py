"""Gaussian distributions, ensemble statistics and the seeded randomness contract.

Every random draw in the library is taken from an ``RngStream``: a (seed, stream-id)
pair that maps onto a ``numpy.random.SeedSequence`` spawn key, so a consumer that
owns its stream reproduces the same bytes regardless of what other consumers or
worker threads do.
"""

from dataclasses import dataclass, field, replace
from typing import Optional, Tuple
import logging

import numpy as np
from scipy import linalg
from scipy.stats import multivariate_normal

from .errors import DegenerateEnsemble, FactorizationFailure, SingularCovariance

logger = logging.getLogger(__name__)

SYMMETRY_RTOL = 1e-12
PSD_RTOL = 1e-10
SINGULAR_RTOL = 1e-12

# Stream ids per consumer.
STREAM_PRIOR = 0
STREAM_EKI = 1
STREAM_NOISE = 2
STREAM_OUTER = 3
STREAM_DESIGN = 4
STREAM_NETWORK_INIT = 5


def _as_matrix(cov) -> np.ndarray:
    return np.atleast_2d(np.asarray(cov, dtype=float))


def _trace_scale(cov: np.ndarray) -> float:
    return float(abs(np.trace(cov)))


@dataclass(frozen=True, eq=False)
class Gaussian:
    """Multivariate normal distribution N(mean, cov)."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = _as_matrix(self.cov)
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"cov shape {cov.shape} does not match mean of size {mean.size}")
        scale = max(float(np.max(np.abs(cov))), np.finfo(float).tiny)
        if np.max(np.abs(cov - cov.T)) > SYMMETRY_RTOL * scale:
            raise ValueError("covariance is not symmetric")
        if np.linalg.eigvalsh(cov).min() < -PSD_RTOL * _trace_scale(cov):
            raise FactorizationFailure("covariance is indefinite beyond tolerance")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @classmethod
    def scalar(cls, mean: float, var: float) -> "Gaussian":
        return cls(np.array([mean]), np.array([[var]]))

    @classmethod
    def isotropic(cls, mean, var: float) -> "Gaussian":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        return cls(mean, var * np.eye(mean.size))

    @property
    def dim(self) -> int:
        return self.mean.size

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        """Normalized log density at the rows of ``x``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.atleast_1d(multivariate_normal(self.mean, self.cov).logpdf(x))


@dataclass(frozen=True)
class RngStream:
    """Deterministic random stream identified by (seed, stream_id, path)."""

    seed: int
    stream_id: int = 0
    path: Tuple[int, ...] = ()

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if int(self.stream_id) < 0:
            raise ValueError("stream_id must be non-negative")

    def spawn(self, index: int) -> "RngStream":
        """Child stream; children of distinct indices never overlap."""
        return replace(self, path=self.path + (int(index),))

    def with_stream(self, stream_id: int) -> "RngStream":
        return RngStream(self.seed, stream_id)

    def generator(self) -> np.random.Generator:
        sequence = np.random.SeedSequence(
            int(self.seed), spawn_key=(int(self.stream_id),) + tuple(self.path)
        )
        return np.random.Generator(np.random.PCG64(sequence))


@dataclass(frozen=True, eq=False)
class Ensemble:
    """J parameter vectors with optional cached forward predictions.

    ``predictions`` has one row per member (J x d_out); ``design_jacobians`` holds the
    derivative of each prediction with respect to the design (J x d_out x d_d).
    """

    members: np.ndarray
    predictions: Optional[np.ndarray] = None
    design_jacobians: Optional[np.ndarray] = None
    tag: Optional[str] = field(default=None, compare=False)

    def __post_init__(self):
        members = np.asarray(self.members, dtype=float)
        if members.ndim == 1:
            members = members[:, None]
        if members.ndim != 2 or members.shape[0] < 1:
            raise ValueError("members must be a non-empty J x d matrix")
        object.__setattr__(self, "members", members)
        if self.predictions is not None:
            predictions = np.asarray(self.predictions, dtype=float)
            if predictions.ndim == 1:
                predictions = predictions[:, None]
            if predictions.shape[0] != members.shape[0]:
                raise ValueError("predictions must have exactly J rows")
            object.__setattr__(self, "predictions", predictions)

    @property
    def size(self) -> int:
        return self.members.shape[0]

    @property
    def dim(self) -> int:
        return self.members.shape[1]

    def with_predictions(self, predictions: np.ndarray,
                         design_jacobians: Optional[np.ndarray] = None) -> "Ensemble":
        return replace(self, predictions=predictions, design_jacobians=design_jacobians)

    def without_predictions(self) -> "Ensemble":
        return replace(self, predictions=None, design_jacobians=None)


def ensemble_mean_cov(e: Ensemble) -> Tuple[np.ndarray, np.ndarray]:
    """Unbiased sample mean and covariance (1/(J-1) normalization)."""
    if e.size < 2:
        raise DegenerateEnsemble(f"ensemble of size {e.size} has no sample covariance")
    mean = e.members.mean(axis=0)
    cov = np.atleast_2d(np.cov(e.members, rowvar=False, ddof=1))
    return mean, cov


def cross_covariance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Sample cross-covariance of paired rows with 1/(J-1) normalization."""
    j = a.shape[0]
    if j < 2:
        raise DegenerateEnsemble(f"ensemble of size {j} has no sample covariance")
    da = a - a.mean(axis=0)
    db = b - b.mean(axis=0)
    return da.T @ db / (j - 1)


def psd_sqrt(cov: np.ndarray) -> np.ndarray:
    """Symmetric square root with small negative eigenvalues clipped to zero."""
    cov = _as_matrix(cov)
    values, vectors = linalg.eigh(cov)
    if values.size and values.min() < -PSD_RTOL * _trace_scale(cov):
        raise FactorizationFailure(
            f"covariance has eigenvalue {values.min():.3e} below tolerance"
        )
    values = np.clip(values, 0.0, None)
    return (vectors * np.sqrt(values)) @ vectors.T


def check_invertible(cov: np.ndarray, what: str = "covariance") -> None:
    values = np.linalg.eigvalsh(_as_matrix(cov))
    if values.min() <= SINGULAR_RTOL * _trace_scale(cov):
        raise SingularCovariance(f"{what} is not invertible (min eigenvalue {values.min():.3e})")


def gaussian_kl(p: Gaussian, q: Gaussian) -> float:
    """KL(p || q) in closed form."""
    if p.dim != q.dim:
        raise ValueError("dimension mismatch")
    if np.array_equal(p.mean, q.mean) and np.array_equal(p.cov, q.cov):
        return 0.0
    check_invertible(q.cov, "q.cov")
    factor = linalg.cho_factor(q.cov)
    diff = q.mean - p.mean
    trace_term = np.trace(linalg.cho_solve(factor, p.cov))
    mahalanobis = diff @ linalg.cho_solve(factor, diff)
    _, logdet_q = np.linalg.slogdet(q.cov)
    sign_p, logdet_p = np.linalg.slogdet(p.cov)
    if sign_p <= 0:
        return float("inf")
    kl = 0.5 * (trace_term + mahalanobis - p.dim + logdet_q - logdet_p)
    return float(max(kl, 0.0))


def gaussian_w2(p: Gaussian, q: Gaussian) -> float:
    """2-Wasserstein distance between Gaussians (Bures form)."""
    if p.dim != q.dim:
        raise ValueError("dimension mismatch")
    if np.array_equal(p.mean, q.mean) and np.array_equal(p.cov, q.cov):
        return 0.0
    root_q = psd_sqrt(q.cov)
    cross = psd_sqrt(root_q @ p.cov @ root_q)
    bures = np.trace(p.cov) + np.trace(q.cov) - 2.0 * np.trace(cross)
    mean_term = float(np.sum((p.mean - q.mean) ** 2))
    return float(np.sqrt(max(mean_term + bures, 0.0)))


def sample_gaussian(g: Gaussian, n: int, rng: RngStream) -> Ensemble:
    """n i.i.d. draws from g using the symmetric square root of the covariance."""
    if n < 1:
        raise ValueError("n must be at least 1")
    root = psd_sqrt(g.cov)
    z = rng.generator().standard_normal((n, g.dim))
    return Ensemble(g.mean + z @ root.T)
