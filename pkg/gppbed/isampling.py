"""Self-normalized importance sampling against pooled proposals, ESS diagnostics and grouping."""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple
import logging
import warnings

import numpy as np
from scipy import linalg
from scipy.cluster.vq import kmeans2
from scipy.special import logsumexp

from .eki import EkiStats, update_per_group
from .errors import AllWeightsUnderflow, EmptyGroup
from .pooling import OuterSet, PooledObservation, PoolingWeights, group_pooled
from .statcore import Ensemble, RngStream

logger = logging.getLogger(__name__)

DEFAULT_TRIGGER_FRACTION = 0.05
DEFAULT_GROUPS = 3
KMEANS_ITERATIONS = 50


@dataclass(frozen=True, eq=False)
class WeightVector:
    logw: np.ndarray
    weights: np.ndarray

    @property
    def realized_ess(self) -> float:
        return float(1.0 / np.sum(self.weights ** 2))


def normalize_logweights(logw: np.ndarray) -> WeightVector:
    logw = np.asarray(logw, dtype=float)
    total = logsumexp(logw)
    if not np.isfinite(total):
        raise AllWeightsUnderflow("every importance weight underflows")
    return WeightVector(logw, np.exp(logw - total))


def _quadratic_rows(residuals: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Row-wise r^T cov^-1 r."""
    factor = linalg.cho_factor(cov)
    return np.einsum("jk,jk->j", residuals, linalg.cho_solve(factor, residuals.T).T)


def snis_weights(inner: Ensemble, y: np.ndarray, pooled: PooledObservation,
                 noise_cov: np.ndarray) -> WeightVector:
    """Target p(y | theta') against the pooled proposal; the prior cancels.

    logw_j = -1/2 |y - f_j|^2_Sigma + 1/2 |y_bar - f_j|^2_{Sigma_nu}
    """
    if inner.predictions is None:
        raise ValueError("inner ensemble has no predictions")
    predictions = inner.predictions
    y = np.atleast_1d(np.asarray(y, dtype=float))
    logw = (-0.5 * _quadratic_rows(y - predictions, np.atleast_2d(noise_cov))
            + 0.5 * _quadratic_rows(pooled.mean - predictions, pooled.cov))
    return normalize_logweights(logw)


def _ess_exponent(y: np.ndarray, pooled: PooledObservation, noise_cov: np.ndarray,
                  spread: np.ndarray) -> float:
    a = linalg.solve(np.atleast_2d(noise_cov), np.atleast_1d(y) - pooled.mean, assume_a="pos")
    return float(a @ np.atleast_2d(spread) @ a)


def ess_lognormal(y: np.ndarray, pooled: PooledObservation, noise_cov: np.ndarray,
                  sigma_ff: np.ndarray, J: int) -> float:
    """J exp(-a^T Sigma_ff a) with a = Sigma^-1 (y - y_bar)."""
    return J * float(np.exp(-_ess_exponent(y, pooled, noise_cov, sigma_ff)))


def ess_conservative(y: np.ndarray, pooled: PooledObservation, noise_cov: np.ndarray,
                     stats: EkiStats, J: int) -> float:
    """Log-normal ESS with the forecast covariance P_FF; no forward solves."""
    return ess_lognormal(y, pooled, noise_cov, stats.P_FF, J)


@dataclass(frozen=True, eq=False)
class EssReport:
    conservative: np.ndarray
    lognormal: Optional[np.ndarray] = None
    realized: Optional[np.ndarray] = None
    flagged: Optional[np.ndarray] = None

    def to_dict(self) -> Dict[str, list]:
        out = {"conservative": self.conservative.tolist()}
        for name in ("lognormal", "realized", "flagged"):
            value = getattr(self, name)
            if value is not None:
                out[name] = value.tolist()
        return out


def ess_histogram(values: np.ndarray, J: int, bins: int = 20) -> Tuple[np.ndarray, np.ndarray]:
    """Counts and bin edges over (0, J]."""
    return np.histogram(np.asarray(values, dtype=float), bins=bins, range=(0.0, float(J)))


@dataclass(frozen=True, eq=False)
class Grouping:
    """Partition of outer-sample indices into an ok-set and problematic groups."""

    ok: np.ndarray
    groups: Tuple[np.ndarray, ...]
    threshold: float
    ess: np.ndarray
    centroids: Optional[np.ndarray] = None

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def triggered(self) -> bool:
        return self.n_groups > 0

    @property
    def problematic(self) -> np.ndarray:
        return np.flatnonzero(self.ess < self.threshold)

    def index_sets(self) -> List[Tuple[str, np.ndarray]]:
        """Proposal index sets: the ok-set (when nonempty) then each group."""
        sets = [("ok", self.ok)] if self.ok.size else []
        sets.extend((f"group-{k + 1}", g) for k, g in enumerate(self.groups))
        return sets

    def labels(self) -> List[str]:
        out = [""] * self.ess.size
        for label, idx in self.index_sets():
            for i in idx:
                out[i] = label
        return out

    def validate(self, n: int) -> None:
        parts = [self.ok] + list(self.groups)
        merged = np.concatenate(parts) if parts else np.array([], dtype=int)
        if merged.size != n or not np.array_equal(np.sort(merged), np.arange(n)):
            raise ValueError("grouping is not a partition of the outer samples")
        if any(g.size == 0 for g in self.groups):
            raise EmptyGroup("grouping contains an empty group")

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "ok": self.ok.tolist(),
            "groups": [g.tolist() for g in self.groups],
            "ess": self.ess.tolist(),
        }


def whiten(points: np.ndarray, noise_cov: np.ndarray) -> np.ndarray:
    """Map observations so Euclidean distance equals the Sigma^-1 Mahalanobis distance."""
    chol = linalg.cholesky(np.atleast_2d(noise_cov), lower=True)
    return linalg.solve_triangular(chol, np.atleast_2d(points).T, lower=True).T


def farthest_point_seeds(points: np.ndarray, k: int) -> np.ndarray:
    """Deterministic seeds: farthest from the mean, then farthest from the chosen seeds."""
    first = int(np.argmax(np.sum((points - points.mean(axis=0)) ** 2, axis=1)))
    chosen = [first]
    dist = np.sum((points - points[first]) ** 2, axis=1)
    while len(chosen) < k:
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.sum((points - points[nxt]) ** 2, axis=1))
    return points[chosen].copy()


def _fill_empty(points: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Give each empty cluster the point farthest from the centroid of the largest cluster."""
    labels = labels.copy()
    for empty in range(k):
        if np.any(labels == empty):
            continue
        counts = np.bincount(labels, minlength=k)
        largest = int(np.argmax(counts))
        if counts[largest] < 2:
            raise EmptyGroup(f"cannot split a cluster of size {counts[largest]}")
        members = np.flatnonzero(labels == largest)
        centre = points[members].mean(axis=0)
        far = members[int(np.argmax(np.sum((points[members] - centre) ** 2, axis=1)))]
        labels[far] = empty
        logger.info(f"k-means left cluster {empty} empty; split cluster {largest}")
    return labels


def kmeans_partition(points: np.ndarray, k: int) -> Tuple[List[np.ndarray], np.ndarray]:
    """k-means on the rows of ``points``; groups ordered by centroid, positions local."""
    points = np.atleast_2d(points)
    seeds = farthest_point_seeds(points, k)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        _, labels = kmeans2(points, seeds, iter=KMEANS_ITERATIONS, minit="matrix", missing="warn")
    labels = _fill_empty(points, labels, k)
    centroids = np.stack([points[labels == c].mean(axis=0) for c in range(k)])
    order = np.lexsort(centroids.T[::-1])
    return [np.flatnonzero(labels == c) for c in order], centroids[order]


def make_grouping(outer: OuterSet, pooled_global: PooledObservation, noise_cov: np.ndarray,
                  stats: EkiStats, J: int, threshold: float, n_groups: int = DEFAULT_GROUPS,
                  trigger_fraction: float = DEFAULT_TRIGGER_FRACTION) -> Grouping:
    """Flag outer samples whose conservative ESS falls below ``threshold`` and cluster them.

    Grouping happens only when more than ``trigger_fraction`` of the samples are
    flagged; otherwise every sample stays with the global pooled proposal. ``n_groups``
    is the total number of proposal sets: a nonempty ok-set is one of them and the
    flagged samples fill the rest.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    ess = np.array([ess_conservative(y, pooled_global, noise_cov, stats, J) for y in outer.observations])
    problematic = np.flatnonzero(ess < threshold)
    everyone = np.arange(outer.size)
    if problematic.size / outer.size <= trigger_fraction:
        logger.debug(f"{problematic.size}/{outer.size} problematic samples; keeping the global proposal")
        return Grouping(everyone, (), threshold, ess)
    if n_groups < 2:
        raise ValueError("grouping needs at least two proposal sets")
    ok = np.setdiff1d(everyone, problematic)
    k = min(n_groups - 1 if ok.size else n_groups, problematic.size)
    points = whiten(outer.observations[problematic], noise_cov)
    local_groups, centroids = kmeans_partition(points, k)
    groups = tuple(problematic[g] for g in local_groups)
    grouping = Grouping(ok, groups, threshold, ess, centroids)
    grouping.validate(outer.size)
    logger.info(
        f"Grouping triggered: {problematic.size}/{outer.size} problematic samples in "
        f"{k} groups of sizes {[g.size for g in groups]}"
    )
    return grouping


def trivial_grouping(n: int, threshold: float = 1.0) -> Grouping:
    return Grouping(np.arange(n), (), threshold, np.full(n, np.inf))


@dataclass(frozen=True, eq=False)
class ProposalSet:
    """Pooled proposal ensemble serving the outer samples in ``indices``."""

    label: str
    indices: np.ndarray
    pooled: PooledObservation
    ensemble: Ensemble


def build_proposals(outer: OuterSet, grouping: Grouping, stats: EkiStats, rng: RngStream,
                    nu: Optional[PoolingWeights] = None, perturb: bool = True) -> List[ProposalSet]:
    """One pooled EKI ensemble per index set, all from one prediction step."""
    sets = grouping.index_sets()
    pooled = [group_pooled(outer, idx, nu, label=label) for label, idx in sets]
    ensembles = update_per_group(stats.ensemble, stats, pooled, rng, perturb=perturb)
    return [ProposalSet(label, idx, p, e) for (label, idx), p, e in zip(sets, pooled, ensembles)]


def ess_report(outer: OuterSet, proposals: Sequence[ProposalSet], stats: EkiStats,
               pooled_global: PooledObservation) -> EssReport:
    """Conservative, log-normal and realized ESS per outer sample.

    Proposals must carry predictions. Samples whose weights all underflow get a
    realized ESS of 1 and are flagged.
    """
    n, J = outer.size, stats.size
    conservative = np.array([
        ess_conservative(y, pooled_global, c, stats, J)
        for y, c in zip(outer.observations, outer.noise_covs)
    ])
    lognormal = np.zeros(n)
    realized = np.zeros(n)
    flagged = np.zeros(n, dtype=bool)
    for proposal in proposals:
        sigma_ff = np.atleast_2d(np.cov(proposal.ensemble.predictions, rowvar=False, ddof=1))
        for i in proposal.indices:
            lognormal[i] = ess_lognormal(outer.observations[i], proposal.pooled,
                                         outer.noise_covs[i], sigma_ff, proposal.ensemble.size)
            try:
                w = snis_weights(proposal.ensemble, outer.observations[i], proposal.pooled, outer.noise_covs[i])
                realized[i] = w.realized_ess
            except AllWeightsUnderflow:
                realized[i] = 1.0
                flagged[i] = True
    return EssReport(conservative, lognormal, realized, flagged)
