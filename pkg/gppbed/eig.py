"""Design gradients of the expected information gain and plain gradient ascent.

Outer observations are reparameterized as y_i(d) = f_d(theta_i) + eps_i with
eps_i held fixed. Differentiating log p(y_i(d) | theta_i, d) - log p(y_i(d) | d)
then gives a zero first term and, for the evidence, a self-normalized average
over proposal samples of

    (G'_j - G_i)^T Sigma^-1 (y_i - f_d(theta'_j))

where G are design Jacobians of the forward prediction. The inner samples come
from pooled (and optionally grouped) EKI proposals.
"""

from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence
import logging

import numpy as np
import pandas as pd
from scipy import linalg

from .eki import EkiStats, predict
from .errors import AllWeightsUnderflow, GppBedError
from .forward import EvalCounter, ForwardModel, Measurement, eval_forward_batch
from .isampling import (
    DEFAULT_GROUPS,
    DEFAULT_TRIGGER_FRACTION,
    Grouping,
    ProposalSet,
    build_proposals,
    make_grouping,
    snis_weights,
    trivial_grouping,
)
from .pooling import OuterSet, PoolingWeights, make_pooled
from .statcore import (
    STREAM_EKI,
    STREAM_NOISE,
    STREAM_OUTER,
    STREAM_PRIOR,
    Ensemble,
    Gaussian,
    RngStream,
    check_invertible,
    psd_sqrt,
    sample_gaussian,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class GradEstimate:
    value: np.ndarray
    contributions: np.ndarray
    realized_ess: np.ndarray
    forward_cost: int
    n_sets: int = 1

    @property
    def standard_error(self) -> np.ndarray:
        n = self.contributions.shape[0]
        if n < 2:
            return np.full(self.value.shape, np.inf)
        return self.contributions.std(axis=0, ddof=1) / np.sqrt(n)


@dataclass
class DesignState:
    """Current design inside the box [lower, upper] and its ascent history."""

    design: np.ndarray
    step_size: float
    lower: np.ndarray
    upper: np.ndarray
    iteration: int = 0
    trajectory: List[Dict] = field(default_factory=list)

    def __post_init__(self):
        self.design = np.atleast_1d(np.asarray(self.design, dtype=float))
        self.lower = np.broadcast_to(np.asarray(self.lower, dtype=float), self.design.shape).copy()
        self.upper = np.broadcast_to(np.asarray(self.upper, dtype=float), self.design.shape).copy()
        if self.step_size <= 0:
            raise ValueError("step size must be positive")
        if np.any(self.lower > self.upper):
            raise ValueError("empty design box")
        self.design = self.clip(self.design)

    def clip(self, design: np.ndarray) -> np.ndarray:
        return np.clip(design, self.lower, self.upper)


def generate_outer(prior: Gaussian, model: ForwardModel, meas: Measurement, n: int,
                   rng: RngStream, counter: EvalCounter, threads: int = 1,
                   with_design_grad: bool = True) -> OuterSet:
    """Draw theta_i from the prior and y_i = f(theta_i) + eps_i (n solves)."""
    thetas = sample_gaussian(prior, n, rng.spawn(STREAM_PRIOR))
    noise_cov = model.noise_covariance(meas)
    z = rng.spawn(STREAM_NOISE).generator().standard_normal((n, noise_cov.shape[0]))
    eps = z @ psd_sqrt(noise_cov).T
    return observe_outer(thetas.members, eps, model, meas, counter, threads, with_design_grad)


def observe_outer(parameters: np.ndarray, noise_draws: np.ndarray, model: ForwardModel,
                  meas: Measurement, counter: EvalCounter, threads: int = 1,
                  with_design_grad: bool = True) -> OuterSet:
    """Outer set at ``meas`` for fixed parameters and noise draws."""
    evaluated = eval_forward_batch(model, Ensemble(parameters), meas, counter,
                                   with_design_grad=with_design_grad, threads=threads)
    return OuterSet.homoskedastic(
        evaluated.predictions + noise_draws,
        model.noise_covariance(meas),
        parameters=evaluated.members,
        noise_draws=noise_draws,
        predictions=evaluated.predictions,
        design_jacobians=evaluated.design_jacobians,
    )


def _pathwise_terms(y: np.ndarray, jac_outer: np.ndarray, inner: Ensemble,
                    noise_cov: np.ndarray) -> np.ndarray:
    """Per-member (G'_j - G_i)^T Sigma^-1 (y_i - F'_j), shape J x d_d."""
    residual = y - inner.predictions
    scaled = linalg.cho_solve(linalg.cho_factor(noise_cov), residual.T).T
    return np.einsum("jyd,jy->jd", inner.design_jacobians - jac_outer, scaled)


def eig_gradient(outer: OuterSet, proposals: Sequence[ProposalSet], model: ForwardModel,
                 meas: Measurement, counter: EvalCounter, threads: int = 1) -> GradEstimate:
    """Grouped SNIS estimate of the EIG design gradient.

    Each proposal ensemble is evaluated at the design once (J solves per set); the
    outer set must already carry predictions and design Jacobians at ``meas``.
    """
    if outer.design_jacobians is None:
        raise ValueError("outer set needs design Jacobians at the current design")
    start = counter.count
    d_dim = outer.design_jacobians.shape[-1]
    contributions = np.zeros((outer.size, d_dim))
    realized = np.zeros(outer.size)
    covered = np.zeros(outer.size, dtype=bool)

    for proposal in proposals:
        inner = eval_forward_batch(model, proposal.ensemble.without_predictions(), meas, counter,
                                   with_design_grad=True, threads=threads)
        for i in proposal.indices:
            y = outer.observations[i]
            cov = outer.noise_covs[i]
            try:
                w = snis_weights(inner, y, proposal.pooled, cov)
            except AllWeightsUnderflow as exc:
                exc.sample_index = int(i)
                raise
            # The reparameterized self term (G_i - G_i)^T ... vanishes.
            contributions[i] = -(w.weights @ _pathwise_terms(y, outer.design_jacobians[i], inner, cov))
            realized[i] = w.realized_ess
            covered[i] = True

    if not np.all(covered):
        raise ValueError("proposal sets do not cover every outer sample")
    estimate = GradEstimate(
        value=contributions.mean(axis=0),
        contributions=contributions,
        realized_ess=realized,
        forward_cost=counter.count - start,
        n_sets=len(proposals),
    )
    logger.debug(f"EIG gradient {estimate.value} from {len(proposals)} proposal sets")
    return estimate


@dataclass(frozen=True)
class GradientProblem:
    """Everything the proposal pipeline needs at one design."""

    model: ForwardModel
    prior: Gaussian
    n_outer: int
    n_inner: int
    n_groups: int = DEFAULT_GROUPS
    threshold: Optional[float] = None
    trigger_fraction: float = DEFAULT_TRIGGER_FRACTION
    grouping: bool = True
    perturb: bool = True
    threads: int = 1

    @property
    def ess_threshold(self) -> float:
        return float(self.prior.dim) if self.threshold is None else self.threshold


@dataclass(frozen=True, eq=False)
class PipelineResult:
    estimate: GradEstimate
    grouping: Grouping
    proposals: List[ProposalSet]
    stats: EkiStats
    ledger: Dict[str, int]


def inner_gradient(problem: GradientProblem, outer: OuterSet, meas: Measurement,
                   rng: RngStream, counter: EvalCounter,
                   n_inner: Optional[int] = None, grouping: Optional[bool] = None) -> PipelineResult:
    """Prior ensemble, prediction, conservative ESS, grouping, pooled proposals, gradient."""
    J = n_inner or problem.n_inner
    use_grouping = problem.grouping if grouping is None else grouping

    start = counter.count
    ensemble = sample_gaussian(problem.prior, J, rng.spawn(STREAM_PRIOR))
    stats = predict(ensemble, problem.model, meas, counter, threads=problem.threads)
    predict_cost = counter.count - start

    noise_cov = problem.model.noise_covariance(meas)
    if use_grouping:
        pooled_global = make_pooled(outer, PoolingWeights.uniform(outer.size))
        grouping = make_grouping(outer, pooled_global, noise_cov, stats, J, problem.ess_threshold,
                                 problem.n_groups, problem.trigger_fraction)
    else:
        grouping = trivial_grouping(outer.size, problem.ess_threshold)
    proposals = build_proposals(outer, grouping, stats, rng.spawn(STREAM_EKI), perturb=problem.perturb)
    estimate = eig_gradient(outer, proposals, problem.model, meas, counter, problem.threads)
    ledger = {"predict": predict_cost, "proposal": estimate.forward_cost}
    return PipelineResult(estimate, grouping, proposals, stats, ledger)


def pipeline_gradient(problem: GradientProblem, meas: Measurement, rng: RngStream,
                      counter: EvalCounter) -> PipelineResult:
    """Full pipeline at one design; ledger holds outer, predict and proposal solve counts."""
    start = counter.count
    outer = generate_outer(problem.prior, problem.model, meas, problem.n_outer,
                           rng.spawn(STREAM_OUTER), counter, problem.threads)
    outer_cost = counter.count - start
    result = inner_gradient(problem, outer, meas, rng, counter)
    ledger = {"outer": outer_cost, **result.ledger}
    return replace(result, ledger=ledger)


def estimate_grad_std(grad_fn: Callable[[int], GradEstimate], repeats: int) -> np.ndarray:
    """Per-component sample std of ``grad_fn(r).value`` over reseeds r = 0..repeats-1."""
    if repeats < 5:
        raise ValueError("need at least 5 repeats")
    values = np.stack([np.atleast_1d(grad_fn(r).value) for r in range(repeats)])
    return values.std(axis=0, ddof=1)


def variance_study(problem: GradientProblem, outer: OuterSet, meas: Measurement,
                   rng: RngStream, counter: EvalCounter, repeats: int = 10) -> pd.DataFrame:
    """Gradient std under inner reseeding: ungrouped with J, ungrouped with the
    grouped total budget, and grouped. Outer samples stay fixed."""
    probe = inner_gradient(problem, outer, meas, rng.spawn(0), counter, grouping=True)
    budget = problem.n_inner * probe.estimate.n_sets

    variants = [
        ("ungrouped", problem.n_inner, False),
        ("ungrouped", budget, False),
        ("grouped", problem.n_inner, True),
    ]
    rows = []
    for method, J, grouped in variants:
        def run(r, J=J, grouped=grouped):
            return inner_gradient(problem, outer, meas, rng.spawn(r), counter,
                                  n_inner=J, grouping=grouped).estimate

        std = estimate_grad_std(run, repeats)
        total = J * (probe.estimate.n_sets if grouped else 1)
        for k, s in enumerate(std):
            rows.append({"method": method, "inner_size": J, "total_inner": total,
                         "component": k, "std": float(s)})
        logger.info(f"Gradient std ({method}, J={J}): {np.round(std, 6)}")
    return pd.DataFrame(rows)


def ascend_design(state: DesignState, grad_fn: Callable[[np.ndarray], np.ndarray],
                  steps: int) -> DesignState:
    """d <- clip(d + step * grad) for ``steps`` iterations."""
    design = state.design.copy()
    trajectory = list(state.trajectory)
    iteration = state.iteration
    for _ in range(steps):
        grad = np.atleast_1d(np.asarray(grad_fn(design), dtype=float))
        if not np.all(np.isfinite(grad)):
            raise GppBedError(f"non-finite design gradient at iteration {iteration}")
        design = state.clip(design + state.step_size * grad)
        iteration += 1
        trajectory.append({"iteration": iteration, "design": design.tolist(), "gradient": grad.tolist()})
    return replace(state, design=design, iteration=iteration, trajectory=trajectory)


def eig_value_gaussian_linear(prior: Gaussian, A, noise_cov: np.ndarray,
                              design: Optional[np.ndarray] = None) -> float:
    """1/2 log det(A C0 A^T + Sigma) - 1/2 log det Sigma; ``A`` may be a callable of the design."""
    noise_cov = np.atleast_2d(noise_cov)
    check_invertible(noise_cov, "noise covariance")
    if callable(A):
        A = A(design)
    A = np.atleast_2d(np.asarray(A, dtype=float))
    _, logdet_evidence = np.linalg.slogdet(A @ prior.cov @ A.T + noise_cov)
    _, logdet_noise = np.linalg.slogdet(noise_cov)
    return 0.5 * (logdet_evidence - logdet_noise)
