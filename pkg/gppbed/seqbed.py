"""Sequential design with a physical track and an error track.

Each stage picks a measurement for the source location by a grid-quadrature
EIG scan, updates a grid belief over the location, then designs a second
measurement for the error parameters (source strength or network correction)
with the grouped pooled-posterior gradient, retrains those parameters and refits
the location belief against the whole measurement history.
"""

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple
import logging

import numpy as np
from scipy.ndimage import gaussian_filter1d
from scipy.special import logsumexp

from .eig import DesignState, GradientProblem, ascend_design, pipeline_gradient
from .errors import ZeroPosteriorMass
from .forward import (
    DEFAULT_NOISE_VAR,
    EvalCounter,
    Measurement,
    MlpCorrection,
    PdeModel,
    SourceSpec,
    eval_forward,
    eval_parameter_sensitivity,
)
from .isampling import DEFAULT_GROUPS, DEFAULT_TRIGGER_FRACTION
from .statcore import STREAM_DESIGN, STREAM_NETWORK_INIT, STREAM_NOISE, Gaussian, RngStream

logger = logging.getLogger(__name__)

CASES = ("parametric", "structural")
DESIGN_MODES = ("gradient", "random")
LEDGER_COLUMNS = ("physical_design", "error_outer", "error_predict", "error_proposal",
                  "training", "refit", "snapshot")
TIE_RTOL = 1e-9
ENTROPY_BINS = 4096


def grid_eig(predictions: np.ndarray, weights: np.ndarray, noise_var: float) -> np.ndarray:
    """EIG of each candidate column for a discrete belief over nodes (rows).

    The evidence is the mixture sum_k w_k N(g_k, sigma^2); its entropy is taken on a
    fine grid by smoothing a weighted histogram of the node predictions.
    """
    predictions = np.atleast_2d(predictions)
    sigma = float(np.sqrt(noise_var))
    conditional = 0.5 * np.log(2.0 * np.pi * np.e * noise_var)
    out = np.empty(predictions.shape[1])
    for m in range(predictions.shape[1]):
        g = predictions[:, m]
        lo, hi = g.min() - 8.0 * sigma, g.max() + 8.0 * sigma
        n_bins = int(min(ENTROPY_BINS, max(256, np.ceil((hi - lo) / (sigma / 16.0)))))
        counts, edges = np.histogram(g, bins=n_bins, range=(lo, hi), weights=weights)
        width = edges[1] - edges[0]
        density = gaussian_filter1d(counts, sigma / width, mode="constant") / width
        density = density / (density.sum() * width)
        positive = density > 0
        entropy = -np.sum(density[positive] * np.log(density[positive])) * width
        out[m] = entropy - conditional
    return out


def pick_lexicographic_max(values: np.ndarray) -> int:
    """First index whose value is within TIE_RTOL of the maximum."""
    best = float(np.max(values))
    return int(np.flatnonzero(values >= best - TIE_RTOL * max(abs(best), 1.0))[0])


def grid_bayes_update(log_weights: np.ndarray, predictions: np.ndarray, y: float,
                      noise_var: float) -> np.ndarray:
    """Normalized log posterior over nodes after one scalar observation."""
    log_post = log_weights - 0.5 * (y - predictions) ** 2 / noise_var
    total = logsumexp(log_post)
    if not np.isfinite(total):
        raise ZeroPosteriorMass("every grid likelihood underflows")
    return log_post - total


@dataclass(frozen=True)
class SequentialSetup:
    """Problem definition shared by every stage."""

    case: str = "parametric"
    truth_location: Tuple[float, float] = (0.3, 0.3)
    truth_width: float = 0.2
    truth_strength: float = 2.0
    model_strength: float = 3.0
    noise_var: float = DEFAULT_NOISE_VAR
    grid_size: int = 64
    belief_size: int = 50
    candidate_size: int = 9
    design_lower: float = -0.5
    design_upper: float = 1.5
    n_outer: int = 180
    n_inner: int = 180
    n_groups: int = DEFAULT_GROUPS
    threshold: Optional[float] = None
    trigger_fraction: float = DEFAULT_TRIGGER_FRACTION
    grouping: bool = True
    design_step_size: float = 0.05
    design_steps: int = 1
    design_mode: str = "gradient"
    training_steps: int = 200
    learning_rate: float = 1e-3
    strength_prior_std: float = 0.5
    network_prior_std: float = 0.1
    network_init_scale: float = 0.1
    chunk: int = 256
    threads: int = 1

    def __post_init__(self):
        if self.case not in CASES:
            raise ValueError(f"case must be one of {CASES}")
        if self.design_mode not in DESIGN_MODES:
            raise ValueError(f"design_mode must be one of {DESIGN_MODES}")

    # -- models -----------------------------------------------------------
    @property
    def model_kind(self) -> str:
        return "gaussian" if self.case == "parametric" else "rational"

    def _base_source(self, location, strength: float, kind: str) -> SourceSpec:
        return SourceSpec(kind, (location[0], location[1], self.truth_width, strength))

    def truth(self) -> PdeModel:
        source = self._base_source(self.truth_location, self.truth_strength, "gaussian")
        return PdeModel(source=source, unknowns="location", nx=self.grid_size, ny=self.grid_size)

    def physical_model(self, theta_error: np.ndarray) -> PdeModel:
        """Location as unknown, error parameters fixed."""
        if self.case == "parametric":
            source = self._base_source((0.0, 0.0), float(theta_error[0]), self.model_kind)
            return PdeModel(source=source, unknowns="location", nx=self.grid_size, ny=self.grid_size)
        source = self._base_source((0.0, 0.0), self.truth_strength, self.model_kind)
        return PdeModel(source=source, unknowns="location", correction=MlpCorrection(theta_error),
                        nx=self.grid_size, ny=self.grid_size)

    def error_model(self, location: np.ndarray) -> PdeModel:
        """Error parameters as unknowns at a fixed source location."""
        unknowns = "strength" if self.case == "parametric" else "network"
        strength = self.model_strength if self.case == "parametric" else self.truth_strength
        source = self._base_source(location, strength, self.model_kind)
        return PdeModel(source=source, unknowns=unknowns, nx=self.grid_size, ny=self.grid_size)

    def initial_error(self, seed: int) -> np.ndarray:
        if self.case == "parametric":
            return np.array([self.model_strength])
        return MlpCorrection.random(RngStream(seed, STREAM_NETWORK_INIT), self.network_init_scale).weights

    def error_prior(self, theta_error: np.ndarray) -> Gaussian:
        std = self.strength_prior_std if self.case == "parametric" else self.network_prior_std
        return Gaussian.isotropic(theta_error, std ** 2)

    # -- grids ------------------------------------------------------------
    def belief_nodes(self) -> np.ndarray:
        axis = np.linspace(0.0, 1.0, self.belief_size)
        gx, gy = np.meshgrid(axis, axis, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel()], axis=1)

    def candidates(self) -> np.ndarray:
        axis = np.linspace(self.design_lower, self.design_upper, self.candidate_size)
        gx, gy = np.meshgrid(axis, axis, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel()], axis=1)


@dataclass(frozen=True, eq=False)
class SeqState:
    stage: int
    log_posterior: np.ndarray
    log_prior: np.ndarray
    theta_error: np.ndarray
    map_location: Optional[np.ndarray] = None
    designs: Tuple[Tuple[float, float], ...] = ()
    observations: Tuple[float, ...] = ()
    times: Tuple[float, ...] = ()

    @classmethod
    def initial(cls, setup: SequentialSetup, seed: int) -> "SeqState":
        n = setup.belief_size ** 2
        log_prior = np.full(n, -np.log(n))
        return cls(0, log_prior.copy(), log_prior, setup.initial_error(seed))

    @property
    def posterior(self) -> np.ndarray:
        return np.exp(self.log_posterior)


@dataclass(frozen=True, eq=False)
class StageReport:
    stage: int
    time: float
    design_physical: np.ndarray
    design_error: np.ndarray
    map_location: np.ndarray
    theta_error: np.ndarray
    y_physical: float
    y_error: float
    ledger: Dict[str, int]
    field_error: Optional[np.ndarray] = None
    design_trajectory: List[Dict] = field(default_factory=list)
    grouped_sets: int = 1

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "time": self.time,
            "design_physical": self.design_physical.tolist(),
            "design_error": self.design_error.tolist(),
            "map_location": self.map_location.tolist(),
            "theta_error": self.theta_error.tolist(),
            "y_physical": self.y_physical,
            "y_error": self.y_error,
            "ledger": dict(self.ledger),
            "ledger_total": int(sum(self.ledger.values())),
            "grouped_sets": self.grouped_sets,
            "design_trajectory": self.design_trajectory,
        }


def node_predictions(model: PdeModel, nodes: np.ndarray, time: float, points: np.ndarray,
                     counter: EvalCounter, chunk: int = 256) -> np.ndarray:
    """Model predictions at ``points`` for each location node (nodes x points)."""
    out = []
    for start in range(0, nodes.shape[0], chunk):
        block = nodes[start:start + chunk]
        sources = np.stack([model.source_field(theta) for theta in block])
        fields = model.solve(sources, time)
        counter.increment(block.shape[0])
        out.append(model.interpolate(fields, points))
    return np.concatenate(out, axis=0)


def observe_truth(setup: SequentialSetup, design: np.ndarray, time: float,
                  rng: RngStream, counter: EvalCounter) -> float:
    meas = Measurement(design, time, setup.noise_var)
    value = eval_forward(setup.truth(), np.asarray(setup.truth_location), meas, counter)[0]
    return float(value + np.sqrt(setup.noise_var) * rng.generator().standard_normal())


def design_physical(state: SeqState, setup: SequentialSetup, counter: EvalCounter,
                    time: float) -> Tuple[np.ndarray, np.ndarray]:
    """Candidate with the largest grid-quadrature EIG under the current belief.

    Returns the design and the node predictions at every candidate, which the
    subsequent update reuses.
    """
    candidates = setup.candidates()
    model = setup.physical_model(state.theta_error)
    predictions = node_predictions(model, setup.belief_nodes(), time, candidates, counter, setup.chunk)
    values = grid_eig(predictions, state.posterior, setup.noise_var)
    best = pick_lexicographic_max(values)
    logger.debug(f"Physical design EIG max {values[best]:.4f} at {candidates[best]}")
    return candidates[best], predictions[:, best]


def update_physical(state: SeqState, y: float, design: np.ndarray, time: float,
                    predictions: np.ndarray, noise_var: float) -> SeqState:
    """Pointwise Bayes on the location grid; MAP is the first maximizing node."""
    log_post = grid_bayes_update(state.log_posterior, predictions, y, noise_var)
    return replace(
        state,
        log_posterior=log_post,
        map_location=None,
        designs=state.designs + (tuple(float(v) for v in design),),
        observations=state.observations + (float(y),),
        times=state.times + (float(time),),
    )


def map_node(state: SeqState, setup: SequentialSetup) -> np.ndarray:
    return setup.belief_nodes()[int(np.argmax(state.log_posterior))]


def update_error_parameters(setup: SequentialSetup, model: PdeModel, theta: np.ndarray, y: float,
                            meas: Measurement, counter: EvalCounter) -> np.ndarray:
    """Newton step for the strength, gradient ascent for the network weights."""
    theta = np.asarray(theta, dtype=float).copy()
    if model.unknowns == "strength":
        value, jac = eval_parameter_sensitivity(model, theta, meas, counter)
        if jac[0, 0] == 0:
            return theta
        return theta + (y - value[0]) / jac[0, 0]
    for _ in range(setup.training_steps):
        value, jac = eval_parameter_sensitivity(model, theta, meas, counter)
        residual = y - value[0]
        if residual == 0:
            break
        theta = theta + setup.learning_rate * jac[0] * residual / meas.noise_var
    return theta


def design_and_update_error(state: SeqState, setup: SequentialSetup, start_design: np.ndarray,
                            time: float, rng: RngStream, counter: EvalCounter,
                            truth_counter: EvalCounter) -> Tuple[np.ndarray, np.ndarray, float, Dict]:
    """Design the error measurement, observe it and retrain the error parameters."""
    location = state.map_location if state.map_location is not None else map_node(state, setup)
    model = setup.error_model(location)
    ledger = {"error_outer": 0, "error_predict": 0, "error_proposal": 0, "training": 0}
    info: Dict = {"trajectory": [], "grouped_sets": 1}
    lower, upper = setup.design_lower, setup.design_upper

    if setup.design_mode == "random":
        design = rng.spawn(STREAM_DESIGN).generator().uniform(lower, upper, size=2)
    else:
        problem = GradientProblem(
            model=model, prior=setup.error_prior(state.theta_error),
            n_outer=setup.n_outer, n_inner=setup.n_inner, n_groups=setup.n_groups,
            threshold=setup.threshold, trigger_fraction=setup.trigger_fraction,
            grouping=setup.grouping, threads=setup.threads,
        )
        iteration = [0]

        def grad_fn(d):
            meas = Measurement(d, time, setup.noise_var)
            result = pipeline_gradient(problem, meas, rng.spawn(STREAM_DESIGN).spawn(iteration[0]), counter)
            iteration[0] += 1
            ledger["error_outer"] += result.ledger["outer"]
            ledger["error_predict"] += result.ledger["predict"]
            ledger["error_proposal"] += result.ledger["proposal"]
            info["grouped_sets"] = result.estimate.n_sets
            return result.estimate.value

        state_d = DesignState(start_design, setup.design_step_size, lower, upper)
        state_d = ascend_design(state_d, grad_fn, setup.design_steps)
        design = state_d.design
        info["trajectory"] = state_d.trajectory

    y = observe_truth(setup, design, time, rng.spawn(STREAM_NOISE).spawn(1), truth_counter)
    meas = Measurement(design, time, setup.noise_var)
    start = counter.count
    theta = update_error_parameters(setup, model, state.theta_error, y, meas, counter)
    ledger["training"] = counter.count - start
    logger.debug(f"Error design {design}, y={y:.4f}")
    return design, theta, y, {**info, "ledger": ledger}


def refit_history(state: SeqState, setup: SequentialSetup, counter: EvalCounter) -> SeqState:
    """Location belief recomputed from the prior and every past physical measurement."""
    log_post = state.log_prior.copy()
    if state.designs:
        model = setup.physical_model(state.theta_error)
        nodes = setup.belief_nodes()
        for design, y, time in zip(state.designs, state.observations, state.times):
            preds = node_predictions(model, nodes, time, np.array([design]), counter, setup.chunk)[:, 0]
            log_post = log_post - 0.5 * (y - preds) ** 2 / setup.noise_var
        total = logsumexp(log_post)
        if not np.isfinite(total):
            raise ZeroPosteriorMass("every grid likelihood underflows")
        log_post = log_post - total
    refit = replace(state, log_posterior=log_post)
    return replace(refit, map_location=map_node(refit, setup))


def field_error_map(setup: SequentialSetup, state: SeqState, time: float,
                    counter: EvalCounter, truth_counter: EvalCounter) -> np.ndarray:
    """|u_model - u_true| / max |u_true| on the solver grid."""
    model = setup.physical_model(state.theta_error)
    location = state.map_location if state.map_location is not None else map_node(state, setup)
    u_model = model.field_at(location, time)
    counter.increment()
    truth = setup.truth()
    u_true = truth.field_at(np.asarray(setup.truth_location), time)
    truth_counter.increment()
    scale = max(float(np.max(np.abs(u_true))), np.finfo(float).tiny)
    return np.abs(u_model - u_true) / scale


def stage_time(stage: int) -> float:
    return Measurement.at_stage(np.zeros(2), stage).time


def run_stage(state: SeqState, setup: SequentialSetup, seed: int, counter: EvalCounter,
              truth_counter: EvalCounter) -> Tuple[SeqState, StageReport]:
    """One full stage; a pure function of (state, setup, seed)."""
    stage = state.stage + 1
    rng = RngStream(seed).spawn(stage)
    time = stage_time(stage)
    ledger = {name: 0 for name in LEDGER_COLUMNS}

    start = counter.count
    design_g, preds = design_physical(state, setup, counter, time)
    ledger["physical_design"] = counter.count - start
    y_g = observe_truth(setup, design_g, time, rng.spawn(STREAM_NOISE).spawn(0), truth_counter)
    state = update_physical(state, y_g, design_g, time, preds, setup.noise_var)
    state = replace(state, map_location=map_node(state, setup))

    design_e, theta_e, y_e, info = design_and_update_error(
        state, setup, design_g, time, rng, counter, truth_counter
    )
    ledger.update(info["ledger"])
    state = replace(state, theta_error=theta_e)

    start = counter.count
    state = refit_history(state, setup, counter)
    ledger["refit"] = counter.count - start

    start = counter.count
    field_error = field_error_map(setup, state, time, counter, truth_counter)
    ledger["snapshot"] = counter.count - start

    state = replace(state, stage=stage)
    report = StageReport(
        stage=stage, time=time, design_physical=np.asarray(design_g), design_error=np.asarray(design_e),
        map_location=state.map_location, theta_error=theta_e, y_physical=y_g, y_error=y_e,
        ledger=ledger, field_error=field_error, design_trajectory=info["trajectory"],
        grouped_sets=info["grouped_sets"],
    )
    logger.info(f"Stage {stage}: MAP {state.map_location}, cost {sum(ledger.values())}")
    return state, report
