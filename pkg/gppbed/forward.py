"""Forward models: linear-Gaussian toy and the 2D convection-diffusion source problem.

The PDE is integrated with an explicit scheme (central differences for diffusion,
first-order upwind for convection) on a node-centred grid with mirrored ghost
nodes for the homogeneous Neumann boundaries. Measurements are bilinear
interpolations of the field; design derivatives are central differences of the
interpolant, so they come for free with the solve that produced the field.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union
import logging
import math
import threading

import numpy as np
from scipy import linalg
from scipy.interpolate import RegularGridInterpolator

from .errors import GppBedError, OutOfDomain, UnstableStep
from .statcore import Ensemble, Gaussian, RngStream, check_invertible

logger = logging.getLogger(__name__)

STAGE_BASE_TIME = 0.05
STAGE_TIME_INCREMENT = 0.005
DEFAULT_NOISE_VAR = 0.05 ** 2


@dataclass(frozen=True, eq=False)
class Measurement:
    """One scalar measurement: where (design), when (time), and how noisy."""

    design: np.ndarray
    time: float = STAGE_BASE_TIME + STAGE_TIME_INCREMENT
    noise_var: float = DEFAULT_NOISE_VAR

    def __post_init__(self):
        object.__setattr__(self, "design", np.atleast_1d(np.asarray(self.design, dtype=float)))
        if self.noise_var <= 0:
            raise ValueError("noise variance must be positive")

    @classmethod
    def at_stage(cls, design, stage: int, noise_var: float = DEFAULT_NOISE_VAR) -> "Measurement":
        return cls(design, STAGE_BASE_TIME + stage * STAGE_TIME_INCREMENT, noise_var)

    def moved(self, design) -> "Measurement":
        return replace(self, design=np.atleast_1d(np.asarray(design, dtype=float)))


class EvalCounter:
    """Thread-safe count of full forward solves."""

    def __init__(self, count: int = 0):
        self._count = int(count)
        self._lock = threading.Lock()

    @property
    def count(self) -> int:
        return self._count

    def increment(self, n: int = 1) -> None:
        if n < 0:
            raise ValueError("counter is monotone")
        with self._lock:
            self._count += n

    def __repr__(self) -> str:
        return f"EvalCounter({self._count})"


# ---------------------------------------------------------------------------
# Neural-network correction
# ---------------------------------------------------------------------------

MLP_LAYERS = (2, 4, 4, 1)
MLP_PARAMETER_COUNT = sum(n_in * n_out + n_out for n_in, n_out in zip(MLP_LAYERS[:-1], MLP_LAYERS[1:]))


@dataclass(frozen=True, eq=False)
class MlpCorrection:
    """2 -> 4 (tanh) -> 4 (tanh) -> 1 network; weights stored layer by layer as W, b."""

    weights: np.ndarray

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=float).ravel()
        if weights.size != MLP_PARAMETER_COUNT:
            raise ValueError(f"expected {MLP_PARAMETER_COUNT} weights, got {weights.size}")
        object.__setattr__(self, "weights", weights)

    @classmethod
    def zeros(cls) -> "MlpCorrection":
        return cls(np.zeros(MLP_PARAMETER_COUNT))

    @classmethod
    def random(cls, rng: RngStream, scale: float) -> "MlpCorrection":
        return cls(scale * rng.generator().standard_normal(MLP_PARAMETER_COUNT))

    def layers(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        out, offset = [], 0
        for n_in, n_out in zip(MLP_LAYERS[:-1], MLP_LAYERS[1:]):
            w = self.weights[offset:offset + n_in * n_out].reshape(n_out, n_in)
            offset += n_in * n_out
            b = self.weights[offset:offset + n_out]
            offset += n_out
            out.append((w, b))
        return out

    def evaluate(self, inputs: np.ndarray) -> np.ndarray:
        (w1, b1), (w2, b2), (w3, b3) = self.layers()
        h1 = np.tanh(np.atleast_2d(inputs) @ w1.T + b1)
        h2 = np.tanh(h1 @ w2.T + b2)
        return (h2 @ w3.T + b3)[:, 0]

    def weight_jacobian(self, inputs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Outputs and reverse-mode derivatives w.r.t. all weights, one row per input."""
        x = np.atleast_2d(np.asarray(inputs, dtype=float))
        (w1, b1), (w2, b2), (w3, b3) = self.layers()
        h1 = np.tanh(x @ w1.T + b1)
        h2 = np.tanh(h1 @ w2.T + b2)
        out = (h2 @ w3.T + b3)[:, 0]

        n = x.shape[0]
        delta2 = w3[0] * (1.0 - h2 ** 2)
        delta1 = (delta2 @ w2) * (1.0 - h1 ** 2)
        grads = [
            (delta1[:, :, None] * x[:, None, :]).reshape(n, -1),
            delta1,
            (delta2[:, :, None] * h1[:, None, :]).reshape(n, -1),
            delta2,
            h2,
            np.ones((n, 1)),
        ]
        return out, np.concatenate(grads, axis=1)

    def to_dict(self) -> Dict[str, list]:
        return {"layers": list(MLP_LAYERS), "weights": self.weights.tolist()}

    @classmethod
    def from_dict(cls, payload: Dict[str, list]) -> "MlpCorrection":
        if tuple(payload.get("layers", MLP_LAYERS)) != MLP_LAYERS:
            raise ValueError("unsupported architecture")
        return cls(np.array(payload["weights"], dtype=float))


def mlp_eval_and_grad(c: MlpCorrection, input: np.ndarray) -> Tuple[float, np.ndarray]:
    """Network value at one 2-vector input and its gradient w.r.t. the 37 weights."""
    values, jac = c.weight_jacobian(np.asarray(input, dtype=float).reshape(1, 2))
    return float(values[0]), jac[0]


# ---------------------------------------------------------------------------
# Linear-Gaussian model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianBumpMap:
    """Design-dependent linear map A(d)[0, k] = exp(-|d - c_k|^2 / (2 w^2))."""

    centers: Tuple[Tuple[float, ...], ...]
    width: float = 0.5

    def __call__(self, design: np.ndarray) -> np.ndarray:
        centers = np.asarray(self.centers, dtype=float)
        d = np.atleast_1d(design)
        sq = np.sum((centers - d) ** 2, axis=1)
        return np.exp(-sq / (2.0 * self.width ** 2))[None, :]


@dataclass(frozen=True, eq=False)
class LinearModel:
    """Y = A(d) theta + eps with eps ~ noise."""

    A: np.ndarray
    noise: Gaussian
    design_map: Optional[Callable[[np.ndarray], np.ndarray]] = None
    design_step: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "A", np.atleast_2d(np.asarray(self.A, dtype=float)))
        check_invertible(self.noise.cov, "noise covariance")
        if self.noise.dim != self.A.shape[0]:
            raise ValueError("noise dimension must equal the number of rows of A")

    @property
    def parameter_dim(self) -> int:
        return self.A.shape[1]

    @property
    def observation_dim(self) -> int:
        return self.A.shape[0]

    def matrix(self, design: Optional[np.ndarray] = None) -> np.ndarray:
        if self.design_map is None or design is None:
            return self.A
        return np.atleast_2d(self.design_map(np.asarray(design, dtype=float)))

    def noise_covariance(self, meas: Measurement) -> np.ndarray:
        return self.noise.cov

    def evaluate(self, theta: np.ndarray, meas: Measurement,
                 with_design_grad: bool = False) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if theta.size != self.parameter_dim:
            raise ValueError(f"theta has dimension {theta.size}, model expects {self.parameter_dim}")
        value = self.matrix(meas.design) @ theta
        if not with_design_grad:
            return value, None
        d = meas.design
        jac = np.zeros((self.observation_dim, d.size))
        if self.design_map is not None:
            h = self.design_step
            for k in range(d.size):
                step = np.zeros(d.size)
                step[k] = h
                jac[:, k] = (self.matrix(d + step) @ theta - self.matrix(d - step) @ theta) / (2 * h)
        return value, jac

    def sensitivity(self, theta: np.ndarray, meas: Measurement) -> Tuple[np.ndarray, np.ndarray, int]:
        value, _ = self.evaluate(theta, meas)
        return value, self.matrix(meas.design), 1


def linear_toy_model(noise_var: float = 0.25,
                     centers: Sequence[Sequence[float]] = ((0.0, 0.0), (1.0, 1.0)),
                     width: float = 0.5) -> LinearModel:
    """Scalar-observation toy with a smooth design dependence and a closed-form EIG."""
    bump = GaussianBumpMap(tuple(tuple(c) for c in centers), width)
    return LinearModel(
        A=bump(np.zeros(len(centers[0]))),
        noise=Gaussian.scalar(0.0, noise_var),
        design_map=bump,
    )


# ---------------------------------------------------------------------------
# Convection-diffusion model
# ---------------------------------------------------------------------------

SOURCE_KINDS = ("gaussian", "rational")
UNKNOWNS = {"source": 4, "location": 2, "strength": 1, "network": MLP_PARAMETER_COUNT}


@dataclass(frozen=True)
class SourceSpec:
    """Source term with parameters (theta_x, theta_y, theta_h, theta_s)."""

    kind: str = "gaussian"
    theta: Tuple[float, float, float, float] = (0.25, 0.25, 0.2, 2.0)

    def __post_init__(self):
        if self.kind not in SOURCE_KINDS:
            raise ValueError(f"unknown source kind {self.kind!r}")
        theta = tuple(float(v) for v in self.theta)
        if len(theta) != 4:
            raise ValueError("source needs (theta_x, theta_y, theta_h, theta_s)")
        if theta[2] <= 0:
            raise ValueError("source width theta_h must be positive")
        object.__setattr__(self, "theta", theta)

    def with_params(self, x=None, y=None, h=None, s=None) -> "SourceSpec":
        tx, ty, th, ts = self.theta
        return replace(self, theta=(
            tx if x is None else x, ty if y is None else y,
            th if h is None else h, ts if s is None else s,
        ))

    def field(self, zx: np.ndarray, zy: np.ndarray) -> np.ndarray:
        tx, ty, th, ts = self.theta
        r2 = (tx - zx) ** 2 + (ty - zy) ** 2
        if self.kind == "gaussian":
            return ts / (2.0 * np.pi * th ** 2) * np.exp(-r2 / (2.0 * th ** 2))
        return 3.0 * ts / (np.pi * (r2 / (2.0 * th ** 2) + 2.0 * th ** 2))


@dataclass(frozen=True, eq=False)
class PdeModel:
    """du/dt = D lap(u) - v(t).grad(u) + S on [z_L, z_R]^2, Neumann walls, u(0) = 0.

    ``unknowns`` selects which quantities the parameter vector theta carries:
    the full source (4), its location (2), its strength (1) or the 37 weights of the
    additive network correction. Everything not carried by theta comes from
    ``source`` and ``correction``.
    """

    source: SourceSpec = field(default_factory=SourceSpec)
    unknowns: str = "location"
    correction: Optional[MlpCorrection] = None
    nx: int = 64
    ny: int = 64
    z_left: float = -3.0
    z_right: float = 2.0
    diffusion: float = 1.0
    velocity_rate: float = 50.0
    t_end: float = 0.1
    cfl_safety: float = 0.9

    def __post_init__(self):
        if self.unknowns not in UNKNOWNS:
            raise ValueError(f"unknowns must be one of {sorted(UNKNOWNS)}")
        if self.nx < 16 or self.ny < 16:
            raise ValueError("grid must be at least 16 x 16")
        if self.z_right <= self.z_left:
            raise ValueError("empty domain")

    # -- geometry ---------------------------------------------------------
    @cached_property
    def axes(self) -> Tuple[np.ndarray, np.ndarray]:
        return (np.linspace(self.z_left, self.z_right, self.nx),
                np.linspace(self.z_left, self.z_right, self.ny))

    @cached_property
    def mesh(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(*self.axes, indexing="ij")

    @property
    def spacing(self) -> Tuple[float, float]:
        x, y = self.axes
        return x[1] - x[0], y[1] - y[0]

    @property
    def design_step(self) -> float:
        return 0.25 * min(self.spacing)

    @property
    def parameter_dim(self) -> int:
        return UNKNOWNS[self.unknowns]

    @property
    def observation_dim(self) -> int:
        return 1

    def noise_covariance(self, meas: Measurement) -> np.ndarray:
        return np.array([[meas.noise_var]])

    # -- parameterization -------------------------------------------------
    def configure(self, theta: np.ndarray) -> Tuple[SourceSpec, Optional[MlpCorrection]]:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if theta.size != self.parameter_dim:
            raise ValueError(f"theta has dimension {theta.size}, model expects {self.parameter_dim}")
        if self.unknowns == "source":
            return replace(self.source, theta=tuple(theta)), self.correction
        if self.unknowns == "location":
            return self.source.with_params(x=theta[0], y=theta[1]), self.correction
        if self.unknowns == "strength":
            return self.source.with_params(s=theta[0]), self.correction
        return self.source, MlpCorrection(theta)

    def network_inputs(self, source: SourceSpec) -> np.ndarray:
        zx, zy = self.mesh
        return np.stack([(source.theta[0] - zx).ravel(), (source.theta[1] - zy).ravel()], axis=1)

    def source_field(self, theta: np.ndarray) -> np.ndarray:
        source, correction = self.configure(theta)
        values = source.field(*self.mesh)
        if correction is not None:
            values = values + correction.evaluate(self.network_inputs(source)).reshape(values.shape)
        return values

    def sensitivity_fields(self, theta: np.ndarray) -> np.ndarray:
        """d(source field)/d(theta), one field per parameter; the model is linear in these."""
        source, correction = self.configure(theta)
        if self.unknowns == "strength":
            return source.with_params(s=1.0).field(*self.mesh)[None]
        if self.unknowns == "network":
            _, jac = correction.weight_jacobian(self.network_inputs(source))
            return jac.T.reshape(-1, self.nx, self.ny)
        raise ValueError(f"the field is not linear in {self.unknowns!r} parameters")

    # -- time integration -------------------------------------------------
    def time_steps(self, time: float) -> Tuple[int, float]:
        if not 0.0 < time <= self.t_end + 1e-12:
            raise OutOfDomain(f"time {time} outside (0, {self.t_end}]")
        dx, dy = self.spacing
        v_max = abs(self.velocity_rate) * self.t_end
        rate = (2.0 * self.diffusion * (1.0 / dx ** 2 + 1.0 / dy ** 2)
                + v_max * (1.0 / dx + 1.0 / dy))
        dt_max = self.cfl_safety / rate
        n_steps = max(1, math.ceil(time / dt_max))
        return n_steps, time / n_steps

    def solve(self, source: np.ndarray, time: float) -> np.ndarray:
        """Field(s) at ``time``; ``source`` may carry leading batch axes."""
        n_steps, dt = self.time_steps(time)
        dx, dy = self.spacing
        pad = [(0, 0)] * (source.ndim - 2) + [(1, 1), (1, 1)]
        u = np.zeros_like(source, dtype=float)
        for k in range(n_steps):
            v = self.velocity_rate * k * dt
            up = np.pad(u, pad, mode="reflect")
            west, east = up[..., :-2, 1:-1], up[..., 2:, 1:-1]
            south, north = up[..., 1:-1, :-2], up[..., 1:-1, 2:]
            lap = (east - 2.0 * u + west) / dx ** 2 + (north - 2.0 * u + south) / dy ** 2
            if v >= 0:
                adv = v * ((u - west) / dx + (u - south) / dy)
            else:
                adv = v * ((east - u) / dx + (north - u) / dy)
            u = u + dt * (self.diffusion * lap - adv + source)
        if not np.all(np.isfinite(u)):
            raise UnstableStep(f"non-finite field after {n_steps} steps")
        return u

    # -- measurement ------------------------------------------------------
    def check_designs(self, points: np.ndarray) -> None:
        points = np.atleast_2d(points)
        if points.shape[1] != 2:
            raise OutOfDomain("PDE designs are 2D locations")
        if np.any(points < self.z_left) or np.any(points > self.z_right):
            raise OutOfDomain(f"design outside [{self.z_left}, {self.z_right}]^2")

    def interpolate(self, u: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Bilinear values at ``points`` (m x 2); batched fields give (batch, m)."""
        points = np.atleast_2d(points)
        self.check_designs(points)
        values = np.moveaxis(u, (-2, -1), (0, 1)) if u.ndim > 2 else u
        interp = RegularGridInterpolator(self.axes, values, method="linear")
        out = interp(points)
        return np.moveaxis(out, 0, -1) if u.ndim > 2 else out

    def _stencil(self, design: np.ndarray) -> np.ndarray:
        h = self.design_step
        offsets = np.array([[0, 0], [h, 0], [-h, 0], [0, h], [0, -h]])
        return design[None, :] + offsets

    def measure(self, u: np.ndarray, design: np.ndarray,
                with_design_grad: bool) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        if not with_design_grad:
            return self.interpolate(u, design[None, :])[..., :1], None
        values = self.interpolate(u, self._stencil(design))
        h = self.design_step
        grad = np.stack([(values[..., 1] - values[..., 2]) / (2 * h),
                         (values[..., 3] - values[..., 4]) / (2 * h)], axis=-1)
        return values[..., :1], grad[..., None, :]

    def evaluate(self, theta: np.ndarray, meas: Measurement,
                 with_design_grad: bool = False) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        self.check_designs(meas.design)
        u = self.solve(self.source_field(theta), meas.time)
        return self.measure(u, meas.design, with_design_grad)

    def field_at(self, theta: np.ndarray, time: float) -> np.ndarray:
        return self.solve(self.source_field(theta), time)

    def sensitivity(self, theta: np.ndarray, meas: Measurement) -> Tuple[np.ndarray, np.ndarray, int]:
        """Prediction and its theta-derivative from one stacked solve (1 + p fields)."""
        self.check_designs(meas.design)
        fields = np.concatenate([self.source_field(theta)[None], self.sensitivity_fields(theta)])
        u = self.solve(fields, meas.time)
        values = self.interpolate(u, meas.design[None, :])[:, 0]
        return values[:1], values[1:][None, :], fields.shape[0]


ForwardModel = Union[LinearModel, PdeModel]


# ---------------------------------------------------------------------------
# Counted evaluation API
# ---------------------------------------------------------------------------

def map_members(fn: Callable[[int], object], n: int, threads: int = 1) -> list:
    """Apply ``fn`` to 0..n-1 keeping order; results do not depend on ``threads``."""
    if threads <= 1 or n <= 1:
        return [fn(j) for j in range(n)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(n)))


def eval_forward(model: ForwardModel, theta: np.ndarray, meas: Measurement,
                 counter: EvalCounter) -> np.ndarray:
    """Noiseless prediction f(theta) at the measurement (one forward solve)."""
    value, _ = model.evaluate(theta, meas)
    counter.increment()
    return value


def forward_with_design_grad(model: ForwardModel, theta: np.ndarray, meas: Measurement,
                             counter: EvalCounter) -> Tuple[np.ndarray, np.ndarray]:
    """Prediction and its design Jacobian (d_y x d_d) from a single solve."""
    value, jac = model.evaluate(theta, meas, with_design_grad=True)
    counter.increment()
    return value, jac


def eval_forward_batch(model: ForwardModel, ensemble: Ensemble, meas: Measurement,
                       counter: EvalCounter, with_design_grad: bool = False,
                       threads: int = 1) -> Ensemble:
    """Evaluate every member; returns the ensemble with ``predictions`` populated."""

    def one(j: int):
        try:
            value, jac = model.evaluate(ensemble.members[j], meas, with_design_grad)
        except GppBedError as exc:
            exc.member_index = j
            raise
        counter.increment()
        return value, jac

    results = map_members(one, ensemble.size, threads)
    predictions = np.stack([r[0] for r in results])
    jacobians = np.stack([r[1] for r in results]) if with_design_grad else None
    logger.debug(f"Evaluated {ensemble.size} members at design {meas.design}")
    return ensemble.with_predictions(predictions, jacobians)


def loglik_design_score(y: np.ndarray, f: np.ndarray, jac: np.ndarray,
                        noise_cov: np.ndarray) -> np.ndarray:
    """Jac^T Sigma^-1 (y - f): design gradient of a Gaussian log-likelihood with y fixed."""
    residual = linalg.solve(noise_cov, np.atleast_1d(y) - np.atleast_1d(f), assume_a="pos")
    return jac.T @ residual


def design_loglik_grad(model: ForwardModel, theta: np.ndarray, y, meas: Measurement,
                       counter: EvalCounter) -> np.ndarray:
    """d/dd log p(y | theta, d) using one solve."""
    value, jac = forward_with_design_grad(model, theta, meas, counter)
    return loglik_design_score(y, value, jac, model.noise_covariance(meas))


def eval_parameter_sensitivity(model: ForwardModel, theta: np.ndarray, meas: Measurement,
                               counter: EvalCounter) -> Tuple[np.ndarray, np.ndarray]:
    """Prediction and d f / d theta; the PDE pays one solve per stacked field."""
    value, jac, solves = model.sensitivity(theta, meas)
    counter.increment(solves)
    return value, jac
