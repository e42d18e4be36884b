"""Run configuration: a KEY=VALUE file validated by a strict pydantic model."""

from pathlib import Path
from typing import Any, Dict, Literal, Optional, Union
import hashlib
import json
import logging
import os

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError
from .forward import DEFAULT_NOISE_VAR
from .seqbed import SequentialSetup

logger = logging.getLogger(__name__)

THREADS_ENV = "GPPBED_THREADS"
KEY_ALIASES = {"n": "n_outer", "j": "n_inner", "k": "n_groups", "s": "threshold"}
PAPER_SIZES = {"parametric": 180, "structural": 500, "linear-toy": 500, "diagnostics": 180}


class RunConfig(BaseModel):
    """All knobs of one run; unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    experiment: Literal["parametric", "structural", "linear-toy", "diagnostics"] = "parametric"
    seed: int = Field(default=0, ge=0, lt=2 ** 64)
    n_outer: Optional[int] = Field(default=None, ge=1)
    n_inner: Optional[int] = Field(default=None, ge=1)
    n_groups: int = Field(default=3, ge=2)
    threshold: Optional[float] = Field(default=None, gt=0)
    trigger_fraction: float = Field(default=0.05, ge=0, lt=1)
    grouping: Optional[bool] = None
    # Physical problem
    case: Optional[Literal["parametric", "structural"]] = None
    truth_x: float = 0.3
    truth_y: float = 0.3
    truth_width: float = Field(default=0.2, gt=0)
    truth_strength: float = 2.0
    model_strength: float = 3.0
    noise_var: float = Field(default=DEFAULT_NOISE_VAR, gt=0)
    grid_size: int = Field(default=64, ge=16)
    belief_size: int = Field(default=50, ge=2)
    candidate_size: int = Field(default=9, ge=1)
    # Sequential loop
    stages: int = Field(default=3, ge=1)
    design_step_size: float = Field(default=0.05, gt=0)
    design_steps: int = Field(default=1, ge=1)
    design_mode: Literal["gradient", "random"] = "gradient"
    training_steps: int = Field(default=200, ge=0)
    learning_rate: float = Field(default=1e-3, gt=0)
    strength_prior_std: float = Field(default=0.5, gt=0)
    network_prior_std: float = Field(default=0.1, gt=0)
    # Studies
    variance_study: bool = False
    repeats: int = Field(default=10, ge=5)
    toy_noise_var: float = Field(default=0.25, gt=0)
    toy_designs: int = Field(default=5, ge=1)
    # Run management
    output_dir: str = "results"
    threads: int = Field(default=1, ge=1)

    @field_validator("threshold", "n_outer", "n_inner", "grouping", "case", mode="before")
    @classmethod
    def _blank_is_none(cls, value):
        return None if isinstance(value, str) and value.strip() == "" else value

    @model_validator(mode="after")
    def _check_design_box(self):
        if not (0.0 <= self.truth_x <= 1.0 and 0.0 <= self.truth_y <= 1.0):
            raise ValueError("true source location must lie in the belief domain [0, 1]^2")
        return self

    @property
    def outer_size(self) -> int:
        return self.n_outer or PAPER_SIZES[self.experiment]

    @property
    def inner_size(self) -> int:
        return self.n_inner or PAPER_SIZES[self.experiment]

    @property
    def sequential_case(self) -> str:
        if self.case:
            return self.case
        return "structural" if self.experiment == "structural" else "parametric"

    @property
    def use_grouping(self) -> bool:
        if self.grouping is not None:
            return self.grouping
        return self.sequential_case == "structural"

    def setup(self) -> SequentialSetup:
        return SequentialSetup(
            case=self.sequential_case,
            truth_location=(self.truth_x, self.truth_y),
            truth_width=self.truth_width,
            truth_strength=self.truth_strength,
            model_strength=self.model_strength,
            noise_var=self.noise_var,
            grid_size=self.grid_size,
            belief_size=self.belief_size,
            candidate_size=self.candidate_size,
            n_outer=self.outer_size,
            n_inner=self.inner_size,
            n_groups=self.n_groups,
            threshold=self.threshold,
            trigger_fraction=self.trigger_fraction,
            grouping=self.use_grouping,
            design_step_size=self.design_step_size,
            design_steps=self.design_steps,
            design_mode=self.design_mode,
            training_steps=self.training_steps,
            learning_rate=self.learning_rate,
            strength_prior_std=self.strength_prior_std,
            network_prior_std=self.network_prior_std,
            threads=self.threads,
        )


def normalize_keys(raw: Dict[str, Any]) -> Dict[str, Any]:
    out = {}
    for key, value in raw.items():
        name = key.strip().lower().replace("-", "_")
        out[KEY_ALIASES.get(name, name)] = value
    return out


def default_threads() -> int:
    load_dotenv()
    value = os.getenv(THREADS_ENV)
    if not value:
        return 1
    try:
        return max(1, int(value))
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {value!r}") from exc


def build_config(values: Dict[str, Any]) -> RunConfig:
    try:
        return RunConfig(**normalize_keys(values))
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


def load_config(path: Optional[Union[str, Path]] = None, **overrides) -> RunConfig:
    """Read a KEY=VALUE file, apply non-None overrides and validate."""
    values: Dict[str, Any] = {"threads": default_threads()}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        values.update(normalize_keys(dotenv_values(path)))
    values.update({k: v for k, v in overrides.items() if v is not None})
    config = build_config(values)
    logger.info(f"Loaded {config.experiment} configuration (seed={config.seed})")
    return config


def config_hash(config: RunConfig) -> str:
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
