"""Experiment configuration: YAML files validated with pydantic."""

from __future__ import annotations

import hashlib
import json
import math
import re
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .arm import FieldTerm, MeasurementModel, PerturbationSpec, ResidualField
from .errors import ConfigError
from .kinematics import DHLink, DHTable
from .residual import RefitPolicy
from .robots import BUILTIN, Robot, builtin

_PI_EXPR = re.compile(r"^\s*([+-]?)\s*(\d*\.?\d*)\s*\*?\s*pi\s*(?:/\s*(\d+\.?\d*))?\s*$")


def parse_angle(v) -> float:
    """Accept plain numbers or strings such as ``"pi/2"``, ``"-pi"``, ``"0.5*pi"``."""
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        return float(v)
    if isinstance(v, str):
        m = _PI_EXPR.match(v)
        if m:
            sign, coef, den = m.groups()
            x = (float(coef) if coef else 1.0) * math.pi / (float(den) if den else 1.0)
            return -x if sign == "-" else x
        try:
            return float(v)
        except ValueError:
            pass
    raise ValueError(f"cannot read {v!r} as an angle")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ParamBound(_Strict):
    """Nominal value and non-negative half-width."""

    value: float = 0.0
    bound: float = 0.0

    @model_validator(mode="before")
    @classmethod
    def _from_pair(cls, v):
        if isinstance(v, (list, tuple)):
            if len(v) != 2:
                raise ValueError("expected [value, bound]")
            return {"value": v[0], "bound": v[1]}
        if isinstance(v, (int, float, str)):
            return {"value": v, "bound": 0.0}
        return v

    @field_validator("value", mode="before")
    @classmethod
    def _angle(cls, v):
        return parse_angle(v)

    @field_validator("bound")
    @classmethod
    def _nonneg(cls, v):
        if not (v >= 0 and math.isfinite(v)):
            raise ValueError("bound must be finite and non-negative")
        return v


class LinkConfig(_Strict):
    kind: Literal["revolute", "prismatic"] = "revolute"
    theta: ParamBound = ParamBound()
    alpha: ParamBound = ParamBound()
    d: ParamBound = ParamBound()
    a: ParamBound = ParamBound()


class RobotConfig(_Strict):
    name: str
    links: list[LinkConfig] = Field(min_length=1)
    joint_limits: list[tuple[float, float]]
    tool: Optional[list[list[float]]] = None

    @model_validator(mode="after")
    def _shape(self):
        if len(self.joint_limits) != len(self.links):
            raise ValueError(f"{len(self.joint_limits)} joint limits for {len(self.links)} links")
        for i, (lo, hi) in enumerate(self.joint_limits):
            if not lo < hi:
                raise ValueError(f"joint_limits[{i}]: lower limit must be below upper limit")
        return self

    def to_robot(self) -> Robot:
        links = tuple(DHLink(lk.kind, lk.theta.value, lk.alpha.value, lk.a.value, lk.d.value)
                      for lk in self.links)
        tool = np.eye(4) if self.tool is None else np.asarray(self.tool, dtype=float)
        table = DHTable(links, np.asarray(self.joint_limits, dtype=float), tool)
        unc = [(lk.theta.bound, lk.alpha.bound, lk.d.bound, lk.a.bound) for lk in self.links]
        return Robot(self.name, table, np.array(unc))

    @classmethod
    def from_robot(cls, robot: Robot) -> "RobotConfig":
        links = []
        for lk, (bt, ba, bd, bl) in zip(robot.table.links, robot.uncertainty):
            links.append(LinkConfig(kind=lk.joint_kind, theta=ParamBound(value=lk.theta0, bound=bt),
                                    alpha=ParamBound(value=lk.alpha, bound=ba),
                                    d=ParamBound(value=lk.d, bound=bd), a=ParamBound(value=lk.a, bound=bl)))
        tool = None if np.array_equal(robot.table.tool, np.eye(4)) else robot.table.tool.tolist()
        return cls(name=robot.name, links=links,
                   joint_limits=[tuple(r) for r in robot.table.joint_limits.tolist()], tool=tool)


class FieldTermConfig(_Strict):
    axis: int = Field(ge=0, le=6)
    amplitude: float
    weights: list[float]
    phase: float = 0.0


class PerturbationConfig(_Strict):
    mode: Literal["fixed", "sampled-uniform", "scaled"] = "scaled"
    percent: float = Field(100.0, ge=0)
    deltas: Optional[list[list[float]]] = None
    lower: Optional[list[list[float]]] = None
    upper: Optional[list[list[float]]] = None
    additive_field: list[FieldTermConfig] = []

    def field(self, scale: float = 1.0) -> ResidualField | None:
        if not self.additive_field:
            return None
        terms = tuple(FieldTerm(t.axis, t.amplitude * scale, tuple(t.weights), t.phase)
                      for t in self.additive_field)
        return ResidualField(terms)

    def spec(self, percent: float | None = None, field_scale: float = 1.0) -> PerturbationSpec:
        return PerturbationSpec(self.mode, self.deltas, self.lower, self.upper,
                                self.percent if percent is None else percent,
                                self.field(field_scale))


class MeasurementConfig(_Strict):
    noise_std: Union[float, list[float]] = 0.0

    @field_validator("noise_std")
    @classmethod
    def _check(cls, v):
        arr = np.asarray(v, dtype=float)
        if arr.ndim > 1 or (arr.ndim == 1 and arr.size != 7):
            raise ValueError("noise_std must be a scalar or a list of 7 values")
        if np.any(arr < 0) or not np.all(np.isfinite(arr)):
            raise ValueError("noise_std must be finite and non-negative")
        return v

    def model(self, rng_seed: int = 0) -> MeasurementModel:
        return MeasurementModel(tuple(np.broadcast_to(np.asarray(self.noise_std, float), (7,))),
                                rng_seed)


class PoolConfig(_Strict):
    """``auto`` uses a ``resolution``-per-axis grid for arms with at most two joints, else LHS."""

    kind: Literal["auto", "grid", "lhs"] = "auto"
    size: int = Field(2000, ge=1)
    resolution: int = Field(41, ge=2)
    seed: int = 0


class HoldoutConfig(_Strict):
    """Joint-space test line ``center + s * fraction * halfwidth * direction``, s in [-1, 1]."""

    points: int = Field(50, ge=1)
    fraction: float = Field(0.8, gt=0, le=1)
    direction: Optional[list[float]] = None


class BetaConfig(_Strict):
    delta: float = Field(0.1, gt=0, lt=1)
    signed_mean: bool = False


class RefitConfig(_Strict):
    every: int = Field(5, ge=0)
    warmup: int = Field(5, ge=0)
    restarts: int = Field(8, ge=1)
    warm_restarts: int = Field(1, ge=1)
    max_iter: int = Field(500, ge=1)
    method: Literal["gd", "lbfgs"] = "lbfgs"
    schedule: Literal["every", "doubling"] = "doubling"
    ard: bool = False
    fit_obs_noise: bool = True
    final_refit: bool = True
    # keep the fitted observation noise at or above the configured sensor noise
    noise_floor_from_measurement: bool = True

    def policy(self, noise_std=None) -> RefitPolicy:
        floor = None
        if self.noise_floor_from_measurement and noise_std is not None and any(noise_std):
            floor = tuple(float(v) for v in noise_std)
        return RefitPolicy(every=self.every, warmup=self.warmup, restarts=self.restarts,
                           warm_restarts=self.warm_restarts, max_iter=self.max_iter,
                           method=self.method, schedule=self.schedule, ard=self.ard,
                           fit_obs_noise=self.fit_obs_noise, final_refit=self.final_refit,
                           noise_floor=floor)


class BaselineConfig(_Strict):
    max_outer: int = Field(50, ge=1)
    bounds_percent: float = Field(100.0, ge=0)
    weights: Optional[list[float]] = None


class SweepConfig(_Strict):
    levels: list[float] = [10.0, 50.0, 100.0, 200.0]
    # the additive field amplitude is multiplied by level/100 when true
    field_scales_with_level: bool = True


class HistogramConfig(_Strict):
    n_samples: int = Field(1500, ge=100)
    bins: int = Field(41, ge=3)
    mode: Literal["ensemble", "single"] = "ensemble"
    antithetic: bool = True

    @field_validator("bins")
    @classmethod
    def _odd(cls, v):
        if v % 2 == 0:
            raise ValueError("bins must be odd so that zero sits at a bin centre")
        return v


STRATEGY_NAMES = ("gp-ucb", "ei", "d-optimal", "random", "linearized")


class ExperimentConfig(_Strict):
    robot: Union[str, RobotConfig] = "planar2"
    perturbation: PerturbationConfig = PerturbationConfig()
    measurement: MeasurementConfig = MeasurementConfig()
    pool: PoolConfig = PoolConfig()
    strategies: list[Literal["gp-ucb", "ei", "d-optimal", "random", "linearized"]] = Field(
        default_factory=lambda: ["gp-ucb"], min_length=1)
    budget: int = Field(30, ge=1)
    seeds: list[int] = Field(default_factory=lambda: [0], min_length=1)
    holdout: HoldoutConfig = HoldoutConfig()
    beta: BetaConfig = BetaConfig()
    refit: RefitConfig = RefitConfig()
    baseline: BaselineConfig = BaselineConfig()
    sweep: SweepConfig = SweepConfig()
    histogram: HistogramConfig = HistogramConfig()
    workers: int = Field(1, ge=1)
    output_dir: str = "out"

    @field_validator("robot")
    @classmethod
    def _known(cls, v):
        if isinstance(v, str) and v not in BUILTIN:
            raise ValueError(f"unknown built-in robot {v!r}; choose from {sorted(BUILTIN)}")
        return v

    @model_validator(mode="after")
    def _consistent(self):
        n = self.resolve_robot().n
        if self.holdout.direction is not None and len(self.holdout.direction) != n:
            raise ValueError(f"holdout.direction needs {n} entries")
        for name in ("deltas", "lower", "upper"):
            v = getattr(self.perturbation, name)
            if v is not None and (len(v) != n or any(len(r) != 4 for r in v)):
                raise ValueError(f"perturbation.{name} needs {n} rows of (theta, alpha, d, a)")
        for t in self.perturbation.additive_field:
            if len(t.weights) != n:
                raise ValueError(f"perturbation.additive_field weights need {n} entries")
        return self

    def resolve_robot(self) -> Robot:
        return builtin(self.robot) if isinstance(self.robot, str) else self.robot.to_robot()

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]


def _format_errors(exc: ValidationError) -> str:
    errors = exc.errors()
    # an inline robot that fails validation also fails the "built-in name" branch; drop that one
    if any(e["loc"][:1] == ("robot",) and len(e["loc"]) > 2 for e in errors):
        errors = [e for e in errors if e["loc"] != ("robot", "str")]
    parts = []
    for e in errors:
        # union branch tags such as "function-after[...]" are not field names
        loc = ".".join(str(x) for x in e["loc"] if not (isinstance(x, str) and "[" in x))
        parts.append(f"{loc or '<root>'}: {e['msg']}")
    return "; ".join(parts)


def config_from_dict(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data or {})
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration: {_format_errors(exc)}") from exc


def load_config(path) -> ExperimentConfig:
    """Read and validate a YAML experiment file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"{path}:{where} YAML parse error: {getattr(exc, 'problem', exc)}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    try:
        return config_from_dict(data)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)
