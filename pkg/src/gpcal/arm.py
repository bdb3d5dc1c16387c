"""Simulated "true" robots: perturbed DH tables, additive residual fields, noisy pose sensors."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DomainError
from .kinematics import DHLink, DHTable, Pose7, align_hemisphere, fk_vectors

# Column order of per-link deltas and uncertainty bounds.
PARAM_ORDER = ("theta", "alpha", "d", "a")
MODES = ("fixed", "sampled-uniform", "scaled")


@dataclass(frozen=True)
class FieldTerm:
    """One plane-wave component ``amplitude * sin(weights . q + phase)`` on a pose axis."""

    axis: int
    amplitude: float
    weights: tuple
    phase: float = 0.0

    def to_dict(self):
        return {"axis": self.axis, "amplitude": self.amplitude,
                "weights": list(self.weights), "phase": self.phase}


@dataclass(frozen=True)
class ResidualField:
    """Smooth additive pose error ``g(q)`` built from plane-wave terms."""

    terms: tuple = ()

    def __post_init__(self):
        for t in self.terms:
            if not 0 <= t.axis < 7:
                raise DomainError(f"residual field axis {t.axis} outside 0..6")

    def __call__(self, q) -> np.ndarray:
        return self.evaluate(np.atleast_2d(np.asarray(q, dtype=float)))[0]

    def evaluate(self, Q: np.ndarray) -> np.ndarray:
        out = np.zeros((Q.shape[0], 7))
        for t in self.terms:
            w = np.asarray(t.weights, dtype=float)
            if w.size != Q.shape[1]:
                raise DomainError("residual field weights do not match the joint count")
            out[:, t.axis] += t.amplitude * np.sin(Q @ w + t.phase)
        return out

    def scaled(self, factor: float) -> "ResidualField":
        return ResidualField(tuple(
            FieldTerm(t.axis, t.amplitude * factor, t.weights, t.phase) for t in self.terms))

    def to_list(self):
        return [t.to_dict() for t in self.terms]

    @classmethod
    def from_list(cls, items) -> "ResidualField":
        return cls(tuple(FieldTerm(int(d["axis"]), float(d["amplitude"]),
                                   tuple(float(w) for w in d["weights"]),
                                   float(d.get("phase", 0.0))) for d in items))


@dataclass(frozen=True, eq=False)
class PerturbationSpec:
    """How the true robot departs from its nominal table.

    ``fixed`` applies ``deltas`` as given, ``sampled-uniform`` draws each delta in
    ``[lower, upper]``, and ``scaled`` draws each delta in ``+-percent/100 * bound``
    with the bound taken from the robot's uncertainty table. Delta arrays have one
    row per link and columns ordered as :data:`PARAM_ORDER`.
    """

    mode: str = "fixed"
    deltas: np.ndarray | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    percent: float = 0.0
    additive_residual: Callable | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise DomainError(f"unknown perturbation mode {self.mode!r}")
        if self.percent < 0:
            raise DomainError("perturbation percent must be non-negative")
        for name in ("deltas", "lower", "upper"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, np.asarray(v, dtype=float).reshape(-1, 4))
        if self.lower is not None and self.upper is not None:
            if self.lower.shape != self.upper.shape or np.any(self.lower > self.upper):
                raise DomainError("sampled-uniform bounds must satisfy lower <= upper")


@dataclass(frozen=True)
class MeasurementModel:
    noise_std: tuple = (0.0,) * 7
    rng_seed: int = 0

    def __post_init__(self):
        std = np.broadcast_to(np.asarray(self.noise_std, dtype=float), (7,))
        if np.any(std < 0) or not np.all(np.isfinite(std)):
            raise DomainError("noise standard deviations must be finite and non-negative")
        object.__setattr__(self, "noise_std", tuple(float(s) for s in std))


@dataclass(eq=False)
class TrueArm:
    nominal: DHTable
    perturbed: DHTable
    additive_residual: Callable | None = None
    measurement: MeasurementModel = field(default_factory=MeasurementModel)
    rng: np.random.Generator | None = None

    def __post_init__(self):
        if self.nominal.n != self.perturbed.n or any(
                a.joint_kind != b.joint_kind for a, b in zip(self.nominal.links, self.perturbed.links)):
            raise DomainError("nominal and perturbed tables must have matching links")
        if self.rng is None:
            self.rng = np.random.default_rng(self.measurement.rng_seed)


def apply_deltas(nominal: DHTable, deltas) -> DHTable:
    deltas = np.asarray(deltas, dtype=float).reshape(-1, 4)
    if deltas.shape[0] != nominal.n:
        raise DomainError(f"expected {nominal.n} delta rows, got {deltas.shape[0]}")
    links = tuple(
        DHLink(lk.joint_kind, lk.theta0 + dt, lk.alpha + da, lk.a + dl, lk.d + dd)
        for lk, (dt, da, dd, dl) in zip(nominal.links, deltas)
    )
    return DHTable(links, nominal.joint_limits, nominal.tool)


def draw_deltas(nominal: DHTable, spec: PerturbationSpec, seed, uncertainty=None) -> np.ndarray:
    n = nominal.n
    rng = np.random.default_rng(seed)
    if spec.mode == "fixed":
        d = np.zeros((n, 4)) if spec.deltas is None else spec.deltas
    elif spec.mode == "sampled-uniform":
        if spec.lower is None or spec.upper is None:
            raise DomainError("sampled-uniform perturbation needs lower and upper bounds")
        if spec.lower.shape[0] != n:
            raise DomainError(f"expected {n} bound rows, got {spec.lower.shape[0]}")
        d = rng.uniform(spec.lower, spec.upper)
    else:
        if uncertainty is None:
            raise DomainError("scaled perturbation needs the robot's uncertainty bounds")
        bound = np.asarray(uncertainty, dtype=float).reshape(-1, 4)
        if bound.shape[0] != n:
            raise DomainError(f"expected {n} uncertainty rows, got {bound.shape[0]}")
        half = spec.percent / 100.0 * bound
        d = rng.uniform(-half, half)
    if d.shape[0] != n:
        raise DomainError(f"expected {n} delta rows, got {d.shape[0]}")
    return d


def realize(nominal: DHTable, spec: PerturbationSpec, seed=0, uncertainty=None,
            measurement: MeasurementModel | None = None) -> TrueArm:
    """Build the true robot for one campaign; a pure function of its arguments."""
    deltas = draw_deltas(nominal, spec, seed, uncertainty)
    return TrueArm(nominal, apply_deltas(nominal, deltas), spec.additive_residual,
                   measurement or MeasurementModel())


def true_vectors(arm: TrueArm, Q) -> np.ndarray:
    """Noise-free true poses, shape (M, 7). Does not touch the measurement stream."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    F = fk_vectors(arm.perturbed, Q)
    if arm.additive_residual is not None:
        g = arm.additive_residual
        F = F + (g.evaluate(Q) if hasattr(g, "evaluate") else np.array([g(q) for q in Q]))
        F[:, :4] /= np.linalg.norm(F[:, :4], axis=1, keepdims=True)
    return F


def measure(arm: TrueArm, q, noiseless: bool = False) -> Pose7:
    """One simulated pose measurement; advances the arm's noise stream unless ``noiseless``."""
    q = np.asarray(q, dtype=float)
    F = fk_vectors(arm.perturbed, q)[0]
    if arm.additive_residual is not None:
        F = F + np.asarray(arm.additive_residual(q), dtype=float)
    if not noiseless:
        F = F + arm.rng.standard_normal(7) * np.asarray(arm.measurement.noise_std)
    F[:4] /= np.linalg.norm(F[:4])
    return Pose7.from_vector(F)


def pose_difference(measured, reference) -> np.ndarray:
    """``measured - reference`` for pose vectors, with quaternions on a common hemisphere."""
    m = np.array(measured, dtype=float)
    r = np.asarray(reference, dtype=float)
    m[..., :4] = align_hemisphere(m[..., :4], r[..., :4])
    return m - r


def residual(arm: TrueArm, nominal_table: DHTable, q, noiseless: bool = False) -> np.ndarray:
    """Measured pose minus nominal forward kinematics at ``q`` (7-vector)."""
    m = measure(arm, q, noiseless=noiseless).vector
    n = fk_vectors(nominal_table, q)[0]
    return pose_difference(m, n)
