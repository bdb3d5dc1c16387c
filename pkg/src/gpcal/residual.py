"""Seven independent GPs modelling the pose residual over joint space."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import gp
from .arm import TrueArm, pose_difference, true_vectors
from .errors import IllConditionedKernelError, NotFittedError
from .kinematics import DHTable, Pose7, fk_vectors

log = logging.getLogger(__name__)

AXES = ("qw", "qx", "qy", "qz", "px", "py", "pz")


@dataclass(frozen=True)
class RefitPolicy:
    """When to re-optimise hyperparameters.

    Hyperparameters are optimised on each of the first ``warmup`` updates and on
    every ``every``-th update after that; other updates only refactorise. With
    ``schedule="doubling"`` the post-warmup refits happen when the observation count
    reaches ``every``, ``2*every``, ``4*every``, ... instead. ``every=0`` together
    with ``warmup=0`` keeps the hyperparameters fixed.

    The first optimisation uses ``restarts`` starts; later ones start from the
    current values and use ``warm_restarts`` starts plus one from the data-scaled default.
    ``noise_floor`` optionally gives a per-axis lower limit for the observation
    noise std, typically the known sensor noise. ``final_refit`` asks campaign loops to optimise once more after the last update
    when the schedule skipped it, so the reported model is tuned on all the data.
    """

    every: int = 5
    warmup: int = 5
    restarts: int = 8
    warm_restarts: int = 8
    max_iter: int = 500
    method: str = "gd"
    schedule: str = "every"
    ard: bool = False
    fit_kernel_noise: bool = False
    fit_obs_noise: bool = True
    final_refit: bool = True
    noise_floor: tuple | None = None

    @classmethod
    def never(cls) -> "RefitPolicy":
        return cls(every=0, warmup=0, final_refit=False)

    def optimizes_at(self, count: int) -> bool:
        if count <= self.warmup:
            return True
        if self.every <= 0 or count % self.every:
            return False
        if self.schedule == "doubling":
            m = count // self.every
            return m & (m - 1) == 0
        return True


DEFAULT_HYPER = gp.Hyperparams(1.0, 1.0, 0.0, 1e-3)


@dataclass(frozen=True, eq=False)
class ResidualModel:
    nominal: DHTable
    inputs: np.ndarray
    targets: np.ndarray
    hypers: tuple
    gps: tuple = ()
    tuned: bool = False

    @classmethod
    def empty(cls, nominal: DHTable, hyper: gp.Hyperparams | None = None) -> "ResidualModel":
        h = hyper or DEFAULT_HYPER
        return cls(nominal, np.zeros((0, nominal.n)), np.zeros((0, 7)), (h,) * 7)

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def history(self):
        return list(zip(self.inputs, self.targets))


@dataclass(frozen=True, eq=False)
class AxisPrediction:
    mean: np.ndarray
    std: np.ndarray


def _fit_axes(X, Y, hypers, policy: RefitPolicy, optimize: bool, tuned: bool, seed: int):
    new_hypers, gps = [], []
    for k in range(7):
        data = gp.TrainingSet(X, Y[:, k])
        h = hypers[k]
        try:
            if optimize:
                cold = gp.initial_hyper(data, ard=policy.ard)
                init = h if tuned else cold
                settings = gp.OptimizerSettings(
                    restarts=policy.warm_restarts if tuned else policy.restarts,
                    max_iter=policy.max_iter, method=policy.method,
                    fit_kernel_noise=policy.fit_kernel_noise,
                    fit_obs_noise=policy.fit_obs_noise, seed=seed * 7 + k,
                    obs_noise_floor=policy.noise_floor[k] if policy.noise_floor else 0.0)
                # a warm start alone can stay stuck in a short-lengthscale optimum found
                # on few points, so the data-scaled starting point is always tried too
                h = gp.optimize_hyper(data, init, settings=settings,
                                      extra_starts=(cold,) if tuned else ())
            gps.append(gp.fit(data, h))
        except IllConditionedKernelError as exc:
            exc.axis = k
            raise
        new_hypers.append(h)
    return tuple(new_hypers), tuple(gps)


def update(model: ResidualModel, q, residual, policy: RefitPolicy | None = None) -> ResidualModel:
    """Return a new model with one more observation and refitted GPs."""
    policy = policy or RefitPolicy()
    q = np.asarray(q, dtype=float).reshape(1, -1)
    r = np.asarray(residual, dtype=float).reshape(1, 7)
    X = np.vstack([model.inputs, q])
    Y = np.vstack([model.targets, r])
    optimize = policy.optimizes_at(X.shape[0])
    hypers, gps = _fit_axes(X, Y, model.hypers, policy, optimize, model.tuned, X.shape[0])
    return replace(model, inputs=X, targets=Y, hypers=hypers, gps=gps,
                   tuned=model.tuned or optimize)


def retune(model: ResidualModel, policy: RefitPolicy | None = None) -> ResidualModel:
    """Re-optimise the hyperparameters on the current observations."""
    policy = policy or RefitPolicy()
    if len(model) == 0:
        raise NotFittedError("residual model has no observations")
    hypers, gps = _fit_axes(model.inputs, model.targets, model.hypers, policy, True, model.tuned,
                            len(model))
    return replace(model, hypers=hypers, gps=gps, tuned=True)


def fit_residuals(nominal: DHTable, X, Y, policy: RefitPolicy | None = None) -> ResidualModel:
    """Fit a model to a whole batch of residual observations at once."""
    policy = policy or RefitPolicy()
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    empty = ResidualModel.empty(nominal)
    optimize = policy.warmup > 0 or policy.every > 0
    hypers, gps = _fit_axes(X, Y, empty.hypers, policy, optimize, False, X.shape[0])
    return replace(empty, inputs=X, targets=Y, hypers=hypers, gps=gps, tuned=optimize)


def predict_batch(model: ResidualModel, Q):
    """Per-axis posterior means and standard deviations, each shaped (M, 7)."""
    if len(model) == 0:
        raise NotFittedError("residual model has no observations")
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    mean = np.empty((Q.shape[0], 7))
    var = np.empty((Q.shape[0], 7))
    sq = None
    if all(h.lengthscale.size == 1 for h in model.hypers):
        sq = gp.scaled_sqdist(Q, model.inputs, 1.0)
    for k, g in enumerate(model.gps):
        mean[:, k], var[:, k] = gp.predict_fast(g, Q, sq)
    return mean, np.sqrt(var)


def predict_residual(model: ResidualModel, q) -> AxisPrediction:
    if len(model) == 0:
        raise NotFittedError("residual model has no observations")
    q = np.asarray(q, dtype=float)
    mean, std = np.empty(7), np.empty(7)
    for k, g in enumerate(model.gps):
        m, v = gp.predict(g, q)
        mean[k], std[k] = m, np.sqrt(v)
    return AxisPrediction(mean, std)


def corrected_vectors(model: ResidualModel, Q) -> np.ndarray:
    """Nominal poses plus predicted residual means, quaternions renormalised."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    F = fk_vectors(model.nominal, Q)
    if len(model):
        F = F + predict_batch(model, Q)[0]
        norms = np.linalg.norm(F[:, :4], axis=1, keepdims=True)
        log.debug("pre-normalisation quaternion norms in [%g, %g]", norms.min(), norms.max())
        F[:, :4] /= norms
    return F


def corrected_fk(model: ResidualModel, q) -> Pose7:
    return Pose7.from_vector(corrected_vectors(model, q)[0])


@dataclass(frozen=True, eq=False)
class HoldoutResult:
    points: np.ndarray
    err_cal: np.ndarray
    err_uncal: np.ndarray
    axis_err: np.ndarray

    @property
    def mean_cal(self) -> float:
        return float(np.mean(self.err_cal))

    @property
    def mean_uncal(self) -> float:
        return float(np.mean(self.err_uncal))


def holdout_from_predictions(arm: TrueArm, Q, predicted: np.ndarray) -> HoldoutResult:
    """Score any pose predictor against the noise-free true robot."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    truth = true_vectors(arm, Q)
    nominal = fk_vectors(arm.nominal, Q)
    diff = pose_difference(truth, predicted)
    base = pose_difference(truth, nominal)
    return HoldoutResult(Q, np.linalg.norm(diff, axis=1), np.linalg.norm(base, axis=1), diff)


def holdout_error(model: ResidualModel, arm: TrueArm, test_set) -> HoldoutResult:
    """Calibrated and uncalibrated pose errors on held-out joint vectors (noise off)."""
    Q = np.atleast_2d(np.asarray(test_set, dtype=float))
    if Q.shape[0] == 0:
        raise ValueError("holdout set must be nonempty")
    return holdout_from_predictions(arm, Q, corrected_vectors(model, Q))


def snapshot(model: ResidualModel) -> dict:
    return {
        "axes": list(AXES),
        "inputs": model.inputs.tolist(),
        "targets": model.targets.T.tolist(),
        "hyperparameters": [h.to_dict() for h in model.hypers],
    }


def from_snapshot(nominal: DHTable, snap: dict) -> ResidualModel:
    X = np.asarray(snap["inputs"], dtype=float).reshape(-1, nominal.n)
    Y = np.asarray(snap["targets"], dtype=float).T.reshape(-1, 7)
    hypers = tuple(gp.Hyperparams.from_dict(d) for d in snap["hyperparameters"])
    gps = tuple(gp.fit(gp.TrainingSet(X, Y[:, k]), hypers[k]) for k in range(7)) if len(X) else ()
    return ResidualModel(nominal, X, Y, hypers, gps, tuned=True)
