"""Exact single-output GP regression with a squared-exponential kernel.

Hyperparameters are optimised in log space. The log-parameter vector is laid out as
``[log l_1 .. log l_L, log sigma_f, log sigma_n, log sigma_eps]`` where ``L`` is 1
for an isotropic kernel and the input dimension otherwise.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

from .errors import IllConditionedKernelError

JITTER_START = 1e-10
JITTER_MAX = 1e-4
LOG2PI = math.log(2.0 * math.pi)


class HyperOptWarning(RuntimeWarning):
    pass


@dataclass(frozen=True, eq=False)
class Hyperparams:
    lengthscale: np.ndarray | float = 1.0
    signal_std: float = 1.0
    kernel_noise_std: float = 0.0
    obs_noise_std: float = 0.0

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscale, dtype=float)).copy()
        vals = (self.signal_std, self.kernel_noise_std, self.obs_noise_std)
        if not (np.all(np.isfinite(ls)) and all(math.isfinite(v) for v in vals)):
            raise ValueError("hyperparameters must be finite")
        if np.any(ls <= 0) or self.signal_std <= 0:
            raise ValueError("lengthscale and signal_std must be strictly positive")
        if self.kernel_noise_std < 0 or self.obs_noise_std < 0:
            raise ValueError("noise standard deviations must be non-negative")
        ls.flags.writeable = False
        object.__setattr__(self, "lengthscale", ls)
        for name in ("signal_std", "kernel_noise_std", "obs_noise_std"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @property
    def nugget(self) -> float:
        """Total diagonal variance added to the training covariance."""
        return self.kernel_noise_std**2 + self.obs_noise_std**2

    def to_log(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.concatenate([
                np.log(self.lengthscale),
                np.log([self.signal_std, self.kernel_noise_std, self.obs_noise_std]),
            ])

    @classmethod
    def from_log(cls, v) -> "Hyperparams":
        v = np.asarray(v, dtype=float)
        e = np.exp(v)
        return cls(e[:-3].copy(), e[-3], e[-2], e[-1])

    def to_dict(self) -> dict:
        ls = self.lengthscale
        return {
            "lengthscale": float(ls[0]) if ls.size == 1 else [float(x) for x in ls],
            "signal_std": self.signal_std,
            "kernel_noise_std": self.kernel_noise_std,
            "obs_noise_std": self.obs_noise_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        return cls(d["lengthscale"], d["signal_std"], d.get("kernel_noise_std", 0.0),
                   d.get("obs_noise_std", 0.0))


@dataclass(frozen=True, eq=False)
class TrainingSet:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        y = np.asarray(self.targets, dtype=float).ravel()
        if X.shape[0] != y.shape[0]:
            raise ValueError("inputs and targets must have equal lengths")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("training data must be finite")
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "targets", y)

    def __len__(self):
        return self.targets.shape[0]


@dataclass(frozen=True, eq=False)
class GPModel:
    hyper: Hyperparams
    data: TrainingSet
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float = 0.0
    _kinv: list = field(default_factory=list, repr=False)

    def kinv(self) -> np.ndarray:
        """(K + nugget I)^-1, cached on first use."""
        if not self._kinv:
            n = self.chol.shape[0]
            self._kinv.append(cho_solve((self.chol, True), np.eye(n)))
        return self._kinv[0]


# ---------------------------------------------------------------------------
# Kernel


def scaled_sqdist(X1, X2, lengthscale) -> np.ndarray:
    """Pairwise squared distances after dividing each input dimension by its lengthscale."""
    ls = np.asarray(lengthscale, dtype=float)
    A = np.atleast_2d(X1) / ls
    B = np.atleast_2d(X2) / ls
    d2 = np.sum(A**2, 1)[:, None] + np.sum(B**2, 1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d2, 0.0)


def kernel_matrix(X1, X2, hyper: Hyperparams) -> np.ndarray:
    """Cross-covariance between two input sets; the nugget is not included."""
    return hyper.signal_std**2 * np.exp(-0.5 * scaled_sqdist(X1, X2, hyper.lengthscale))


def se_kernel(x, x2, hyper: Hyperparams, same: bool = False) -> float:
    """Squared-exponential covariance of two inputs.

    ``same`` marks the two inputs as the same training element, which switches on
    the ``sigma_n**2`` nugget. Equal values at different indices do not.
    """
    x = np.asarray(x, dtype=float).ravel()
    x2 = np.asarray(x2, dtype=float).ravel()
    if x.shape != x2.shape:
        raise ValueError("inputs must have equal dimension")
    r2 = float(np.sum(((x - x2) / hyper.lengthscale) ** 2))
    k = hyper.signal_std**2 * math.exp(-0.5 * r2)
    if same:
        k += hyper.kernel_noise_std**2
    return k


def _train_cov(X, hyper: Hyperparams):
    K = kernel_matrix(X, X, hyper)
    K[np.diag_indices_from(K)] += hyper.nugget
    return K


def _cholesky_with_jitter(K: np.ndarray):
    n = K.shape[0]
    base = max(float(np.mean(np.diag(K))), 1e-300)
    try:
        return np.linalg.cholesky(K), 0.0
    except np.linalg.LinAlgError:
        pass
    jitter = JITTER_START
    while jitter <= JITTER_MAX * (1 + 1e-9):
        try:
            L = np.linalg.cholesky(K + (jitter * base) * np.eye(n))
            return L, jitter * base
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise IllConditionedKernelError(
        f"Cholesky failed at maximum jitter {JITTER_MAX:g} x mean diagonal",
        jitter=JITTER_MAX * base)


# ---------------------------------------------------------------------------
# Posterior


def fit(data: TrainingSet, hyper: Hyperparams) -> GPModel:
    if len(data) == 0:
        raise ValueError("cannot fit a GP to an empty training set")
    K = _train_cov(data.inputs, hyper)
    L, jitter = _cholesky_with_jitter(K)
    alpha = cho_solve((L, True), data.targets)
    return GPModel(hyper, data, L, alpha, jitter)


def predict(model: GPModel, xstar):
    """Posterior mean and latent variance at one input or a batch of inputs."""
    xs = np.asarray(xstar, dtype=float)
    single = xs.ndim == 1
    Xs = np.atleast_2d(xs)
    if Xs.shape[1] != model.data.inputs.shape[1]:
        raise ValueError("test input dimension does not match the training inputs")
    Ks = kernel_matrix(Xs, model.data.inputs, model.hyper)
    mean = Ks @ model.alpha
    v = solve_triangular(model.chol, Ks.T, lower=True)
    var = model.hyper.signal_std**2 - np.sum(v * v, axis=0)
    var = np.maximum(var, 0.0)
    if single:
        return float(mean[0]), float(var[0])
    return mean, var


def predict_fast(model: GPModel, Xs: np.ndarray, sqdist: np.ndarray | None = None):
    """Batch prediction through the cached inverse; used for large candidate pools.

    ``sqdist`` may carry precomputed unscaled squared distances to the training
    inputs (isotropic kernels only).
    """
    h = model.hyper
    if sqdist is not None and h.lengthscale.size == 1:
        Ks = h.signal_std**2 * np.exp(-0.5 * sqdist / h.lengthscale[0] ** 2)
    else:
        Ks = kernel_matrix(Xs, model.data.inputs, h)
    mean = Ks @ model.alpha
    var = h.signal_std**2 - np.einsum("ij,ij->i", Ks @ model.kinv(), Ks)
    return mean, np.maximum(var, 0.0)


# ---------------------------------------------------------------------------
# Marginal likelihood


def _pairwise_terms(X: np.ndarray, ard: bool) -> np.ndarray:
    """Squared input differences, (1, N, N) for isotropic kernels or (D, N, N) per dimension."""
    if not ard:
        return scaled_sqdist(X, X, 1.0)[None]
    return (X.T[:, :, None] - X.T[:, None, :]) ** 2


def _nlml_core(terms: np.ndarray, y: np.ndarray, v: np.ndarray):
    """NLML and gradient from log-parameters ``v`` and precomputed difference terms."""
    n = y.shape[0]
    L_ = terms.shape[0]
    inv_l2 = np.exp(-2.0 * v[:L_])
    sf2, sn2, se2 = np.exp(2.0 * v[L_:])
    scaled = [terms[j] * inv_l2[j] for j in range(L_)]
    Kse = sf2 * np.exp(-0.5 * sum(scaled))
    K = Kse.copy()
    K.flat[:: n + 1] += sn2 + se2
    Lc, _ = _cholesky_with_jitter(K)
    Linv = solve_triangular(Lc, np.eye(n), lower=True, check_finite=False)
    Kinv = Linv.T @ Linv
    a = Kinv @ y
    value = 0.5 * y @ a + np.sum(np.log(np.diag(Lc))) + 0.5 * n * LOG2PI

    # d nlml / d theta = 0.5 tr((K^-1 - a a^T) dK/dtheta)
    W = Kinv - np.outer(a, a)
    WK = W * Kse
    grad = np.empty(L_ + 3)
    for j in range(L_):
        grad[j] = 0.5 * np.sum(WK * scaled[j])
    grad[L_] = np.sum(WK)  # dK/dlog sf = 2 Kse
    trW = np.trace(W)
    grad[L_ + 1] = trW * sn2
    grad[L_ + 2] = trW * se2
    return float(value), grad


def nlml(data: TrainingSet, hyper: Hyperparams):
    """Negative log marginal likelihood and its gradient over the log-hyperparameters.

    Uses the same jitter ladder as :func:`fit`. Gradient entries for noise terms
    that are exactly zero come out as zero.
    """
    if len(data) == 0:
        raise ValueError("cannot evaluate the marginal likelihood of an empty training set")
    ard = hyper.lengthscale.size > 1
    terms = _pairwise_terms(data.inputs, ard)
    with np.errstate(divide="ignore"):
        v = hyper.to_log()
    return _nlml_core(terms, data.targets, v)


# ---------------------------------------------------------------------------
# Hyperparameter optimisation


@dataclass(frozen=True)
class OptimizerSettings:
    restarts: int = 8
    max_iter: int = 500
    tol: float = 1e-8
    gtol: float = 1e-5
    fit_kernel_noise: bool = False
    fit_obs_noise: bool = True
    seed: int = 0
    method: str = "gd"
    # lower limit for the observation noise std, e.g. a known sensor resolution
    obs_noise_floor: float = 0.0

    def __post_init__(self):
        if self.method not in ("gd", "lbfgs"):
            raise ValueError(f"unknown optimiser method {self.method!r}")
        if not self.obs_noise_floor >= 0:
            raise ValueError("obs_noise_floor must be non-negative")


def default_bounds(data: TrainingSet, hyper: Hyperparams):
    """Log-space box for the optimiser, scaled to the data."""
    X, y = data.inputs, data.targets
    s = max(float(np.sqrt(np.mean(y**2))), float(np.max(np.abs(y))) * 1e-3, 1e-9)
    span = float(np.max(np.ptp(X, axis=0))) if len(data) > 1 else 1.0
    span = max(span, 1e-3)
    # below the typical spacing of the inputs the likelihood goes flat (every point
    # looks independent), so the floor follows the median nearest-neighbour distance
    floor = 1e-2 * span
    if len(data) > 1:
        d2 = scaled_sqdist(X, X, 1.0)
        np.fill_diagonal(d2, np.inf)
        floor = max(floor, float(np.median(np.sqrt(d2.min(axis=1)))))
    floor = min(floor, 0.5 * span)
    L = hyper.lengthscale.size
    lo = np.concatenate([np.full(L, np.log(floor)), np.log([1e-3 * s, 1e-6 * s, 1e-6 * s])])
    hi = np.concatenate([np.full(L, np.log(1e2 * span)), np.log([1e3 * s, 10 * s, 10 * s])])
    return lo, hi


def _descend(data, u0, full, free, lo, hi, settings):
    """Projected gradient descent on the free log-parameters ``u``.

    Trial steps follow the Barzilai-Borwein rule and are cut back by Armijo
    backtracking, so every accepted step decreases the objective.
    """

    terms = _pairwise_terms(data.inputs, full.size > 4)

    def objective(u):
        v = full.copy()
        v[free] = u
        val, g = _nlml_core(terms, data.targets, v)
        return val, g[free]

    def projected_gradient_norm(u, g):
        pg = np.clip(u - g, lo, hi) - u
        return np.max(np.abs(pg))

    u = np.clip(u0, lo, hi)
    f, g = objective(u)
    step = 0.1 / max(np.linalg.norm(g), 1e-12)
    for _ in range(settings.max_iter):
        if projected_gradient_norm(u, g) <= settings.gtol:
            break
        accepted = False
        for _ in range(40):
            cand = np.clip(u - step * g, lo, hi)
            du = cand - u
            if not np.any(du):
                break
            try:
                fc, gc = objective(cand)
            except IllConditionedKernelError:
                step *= 0.5
                continue
            if fc <= f + 1e-4 * (g @ du):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        s, yv = cand - u, gc - g
        f_old = f
        u, f, g = cand, fc, gc
        if abs(f_old - f) <= settings.tol * (1.0 + abs(f)):
            break
        sy = s @ yv
        step = (s @ s) / sy if sy > 1e-300 else 2.0 * step
        step = min(step, 1e3)
    v = full.copy()
    v[free] = u
    return v, f


def _lbfgs(data, u0, full, free, lo, hi, settings):
    terms = _pairwise_terms(data.inputs, full.size > 4)

    def objective(u):
        v = full.copy()
        v[free] = u
        val, g = _nlml_core(terms, data.targets, v)
        return val, g[free]

    res = minimize(objective, np.clip(u0, lo, hi), jac=True, method="L-BFGS-B",
                   bounds=list(zip(lo, hi)), options={"maxiter": settings.max_iter})
    v = full.copy()
    v[free] = res.x
    return v, float(res.fun)


def optimize_hyper(data: TrainingSet, init: Hyperparams, restarts: int | None = None,
                   settings: OptimizerSettings | None = None, bounds=None,
                   extra_starts=()) -> Hyperparams:
    """Multi-start gradient-based minimisation of the NLML.

    ``settings.method`` picks projected gradient descent (``"gd"``) or L-BFGS-B
    (``"lbfgs"``). Restart 0 starts from ``init``; the others shift every free log-parameter by an
    offset drawn uniformly from [log 0.1, log 10]. Each of ``extra_starts`` adds one more
    unperturbed start. ``init`` is first projected into the bounds, and the result never
    has a higher NLML than that projection.
    """
    settings = settings or OptimizerSettings()
    if restarts is not None:
        settings = replace(settings, restarts=restarts)
    if settings.restarts < 1:
        raise ValueError("restarts must be at least 1")
    lo_all, hi_all = bounds if bounds is not None else default_bounds(data, init)
    if settings.obs_noise_floor > 0:
        lo_all, hi_all = lo_all.copy(), hi_all.copy()
        lo_all[-1] = max(lo_all[-1], math.log(settings.obs_noise_floor))
        hi_all[-1] = max(hi_all[-1], lo_all[-1])
    L = init.lengthscale.size
    free = np.concatenate([np.ones(L, bool), [True, settings.fit_kernel_noise, settings.fit_obs_noise]])
    full = init.to_log()
    lo, hi = lo_all[free], hi_all[free]
    # a warm start from an earlier, smaller data set may sit outside the current box
    u_init = np.clip(np.where(np.isfinite(full), full, lo_all)[free], lo, hi)
    full[free] = u_init
    init = Hyperparams.from_log(full)
    try:
        best_f = nlml(data, init)[0]
    except IllConditionedKernelError:
        best_f = np.inf
    best_v = None
    rng = np.random.default_rng(settings.seed)
    starts = [u_init]
    for r in range(1, settings.restarts):
        starts.append(u_init + rng.uniform(np.log(0.1), np.log(10.0), u_init.size))
    for h in extra_starts:
        v = h.to_log()
        if v.size != full.size:
            raise ValueError("extra start has the wrong lengthscale dimension")
        starts.append(np.clip(np.where(np.isfinite(v), v, lo_all), lo_all, hi_all)[free])
    for start in starts:
        try:
            run = _descend if settings.method == "gd" else _lbfgs
            v, f = run(data, start, full, free, lo, hi, settings)
        except (IllConditionedKernelError, FloatingPointError, np.linalg.LinAlgError):
            continue
        if np.isfinite(f) and f < best_f:
            best_f, best_v = f, v
    if best_v is None:
        if not np.isfinite(best_f):
            warnings.warn("all hyperparameter restarts failed; keeping the initial values",
                          HyperOptWarning, stacklevel=2)
        return init
    return Hyperparams.from_log(best_v)


def initial_hyper(data: TrainingSet, ard: bool = False) -> Hyperparams:
    """Data-scaled starting point for hyperparameter optimisation."""
    X, y = data.inputs, data.targets
    s = max(float(np.sqrt(np.mean(y**2))), 1e-6)
    span = np.ptp(X, axis=0) if len(data) > 1 else np.ones(X.shape[1])
    span = np.where(span > 0, span, 1.0)
    ls = 0.5 * span if ard else 0.5 * float(np.max(span))
    return Hyperparams(ls, s, 0.0, 1e-2 * s)
