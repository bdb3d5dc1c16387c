"""Classical linearized recalibration of the (alpha, d, a) parameters.

Each outer iteration linearizes the pose residual around the current parameters and
solves a box-constrained least-squares problem for the correction.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np

from .arm import pose_difference
from .kinematics import DHTable, Pose7, fk_vectors, parameter_jacobian_batch

QP_MAX_ITER = 10_000
QP_TOL = 1e-8
STEP_TOL = 1e-10
MAX_HALVINGS = 40
# singular values below this fraction of the largest are treated as zero; the
# finite-difference Jacobian leaves about 1e-10 of noise in its null directions
RANK_RTOL = 1e-8


class RankDeficientWarning(UserWarning):
    """The stacked Jacobian does not have full column rank."""


@dataclass(frozen=True, eq=False)
class QPProblem:
    """minimize ||r - J x||^2 subject to lb <= x <= ub."""

    jacobian: np.ndarray
    residual: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    rows_per_pose: int = 7

    def __post_init__(self):
        J = np.atleast_2d(np.asarray(self.jacobian, dtype=float))
        r = np.asarray(self.residual, dtype=float).ravel()
        lb = np.broadcast_to(np.asarray(self.lb, dtype=float), (J.shape[1],)).copy()
        ub = np.broadcast_to(np.asarray(self.ub, dtype=float), (J.shape[1],)).copy()
        if r.size != J.shape[0]:
            raise ValueError(f"residual has {r.size} rows, jacobian has {J.shape[0]}")
        if self.rows_per_pose and J.shape[0] % self.rows_per_pose:
            raise ValueError(f"stack row count {J.shape[0]} is not a multiple of {self.rows_per_pose}")
        if np.any(lb > ub):
            raise ValueError("lower bounds must not exceed upper bounds")
        if not (np.all(np.isfinite(J)) and np.all(np.isfinite(r))):
            raise ValueError("jacobian and residual must be finite")
        for name, v in (("jacobian", J), ("residual", r), ("lb", lb), ("ub", ub)):
            object.__setattr__(self, name, v)

    @property
    def size(self) -> int:
        return self.jacobian.shape[1]

    def objective(self, x) -> float:
        e = self.residual - self.jacobian @ x
        return float(e @ e)

    def gradient(self, x) -> np.ndarray:
        # gradient of 0.5 * ||r - J x||^2
        return self.jacobian.T @ (self.jacobian @ x - self.residual)


@dataclass(frozen=True, eq=False)
class QPSolution:
    x: np.ndarray
    iterations: int
    converged: bool
    pg_norm: float


def projected_gradient_norm(p: QPProblem, x) -> float:
    g = p.gradient(x)
    return float(np.linalg.norm(np.clip(x - g, p.lb, p.ub) - x))


def _free_subspace_step(p: QPProblem, x, free):
    """Least-squares minimiser over the free coordinates with the others held fixed."""
    x_new = x.copy()
    if not free.any():
        return x_new
    rhs = p.residual - p.jacobian[:, ~free] @ x[~free]
    x_new[free] = np.linalg.lstsq(p.jacobian[:, free], rhs, rcond=RANK_RTOL)[0]
    return x_new


def _project_search(p: QPProblem, x, target, f0):
    """Largest step toward ``target`` that stays feasible, then exact search on the segment."""
    d = target - x
    with np.errstate(divide="ignore", invalid="ignore"):
        up = np.where(d > 0, (p.ub - x) / d, np.inf)
        down = np.where(d < 0, (p.lb - x) / d, np.inf)
    tmax = float(min(1.0, np.min(up), np.min(down)))
    Jd = p.jacobian @ d
    curv = float(Jd @ Jd)
    if curv <= 0.0:
        return x
    t = min(tmax, -float(p.gradient(x) @ d) / curv)
    if t <= 0.0:
        return x
    y = np.clip(x + t * d, p.lb, p.ub)
    return y if p.objective(y) <= f0 else x


def solve_qp(p: QPProblem, x0=None, tol: float = QP_TOL, max_iter: int = QP_MAX_ITER) -> QPSolution:
    """Projected-gradient solver for the box-constrained least-squares problem.

    Each iteration takes a projected gradient step whose length is the exact
    minimiser of the quadratic along the steepest-descent ray, halved until the
    projected point decreases the objective, followed by a least-squares step on the
    coordinates that are not at a bound. Convergence is declared when the projected
    gradient norm is at most ``tol * max(1, ||J^T r||)``. The iterate is always
    feasible, and hitting ``max_iter`` returns the best point with ``converged=False``.
    """
    x = np.clip(np.zeros(p.size) if x0 is None else np.asarray(x0, dtype=float), p.lb, p.ub)
    scale = max(1.0, float(np.linalg.norm(p.jacobian.T @ p.residual)))
    f = p.objective(x)
    pg = projected_gradient_norm(p, x)
    for it in range(1, max_iter + 1):
        if pg <= tol * scale:
            return QPSolution(x, it - 1, True, pg)
        g = p.gradient(x)
        Jg = p.jacobian @ g
        gg, gHg = float(g @ g), float(Jg @ Jg)
        step = gg / gHg if gHg > 0 else 1.0
        for _ in range(60):
            y = np.clip(x - step * g, p.lb, p.ub)
            fy = p.objective(y)
            if fy <= f - 1e-4 * float(g @ (x - y)):
                break
            step *= 0.5
        else:
            y, fy = x, f
        free = (y > p.lb) & (y < p.ub)
        z = _project_search(p, y, _free_subspace_step(p, y, free), fy)
        fz = p.objective(z)
        if fz <= fy:
            y, fy = z, fz
        stalled = np.array_equal(y, x)
        x, f = y, fy
        pg = projected_gradient_norm(p, x)
        if stalled and pg > tol * scale:
            break
    return QPSolution(x, it, pg <= tol * scale, pg)


def enumerate_active_sets(p: QPProblem) -> np.ndarray:
    """Brute-force minimiser over all 3^n lower/upper/free bound patterns.

    Exponential in the number of unknowns; meant as a test oracle for small problems.
    """
    n = p.size
    best_x, best_f = None, np.inf
    for pattern in itertools.product((0, 1, 2), repeat=n):
        pattern = np.array(pattern)
        x = np.where(pattern == 0, p.lb, p.ub).astype(float)
        free = pattern == 2
        x = _free_subspace_step(p, x, free)
        if np.any(x < p.lb - 1e-12) or np.any(x > p.ub + 1e-12):
            continue
        fx = p.objective(x)
        if fx < best_f - 1e-15:
            best_x, best_f = x, fx
    return best_x


# ---------------------------------------------------------------------------
# Outer loop


@dataclass(eq=False)
class CalibrationResult:
    phi_star: np.ndarray
    table: DHTable
    iterations: int
    residual_norm: float
    converged: bool
    rank_deficient: bool = False
    history: list = field(default_factory=list)

    def predict(self, Q) -> np.ndarray:
        return fk_vectors(self.table, Q)


def _split_measurements(measurements):
    Q, F = [], []
    for q, pose in measurements:
        Q.append(np.asarray(q, dtype=float))
        F.append(pose.vector if isinstance(pose, Pose7) else np.asarray(pose, dtype=float))
    return np.array(Q), np.array(F)


def _stacked_residual(table, Q, F, w):
    return (pose_difference(F, fk_vectors(table, Q)) * w).ravel()


def calibrate_linearized(nominal: DHTable, measurements, bounds=None, max_outer: int = 50,
                         weights=None) -> CalibrationResult:
    """Iterated linearized least squares for the (alpha, d, a) parameters.

    ``measurements`` is a sequence of ``(q, pose)`` pairs, with poses given as
    :class:`Pose7` or 7-vectors. ``bounds`` is a pair ``(lb, ub)`` of 3n-vectors of
    allowed total deviations from the nominal parameters (unbounded by default).
    ``weights`` scales the seven pose rows of every measurement.
    """
    Q, F = _split_measurements(measurements)
    n3 = 3 * nominal.n
    if Q.shape[0] * 7 < n3:
        raise ValueError(f"need at least {-(-n3 // 7)} measurements, got {Q.shape[0]}")
    lb, ub = (np.full(n3, -np.inf), np.full(n3, np.inf)) if bounds is None else bounds
    lb = np.broadcast_to(np.asarray(lb, dtype=float), (n3,))
    ub = np.broadcast_to(np.asarray(ub, dtype=float), (n3,))
    if np.any(lb > 0) or np.any(ub < 0):
        raise ValueError("bounds must contain the nominal parameters")
    w = np.ones(7) if weights is None else np.asarray(weights, dtype=float)

    phi0 = nominal.phi()
    delta = np.zeros(n3)
    table = nominal
    r = _stacked_residual(table, Q, F, w)
    norm = float(np.linalg.norm(r))
    history = [norm]
    rank_deficient = False
    converged = False
    it = 0
    for it in range(1, max_outer + 1):
        J = (parameter_jacobian_batch(table, Q) * w[None, :, None]).reshape(-1, n3)
        if not rank_deficient and np.linalg.matrix_rank(J, rtol=RANK_RTOL) < n3:
            rank_deficient = True
            warnings.warn("stacked Jacobian is rank deficient; the correction is not unique",
                          RankDeficientWarning, stacklevel=2)
        sol = solve_qp(QPProblem(J, r, lb - delta, ub - delta))
        step = sol.x
        if np.linalg.norm(step) <= STEP_TOL:
            converged = True
            break
        for _ in range(MAX_HALVINGS):
            trial = nominal.with_phi(phi0 + delta + step)
            r_trial = _stacked_residual(trial, Q, F, w)
            n_trial = float(np.linalg.norm(r_trial))
            if n_trial <= norm:
                break
            step = 0.5 * step
        else:
            converged = True
            break
        delta = delta + step
        table, r, norm = trial, r_trial, n_trial
        history.append(norm)
        if np.linalg.norm(step) <= STEP_TOL:
            converged = True
            break
    return CalibrationResult(phi0 + delta, table, it, norm, converged, rank_deficient, history)


def uncertainty_bounds(uncertainty, percent: float = 100.0):
    """Box ``(lb, ub)`` over (alpha, d, a) from per-link (theta, alpha, d, a) bounds."""
    u = np.asarray(uncertainty, dtype=float).reshape(-1, 4)[:, 1:] * percent / 100.0
    return -u.ravel(), u.ravel()
