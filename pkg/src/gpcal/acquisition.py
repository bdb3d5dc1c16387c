"""Pool-based measurement selection: summed GP-UCB, summed EI, greedy D-optimal, random."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm, qmc

from .arm import TrueArm, residual
from .errors import PoolExhaustedError
from .kinematics import DHTable, parameter_jacobian_batch
from .records import IterationRow, RunRecord
from .residual import (RefitPolicy, ResidualModel, holdout_error, predict_batch, retune, snapshot,
                       update)

STRATEGIES = ("gp-ucb", "ei", "d-optimal", "random")
D_OPTIMAL_RANDOM_START = 10


@dataclass(frozen=True, eq=False)
class CandidatePool:
    points: np.ndarray
    generation: str = "custom"

    def __post_init__(self):
        P = np.atleast_2d(np.asarray(self.points, dtype=float))
        if P.shape[0] == 0:
            raise ValueError("candidate pool must be nonempty")
        P.flags.writeable = False
        object.__setattr__(self, "points", P)

    def __len__(self):
        return self.points.shape[0]

    def check_limits(self, table: DHTable) -> bool:
        lo, hi = table.joint_limits.T
        return bool(np.all(self.points >= lo) and np.all(self.points <= hi))


def grid_pool(limits, resolution: int) -> CandidatePool:
    limits = np.asarray(limits, dtype=float)
    axes = [np.linspace(lo, hi, resolution) for lo, hi in limits]
    mesh = np.meshgrid(*axes, indexing="ij")
    return CandidatePool(np.stack([m.ravel() for m in mesh], axis=1), f"grid({resolution})")


def lhs_pool(limits, size: int, seed: int = 0) -> CandidatePool:
    limits = np.asarray(limits, dtype=float)
    sampler = qmc.LatinHypercube(d=limits.shape[0], seed=np.random.default_rng(seed))
    unit = sampler.random(size)
    return CandidatePool(qmc.scale(unit, limits[:, 0], limits[:, 1]),
                         f"latin-hypercube({size},{seed})")


# ---------------------------------------------------------------------------
# Exploration weight


@dataclass(frozen=True)
class BetaSchedule:
    delta: float = 0.1
    d: float = 1.0
    a: float = 1.0
    b: float = 1.0
    r: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if min(self.d, self.a, self.b, self.r) <= 0:
            raise ValueError("beta constants must be positive")
        if 4.0 * self.d <= self.delta:
            raise ValueError("beta needs 4*d > delta so that log(4 d / delta) is positive")

    @classmethod
    def for_table(cls, table: DHTable, delta: float = 0.1) -> "BetaSchedule":
        span = float(np.max(np.diff(table.joint_limits, axis=1)))
        return cls(delta=delta, d=float(table.n), a=1.0, b=1.0, r=span)


def beta_t(schedule: BetaSchedule, t: int) -> float:
    if t < 1:
        raise ValueError("t starts at 1")
    s = schedule
    first = 2.0 * math.log(t**2 * 2.0 * math.pi**2 / (3.0 * s.delta))
    inner = t**2 * s.d * s.a * s.b * s.r * math.sqrt(math.log(4.0 * s.d / s.delta))
    return first + 2.0 * s.d * math.log(inner)


# ---------------------------------------------------------------------------
# Utilities


def _posterior(model: ResidualModel, Q):
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    if len(model) == 0:
        prior_std = np.array([h.signal_std for h in model.hypers])
        return np.zeros((Q.shape[0], 7)), np.broadcast_to(prior_std, (Q.shape[0], 7))
    return predict_batch(model, Q)


def ucb_utilities(model: ResidualModel, Q, beta: float, signed_mean: bool = False) -> np.ndarray:
    """Summed upper confidence bound over the seven axes for each row of ``Q``."""
    mean, std = _posterior(model, Q)
    if not signed_mean:
        mean = np.abs(mean)
    return np.sum(mean + math.sqrt(beta) * std, axis=1)


def ucb_utility(model: ResidualModel, q, beta: float, signed_mean: bool = False) -> float:
    return float(ucb_utilities(model, np.atleast_2d(q), beta, signed_mean)[0])


def magnitude_ei(mean, std, incumbent):
    """Closed-form E[max(|f| - incumbent, 0)] for f ~ N(mean, std^2), incumbent >= 0."""
    mean, std = np.asarray(mean, dtype=float), np.asarray(std, dtype=float)
    out = np.zeros(np.broadcast(mean, std, incumbent).shape)
    pos = std > 0
    s = np.where(pos, std, 1.0)
    for m in (mean, -mean):
        z = (m - incumbent) / s
        out += np.where(pos, (m - incumbent) * norm.cdf(z) + s * norm.pdf(z),
                        np.maximum(m - incumbent, 0.0))
    return out


def ei_utilities(model: ResidualModel, Q) -> np.ndarray:
    """Summed per-axis expected improvement over the largest |residual| seen so far."""
    mean, std = _posterior(model, Q)
    incumbent = np.max(np.abs(model.targets), axis=0) if len(model) else np.zeros(7)
    return np.sum(magnitude_ei(mean, std, incumbent[None, :]), axis=1)


# ---------------------------------------------------------------------------
# Selection


@dataclass(eq=False)
class SamplerState:
    strategy: str
    rng: np.random.Generator
    visited: list = field(default_factory=list)
    beta: BetaSchedule | None = None
    signed_mean: bool = False
    jacobians: np.ndarray | None = None
    info: np.ndarray | None = None
    last_index: int | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")


def _unvisited(state: SamplerState, pool: CandidatePool) -> np.ndarray:
    mask = np.ones(len(pool), bool)
    mask[state.visited] = False
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise PoolExhaustedError(f"all {len(pool)} pool points have been visited")
    return idx


def _d_optimal_scores(state: SamplerState, model: ResidualModel, pool: CandidatePool, idx):
    if state.jacobians is None:
        state.jacobians = parameter_jacobian_batch(model.nominal, pool.points)
    J = state.jacobians
    p = J.shape[2]
    if state.info is None:
        Jv = J[state.visited]
        state.info = np.einsum("mki,mkj->ij", Jv, Jv)
    A = state.info
    ridge = 1e-9 * max(np.trace(A) / p, 1e-12)
    Ainv = np.linalg.inv(A + ridge * np.eye(p))
    Jc = J[idx]
    M = np.einsum("mki,ij,mlj->mkl", Jc, Ainv, Jc) + np.eye(J.shape[1])
    return np.linalg.slogdet(M)[1]


def select_index(state: SamplerState, model: ResidualModel, pool: CandidatePool, t: int) -> int:
    idx = _unvisited(state, pool)
    s = state.strategy
    if s == "random" or (s == "d-optimal" and len(state.visited) < D_OPTIMAL_RANDOM_START):
        choice = int(idx[state.rng.integers(idx.size)])
    else:
        if s == "gp-ucb":
            beta = beta_t(state.beta or BetaSchedule.for_table(model.nominal), t)
            scores = ucb_utilities(model, pool.points[idx], beta, state.signed_mean)
        elif s == "ei":
            scores = ei_utilities(model, pool.points[idx])
        else:
            scores = _d_optimal_scores(state, model, pool, idx)
        # np.argmax returns the first maximum, i.e. the lowest pool index
        choice = int(idx[int(np.argmax(scores))])
    state.visited.append(choice)
    state.last_index = choice
    if s == "d-optimal" and state.info is not None:
        Jq = state.jacobians[choice]
        state.info = state.info + Jq.T @ Jq
    return choice


def select_next(state: SamplerState, model: ResidualModel, pool: CandidatePool, t: int) -> np.ndarray:
    """Pick the next measurement pose and mark it visited."""
    return pool.points[select_index(state, model, pool, t)].copy()


# ---------------------------------------------------------------------------
# Campaign loop


def run_campaign(arm: TrueArm, nominal: DHTable, pool: CandidatePool, strategy: str,
                 budget: int, seed: int = 0, *, beta: BetaSchedule | None = None,
                 policy: RefitPolicy | None = None, holdout=None, signed_mean: bool = False,
                 stop_threshold: float | None = None,
                 rng: np.random.Generator | None = None) -> RunRecord:
    """Select, measure, and update for ``budget`` iterations.

    ``err_norm`` in each row is the error of the model built from the previous
    iterations at the newly measured pose, ``||dF_t - mu_{t-1}(q_t)||``; at t=1 the
    prior mean is zero, so it equals the raw residual norm. The sampler draws from
    ``rng`` when given, otherwise from a generator seeded with ``seed``.
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    policy = policy or RefitPolicy()
    rng = rng if rng is not None else np.random.default_rng(seed)
    state = SamplerState(strategy, rng, beta=beta, signed_mean=signed_mean)
    model = ResidualModel.empty(nominal)
    record = RunRecord(strategy, seed, budget)
    best = math.inf
    for t in range(1, budget + 1):
        start = time.perf_counter()
        try:
            q = select_next(state, model, pool, t)
            predicted = predict_batch(model, q)[0][0] if len(model) else np.zeros(7)
            r = residual(arm, nominal, q)
            model = update(model, q, r, policy)
        except Exception as exc:
            exc.iteration = t
            raise
        err = float(np.linalg.norm(r - predicted))
        best = min(best, err)
        record.rows.append(IterationRow(t, q, err, float(np.linalg.norm(r)), best,
                                        time.perf_counter() - start))
        if stop_threshold is not None and err <= stop_threshold:
            break
    if policy.final_refit and len(model) and not policy.optimizes_at(len(model)):
        model = retune(model, policy)
    if holdout is not None:
        record.holdout = holdout_error(model, arm, holdout)
    record.model_snapshot = snapshot(model)
    return record
