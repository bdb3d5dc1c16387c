"""Experiment orchestration and figure-ready outputs.

Every run is a pure function of ``(config, strategy, seed)``: the seed is split into
independent streams for the robot perturbation, the sensor noise and the sampler.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import tempfile
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .acquisition import BetaSchedule, CandidatePool, grid_pool, lhs_pool, run_campaign
from .arm import TrueArm, apply_deltas, pose_difference, realize, residual, true_vectors
from .config import ExperimentConfig
from .kinematics import fk_vectors
from .linearized import calibrate_linearized, uncertainty_bounds
from .records import IterationRow, RunRecord
from .residual import holdout_from_predictions
from .robots import Robot

log = logging.getLogger(__name__)

POSE_COLUMNS = ("eq_w", "eq_x", "eq_y", "eq_z", "ep_x", "ep_y", "ep_z")
AXIS_NAMES = ("qw", "qx", "qy", "qz", "px", "py", "pz")


# ---------------------------------------------------------------------------
# Run setup


def run_streams(seed: int):
    """Independent seeds for (perturbation, measurement noise, sampler)."""
    children = np.random.SeedSequence(seed).spawn(3)
    return tuple(int(c.generate_state(1)[0]) for c in children)


def build_pool(cfg: ExperimentConfig, robot: Robot) -> CandidatePool:
    kind = cfg.pool.kind
    if kind == "auto":
        kind = "grid" if robot.n <= 2 else "lhs"
    if kind == "grid":
        return grid_pool(robot.table.joint_limits, cfg.pool.resolution)
    return lhs_pool(robot.table.joint_limits, cfg.pool.size, cfg.pool.seed)


def holdout_points(cfg: ExperimentConfig, robot: Robot) -> np.ndarray:
    """Evenly spaced joint vectors on a line through the centre of the joint box."""
    lo, hi = robot.table.joint_limits.T
    centre, half = (lo + hi) / 2.0, (hi - lo) / 2.0
    direction = np.ones(robot.n) if cfg.holdout.direction is None else np.asarray(cfg.holdout.direction)
    s = np.linspace(-1.0, 1.0, cfg.holdout.points)[:, None]
    return np.clip(centre + s * cfg.holdout.fraction * half * direction, lo, hi)


def make_arm(cfg: ExperimentConfig, robot: Robot, seed: int, percent=None,
             field_scale: float = 1.0) -> TrueArm:
    pert_seed, noise_seed, _ = run_streams(seed)
    spec = cfg.perturbation.spec(percent, field_scale)
    return realize(robot.table, spec, pert_seed, robot.uncertainty, cfg.measurement.model(noise_seed))


def _linearized_campaign(cfg, robot, arm, pool, holdout, seed, rng) -> RunRecord:
    nominal = robot.table
    lb, ub = uncertainty_bounds(robot.uncertainty, cfg.baseline.bounds_percent)
    need = -(-3 * robot.n // 7)
    record = RunRecord("linearized", seed, cfg.budget)
    order = rng.permutation(len(pool))
    if cfg.budget > len(pool):
        raise ValueError(f"budget {cfg.budget} exceeds the pool size {len(pool)}")
    measurements, result, best = [], None, math.inf
    rank_deficient = False
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for t in range(1, cfg.budget + 1):
            q = pool.points[order[t - 1]].copy()
            r = residual(arm, nominal, q)
            predicted = np.zeros(7)
            if result is not None:
                predicted = pose_difference(result.predict(q)[0], fk_vectors(nominal, q)[0])
            measurements.append((q, fk_vectors(nominal, q)[0] + r))
            if len(measurements) >= need:
                result = calibrate_linearized(nominal, measurements, (lb, ub),
                                              cfg.baseline.max_outer, cfg.baseline.weights)
                rank_deficient |= result.rank_deficient
            err = float(np.linalg.norm(r - predicted))
            best = min(best, err)
            record.rows.append(IterationRow(t, q, err, float(np.linalg.norm(r)), best))
    predicted = fk_vectors(nominal, holdout) if result is None else result.predict(holdout)
    record.holdout = holdout_from_predictions(arm, holdout, predicted)
    if result is not None:
        record.model_snapshot = {
            "phi_star": result.phi_star.tolist(),
            "iterations": result.iterations,
            "residual_norm": result.residual_norm,
            "converged": result.converged,
        }
    record.extra["rank_deficient"] = bool(rank_deficient)
    return record


def run_one(cfg: ExperimentConfig, strategy: str, seed: int, percent=None,
            field_scale: float = 1.0) -> RunRecord:
    """One campaign; exceptions propagate."""
    robot = cfg.resolve_robot()
    pool = build_pool(cfg, robot)
    holdout = holdout_points(cfg, robot)
    arm = make_arm(cfg, robot, seed, percent, field_scale)
    rng = np.random.default_rng(run_streams(seed)[2])
    if strategy == "linearized":
        record = _linearized_campaign(cfg, robot, arm, pool, holdout, seed, rng)
    else:
        beta = BetaSchedule.for_table(robot.table, cfg.beta.delta)
        record = run_campaign(arm, robot.table, pool, strategy, cfg.budget, seed, beta=beta,
                              policy=cfg.refit.policy(arm.measurement.noise_std), holdout=holdout,
                              signed_mean=cfg.beta.signed_mean, rng=rng)
    record.config_hash = cfg.config_hash()
    record.robot = robot.name
    return record


def _safe_run(args) -> RunRecord:
    cfg, strategy, seed, percent, field_scale = args
    try:
        return run_one(cfg, strategy, seed, percent, field_scale)
    except Exception as exc:  # isolate failures so the other runs still complete
        where = f" at iteration {exc.iteration}" if hasattr(exc, "iteration") else ""
        log.warning("run %s seed %d failed%s: %s", strategy, seed, where, exc)
        return RunRecord(strategy, seed, cfg.budget, cfg.config_hash(),
                         cfg.resolve_robot().name, error=f"{type(exc).__name__}{where}: {exc}")


def _execute(cfg: ExperimentConfig, jobs, on_record=None) -> list:
    records = []
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as ex:
            for rec in ex.map(_safe_run, jobs):
                records.append(rec)
                if on_record:
                    on_record(rec)
    else:
        for job in jobs:
            rec = _safe_run(job)
            records.append(rec)
            if on_record:
                on_record(rec)
    return records


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> list:
    """Run every (strategy, seed) pair; with ``out_dir`` each run is written as it finishes."""
    jobs = [(cfg, s, seed, None, 1.0) for s in cfg.strategies for seed in cfg.seeds]
    writer = (lambda rec: write_run(rec, out_dir)) if out_dir is not None else None
    records = _execute(cfg, jobs, writer)
    if out_dir is not None:
        write_aggregate(records, out_dir)
    return records


# ---------------------------------------------------------------------------
# Perturbation sweep


@dataclass
class SweepTable:
    rows: list = field(default_factory=list)  # (level, method, seed, holdout error)

    def medians(self) -> list:
        out = []
        keys = sorted({(lv, m) for lv, m, _, _ in self.rows}, key=lambda k: (k[0], k[1]))
        for lv, m in keys:
            vals = [e for l2, m2, _, e in self.rows if (l2, m2) == (lv, m) and math.isfinite(e)]
            out.append((lv, m, float(np.median(vals)) if vals else math.nan, len(vals)))
        return out

    def median(self, level, method) -> float:
        for lv, m, med, _ in self.medians():
            if lv == level and m == method:
                return med
        raise KeyError((level, method))


def sweep_perturbation(cfg: ExperimentConfig, levels=None, methods=("gp-ucb", "linearized"),
                       out_dir=None) -> SweepTable:
    """GP-UCB and the linearized baseline at each perturbation level (percent of the bounds)."""
    levels = list(cfg.sweep.levels if levels is None else levels)
    if not levels:
        raise ValueError("levels must be nonempty")
    jobs = []
    for lv in levels:
        scale = lv / 100.0 if cfg.sweep.field_scales_with_level else 1.0
        jobs += [(cfg, m, seed, float(lv), scale) for m in methods for seed in cfg.seeds]
    records = _execute(cfg, jobs)
    table = SweepTable()
    for (_, m, seed, lv, _), rec in zip(jobs, records):
        table.rows.append((lv, m, seed, rec.final_holdout if rec.ok else math.nan))
    if out_dir is not None:
        write_sweep(table, out_dir)
    return table


# ---------------------------------------------------------------------------
# Residual histogram


@dataclass(eq=False)
class AxisHistogram:
    axis: str
    edges: np.ndarray
    counts: np.ndarray
    outside: int
    mean: float
    std: float
    skewness: float
    excess_kurtosis: float


@dataclass(eq=False)
class HistogramResult:
    samples: np.ndarray
    points: np.ndarray
    axes: list

    def axis(self, name: str) -> AxisHistogram:
        return self.axes[AXIS_NAMES.index(name)]


PILOT_SAMPLES = 100
EDGE_STDS = 5.0


def _delta_box(cfg: ExperimentConfig, robot: Robot):
    p = cfg.perturbation
    if p.mode == "scaled":
        half = p.percent / 100.0 * robot.uncertainty
        return -half, half
    if p.mode == "sampled-uniform":
        return np.asarray(p.lower, float), np.asarray(p.upper, float)
    return None


def residual_samples(cfg: ExperimentConfig, n_samples: int, seed: int = 0):
    """Residuals at pool points; a prefix of a longer draw with the same seed."""
    robot = cfg.resolve_robot()
    pool = build_pool(cfg, robot)
    if n_samples > len(pool):
        raise ValueError(f"n_samples {n_samples} exceeds the pool size {len(pool)}")
    pert_seed, noise_seed, sampler_seed = run_streams(seed)
    P = pool.points[np.random.default_rng(sampler_seed).permutation(len(pool))[:n_samples]]
    nominal = robot.table
    hc = cfg.histogram
    if hc.mode == "single":
        arm = make_arm(cfg, robot, seed)
        return np.array([residual(arm, nominal, q) for q in P]), P
    # ensemble: every sample comes from its own draw of the true robot
    box = _delta_box(cfg, robot)
    fixed = realize(nominal, cfg.perturbation.spec(), pert_seed, robot.uncertainty).perturbed
    rng = np.random.default_rng(pert_seed)
    noise = np.random.default_rng(noise_seed)
    std = np.asarray(cfg.measurement.model().noise_std)
    g = cfg.perturbation.field()
    F_nom = fk_vectors(nominal, P)
    out = np.empty((n_samples, 7))
    delta = None
    for i, q in enumerate(P):
        if box is None:
            table = fixed
        else:
            if hc.antithetic and i % 2 == 1:
                delta = box[0] + box[1] - delta
            else:
                delta = rng.uniform(*box)
            table = apply_deltas(nominal, delta)
        F = fk_vectors(table, q)[0]
        if g is not None:
            F = F + g(q)
        F = F + noise.standard_normal(7) * std
        F[:4] /= np.linalg.norm(F[:4])
        out[i] = pose_difference(F, F_nom[i])
    return out, P


def residual_histogram(cfg: ExperimentConfig, n_samples=None, seed=None, out_dir=None) -> HistogramResult:
    """Binned residuals and moments per pose axis.

    Bin edges are symmetric about zero with an odd bin count, so an exact zero lands
    in the centre bin. Their half-width is a fixed multiple of the per-axis spread
    of the first samples of the stream, which keeps the edges identical for any
    ``n_samples`` with the same seed.
    """
    n = cfg.histogram.n_samples if n_samples is None else int(n_samples)
    if n < PILOT_SAMPLES:
        raise ValueError(f"n_samples must be at least {PILOT_SAMPLES}")
    seed = cfg.seeds[0] if seed is None else seed
    R, P = residual_samples(cfg, n, seed)
    pilot = R[:PILOT_SAMPLES]
    axes = []
    for k, name in enumerate(AXIS_NAMES):
        x = R[:, k]
        half = max(EDGE_STDS * float(np.sqrt(np.mean(pilot[:, k] ** 2))), 1e-12)
        edges = np.linspace(-half, half, cfg.histogram.bins + 1)
        counts, _ = np.histogram(x, edges)
        outside = int(np.sum((x < -half) | (x > half)))
        sd = float(np.std(x))
        if sd > 0:
            skew = float(stats.skew(x))
            kurt = float(stats.kurtosis(x))
        else:
            skew = kurt = 0.0
        axes.append(AxisHistogram(name, edges, counts, outside, float(np.mean(x)), sd, skew, kurt))
    result = HistogramResult(R, P, axes)
    if out_dir is not None:
        write_histogram(result, out_dir)
    return result


# ---------------------------------------------------------------------------
# Output files


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (np.integer,)):
        return str(int(x))
    return str(x)


def atomic_write(path, text: str) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"could not write {path}: {exc.strerror or exc}") from exc
    return path


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def curve_csv(record: RunRecord) -> str:
    n = len(record.rows[0].q) if record.rows else 0
    header = ["t", *[f"chosen_q{i + 1}" for i in range(n)], "err_norm", "best_so_far"]
    rows = [[r.t, *[float(v) for v in r.q], r.err_norm, r.best_so_far] for r in record.rows]
    return _csv(header, rows)


def holdout_csv(record: RunRecord) -> str:
    h = record.holdout
    n = h.points.shape[1]
    header = ["idx", *[f"q{i + 1}" for i in range(n)], "err_uncal", "err_cal", *POSE_COLUMNS]
    rows = [[i, *h.points[i], h.err_uncal[i], h.err_cal[i], *h.axis_err[i]]
            for i in range(h.points.shape[0])]
    return _csv(header, rows)


def record_json(record: RunRecord) -> str:
    return json.dumps(record.to_dict(), indent=2, sort_keys=True) + "\n"


def write_run(record: RunRecord, out_dir) -> list:
    out = Path(out_dir)
    rid = record.run_id
    paths = [atomic_write(out / "runs" / f"{rid}.json", record_json(record))]
    if record.rows:
        paths.append(atomic_write(out / "curves" / f"{rid}.csv", curve_csv(record)))
    if record.holdout is not None:
        paths.append(atomic_write(out / "holdout" / f"{rid}.csv", holdout_csv(record)))
    return paths


def aggregate_rows(records) -> list:
    """Pointwise median and quartiles of the per-run curves, per strategy and t."""
    rows = []
    for strategy in sorted({r.strategy for r in records}):
        runs = [r for r in records if r.strategy == strategy and r.ok and r.rows]
        if not runs:
            continue
        T = min(len(r.rows) for r in runs)
        err = np.array([[row.err_norm for row in r.rows[:T]] for r in runs])
        best = np.array([[row.best_so_far for row in r.rows[:T]] for r in runs])
        for t in range(T):
            e = np.percentile(err[:, t], [25, 50, 75])
            b = np.percentile(best[:, t], [25, 50, 75])
            rows.append([strategy, t + 1, len(runs), e[1], e[0], e[2], b[1], b[0], b[2]])
    return rows


AGGREGATE_HEADER = ["strategy", "t", "n_runs", "err_norm_median", "err_norm_q25", "err_norm_q75",
                    "best_median", "best_q25", "best_q75"]
SUMMARY_HEADER = ["strategy", "seed", "ok", "final_holdout_cal", "final_holdout_uncal", "error"]


def write_aggregate(records, out_dir) -> list:
    out = Path(out_dir)
    summary = [[r.strategy, r.seed, int(r.ok), r.final_holdout, r.uncalibrated_holdout, r.error or ""]
               for r in records]
    return [atomic_write(out / "aggregate.csv", _csv(AGGREGATE_HEADER, aggregate_rows(records))),
            atomic_write(out / "summary.csv", _csv(SUMMARY_HEADER, summary))]


def emit_outputs(records, out_dir) -> list:
    """Write curves, holdout tables, JSON records and the aggregate files."""
    records = list(records)
    if not records:
        raise ValueError("no records to write")
    paths = []
    for rec in records:
        paths += write_run(rec, out_dir)
    return paths + write_aggregate(records, out_dir)


def write_sweep(table: SweepTable, out_dir) -> list:
    out = Path(out_dir)
    return [atomic_write(out / "sweep.csv", _csv(["level", "method", "seed", "holdout_error"], table.rows)),
            atomic_write(out / "sweep_median.csv",
                         _csv(["level", "method", "median_holdout_error", "n_runs"], table.medians()))]


def write_histogram(result: HistogramResult, out_dir) -> list:
    out = Path(out_dir)
    bins = []
    for a in result.axes:
        for lo, hi, c in zip(a.edges[:-1], a.edges[1:], a.counts):
            bins.append([a.axis, lo, hi, int(c)])
    moments = [[a.axis, result.samples.shape[0], a.mean, a.std, a.skewness, a.excess_kurtosis, a.outside]
               for a in result.axes]
    return [atomic_write(out / "histogram.csv", _csv(["axis", "bin_lo", "bin_hi", "count"], bins)),
            atomic_write(out / "histogram_moments.csv",
                         _csv(["axis", "n", "mean", "std", "skewness", "excess_kurtosis", "outside"],
                              moments))]
