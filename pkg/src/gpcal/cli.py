"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 one or more runs failed.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .config import ExperimentConfig, config_from_dict, load_config
from .errors import ConfigError
from .kinematics import forward_kinematics
from .residual import AXES, RefitPolicy, fit_residuals, snapshot

EXIT_OK, EXIT_CONFIG, EXIT_RUN = 0, 1, 2
RESIDUAL_COLUMNS = tuple(f"r_{a}" for a in AXES)

log = logging.getLogger("gpcal")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else config_from_dict({})
    data = cfg.model_dump(mode="json")
    if getattr(args, "robot", None):
        data["robot"] = args.robot
    if getattr(args, "seed", None) is not None:
        data["seeds"] = [args.seed]
    if getattr(args, "budget", None) is not None:
        data["budget"] = args.budget
    if getattr(args, "strategy", None):
        data["strategies"] = list(args.strategy)
    if getattr(args, "out", None):
        data["output_dir"] = args.out
    return config_from_dict(data)


def cmd_fk(args) -> int:
    cfg = _config(args)
    robot = cfg.resolve_robot()
    q = np.array([float(v) for v in args.q.split(",")])
    if q.size != robot.n:
        raise ConfigError(f"--q needs {robot.n} values for {robot.name}, got {q.size}")
    pose = forward_kinematics(robot.table, q)
    print(json.dumps({"robot": robot.name, "q": q.tolist(), "quat": pose.quat.tolist(),
                      "pos": pose.pos.tolist()}))
    return EXIT_OK


def _read_residuals(path: Path, n: int):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = [f"q{i + 1}" for i in range(n)]
        missing = [c for c in (*cols, *RESIDUAL_COLUMNS) if c not in (reader.fieldnames or [])]
        if missing:
            raise ConfigError(f"{path}: missing columns {missing}")
        rows = list(reader)
    X = np.array([[float(r[c]) for c in cols] for r in rows])
    Y = np.array([[float(r[c]) for c in RESIDUAL_COLUMNS] for r in rows])
    return X, Y


def cmd_fit_gp(args) -> int:
    cfg = _config(args)
    robot = cfg.resolve_robot()
    X, Y = _read_residuals(Path(args.residuals), robot.n)
    if X.shape[0] == 0:
        raise ConfigError(f"{args.residuals}: no data rows")
    r = cfg.refit
    policy = RefitPolicy(restarts=r.restarts, max_iter=r.max_iter, method=r.method, ard=r.ard,
                         fit_obs_noise=r.fit_obs_noise)
    model = fit_residuals(robot.table, X, Y, policy)
    out = Path(cfg.output_dir) / "gp_model.json"
    harness.atomic_write(out, json.dumps(snapshot(model), indent=2, sort_keys=True) + "\n")
    print(out)
    return EXIT_OK


def _report(records) -> int:
    for r in records:
        status = "ok" if r.ok else f"FAILED ({r.error})"
        print(f"{r.run_id}: holdout {r.final_holdout:.6g} (uncalibrated {r.uncalibrated_holdout:.6g}) {status}")
    return EXIT_OK if all(r.ok for r in records) else EXIT_RUN


def cmd_calibrate(args) -> int:
    cfg = _config(args)
    cfg = config_from_dict({**cfg.model_dump(mode="json"), "strategies": cfg.strategies[:1],
                            "seeds": cfg.seeds[:1]})
    return _report(harness.run_experiment(cfg, cfg.output_dir))


def cmd_compare(args) -> int:
    cfg = _config(args)
    return _report(harness.run_experiment(cfg, cfg.output_dir))


def cmd_sweep(args) -> int:
    cfg = _config(args)
    levels = [float(v) for v in args.levels.split(",")] if args.levels else None
    table = harness.sweep_perturbation(cfg, levels, out_dir=cfg.output_dir)
    for lv, m, med, n in table.medians():
        print(f"level {lv:g}% {m}: median holdout {med:.6g} over {n} runs")
    return EXIT_OK if all(np.isfinite(e) for *_, e in table.rows) else EXIT_RUN


def cmd_histogram(args) -> int:
    cfg = _config(args)
    res = harness.residual_histogram(cfg, args.samples, out_dir=cfg.output_dir)
    for a in res.axes:
        print(f"{a.axis}: mean {a.mean:.4g} std {a.std:.4g} skew {a.skewness:.3g} "
              f"excess kurtosis {a.excess_kurtosis:.3g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gpcal", description="GP residual calibration experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, run_flags=True):
        sp.add_argument("--config", help="YAML experiment file")
        sp.add_argument("--robot", help="built-in robot name (overrides the config)")
        sp.add_argument("--out", help="output directory")
        if run_flags:
            sp.add_argument("--seed", type=int)
            sp.add_argument("--budget", type=int)
            sp.add_argument("--strategy", action="append",
                            help="sampling strategy; repeat for several")

    sp = sub.add_parser("fk", help="forward kinematics of the nominal robot")
    common(sp, run_flags=False)
    sp.add_argument("--q", required=True, help="comma-separated joint values")
    sp.set_defaults(func=cmd_fk)

    sp = sub.add_parser("fit-gp", help="fit residual GPs to a CSV of observations")
    common(sp, run_flags=False)
    sp.add_argument("--residuals", required=True,
                    help="CSV with columns q1..qn and " + ",".join(RESIDUAL_COLUMNS))
    sp.set_defaults(func=cmd_fit_gp)

    for name, func, text in (("calibrate", cmd_calibrate, "run one campaign"),
                             ("compare", cmd_compare, "run every strategy and seed")):
        sp = sub.add_parser(name, help=text)
        common(sp)
        sp.set_defaults(func=func)

    sp = sub.add_parser("sweep", help="holdout error against perturbation level")
    common(sp)
    sp.add_argument("--levels", help="comma-separated percentages")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("histogram", help="residual histogram and moments")
    common(sp)
    sp.add_argument("--samples", type=int)
    sp.set_defaults(func=cmd_histogram)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
