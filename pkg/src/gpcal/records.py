"""Campaign records and their JSON form."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .residual import HoldoutResult

SCHEMA_VERSION = 1


@dataclass
class IterationRow:
    t: int
    q: np.ndarray
    err_norm: float
    residual_norm: float
    best_so_far: float
    wall_time: float = 0.0


@dataclass
class RunRecord:
    strategy: str
    seed: int
    budget: int
    config_hash: str = ""
    robot: str = ""
    rows: list = field(default_factory=list)
    holdout: HoldoutResult | None = None
    model_snapshot: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    error: str | None = None

    @property
    def run_id(self) -> str:
        return f"{self.strategy}_seed{self.seed}"

    @property
    def ok(self) -> bool:
        return self.error is None

    @property
    def final_holdout(self) -> float:
        return self.holdout.mean_cal if self.holdout is not None else float("nan")

    @property
    def uncalibrated_holdout(self) -> float:
        return self.holdout.mean_uncal if self.holdout is not None else float("nan")

    def best_so_far(self) -> np.ndarray:
        return np.array([r.best_so_far for r in self.rows])

    def to_dict(self) -> dict:
        """JSON-ready dictionary; wall-clock times are left out so output is reproducible."""
        d = {
            "schema_version": SCHEMA_VERSION,
            "config_hash": self.config_hash,
            "robot": self.robot,
            "strategy": self.strategy,
            "seed": self.seed,
            "budget": self.budget,
            "error": self.error,
            "rows": [
                {"t": r.t, "q": [float(x) for x in r.q], "err_norm": r.err_norm,
                 "residual_norm": r.residual_norm, "best_so_far": r.best_so_far}
                for r in self.rows
            ],
            "holdout": None,
            "model": self.model_snapshot,
            "extra": self.extra,
        }
        if self.holdout is not None:
            h = self.holdout
            d["holdout"] = {
                "points": h.points.tolist(),
                "err_uncal": h.err_uncal.tolist(),
                "err_cal": h.err_cal.tolist(),
                "axis_err": h.axis_err.tolist(),
                "mean_uncal": h.mean_uncal,
                "mean_cal": h.mean_cal,
            }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported run record schema {d.get('schema_version')!r}")
        rows = [IterationRow(r["t"], np.asarray(r["q"]), r["err_norm"], r["residual_norm"],
                             r["best_so_far"]) for r in d["rows"]]
        holdout = None
        if d.get("holdout"):
            h = d["holdout"]
            holdout = HoldoutResult(np.asarray(h["points"]), np.asarray(h["err_cal"]),
                                    np.asarray(h["err_uncal"]), np.asarray(h["axis_err"]))
        return cls(d["strategy"], d["seed"], d["budget"], d["config_hash"], d["robot"], rows,
                   holdout, d.get("model", {}), d.get("extra", {}), d.get("error"))
