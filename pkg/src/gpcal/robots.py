"""Built-in robots: nominal DH tables with per-parameter uncertainty bounds."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .kinematics import DHLink, DHTable

PI = math.pi


@dataclass(frozen=True, eq=False)
class Robot:
    """A nominal table plus the half-width of the uncertainty on each DH parameter.

    ``uncertainty`` has one row per link with columns (theta, alpha, d, a).
    """

    name: str
    table: DHTable
    uncertainty: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.uncertainty, dtype=float).reshape(-1, 4)
        if u.shape[0] != self.table.n:
            raise ValueError(f"{self.name}: {u.shape[0]} uncertainty rows for {self.table.n} links")
        if np.any(u < 0) or not np.all(np.isfinite(u)):
            raise ValueError(f"{self.name}: uncertainty bounds must be finite and non-negative")
        u.flags.writeable = False
        object.__setattr__(self, "uncertainty", u)

    @property
    def n(self) -> int:
        return self.table.n


def _robot(name, rows, limits):
    # rows: (alpha, d, a, alpha_bound, d_bound, a_bound)
    links = tuple(DHLink(alpha=al, d=d, a=a) for al, d, a, *_ in rows)
    unc = [(0.0, ba, bd, bl) for *_, ba, bd, bl in rows]
    return Robot(name, DHTable(links, limits), np.array(unc))


def planar2() -> Robot:
    rows = [(0.0, 0.0, 1.0, 0.1, 0.1, 0.2)] * 2
    return _robot("planar2", rows, [[-3.0, 3.0]] * 2)


def wam7() -> Robot:
    rows = [
        (-PI / 2, 0.0, 0.0, 0.2, 0.01, 0.01),
        (PI / 2, 0.0, 0.0, 0.2, 0.02, 0.03),
        (-PI / 2, 0.55, 0.045, 0.3, 0.2, 0.01),
        (PI / 2, 0.0, -0.045, 0.2, 0.03, 0.01),
        (-PI / 2, 0.3, 0.0, 0.1, 0.2, 0.07),
        (PI / 2, 0.0, 0.0, 0.1, 0.04, 0.1),
        (0.0, 0.06, 0.0, 0.3, 0.06, 0.01),
    ]
    return _robot("wam7", rows, [[-1.5, 1.5]] * 7)


def lander6() -> Robot:
    rows = [
        (PI / 2, 0.0, 0.16, 0.2, 0.01, 0.1),
        (0.0, 0.0, 0.37, 0.2, 0.02, 0.1),
        (PI, 0.0, 0.05, 0.3, 0.06, 0.02),
        (0.0, -0.15, 0.463, 0.2, 0.01, 0.1),
        (0.0, 0.0, -0.238, 0.1, 0.04, 0.1),
        (PI / 2, 0.0, 0.225, 0.1, 0.06, 0.02),
    ]
    return _robot("lander6", rows, [[-1.5, 1.5]] * 6)


BUILTIN = {"planar2": planar2, "wam7": wam7, "lander6": lander6}


def builtin(name: str) -> Robot:
    try:
        return BUILTIN[name]()
    except KeyError:
        raise KeyError(f"unknown built-in robot {name!r}; choose from {sorted(BUILTIN)}") from None
