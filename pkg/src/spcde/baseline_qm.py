"""Asynchronous quantile mapping: regress independently sorted observed
values on sorted model values, then apply the fitted monotone map to the
chronological model series.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import lsq_linear

from .grid import MODEL, GridField, threshold_zeros


class DegenerateFitError(ValueError):
    pass


@dataclass(frozen=True)
class QmMap:
    """Continuous piecewise-linear nondecreasing map through ``(x_knots, y_knots)``.

    The linear mode is the two-knot special case.  Outside the knot range the
    end segments are extended.
    """

    x_knots: np.ndarray
    y_knots: np.ndarray
    mode: str = "piecewise"

    @property
    def slopes(self) -> np.ndarray:
        return np.diff(self.y_knots) / np.diff(self.x_knots)

    @property
    def intercept(self) -> float:
        """Value at zero of the first segment's line (the linear fit's intercept)."""
        return float(self.y_knots[0] - self.slopes[0] * self.x_knots[0])

    @property
    def slope(self) -> float:
        return float(self.slopes[0])

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        xk, yk, s = self.x_knots, self.y_knots, self.slopes
        out = np.interp(x, xk, yk)
        lo, hi = x < xk[0], x > xk[-1]
        out = np.where(lo, yk[0] + s[0] * (x - xk[0]), out)
        return np.where(hi, yk[-1] + s[-1] * (x - xk[-1]), out)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "x_knots": self.x_knots.tolist(), "y_knots": self.y_knots.tolist()}

    @classmethod
    def from_dict(cls, d) -> "QmMap":
        return cls(np.asarray(d["x_knots"], dtype=float), np.asarray(d["y_knots"], dtype=float), d["mode"])


def _paired_sorted(obs, model):
    a = np.sort(np.asarray(obs, dtype=float))
    b = np.sort(np.asarray(model, dtype=float))
    if len(a) == 0 or len(b) == 0:
        raise ValueError("empty input to quantile mapping")
    if len(a) == len(b):
        return a, b
    n = max(len(a), len(b))
    levels = (np.arange(n) + 0.5) / n
    at = lambda v: np.interp(levels, (np.arange(len(v)) + 0.5) / len(v), v)
    return at(a), at(b)


def fit_qm(obs, model, mode: str = "piecewise", knots: int = 10) -> QmMap:
    """Least-squares map from sorted ``model`` values to sorted ``obs`` values.

    ``mode='linear'`` is ordinary simple regression.  ``mode='piecewise'``
    places ``knots`` breakpoints at equal-probability model quantiles and
    solves a bound-constrained least-squares problem so that no segment has
    negative slope.
    """
    y, x = _paired_sorted(obs, model)
    if len(np.unique(x)) < 2:
        raise DegenerateFitError("need at least two distinct model values")
    if mode == "linear":
        slope, intercept = np.polyfit(x, y, 1)
        xk = np.array([x[0], x[-1]])
        return QmMap(xk, intercept + slope * xk, "linear")
    if mode != "piecewise":
        raise ValueError(f"unknown QM mode {mode!r}")
    if knots < 2:
        raise ValueError("piecewise QM needs at least 2 knots")
    xk = np.unique(np.quantile(x, np.linspace(0.0, 1.0, knots)))
    # hat-function design: value at each knot, linear in between, end segments extended
    eye = np.eye(len(xk))
    H = np.column_stack([np.interp(x, xk, eye[i]) for i in range(len(xk))])
    # knot values = c0 + cumsum(increments), increments >= 0
    A = np.cumsum(H[:, ::-1], axis=1)[:, ::-1]
    lb = np.r_[-np.inf, np.zeros(len(xk) - 1)]
    sol = lsq_linear(A, y, bounds=(lb, np.full(len(xk), np.inf)), method="bvls")
    yk = np.cumsum(sol.x)
    return QmMap(xk, yk, "piecewise")


def apply_qm(qmap: QmMap, series, precipitation: bool = False) -> np.ndarray:
    """Map a chronological series elementwise; order is preserved."""
    out = qmap(series)
    if precipitation:
        out = threshold_zeros(np.maximum(out, 0.0))
    return out


def fit_qm_field(obs: GridField, model: GridField, mode: str = "piecewise", knots: int = 10):
    """One map per (month, location index, variable) from aligned training fields."""
    obs.check_same_grid(model)
    maps = {}
    for month in range(1, 13):
        mo, mm = obs.months == month, model.months == month
        if not mo.any() or not mm.any():
            continue
        for loc in range(obs.n_locations):
            for v in ("TMAX", "PRCP"):
                maps[(month, loc, v)] = fit_qm(obs.values(v)[loc, mo], model.values(v)[loc, mm], mode, knots)
    return maps


def apply_qm_field(maps, field: GridField) -> GridField:
    tmax = field.tmax.copy()
    prcp = field.prcp.copy()
    months = field.months
    for month in np.unique(months):
        sel = months == month
        for loc in range(field.n_locations):
            key_t, key_p = (month, loc, "TMAX"), (month, loc, "PRCP")
            if key_t not in maps:
                raise KeyError(f"no QM map for month {month}")
            tmax[loc, sel] = apply_qm(maps[key_t], field.tmax[loc, sel])
            prcp[loc, sel] = apply_qm(maps[key_p], field.prcp[loc, sel], precipitation=True)
    return field.with_values(tmax, prcp, source=MODEL, meta={**field.meta, "method": "QM"})
