"""Distributional and dependence metrics comparing a field against
observations, and their RMSE aggregation into a comparison table.

Monthly metrics pool every day of a calendar month across years; spatial
correlation uses all days.  PRCP marginals are compared on the
``log(0.0001 + p)`` scale for the Wasserstein distance and on the raw scale
elsewhere.
"""

from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .grid import ZERO_THRESHOLD, AlignmentError, GridField, prcp_forward

log = logging.getLogger(__name__)

ROWS = [
    ("TMAX", "Wasserstein distance"),
    ("TMAX", "0.95 quantile"),
    ("TMAX", "Lag-1 autocorrelation"),
    ("TMAX", "Spatial correlation"),
    ("PRCP", "Wasserstein distance"),
    ("PRCP", "0.95 quantile"),
    ("PRCP", "Proportion of zeros"),
    ("PRCP", "Lag-1 autocorrelation"),
    ("PRCP", "Spatial correlation"),
    ("TMAX/PRCP", "Cross correlation"),
]


class UndefinedCorrelationError(ValueError):
    pass


def _nonempty(a, name="input") -> np.ndarray:
    a = np.asarray(a, dtype=float).ravel()
    if a.size == 0:
        raise ValueError(f"{name} is empty")
    return a


def wasserstein_1d(a, b) -> float:
    """W1 between two empirical distributions via their quantile functions."""
    a = np.sort(_nonempty(a, "a"))
    b = np.sort(_nonempty(b, "b"))
    if len(a) == len(b):
        return float(np.mean(np.abs(a - b)))
    # quantile functions are step functions; integrate over merged level breakpoints
    levels = np.union1d(np.arange(1, len(a) + 1) / len(a), np.arange(1, len(b) + 1) / len(b))
    du = np.diff(np.r_[0.0, levels])
    mid = levels - du / 2
    qa = a[np.minimum((mid * len(a)).astype(int), len(a) - 1)]
    qb = b[np.minimum((mid * len(b)).astype(int), len(b) - 1)]
    return float(np.sum(du * np.abs(qa - qb)))


def quantile_metric(a, tau: float = 0.95) -> float:
    """Empirical quantile, linear between order statistics at levels (i-1)/(n-1)."""
    return float(np.quantile(_nonempty(a), tau))


def prop_zeros(p) -> float:
    p = _nonempty(p)
    if np.any(p < 0):
        raise ValueError("precipitation must be nonnegative")
    return float(np.mean(p < ZERO_THRESHOLD))


def _pearson(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(np.dot(dx, dx)), np.sqrt(np.dot(dy, dy))
    if sx == 0 or sy == 0:
        raise UndefinedCorrelationError("correlation of a constant series is undefined")
    return float(np.clip(np.dot(dx, dy) / (sx * sy), -1.0, 1.0))


def lag1_autocorr(series, dates=None) -> float:
    """Pearson correlation of consecutive-day pairs.

    With ``dates``, only pairs exactly one day apart are used, so separate
    runs (e.g. the Januaries of different years) are never joined.
    """
    x = _nonempty(series)
    if len(x) < 3:
        raise ValueError("need at least 3 values for a lag-1 autocorrelation")
    if dates is None:
        keep = np.ones(len(x) - 1, dtype=bool)
    else:
        d = np.asarray(dates, dtype="datetime64[D]")
        keep = np.diff(d).astype(int) == 1
    if not keep.any():
        raise ValueError("no consecutive-day pairs")
    return _pearson(x[:-1][keep], x[1:][keep])


def cross_corr(tmax, prcp) -> float:
    tmax, prcp = _nonempty(tmax), _nonempty(prcp)
    if len(tmax) != len(prcp) or len(tmax) < 3:
        raise ValueError("series must have equal length >= 3")
    return _pearson(tmax, prcp)


def spatial_corr(field: GridField, variable: str) -> dict[tuple[int, int], float]:
    """Correlation of daily series for every unordered location pair ``(i, j)``, ``i < j``.

    Pairs involving a constant series are left out with a warning.
    """
    if field.n_locations < 2:
        raise ValueError("spatial correlation needs at least two locations")
    x = field.values(variable)
    out = {}
    for i, j in itertools.combinations(range(field.n_locations), 2):
        try:
            out[(i, j)] = _pearson(x[i], x[j])
        except UndefinedCorrelationError:
            warnings.warn(f"{variable}: constant series in pair ({i}, {j}); pair excluded")
    return out


def _safe(fn, *args):
    try:
        return fn(*args)
    except (UndefinedCorrelationError, ValueError):
        return np.nan


def cell_metrics(field: GridField) -> pd.DataFrame:
    """Per (month, location) metric values of one field, plus annual per-pair
    spatial correlations (``month = 0``, ``location = 'i-j'``)."""
    rows = []
    months = field.months
    for month in range(1, 13):
        sel = months == month
        if not sel.any():
            continue
        d = field.dates[sel]
        for loc in range(field.n_locations):
            t, p = field.tmax[loc, sel], field.prcp[loc, sel]
            lid = field.loc_ids[loc]
            vals = [
                ("TMAX", "0.95 quantile", quantile_metric(t)),
                ("TMAX", "Lag-1 autocorrelation", _safe(lag1_autocorr, t, d)),
                ("PRCP", "0.95 quantile", quantile_metric(p)),
                ("PRCP", "Proportion of zeros", prop_zeros(p)),
                ("PRCP", "Lag-1 autocorrelation", _safe(lag1_autocorr, p, d)),
                ("TMAX/PRCP", "Cross correlation", _safe(cross_corr, t, p)),
            ]
            rows += [(v, m, month, lid, val) for v, m, val in vals]
    if field.n_locations > 1:
        for v in ("TMAX", "PRCP"):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                pairs = spatial_corr(field, v)
            for i, j in itertools.combinations(range(field.n_locations), 2):
                rows.append((v, "Spatial correlation", 0, f"{field.loc_ids[i]}-{field.loc_ids[j]}",
                             pairs.get((i, j), np.nan)))
    return pd.DataFrame(rows, columns=["variable", "metric", "month", "location", "value"])


def wasserstein_cells(obs: GridField, other: GridField) -> pd.DataFrame:
    rows = []
    months = obs.months
    other_months = other.months
    for month in range(1, 13):
        so, sm = months == month, other_months == month
        if not so.any() or not sm.any():
            continue
        for loc in range(obs.n_locations):
            lid = obs.loc_ids[loc]
            rows.append(("TMAX", "Wasserstein distance", month, lid,
                         wasserstein_1d(obs.tmax[loc, so], other.tmax[loc, sm])))
            rows.append(("PRCP", "Wasserstein distance", month, lid,
                         wasserstein_1d(prcp_forward(obs.prcp[loc, so]), prcp_forward(other.prcp[loc, sm]))))
    return pd.DataFrame(rows, columns=["variable", "metric", "month", "location", "value"])


@dataclass
class MetricsReport:
    """``cells``: long table of per-cell values for observations and each
    method.  ``summary``: one row per (variable, metric, method) with the
    aggregate and a flag marking the best method in that row."""

    cells: pd.DataFrame
    summary: pd.DataFrame
    methods: list
    notices: list

    def table(self) -> pd.DataFrame:
        wide = self.summary.pivot(index=["variable", "metric"], columns="method", values="value")
        order = [r for r in ROWS if r in wide.index]
        return wide.loc[order, self.methods]

    def render(self, digits: int = 4) -> str:
        """Plain-text comparison table; the best value in each row is starred."""
        wide = self.table()
        best = self.summary.set_index(["variable", "metric", "method"])["best"]
        header = ["Variable", "Metric"] + list(self.methods)
        lines = []
        for (v, m), row in wide.iterrows():
            cells = []
            for meth in self.methods:
                val = row[meth]
                txt = "nan" if pd.isna(val) else f"{val:.{digits}f}"
                cells.append(txt + ("*" if best.get((v, m, meth), False) else ""))
            lines.append([v, m] + cells)
        widths = [max(len(str(r[i])) for r in [header] + lines) for i in range(len(header))]
        fmt = lambda r: "  ".join(str(c).ljust(w) for c, w in zip(r, widths))
        out = [fmt(header), "  ".join("-" * w for w in widths)] + [fmt(r) for r in lines]
        out += [f"note: {n}" for n in self.notices]
        return "\n".join(out) + "\n"

    def write(self, directory, prefix: str = "metrics") -> None:
        from pathlib import Path
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.cells.to_csv(d / f"{prefix}_cells.csv", index=False, float_format="%.10g")
        self.summary.to_csv(d / f"{prefix}_summary.csv", index=False, float_format="%.10g")
        (d / f"{prefix}_table.txt").write_text(self.render())


def rmse_table(obs: GridField, methods: dict[str, GridField]) -> MetricsReport:
    """Compare each method's field against ``obs`` on every table metric.

    The Wasserstein row is the mean per-(month, location) distance; every
    other row is the RMSE of (method - observed) across (month, location)
    cells, or across location pairs for spatial correlation.  Cells where
    either value is undefined are skipped.
    """
    if not methods:
        raise ValueError("need at least one method to evaluate")
    for name, f in methods.items():
        try:
            obs.check_aligned(f)
        except AlignmentError as exc:
            raise AlignmentError(f"method {name!r}: {exc}") from None
    notices = []
    if obs.n_locations < 2:
        notices.append("single location: spatial-correlation rows omitted")
    keys = ["variable", "metric", "month", "location"]
    ref = cell_metrics(obs).rename(columns={"value": "observed"})
    cells, summary = [], []
    for name, f in methods.items():
        c = cell_metrics(f).merge(ref, on=keys, how="left")
        w = wasserstein_cells(obs, f)
        w["observed"] = 0.0
        c = pd.concat([w, c], ignore_index=True)
        c["method"] = name
        cells.append(c)
        for (v, m), grp in c.groupby(["variable", "metric"], sort=False):
            ok = grp["value"].notna() & grp["observed"].notna()
            skipped = int((~ok).sum())
            if skipped:
                notices.append(f"{name}: {v} {m}: {skipped} undefined cell(s) skipped")
            g = grp[ok]
            if g.empty:
                val = np.nan
            elif m == "Wasserstein distance":
                val = float(g["value"].mean())
            else:
                val = float(np.sqrt(np.mean((g["value"] - g["observed"]) ** 2)))
            summary.append((v, m, name, val))
    summary = pd.DataFrame(summary, columns=["variable", "metric", "method", "value"])
    best = summary.groupby(["variable", "metric"])["value"].transform("min")
    summary["best"] = summary["value"].notna() & (summary["value"] == best)
    cells = pd.concat(cells, ignore_index=True)[keys + ["method", "value", "observed"]]
    for n in notices:
        log.info(n)
    return MetricsReport(cells, summary, list(methods), notices)
