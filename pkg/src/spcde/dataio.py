"""Flat-file dataset format and the synthetic observed/model generator.

Dataset files are CSV with a mandatory header::

    date,location,x,y,tmax,prcp,source

one row per (source, location, day).  ``date`` is ISO ``YYYY-MM-DD``,
``tmax`` is in degC, ``prcp`` in mm/day (nonnegative) and ``source`` is
``model`` or ``observed``.  Each source must form a complete panel over its
locations and a contiguous daily calendar.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields

import numpy as np
import pandas as pd
from scipy.optimize import brentq
from scipy.special import expit
from scipy.stats import norm

from .grid import MODEL, OBSERVED, SOURCES, GridField

COLUMNS = ["date", "location", "x", "y", "tmax", "prcp", "source"]
DATASET_VERSION = 1


class DatasetError(ValueError):
    """Malformed, incomplete or invalid dataset file."""


def _line(i) -> int:
    return int(i) + 2  # header is line 1


def read_dataset(path) -> dict[str, GridField]:
    """Read a dataset file into one validated :class:`GridField` per source."""
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DatasetError(f"{path}: {exc}") from None
    if list(df.columns) != COLUMNS:
        raise DatasetError(f"{path}: header must be {','.join(COLUMNS)}, got {','.join(df.columns)}")
    if df.empty:
        raise DatasetError(f"{path}: no data rows")
    dates = pd.to_datetime(df["date"], format="%Y-%m-%d", errors="coerce")
    bad = np.nonzero(dates.isna().to_numpy())[0]
    if len(bad):
        raise DatasetError(f"{path}: line {_line(bad[0])}: malformed date {df['date'].iloc[bad[0]]!r}")
    num = {}
    for col in ("x", "y", "tmax", "prcp"):
        vals = pd.to_numeric(df[col].str.strip(), errors="coerce")
        bad = np.nonzero(~np.isfinite(vals.to_numpy(dtype=float)))[0]
        if len(bad):
            raise DatasetError(f"{path}: line {_line(bad[0])}: invalid {col} value {df[col].iloc[bad[0]]!r}")
        # numpy's string parser round-trips repr() output exactly; pandas' fast path may not
        num[col] = np.asarray(df[col].str.strip().to_numpy(), dtype=float)
    neg = np.nonzero(num["prcp"] < 0)[0]
    if len(neg):
        raise DatasetError(f"{path}: line {_line(neg[0])}: negative prcp {num['prcp'][neg[0]]}")
    bad = np.nonzero(~df["source"].isin(SOURCES).to_numpy())[0]
    if len(bad):
        raise DatasetError(f"{path}: line {_line(bad[0])}: unknown source {df['source'].iloc[bad[0]]!r}")

    table = pd.DataFrame({"date": dates.to_numpy().astype("datetime64[D]"), "location": df["location"],
                          "source": df["source"], **num})
    out = {}
    for source, grp in table.groupby("source", sort=True):
        dup = grp.duplicated(["location", "date"], keep="first").to_numpy()
        if dup.any():
            i = grp.index[np.nonzero(dup)[0][0]]
            raise DatasetError(f"{path}: line {_line(i)}: duplicate {source} row for "
                               f"location {grp.at[i, 'location']} on {str(grp.at[i, 'date'])[:10]}")
        locs = np.array(sorted(grp["location"].unique()))
        first, last = grp["date"].min(), grp["date"].max()
        calendar = np.arange(np.datetime64(first, "D"), np.datetime64(last, "D") + 1)
        expected = pd.MultiIndex.from_product([locs, calendar], names=["location", "date"])
        g = grp.set_index(["location", "date"])
        missing = expected.difference(g.index)
        if len(missing):
            shown = ", ".join(f"({loc}, {str(d)[:10]})" for loc, d in missing[:10])
            more = f" and {len(missing) - 10} more" if len(missing) > 10 else ""
            raise DatasetError(f"{path}: {source} panel incomplete; missing (location, date): {shown}{more}")
        g = g.loc[expected]
        xy = grp.groupby("location")[["x", "y"]].agg(["min", "max"])
        moving = xy[("x", "min")].ne(xy[("x", "max")]) | xy[("y", "min")].ne(xy[("y", "max")])
        if moving.any():
            raise DatasetError(f"{path}: location {moving.idxmax()} has inconsistent coordinates")
        coords = np.column_stack([xy.loc[locs, ("x", "min")], xy.loc[locs, ("y", "min")]])
        shape = (len(locs), len(calendar))
        out[source] = GridField(locs, coords, calendar, g["tmax"].to_numpy().reshape(shape),
                                g["prcp"].to_numpy().reshape(shape), source=source)
    return out


def write_dataset(path, fields_) -> None:
    """Write one or more fields to a dataset file (floats written exactly)."""
    if isinstance(fields_, GridField):
        fields_ = [fields_]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for f in sorted(fields_, key=lambda f: SOURCES.index(f.source)):
            dates = [str(d) for d in f.dates]
            for i, loc in enumerate(f.loc_ids):
                x, y = repr(float(f.coords[i, 0])), repr(float(f.coords[i, 1]))
                for t, d in enumerate(dates):
                    w.writerow([d, loc, x, y, repr(float(f.tmax[i, t])), repr(float(f.prcp[i, t])), f.source])


@dataclass(frozen=True)
class SynthSpec:
    """Synthetic observed/model pair on a regular grid.

    Observed TMAX is a seasonal sinusoid plus a spatially correlated AR(1)
    anomaly.  A day is wet with probability ``expit(a + b * anomaly)`` where
    ``a`` is solved so the marginal dry fraction is ``dry_prob``; wet
    amounts are log-normal with a log-mean shifted by the anomaly.  The
    occurrence and intensity latents are spatially correlated too.

    The model field is driven by latents whose innovations have correlation
    ``sync`` with the observed ones and carries the configured biases.
    """

    nx: int = 3
    ny: int = 3
    spacing: float = 1.0
    n_days: int = 2922
    start: str = "2001-01-01"
    spatial_range: float = 2.0
    tmax_mean: float = 25.0
    tmax_amplitude: float = 8.0
    tmax_sd: float = 2.0
    tmax_phi: float = 0.7
    dry_prob: float = 0.5
    occ_tmax_coef: float = -1.0
    occ_phi: float = 0.5
    intensity_mu: float = 1.0
    intensity_sigma: float = 0.8
    intensity_tmax_coef: float = -0.2
    tmax_shift: float = 2.0
    prcp_scale: float = 1.5
    drizzle: float = 1.0
    drizzle_low: float = 0.05
    drizzle_high: float = 1.0
    model_tmax_phi: float = 0.5
    model_occ_tmax_coef: float = 0.0
    sync: float = 1.0
    null_model: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1 or self.n_days < 2:
            raise ValueError("grid and calendar must be nonempty")
        if min(self.tmax_sd, self.intensity_sigma, self.spatial_range, self.spacing) <= 0:
            raise ValueError("scales and variances must be positive")
        for name in ("drizzle", "sync"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0.0 < self.dry_prob < 1.0:
            raise ValueError("dry_prob must lie in (0, 1)")
        for name in ("tmax_phi", "occ_phi", "model_tmax_phi"):
            if not -1.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (-1, 1)")
        if not 0.0 <= self.drizzle_low < self.drizzle_high:
            raise ValueError("drizzle range must satisfy 0 <= low < high")

    @classmethod
    def field_types(cls) -> dict:
        return {f.name: f.type for f in fields(cls)}


def occurrence_intercept(dry_prob: float, coef: float) -> float:
    """Intercept ``a`` with ``E[expit(a + coef * Z)] = 1 - dry_prob`` for ``Z ~ N(0, 1)``."""
    z, w = np.polynomial.hermite_e.hermegauss(80)
    w = w / w.sum()
    wet = lambda a: float(np.dot(w, expit(a + coef * z))) - (1.0 - dry_prob)
    return brentq(wet, -50, 50, xtol=1e-12)


def _ar1(innov: np.ndarray, phi: float) -> np.ndarray:
    # unit stationary variance; innov is (n, T) standard normal
    out = np.empty_like(innov)
    out[:, 0] = innov[:, 0]
    s = np.sqrt(1.0 - phi ** 2)
    for t in range(1, innov.shape[1]):
        out[:, t] = phi * out[:, t - 1] + s * innov[:, t]
    return out


def generate_synth(spec: SynthSpec | None = None) -> tuple[GridField, GridField]:
    """Return ``(observed, model)`` fields sharing grid and calendar."""
    spec = spec or SynthSpec()
    rng = np.random.default_rng(spec.seed)
    gx, gy = np.meshgrid(np.arange(spec.nx) * spec.spacing, np.arange(spec.ny) * spec.spacing, indexing="ij")
    coords = np.column_stack([gx.ravel(), gy.ravel()])
    n, T = len(coords), spec.n_days
    loc_ids = np.array([f"L{i:03d}" for i in range(n)])
    dates = np.arange(np.datetime64(spec.start, "D"), np.datetime64(spec.start, "D") + T)
    doy = (dates - dates.astype("datetime64[Y]")).astype(int)
    season = spec.tmax_mean + spec.tmax_amplitude * np.sin(2 * np.pi * (doy - 105) / 365.25)

    d = np.sqrt(((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1))
    L = np.linalg.cholesky(np.exp(-d / spec.spatial_range) + 1e-10 * np.eye(n))
    # three latent innovation streams (TMAX anomaly, occurrence, intensity) per source
    z_obs = rng.standard_normal((3, n, T))
    z_own = rng.standard_normal((3, n, T))
    drizzle_u = rng.random((n, T))
    drizzle_amt = rng.uniform(spec.drizzle_low, spec.drizzle_high, (n, T))
    z_mod = spec.sync * z_obs + np.sqrt(1.0 - spec.sync ** 2) * z_own

    def realize(z, phi_t, coef, scale):
        e = np.einsum("ij,kjt->kit", L, z)
        anom = _ar1(e[0], phi_t)
        occ = norm.cdf(_ar1(e[1], spec.occ_phi))
        a = occurrence_intercept(spec.dry_prob, coef)
        wet = occ < expit(a + coef * anom)
        amount = np.exp(spec.intensity_mu + spec.intensity_tmax_coef * anom + spec.intensity_sigma * e[2])
        return season + spec.tmax_sd * anom, np.where(wet, scale * amount, 0.0)

    tmax_o, prcp_o = realize(z_obs, spec.tmax_phi, spec.occ_tmax_coef, 1.0)
    observed = GridField(loc_ids, coords, dates, tmax_o, prcp_o, source=OBSERVED)
    if spec.null_model:
        return observed, observed.with_values(source=MODEL)
    tmax_m, prcp_m = realize(z_mod, spec.model_tmax_phi, spec.model_occ_tmax_coef, spec.prcp_scale)
    tmax_m = tmax_m + spec.tmax_shift
    dry = prcp_m == 0.0
    prcp_m = np.where(dry & (drizzle_u < spec.drizzle), drizzle_amt, prcp_m)
    model = GridField(loc_ids, coords, dates, tmax_m, prcp_m, source=MODEL)
    return observed, model
