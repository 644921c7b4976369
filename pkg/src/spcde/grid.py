"""Gridded daily TMAX/PRCP fields and the precipitation transform."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

MODEL = "model"
OBSERVED = "observed"
SOURCES = (MODEL, OBSERVED)

PRCP_OFFSET = 0.0001
ZERO_THRESHOLD = 0.001


class AlignmentError(ValueError):
    """Fields, calendars or feature layouts that do not line up."""


def prcp_forward(p):
    """``log(0.0001 + p)`` for precipitation ``p >= 0`` in mm."""
    p = np.asarray(p, dtype=float)
    if np.any(p < 0):
        raise ValueError("precipitation must be nonnegative")
    out = np.log(PRCP_OFFSET + p)
    return float(out) if out.ndim == 0 else out


def prcp_inverse(z):
    """Back-transform to mm; amounts below 0.001 mm become exactly zero."""
    p = np.maximum(np.exp(np.asarray(z, dtype=float)) - PRCP_OFFSET, 0.0)
    p = np.where(p < ZERO_THRESHOLD, 0.0, p)
    return float(p) if p.ndim == 0 else p


def threshold_zeros(p):
    p = np.asarray(p, dtype=float)
    return np.where(p < ZERO_THRESHOLD, 0.0, p)


@dataclass
class GridField:
    """Daily TMAX (degC) and PRCP (mm) on ``n`` locations over ``T`` days.

    ``tmax`` and ``prcp`` are ``(n, T)`` arrays indexed (location, day).
    """

    loc_ids: np.ndarray
    coords: np.ndarray
    dates: np.ndarray
    tmax: np.ndarray
    prcp: np.ndarray
    source: str = MODEL
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.loc_ids = np.asarray(self.loc_ids).astype(str)
        self.coords = np.asarray(self.coords, dtype=float).reshape(len(self.loc_ids), -1)
        self.dates = np.asarray(self.dates, dtype="datetime64[D]")
        self.tmax = np.asarray(self.tmax, dtype=float)
        self.prcp = np.asarray(self.prcp, dtype=float)
        shape = (len(self.loc_ids), len(self.dates))
        if self.tmax.shape != shape or self.prcp.shape != shape:
            raise AlignmentError(f"value arrays must have shape {shape}")
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}, got {self.source!r}")
        if len(self.dates) > 1 and np.any(np.diff(self.dates).astype(int) != 1):
            raise AlignmentError("calendar must be strictly increasing and daily")
        if not (np.all(np.isfinite(self.tmax)) and np.all(np.isfinite(self.prcp))):
            raise ValueError("missing or non-finite values in field")
        if np.any(self.prcp < 0):
            raise ValueError("negative precipitation in field")

    @property
    def n_locations(self) -> int:
        return len(self.loc_ids)

    @property
    def n_days(self) -> int:
        return len(self.dates)

    @property
    def months(self) -> np.ndarray:
        return self.dates.astype("datetime64[M]").astype(int) % 12 + 1

    @property
    def years(self) -> np.ndarray:
        return self.dates.astype("datetime64[Y]").astype(int) + 1970

    def values(self, variable: str) -> np.ndarray:
        return {"TMAX": self.tmax, "PRCP": self.prcp}[variable]

    def with_values(self, tmax=None, prcp=None, source=None, meta=None) -> "GridField":
        return replace(self,
                       tmax=self.tmax.copy() if tmax is None else tmax,
                       prcp=self.prcp.copy() if prcp is None else prcp,
                       source=self.source if source is None else source,
                       meta=dict(self.meta if meta is None else meta))

    def day_slice(self, start=None, end=None) -> "GridField":
        """Days with ``start <= date <= end`` (ISO strings or datetime64)."""
        mask = np.ones(self.n_days, dtype=bool)
        if start is not None:
            mask &= self.dates >= np.datetime64(start, "D")
        if end is not None:
            mask &= self.dates <= np.datetime64(end, "D")
        if not mask.any():
            raise AlignmentError(f"no days between {start} and {end}")
        return replace(self, dates=self.dates[mask], tmax=self.tmax[:, mask],
                       prcp=self.prcp[:, mask], meta=dict(self.meta))

    def check_same_grid(self, other: "GridField") -> None:
        if not np.array_equal(self.loc_ids, other.loc_ids) or not np.allclose(self.coords, other.coords):
            raise AlignmentError("fields are on different grids")

    def check_aligned(self, other: "GridField") -> None:
        self.check_same_grid(other)
        if not np.array_equal(self.dates, other.dates):
            raise AlignmentError("fields cover different calendars")
