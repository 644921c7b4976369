"""Conditional density correction of gridded TMAX/PRCP.

Each calendar month, location and variable gets its own SPQR model of the
variable given its conditioning features (previous-day values, Vecchia
neighbors on the same day, the source indicator ``X`` and optional
covariates), fit on stacked observed (``X = 1``) and model (``X = 0``) rows.

Model output is corrected in two passes.  Projection evaluates the fitted
CDFs at the raw model values with ``X = 0``.  Calibration then walks forward
in time and, within each day, through the max-min ordering, drawing each
value from the ``X = 1`` quantile function at the projected level while
conditioning on values already calibrated.

Lags always refer to the previous calendar day, across month and year
boundaries; the month only selects which model is evaluated.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import spqr
from .grid import (MODEL, OBSERVED, PRCP_OFFSET, ZERO_THRESHOLD, AlignmentError, GridField,
                   prcp_forward, prcp_inverse)
from .neural_net import TrainConfig
from .spqr import SpqrModel
from .vecchia import (INDICATOR, PRCP, TMAX, VARIABLES, NeighborSets, build_schemas, maxmin_order,
                      neighbor_sets, parse_feature)

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
COVARIATES = ("doy_sin", "doy_cos")
# projected levels are kept this far from 0 and 1 before quantile inversion
U_EPS = 1e-12


class FitError(RuntimeError):
    def __init__(self, failures):
        self.failures = failures
        lines = [f"  month {m} location {l} {v}: {err}" for (m, l, v), err in sorted(failures.items())]
        super().__init__(f"{len(failures)} model fit(s) failed:\n" + "\n".join(lines))


@dataclass(frozen=True)
class Hyper:
    """Model and run settings; the defaults are the reference configuration."""

    K: int = 20
    hidden_sizes: tuple = (30, 20)
    batch_size: int = 100
    learning_rate: float = 0.001
    max_epochs: int = 300
    validation_fraction: float = 0.2
    patience: int = 5
    m: int = 10
    covariates: tuple = ()
    padding: float = 0.01
    seed: int = 0
    n_jobs: int = 1

    def __post_init__(self):
        bad = [c for c in self.covariates if c not in COVARIATES]
        if bad:
            raise ValueError(f"unknown covariates {bad}; available: {COVARIATES}")

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(self.batch_size, self.learning_rate, self.max_epochs,
                           self.validation_fraction, self.patience, seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        d["covariates"] = list(self.covariates)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Hyper":
        d = dict(d)
        d["hidden_sizes"] = tuple(d.get("hidden_sizes", (30, 20)))
        d["covariates"] = tuple(d.get("covariates", ()))
        return cls(**d)


def model_seed(seed: int, month: int, loc: int, variable: str) -> int:
    """Per-model seed, independent of fitting order and worker count."""
    ss = np.random.SeedSequence([seed, month, loc, VARIABLES.index(variable)])
    return int(ss.generate_state(1)[0])


def fingerprint(field_: GridField) -> str:
    h = hashlib.sha256()
    for a in (field_.loc_ids.astype("U"), field_.coords, field_.dates.astype(int), field_.tmax, field_.prcp):
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def _covariate(name: str, dates: np.ndarray) -> np.ndarray:
    doy = (dates - dates.astype("datetime64[Y]")).astype(int)
    angle = 2 * np.pi * doy / 365.25
    return np.sin(angle) if name == "doy_sin" else np.cos(angle)


def _transformed(field_: GridField) -> dict[str, np.ndarray]:
    return {TMAX: field_.tmax, PRCP: prcp_forward(field_.prcp)}


def _design(arrays, names, days, indicator: float, dates) -> np.ndarray:
    """Feature matrix for day indices ``days`` of ``(n, T)`` arrays."""
    X = np.empty((len(days), len(names)))
    for c, name in enumerate(names):
        f = parse_feature(name)
        if f == INDICATOR:
            X[:, c] = indicator
        elif isinstance(f, tuple):
            var, loc, lag = f
            X[:, c] = arrays[var][loc, days - lag]
        else:
            X[:, c] = _covariate(f, dates[days])
    return X


def assemble_training_rows(obs: GridField, model: GridField, month: int, loc: int, variable: str,
                           names) -> tuple[np.ndarray, np.ndarray]:
    """Stacked (model rows, observed rows) design matrix and responses.

    Rows are the days of ``month`` that have a previous day in the series;
    PRCP enters as ``log(0.0001 + p)`` both as response and as feature.
    """
    if not 1 <= month <= 12:
        raise ValueError(f"month must be in 1..12, got {month}")
    obs.check_aligned(model)
    Xs, ys = [], []
    for f, ind in ((model, 0.0), (obs, 1.0)):
        arrays = _transformed(f)
        days = np.nonzero(f.months == month)[0]
        days = days[days >= 1]
        Xs.append(_design(arrays, names, days, ind, f.dates))
        ys.append(arrays[variable][loc, days])
    return np.vstack(Xs), np.concatenate(ys)


def _fit_task(args):
    key, X, y, names, hyper, seed = args
    try:
        # A day's model and observed rows share one side of the validation
        # split; otherwise each validation row has its twin in training.
        days = np.tile(np.arange(len(y) // 2), 2)
        return key, spqr.fit(X, y, hyper.K, hyper.hidden_sizes, hyper.train_config(seed),
                             feature_names=names, padding=hyper.padding, groups=days), None
    except Exception as exc:  # reported per model, pipeline aborts afterwards
        return key, None, f"{type(exc).__name__}: {exc}"


@dataclass
class CalibrationModel:
    loc_ids: np.ndarray
    neighbors: NeighborSets
    schemas: dict
    models: dict
    hyper: Hyper
    diagnostics: dict = field(default_factory=dict)
    fingerprints: dict = field(default_factory=dict)

    @property
    def order(self):
        return self.neighbors.order.perm

    def manifest(self) -> dict:
        return {
            "format": "spcde-calibration",
            "version": MANIFEST_VERSION,
            "locations": list(self.loc_ids),
            "vecchia": self.neighbors.to_dict(),
            "transform": {"prcp_offset": PRCP_OFFSET, "zero_threshold": ZERO_THRESHOLD},
            "hyper": self.hyper.to_dict(),
            "fingerprints": self.fingerprints,
            "models": sorted(self._filename(k) for k in self.models),
            "diagnostics": {self._filename(k): v for k, v in sorted(self.diagnostics.items())},
        }

    @staticmethod
    def _filename(key) -> str:
        month, loc, v = key
        return f"m{month:02d}_l{loc:03d}_{v}.json"

    def save(self, directory) -> Path:
        d = Path(directory)
        (d / "models").mkdir(parents=True, exist_ok=True)
        for key, m in sorted(self.models.items()):
            m.save(d / "models" / self._filename(key))
        (d / "manifest.json").write_text(json.dumps(self.manifest(), indent=1))
        return d

    @classmethod
    def load(cls, directory) -> "CalibrationModel":
        d = Path(directory)
        man = json.loads((d / "manifest.json").read_text())
        if man.get("format") != "spcde-calibration" or man.get("version") != MANIFEST_VERSION:
            raise ValueError(f"{d}: not a calibration model directory")
        nb = NeighborSets.from_dict(man["vecchia"])
        hyper = Hyper.from_dict(man["hyper"])
        models, diags = {}, {}
        for fname in man["models"]:
            stem = fname[:-5]
            mpart, lpart, v = stem.split("_")
            key = (int(mpart[1:]), int(lpart[1:]), v)
            models[key] = SpqrModel.load(d / "models" / fname)
            diags[key] = man["diagnostics"].get(fname, {})
        return cls(np.asarray(man["locations"]), nb, build_schemas(nb, hyper.covariates), models,
                   hyper, diags, man.get("fingerprints", {}))


def fit_calibration(obs: GridField, model_hist: GridField, hyper: Hyper | None = None,
                    months=None) -> CalibrationModel:
    """Fit one SPQR model per (month, location, variable).

    ``months`` defaults to every calendar month present in the training span.
    """
    hyper = hyper or Hyper()
    obs.check_aligned(model_hist)
    if months is None:
        months = [int(m) for m in np.unique(obs.months)]
    if obs.source != OBSERVED or model_hist.source != MODEL:
        raise AlignmentError("expected an observed field and a model field")
    order = maxmin_order(obs.coords)
    nb = neighbor_sets(order, hyper.m)
    schemas = build_schemas(nb, hyper.covariates)
    tasks = []
    for month in months:
        for loc in range(obs.n_locations):
            for v in VARIABLES:
                names = schemas[(loc, v)]
                X, y = assemble_training_rows(obs, model_hist, month, loc, v, names)
                tasks.append(((month, loc, v), X, y, names, hyper, model_seed(hyper.seed, month, loc, v)))
    log.info("fitting %d SPQR models with %d worker(s)", len(tasks), hyper.n_jobs)
    if hyper.n_jobs > 1:
        with ProcessPoolExecutor(max_workers=hyper.n_jobs) as pool:
            results = list(pool.map(_fit_task, tasks, chunksize=4))
    else:
        results = [_fit_task(t) for t in tasks]
    models, failures, diags = {}, {}, {}
    for key, m, err in results:
        if err is not None:
            failures[key] = err
            continue
        models[key] = m
        info = m.params.info
        diags[key] = {k: info[k] for k in ("best_epoch", "stopped_epoch", "best_val_loss", "n_train", "n_val")}
    if failures:
        raise FitError(failures)
    fps = {"observed": fingerprint(obs), "model": fingerprint(model_hist)}
    return CalibrationModel(obs.loc_ids.copy(), nb, schemas, models, hyper, diags, fps)


@dataclass
class UField:
    """Projected probability levels, ``(n, T)`` per variable."""

    dates: np.ndarray
    u: dict
    boundary_from_series: bool


def _with_boundary(gcm: GridField, boundary):
    """Transformed arrays with the previous day prepended as column 0.

    ``boundary`` is ``(tmax, prcp)`` for the day before ``gcm`` starts.
    Without it the first day's own values stand in for its lag.
    """
    arrays = _transformed(gcm)
    if boundary is None:
        prev = {v: a[:, :1] for v, a in arrays.items()}
    else:
        bt, bp = (np.asarray(b, dtype=float).reshape(-1, 1) for b in boundary)
        prev = {TMAX: bt, PRCP: prcp_forward(bp)}
    return {v: np.hstack([prev[v], arrays[v]]) for v in arrays}


def _check_model_field(cmodel: CalibrationModel, gcm: GridField):
    if gcm.n_locations != len(cmodel.loc_ids) or not np.array_equal(gcm.loc_ids, cmodel.loc_ids):
        raise AlignmentError("field locations do not match the calibration model")
    missing = sorted({int(m) for m in np.unique(gcm.months)} - {k[0] for k in cmodel.models})
    if missing:
        raise AlignmentError(f"no fitted models for month(s) {missing}")


def project(cmodel: CalibrationModel, gcm: GridField, boundary=None) -> UField:
    """Probability levels of raw model values under the ``X = 0`` conditionals."""
    if gcm.source != MODEL:
        raise AlignmentError("projection expects a model-source field")
    _check_model_field(cmodel, gcm)
    ext = _with_boundary(gcm, boundary)
    ext_dates = np.r_[gcm.dates[:1] - 1, gcm.dates]
    out = {v: np.empty((gcm.n_locations, gcm.n_days)) for v in VARIABLES}
    months = gcm.months
    for month in np.unique(months):
        days = np.nonzero(months == month)[0] + 1
        for loc in range(gcm.n_locations):
            for v in VARIABLES:
                m = cmodel.models[(int(month), loc, v)]
                X = _design(ext, cmodel.schemas[(loc, v)], days, 0.0, ext_dates)
                out[v][loc, days - 1] = spqr.cdf(m, ext[v][loc, days], X)
    return UField(gcm.dates.copy(), out, boundary is not None)


def _plan(names):
    plan = []
    for name in names:
        f = parse_feature(name)
        if f == INDICATOR:
            plan.append(("x", None, None, None))
        elif isinstance(f, tuple):
            plan.append(("v",) + f)
        else:
            plan.append(("c", f, None, None))
    return plan


def calibrate(cmodel: CalibrationModel, u_field: UField, gcm: GridField, boundary=None,
              start_day: int = 0, initial_state=None, variables=VARIABLES) -> GridField:
    """Sequentially draw calibrated values from the ``X = 1`` quantile functions.

    Day ``start_day`` conditions on ``initial_state`` (calibrated TMAX and
    PRCP in mm for the previous day) when given; otherwise on the raw model
    values of the previous day, which is flagged in the output metadata.
    Days before ``start_day`` are returned uncalibrated.
    """
    _check_model_field(cmodel, gcm)
    if not np.array_equal(u_field.dates, gcm.dates):
        raise AlignmentError("projected levels do not cover the field's calendar")
    for v in variables:
        if u_field.u.get(v) is None or u_field.u[v].shape != gcm.tmax.shape:
            raise AlignmentError(f"missing projected levels for {v}")
    n, T = gcm.tmax.shape
    cal = {TMAX: gcm.tmax.copy(), PRCP: prcp_forward(gcm.prcp)}
    if initial_state is not None:
        st, sp = (np.asarray(s, dtype=float) for s in initial_state)
        prev = {TMAX: st.copy(), PRCP: prcp_forward(sp)}
        seeded_raw = False
    else:
        ext = _with_boundary(gcm, boundary)
        prev = {TMAX: ext[TMAX][:, start_day].copy(), PRCP: ext[PRCP][:, start_day].copy()}
        seeded_raw = True
    plans = {key: _plan(names) for key, names in cmodel.schemas.items()}
    cov_cache = {c: _covariate(c, gcm.dates) for c in cmodel.hyper.covariates}
    months = gcm.months
    order = cmodel.order
    for t in range(start_day, T):
        month = int(months[t])
        for loc in order:
            for v in variables:
                plan = plans[(loc, v)]
                x = np.empty(len(plan))
                for c, (kind, a, b, lag) in enumerate(plan):
                    if kind == "v":
                        x[c] = prev[a][b] if lag == 1 else cal[a][b, t]
                    elif kind == "x":
                        x[c] = 1.0
                    else:
                        x[c] = cov_cache[a][t]
                u = min(max(u_field.u[v][loc, t], U_EPS), 1.0 - U_EPS)
                y = spqr.quantile(cmodel.models[(month, loc, v)], u, x)
                if v == PRCP:
                    # downstream conditioning sees the zero-thresholded amount
                    y = prcp_forward(prcp_inverse(y))
                cal[v][loc, t] = y
        prev = {v: cal[v][:, t].copy() for v in VARIABLES}
    meta = {**gcm.meta, "method": "SPCDE",
            "first_day_raw_lag": str(gcm.dates[start_day]) if seeded_raw else None}
    return gcm.with_values(cal[TMAX], prcp_inverse(cal[PRCP]) if PRCP in variables else gcm.prcp.copy(),
                           source=MODEL, meta=meta)


def boundary_for(model_hist: GridField | None, model_future: GridField):
    """Raw model values on the day before ``model_future`` starts, if available."""
    if model_hist is None:
        return None
    hit = np.nonzero(model_hist.dates == model_future.dates[0] - 1)[0]
    if not len(hit):
        return None
    return model_hist.tmax[:, hit[0]].copy(), model_hist.prcp[:, hit[0]].copy()


def run_pipeline(obs: GridField, model_hist: GridField, model_future: GridField, hyper: Hyper | None = None,
                 obs_future: GridField | None = None, qm_mode: str = "piecewise", qm_knots: int = 10):
    """Fit on the historical fields, then correct ``model_future``.

    Returns ``(calibrated, report, extras)``.  ``report`` compares the
    corrections against ``obs_future`` and is ``None`` without it.  ``extras`` holds the calibration model, the QM-corrected
    field and the projected levels.
    """
    from .baseline_qm import apply_qm_field, fit_qm_field
    from .metrics import rmse_table

    hyper = hyper or Hyper()
    model_hist.check_same_grid(model_future)
    cmodel = fit_calibration(obs, model_hist, hyper)
    boundary = boundary_for(model_hist, model_future)
    u = project(cmodel, model_future, boundary)
    calibrated = calibrate(cmodel, u, model_future, boundary)
    qm = apply_qm_field(fit_qm_field(obs, model_hist, qm_mode, qm_knots), model_future)
    report = None
    if obs_future is not None:
        report = rmse_table(obs_future, {"SPCDE": calibrated, "QM": qm, "Model": model_future})
    return calibrated, report, {"cmodel": cmodel, "qm": qm, "u": u}


def default_jobs() -> int:
    return max(1, min(4, os.cpu_count() or 1))
