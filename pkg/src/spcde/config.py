"""Run configuration: a flat ``key = value`` INI file with typed validation.

All keys live in a single ``[run]`` section.  Missing keys take the defaults
below; unknown keys are rejected so typos cannot silently fall back to a
default.  Example::

    [run]
    train_start = 2001-01-01
    train_end = 2006-12-31
    test_start = 2007-01-01
    test_end = 2008-12-31
    K = 20
    hidden_sizes = 30,20
    seed = 0
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .calibration import Hyper

SECTION = "run"


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


def _date(value):
    if value in (None, ""):
        return None
    try:
        return str(np.datetime64(value, "D"))
    except ValueError:
        raise ConfigError(f"not an ISO date: {value!r}") from None


def _bool(value) -> bool:
    if isinstance(value, bool):
        return value
    v = str(value).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


def _ints(value) -> tuple:
    if isinstance(value, (tuple, list)):
        return tuple(int(v) for v in value)
    return tuple(int(v) for v in str(value).split(",") if v.strip())


def _names(value) -> tuple:
    if isinstance(value, (tuple, list)):
        return tuple(value)
    return tuple(v.strip() for v in str(value).split(",") if v.strip())


@dataclass(frozen=True)
class RunConfig:
    train_start: str | None = None
    train_end: str | None = None
    test_start: str | None = None
    test_end: str | None = None
    in_sample: bool = False
    K: int = 20
    hidden_sizes: tuple = (30, 20)
    batch_size: int = 100
    learning_rate: float = 0.001
    max_epochs: int = 300
    validation_fraction: float = 0.2
    patience: int = 5
    padding: float = 0.01
    m: int = 10
    covariates: tuple = ()
    qm_mode: str = "piecewise"
    qm_knots: int = 10
    seed: int = 0
    n_jobs: int = 1
    output: str = "out"

    def __post_init__(self):
        for name in ("K", "batch_size", "max_epochs", "patience", "m", "qm_knots", "n_jobs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.K < 3:
            raise ConfigError("K must be at least 3")
        if not self.hidden_sizes or min(self.hidden_sizes) < 1:
            raise ConfigError("hidden_sizes must be a nonempty list of positive widths")
        if self.learning_rate <= 0 or self.padding < 0:
            raise ConfigError("learning_rate must be positive and padding nonnegative")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction must lie in (0, 1)")
        if self.qm_mode not in ("linear", "piecewise"):
            raise ConfigError(f"qm_mode must be 'linear' or 'piecewise', got {self.qm_mode!r}")
        for lo, hi in ((self.train_start, self.train_end), (self.test_start, self.test_end)):
            if lo and hi and lo > hi:
                raise ConfigError(f"span starts after it ends: {lo} > {hi}")
        if not self.in_sample and self.overlap():
            raise ConfigError("train and test spans overlap; set in_sample = true for an in-sample run")
        try:
            self.hyper()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def overlap(self) -> bool:
        """Whether the train and test spans share any day (open ends are unbounded)."""
        if self.test_start is None and self.test_end is None:
            return False
        lo = max(self.train_start or "0000", self.test_start or "0000")
        hi = min(self.train_end or "9999", self.test_end or "9999")
        return lo <= hi

    def hyper(self) -> Hyper:
        return Hyper(K=self.K, hidden_sizes=self.hidden_sizes, batch_size=self.batch_size,
                     learning_rate=self.learning_rate, max_epochs=self.max_epochs,
                     validation_fraction=self.validation_fraction, patience=self.patience,
                     m=self.m, covariates=self.covariates, padding=self.padding,
                     seed=self.seed, n_jobs=self.n_jobs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        d["covariates"] = list(self.covariates)
        return d

    @classmethod
    def from_mapping(cls, values: dict, base: "RunConfig | None" = None) -> "RunConfig":
        """Typed construction from string (or already typed) values."""
        types = {f.name: f.type for f in fields(cls)}
        unknown = sorted(set(values) - set(types))
        if unknown:
            raise ConfigError(f"unknown configuration key(s): {', '.join(unknown)}")
        conv = {}
        for key, raw in values.items():
            t = types[key]
            try:
                if key.endswith(("_start", "_end")):
                    conv[key] = _date(raw)
                elif t == "bool":
                    conv[key] = _bool(raw)
                elif key == "hidden_sizes":
                    conv[key] = _ints(raw)
                elif key == "covariates":
                    conv[key] = _names(raw)
                elif t == "int":
                    conv[key] = int(raw)
                elif t == "float":
                    conv[key] = float(raw)
                else:
                    conv[key] = str(raw)
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from None
        return replace(base, **conv) if base else cls(**conv)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read ``path`` (optional) and apply ``overrides`` on top."""
    values = {}
    if path is not None:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str  # keys are case sensitive (K)
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"{path}: {exc}") from None
        extra = [s for s in cp.sections() if s != SECTION]
        if extra:
            raise ConfigError(f"{path}: unexpected section(s) {extra}; use [{SECTION}]")
        if cp.has_section(SECTION):
            values.update(cp.items(SECTION))
    values.update(overrides or {})
    return RunConfig.from_mapping(values)
