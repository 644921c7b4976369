"""Semi-parametric conditional density model: an M-spline mixture whose
weights come from an MLP of the conditioning features.

Responses are mapped affinely onto [0, 1] before the spline basis is applied;
the raw-scale density carries the Jacobian of that map.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import neural_net
from .neural_net import MlpParams, TrainConfig
from .spline_basis import SplineBasis, make_basis

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
BISECTION_STEPS = 60


class DegenerateScaleError(ValueError):
    """Raised when the training responses have zero range."""


@dataclass(frozen=True)
class ResponseScaler:
    lower: float
    upper: float
    padding: float = 0.01

    def __post_init__(self):
        if not self.lower < self.upper:
            raise DegenerateScaleError(f"lower bound {self.lower} must be below upper {self.upper}")

    @classmethod
    def from_data(cls, y, padding: float = 0.01) -> "ResponseScaler":
        y = np.asarray(y, dtype=float)
        lo, hi = float(y.min()), float(y.max())
        if not hi > lo:
            raise DegenerateScaleError("responses are constant; cannot build a scale")
        pad = padding * (hi - lo)
        return cls(lo - pad, hi + pad, padding)

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def scale(self, y, clamp: bool = True):
        u = (np.asarray(y, dtype=float) - self.lower) / self.width
        if clamp:
            outside = (u < 0.0) | (u > 1.0)
            if np.any(outside):
                log.warning("%d response value(s) outside [%g, %g] clamped to the boundary",
                            int(np.sum(outside)), self.lower, self.upper)
                u = np.clip(u, 0.0, 1.0)
        return u

    def unscale(self, u):
        return self.lower + np.asarray(u, dtype=float) * self.width


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered feature names with the standardization learned at fit time."""

    names: tuple[str, ...]
    mean: np.ndarray = field(repr=False)
    sd: np.ndarray = field(repr=False)

    @classmethod
    def from_data(cls, names, X) -> "FeatureSchema":
        X = np.asarray(X, dtype=float)
        if X.shape[1] != len(names):
            raise ValueError(f"{len(names)} feature names for {X.shape[1]} columns")
        mean = X.mean(axis=0)
        sd = X.std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        return cls(tuple(names), mean, sd)

    def __len__(self):
        return len(self.names)

    def transform(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mean) / self.sd


@dataclass(frozen=True)
class SpqrModel:
    params: MlpParams
    basis: SplineBasis
    scaler: ResponseScaler
    schema: FeatureSchema

    def __post_init__(self):
        sizes = self.params.layer_sizes
        if sizes[0] != len(self.schema):
            raise ValueError(f"network takes {sizes[0]} inputs but schema has {len(self.schema)}")
        if sizes[-1] != self.basis.K:
            raise ValueError(f"network emits {sizes[-1]} weights but basis has K={self.basis.K}")

    def weights(self, x) -> np.ndarray:
        """Mixture weights for one feature vector or a row-stacked batch."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != len(self.schema):
            raise ValueError(f"expected {len(self.schema)} features "
                             f"{list(self.schema.names)}, got {x.shape[-1]}")
        return neural_net.forward(self.params, self.schema.transform(x))

    def to_dict(self) -> dict:
        return {
            "format": "spcde-spqr",
            "version": FORMAT_VERSION,
            "K": self.basis.K,
            "scaler": {"lower": self.scaler.lower, "upper": self.scaler.upper,
                       "padding": self.scaler.padding},
            "features": {"names": list(self.schema.names), "mean": self.schema.mean.tolist(),
                         "sd": self.schema.sd.tolist()},
            "mlp": self.params.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SpqrModel":
        if d.get("format") != "spcde-spqr" or d.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model format {d.get('format')!r} v{d.get('version')}")
        feats = d["features"]
        return cls(
            params=MlpParams.from_dict(d["mlp"]),
            basis=make_basis(d["K"]),
            scaler=ResponseScaler(**d["scaler"]),
            schema=FeatureSchema(tuple(feats["names"]), np.asarray(feats["mean"], dtype=float),
                                 np.asarray(feats["sd"], dtype=float)),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "SpqrModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def fit(features, responses, K: int = 20, hidden_sizes=(30, 20),
        config: TrainConfig | None = None, feature_names=None, padding: float = 0.01,
        input_init_scale=None, groups=None) -> SpqrModel:
    """Fit an SPQR model of ``responses`` given the columns of ``features``.

    ``input_init_scale`` and ``groups`` are passed to :func:`neural_net.train`.
    """
    X = np.asarray(features, dtype=float)
    y = np.asarray(responses, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != len(y):
        raise ValueError(f"{X.shape[0]} feature rows for {len(y)} responses")
    if len(y) < 10:
        raise ValueError(f"need at least 10 samples, got {len(y)}")
    names = feature_names or [f"x{i}" for i in range(X.shape[1])]
    scaler = ResponseScaler.from_data(y, padding)
    schema = FeatureSchema.from_data(names, X)
    basis = make_basis(K)
    params = neural_net.train(schema.transform(X), scaler.scale(y), basis, config,
                              hidden_sizes=tuple(hidden_sizes), input_init_scale=input_init_scale,
                              groups=groups)
    return SpqrModel(params, basis, scaler, schema)


def _broadcast(model: SpqrModel, y, x):
    y = np.asarray(y, dtype=float)
    pi = model.weights(x)
    if pi.ndim == 1:
        pi = np.broadcast_to(pi, y.shape + (model.basis.K,))
    elif y.ndim == 0:
        y = np.broadcast_to(y, pi.shape[:-1])
    return y, pi


def pdf(model: SpqrModel, y, x):
    """Conditional density of the raw response; zero outside the scaler range."""
    y, pi = _broadcast(model, y, x)
    u = model.scaler.scale(y, clamp=False)
    inside = (u >= 0.0) & (u <= 1.0)
    B = model.basis.mspline_matrix(np.where(inside, u, 0.0))
    out = np.where(inside, np.einsum("...k,...k->...", pi, B) / model.scaler.width, 0.0)
    return float(out) if out.ndim == 0 else out


def cdf(model: SpqrModel, y, x):
    """Conditional CDF of the raw response; 0 below and 1 above the scaler range."""
    y, pi = _broadcast(model, y, x)
    u = np.clip(model.scaler.scale(y, clamp=False), 0.0, 1.0)
    out = np.einsum("...k,...k->...", pi, model.basis.ispline_matrix(u))
    out = np.clip(out, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def _quantile_scaled(basis: SplineBasis, pi: np.ndarray, tau: np.ndarray) -> np.ndarray:
    """Invert the mixture CDF on [0, 1] by bisection on each knot interval.

    The interval containing ``tau`` is found from the CDF at the knots; the
    mixture density is linear there, so each bisection step evaluates the
    quadratic piece directly.
    """
    breaks = basis.breaks
    left = pi @ basis._left.T  # (..., K-1): mixture density at left end of each interval
    right = pi @ basis._right.T
    at_knots = pi @ basis._cum.T  # CDF at left end of each interval
    j = (at_knots <= tau[..., None]).sum(axis=-1) - 1
    j = np.clip(j, 0, basis.K - 2)
    take = lambda a: np.take_along_axis(a, j[..., None], axis=-1)[..., 0]
    f0, f1, c0 = take(left), take(right), take(at_knots)
    t0 = breaks[j]
    h = breaks[j + 1] - t0
    lo = np.zeros_like(tau)
    hi = h.copy()
    for _ in range(BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        val = c0 + mid * (f0 + 0.5 * (f1 - f0) * mid / h)
        below = val < tau
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return np.clip(t0 + 0.5 * (lo + hi), 0.0, 1.0)


def quantile(model: SpqrModel, tau, x):
    """Conditional quantile at level ``tau`` in (0, 1); monotone in ``tau``."""
    tau = np.asarray(tau, dtype=float)
    if np.any(~(tau > 0.0) | ~(tau < 1.0)):
        raise ValueError("quantile level must lie strictly between 0 and 1")
    tau, pi = _broadcast(model, tau, x)
    u = _quantile_scaled(model.basis, pi, np.asarray(tau, dtype=float))
    out = model.scaler.unscale(u)
    return float(out) if out.ndim == 0 else out
