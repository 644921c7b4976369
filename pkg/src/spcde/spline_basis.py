"""Second-order M-spline densities and their I-spline integrals on [0, 1].

The knot sequence uses boundary multiplicity 2 and ``K - 1`` equal interior
intervals, which gives ``K`` basis functions: a decreasing half-tent at 0,
``K - 2`` full tents and an increasing half-tent at 1.  Each M-spline
integrates to one, so any convex combination is a density on [0, 1] and the
same combination of I-splines is its CDF.

Evaluation is right-continuous at knots; ``y = 1`` is assigned to the last
interval so the closed unit interval is covered.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ORDER = 2


def _knot_sequence(K: int) -> np.ndarray:
    interior = np.linspace(0.0, 1.0, K)
    return np.concatenate(([0.0], interior, [1.0]))


def _mspline_recursion(y: np.ndarray, knots: np.ndarray, interval: np.ndarray, order: int) -> np.ndarray:
    """Evaluate all M-splines of ``order`` at ``y`` on the polynomial piece ``interval``.

    ``interval[i]`` is the index ``j`` of the knot interval ``[t_j, t_{j+1})``
    whose polynomial piece is used for ``y[i]``; passing an endpoint of that
    interval gives the one-sided limit from inside the interval.
    """
    n_knots = len(knots)
    n = len(y)
    # order 1: 1 / (t_{i+1} - t_i) on the selected interval
    m = np.zeros((n, n_knots - 1))
    widths = np.diff(knots)
    rows = np.arange(n)
    safe = widths[interval] > 0
    m[rows[safe], interval[safe]] = 1.0 / widths[interval[safe]]
    for k in range(2, order + 1):
        n_basis = n_knots - k
        nxt = np.zeros((n, n_basis))
        for i in range(n_basis):
            span = knots[i + k] - knots[i]
            if span <= 0:
                continue
            nxt[:, i] = k * ((y - knots[i]) * m[:, i] + (knots[i + k] - y) * m[:, i + 1]) / ((k - 1) * span)
        m = nxt
    return m


@dataclass(frozen=True)
class SplineBasis:
    """``K`` order-2 M-spline densities on [0, 1] with their I-spline CDFs.

    Attributes
    ----------
    K : int
        Number of basis functions.
    knots : numpy.ndarray
        Full knot sequence of length ``K + 2``.
    """

    K: int
    knots: np.ndarray = field(repr=False)
    # per nondegenerate interval j: right limit at its left end / left limit at its right end
    _left: np.ndarray = field(repr=False, compare=False)
    _right: np.ndarray = field(repr=False, compare=False)
    # I-spline values at the left end of each nondegenerate interval
    _cum: np.ndarray = field(repr=False, compare=False)

    @property
    def breaks(self) -> np.ndarray:
        """Distinct knot locations, ``K`` equally spaced points from 0 to 1."""
        return self.knots[1:-1]

    def _locate(self, y: np.ndarray) -> np.ndarray:
        # index into the distinct breaks, right-continuous, last interval closed
        j = np.searchsorted(self.breaks, y, side="right") - 1
        return np.clip(j, 0, self.K - 2)

    def _check(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if np.any(~np.isfinite(y)) or np.any(y < 0.0) or np.any(y > 1.0):
            raise ValueError("spline argument must lie in [0, 1]")
        return y

    def mspline_matrix(self, y) -> np.ndarray:
        """All ``K`` M-spline values at each point; shape ``y.shape + (K,)``."""
        y = self._check(y)
        flat = y.reshape(-1)
        j = self._locate(flat)
        t0 = self.breaks[j]
        h = self.breaks[j + 1] - t0
        w = ((flat - t0) / h)[:, None]
        out = (1.0 - w) * self._left[j] + w * self._right[j]
        return out.reshape(y.shape + (self.K,))

    def ispline_matrix(self, y) -> np.ndarray:
        """All ``K`` I-spline values at each point; shape ``y.shape + (K,)``.

        The M-splines are linear on each knot interval, so the partial
        integral over an interval is an exact trapezoid.
        """
        y = self._check(y)
        flat = y.reshape(-1)
        j = self._locate(flat)
        t0 = self.breaks[j]
        h = self.breaks[j + 1] - t0
        d = (flat - t0)[:, None]
        w = d / h[:, None]
        left = self._left[j]
        at_y = (1.0 - w) * left + w * self._right[j]
        out = self._cum[j] + 0.5 * d * (left + at_y)
        np.clip(out, 0.0, 1.0, out=out)
        return out.reshape(y.shape + (self.K,))

    def _index(self, k: int) -> int:
        if not 1 <= k <= self.K:
            raise ValueError(f"basis index must be in 1..{self.K}, got {k}")
        return k - 1


def make_basis(K: int) -> SplineBasis:
    """Build the order-2 M-/I-spline basis with ``K`` functions (``K >= 3``)."""
    if int(K) != K or K < 3:
        raise ValueError(f"K must be an integer >= 3, got {K}")
    K = int(K)
    knots = _knot_sequence(K)
    breaks = knots[1:-1]
    n_int = K - 1
    # the nondegenerate interval [breaks[j], breaks[j+1]) is knot interval j + 1
    piece = np.arange(n_int) + 1
    left = _mspline_recursion(breaks[:-1], knots, piece, ORDER)
    right = _mspline_recursion(breaks[1:], knots, piece, ORDER)
    h = np.diff(breaks)[:, None]
    areas = 0.5 * h * (left + right)
    cum = np.vstack([np.zeros((1, K)), np.cumsum(areas, axis=0)[:-1]])
    for arr in (knots, left, right, cum):
        arr.setflags(write=False)
    return SplineBasis(K=K, knots=knots, _left=left, _right=right, _cum=cum)


def mspline_eval(basis: SplineBasis, k: int, y):
    """Density of the ``k``-th (1-based) M-spline at ``y`` in [0, 1]."""
    col = basis._index(k)
    out = basis.mspline_matrix(y)[..., col]
    return float(out) if np.ndim(out) == 0 else out


def ispline_eval(basis: SplineBasis, k: int, y):
    """CDF of the ``k``-th (1-based) M-spline density at ``y`` in [0, 1]."""
    col = basis._index(k)
    out = basis.ispline_matrix(y)[..., col]
    return float(out) if np.ndim(out) == 0 else out
