"""Max-min location ordering with nearest-earlier conditioning sets.

The feature layouts of the TMAX and PRCP conditional models are built here too.

Positions in an ordering are 0-based throughout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

TMAX = "TMAX"
PRCP = "PRCP"
VARIABLES = (TMAX, PRCP)
INDICATOR = "X"


@dataclass(frozen=True)
class SpatialOrder:
    """``perm[i]`` is the location index placed at position ``i``."""

    perm: tuple[int, ...]
    coords: np.ndarray

    def __post_init__(self):
        if sorted(self.perm) != list(range(len(self.coords))):
            raise ValueError("ordering is not a permutation of the locations")

    @property
    def position(self) -> dict[int, int]:
        return {loc: i for i, loc in enumerate(self.perm)}


@dataclass(frozen=True)
class NeighborSets:
    """``sets[i]``: locations conditioning the location at position ``i``,
    nearest first; all of them precede position ``i``."""

    order: SpatialOrder
    m: int
    sets: tuple[tuple[int, ...], ...]

    def of_location(self, loc: int) -> tuple[int, ...]:
        return self.sets[self.order.position[loc]]

    def to_dict(self) -> dict:
        return {
            "order": list(self.order.perm),
            "coords": self.order.coords.tolist(),
            "m": self.m,
            "neighbors": [list(s) for s in self.sets],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NeighborSets":
        order = SpatialOrder(tuple(d["order"]), np.asarray(d["coords"], dtype=float))
        return cls(order, int(d["m"]), tuple(tuple(s) for s in d["neighbors"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


TIE_RTOL = 1e-12


def _sqdist(coords: np.ndarray) -> np.ndarray:
    diff = coords[:, None, :] - coords[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def maxmin_order(coords) -> SpatialOrder:
    """Greedy max-min ordering starting from the location nearest the centroid.

    Ties are broken by the lowest location index.  Distances within a
    relative ``TIE_RTOL`` of each other count as ties, so rounding in the
    centroid or the squared distances cannot decide them.
    """
    coords = np.asarray(coords, dtype=float)
    if coords.ndim == 1:
        coords = coords[:, None]
    n = len(coords)
    if n < 1:
        raise ValueError("need at least one location")
    if len(np.unique(coords, axis=0)) != n:
        raise ValueError("duplicate coordinates")
    d2 = _sqdist(coords)
    centroid = coords.mean(axis=0)
    to_centre = ((coords - centroid) ** 2).sum(axis=1)
    first = int(np.argmax(to_centre <= to_centre.min() * (1 + TIE_RTOL)))
    perm = [first]
    mind = d2[first].copy()
    chosen = np.zeros(n, dtype=bool)
    chosen[first] = True
    for _ in range(n - 1):
        cand = np.where(chosen, -np.inf, mind)
        nxt = int(np.argmax(cand >= cand.max() * (1 - TIE_RTOL)))
        perm.append(nxt)
        chosen[nxt] = True
        np.minimum(mind, d2[nxt], out=mind)
    return SpatialOrder(tuple(perm), coords)


def neighbor_sets(order: SpatialOrder, m: int = 10) -> NeighborSets:
    """The ``min(i, m)`` nearest earlier locations for each position ``i``.

    Distance ties go to the location placed earlier in the ordering.
    """
    if m < 1:
        raise ValueError("neighbor count m must be at least 1")
    perm = np.asarray(order.perm)
    coords = order.coords[perm]
    d2 = _sqdist(coords)
    sets = []
    for i in range(len(perm)):
        earlier = d2[i, :i]
        pick = np.argsort(earlier, kind="stable")[:m]
        sets.append(tuple(int(perm[p]) for p in pick))
    return NeighborSets(order, int(m), tuple(sets))


def feature_names(variable: str, loc: int, neighbors, covariates=()) -> list[str]:
    """Feature layout for the model of ``variable`` at location ``loc``.

    Names read ``VAR@loc:lag`` where lag 1 is the previous day and lag 0 the
    current day.  Order: lags, current-location TMAX (PRCP only), neighbor
    TMAX, neighbor PRCP (PRCP only), the source indicator, covariates.
    """
    if variable == TMAX:
        names = [f"{TMAX}@{loc}:1"]
        names += [f"{TMAX}@{n}:0" for n in neighbors]
    elif variable == PRCP:
        names = [f"{PRCP}@{loc}:1", f"{TMAX}@{loc}:1", f"{TMAX}@{loc}:0"]
        names += [f"{TMAX}@{n}:0" for n in neighbors]
        names += [f"{PRCP}@{n}:0" for n in neighbors]
    else:
        raise ValueError(f"unknown variable {variable!r}")
    return names + [INDICATOR] + list(covariates)


def parse_feature(name: str):
    """``'TMAX@3:1'`` -> ``('TMAX', 3, 1)``; other names are returned as-is."""
    if "@" not in name:
        return name
    var, rest = name.split("@")
    loc, lag = rest.split(":")
    return var, int(loc), int(lag)


def build_schemas(neighbors: NeighborSets, covariates=()) -> dict[tuple[int, str], list[str]]:
    """Feature names keyed by ``(location, variable)`` for every location."""
    out = {}
    for pos, loc in enumerate(neighbors.order.perm):
        for v in VARIABLES:
            out[(loc, v)] = feature_names(v, loc, neighbors.sets[pos], covariates)
    return out
