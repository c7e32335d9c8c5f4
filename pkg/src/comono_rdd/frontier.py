"""Cross-group nearest neighbours and the near-frontier indicator.

Nothing here needs an analytic description of the boundary between the
treated and untreated regions: a unit is "near the frontier" when its nearest
unit of the opposite group is within ``epsilon``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from .dataset import Dataset
from .errors import EmptyFrontierSample, NoFrontierUnits
from .loclin import BRUTE_FORCE_BELOW

# relative slack when collecting tie candidates from the tree's distance
_TIE_SLACK = 1e-9


@dataclass(frozen=True)
class FrontierInfo:
    """Per-unit nearest opposite-group neighbour (dataset row), its distance, and ``w``.

    ``w`` and ``epsilon`` are ``None`` until :func:`set_weights` is applied.
    """

    nn_index: np.ndarray
    nn_distance: np.ndarray
    d: np.ndarray
    w: np.ndarray | None = None
    epsilon: float | None = None

    def counts(self) -> dict:
        if self.w is None:
            return {}
        return {g: int(np.sum(self.w & (self.d == g))) for g in (1, 0)}

    def near(self, group: int) -> np.ndarray:
        """Dataset rows of near-frontier units with treatment ``group``."""
        if self.w is None:
            raise ValueError("weights not set; call set_weights first")
        return np.flatnonzero(self.w & (self.d == group))


def _exact_dist(a, b):
    diff = a - b
    return np.sqrt(np.sum(diff * diff, axis=-1))


def _nn_into(queries: np.ndarray, targets: np.ndarray):
    """Nearest row of ``targets`` for every query row; ties go to the lowest position."""
    m = len(targets)
    if m < BRUTE_FORCE_BELOW:
        idx = np.empty(len(queries), dtype=np.int64)
        dist = np.empty(len(queries))
        step = max(1, (1 << 20) // max(1, m))
        for s in range(0, len(queries), step):
            dd = _exact_dist(queries[s:s + step, None, :], targets[None, :, :])
            j = np.argmin(dd, axis=1)  # first occurrence = lowest position
            idx[s:s + step] = j
            dist[s:s + step] = dd[np.arange(len(j)), j]
        return idx, dist
    tree = cKDTree(targets)
    d0, j0 = tree.query(queries, k=2)
    idx = j0[:, 0].astype(np.int64)
    dist = _exact_dist(queries, targets[idx])
    # only queries whose second neighbour is (nearly) as close can have a tie
    amb = np.flatnonzero(d0[:, 1] <= d0[:, 0] * (1 + _TIE_SLACK) + 1e-300)
    if amb.size == 0:
        return idx, dist
    cands = tree.query_ball_point(queries[amb], r=d0[amb, 0] * (1 + _TIE_SLACK) + 1e-300)
    for i, c in zip(amb, cands):
        c = np.sort(np.asarray(c, dtype=np.int64))
        dd = _exact_dist(queries[i], targets[c])
        j = int(np.argmin(dd))
        idx[i] = c[j]
        dist[i] = dd[j]
    return idx, dist


def cross_nn(ds: Dataset) -> FrontierInfo:
    """Nearest unit of the opposite treatment group for every unit (weights unset)."""
    nn_index = np.empty(ds.n, dtype=np.int64)
    nn_distance = np.empty(ds.n)
    for g in (0, 1):
        own = np.flatnonzero(ds.d == g)
        other = np.flatnonzero(ds.d != g)
        j, dist = _nn_into(ds.x[own], ds.x[other])
        nn_index[own] = other[j]
        nn_distance[own] = dist
    return FrontierInfo(nn_index=nn_index, nn_distance=nn_distance, d=np.asarray(ds.d).copy())


def set_weights(fi: FrontierInfo, epsilon: float) -> FrontierInfo:
    """Mark units whose cross-group neighbour is within ``epsilon``.

    Raises
    ------
    NoFrontierUnits
        Either group has no unit within ``epsilon`` of the other group.
    """
    if not (epsilon > 0):
        raise ValueError(f"epsilon must be positive, got {epsilon!r}")
    out = replace(fi, w=fi.nn_distance <= epsilon, epsilon=float(epsilon))
    counts = out.counts()
    if min(counts.values()) == 0:
        raise NoFrontierUnits(counts)
    return out


def domain_endpoints(values) -> tuple[float, float]:
    """``(min, max)`` of fitted values at near-frontier units; bounds the q domain."""
    v = np.asarray(values, dtype=float).ravel()
    v = v[np.isfinite(v)]
    if v.size == 0:
        raise EmptyFrontierSample("no fitted values to bound the domain")
    return float(v.min()), float(v.max())
