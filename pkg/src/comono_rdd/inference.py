"""Multiplier-bootstrap bands and the comonotonicity diagnostic."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dataset import Dataset
from .errors import BootstrapAborted, EstimationError, TooFewPoints
from .frontier import FrontierInfo, cross_nn
from .kernels import get_kernel
from .loclin import LocalLinear, rule_of_thumb_h

MAX_DRAW_GRID_FAILURE = 0.20
MAX_DISCARDED_DRAWS = 0.25
THREADS_ENV = "COMONO_RDD_THREADS"


@dataclass(frozen=True)
class BootstrapConfig:
    draws: int = 100
    level: float = 0.90
    seed: int = 0

    def __post_init__(self):
        if self.draws < 2:
            raise ValueError("need at least 2 bootstrap draws")
        if not 0 < self.level < 1:
            raise ValueError("level must lie in (0, 1)")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")


@dataclass(frozen=True)
class Bands:
    lower: np.ndarray
    upper: np.ndarray
    halfwidth: np.ndarray
    n_used: int
    n_discarded: int


def default_threads() -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def draw_multipliers(n: int, seed: int, draw: int) -> np.ndarray:
    """Unit-mean exponential weights for draw ``draw``; a fixed substream per (seed, draw)."""
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(draw),)))
    return rng.standard_exponential(n)


def bootstrap_bands(estimate, closure: Callable, n: int, cfg: BootstrapConfig,
                    threads: int | None = None, multipliers: Callable | None = None) -> Bands:
    """Pointwise bands ``estimate +/- quantile_level |estimate_s - estimate|``.

    ``closure(w)`` re-runs the estimator with the length-``n`` multiplier
    vector ``w`` and returns values aligned with ``estimate`` (NaN where it
    failed). A draw that fails on more than 20% of the points the base
    estimate covers is discarded; more than 25% discarded draws abort.
    ``multipliers(draw)`` overrides the exponential weights (for tests).

    Draws run on a thread pool but are merged by draw index, so the result
    does not depend on the number of threads.
    """
    est = np.asarray(estimate, dtype=float)
    make = multipliers or (lambda s: draw_multipliers(n, cfg.seed, s))

    def one(s):
        try:
            return np.asarray(closure(make(s)), dtype=float)
        except EstimationError:
            return np.full(est.shape, np.nan)

    threads = threads or default_threads()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            draws = list(pool.map(one, range(cfg.draws)))
    else:
        draws = [one(s) for s in range(cfg.draws)]
    base_ok = np.isfinite(est)
    kept = []
    for v in draws:
        fail = np.mean(~np.isfinite(v[base_ok])) if base_ok.any() else 1.0
        if fail <= MAX_DRAW_GRID_FAILURE:
            kept.append(v)
    n_disc = cfg.draws - len(kept)
    if n_disc > MAX_DISCARDED_DRAWS * cfg.draws:
        raise BootstrapAborted(f"{n_disc} of {cfg.draws} bootstrap draws failed")
    dev = np.abs(np.vstack(kept) - est[None, :]) if kept else np.full((1, est.size), np.nan)
    with np.errstate(invalid="ignore"):
        if np.all(np.isfinite(dev)):
            half = np.quantile(dev, cfg.level, axis=0)
        else:
            half = np.full(est.shape, np.nan)
            cols = np.any(np.isfinite(dev), axis=0)
            if cols.any():
                half[cols] = np.nanquantile(dev[:, cols], cfg.level, axis=0)
    return Bands(est - half, est + half, half, len(kept), n_disc)


@dataclass(frozen=True)
class ComonoDiagnostic:
    statistic: float
    violating_pair: tuple
    n_pairs: int

    @property
    def violated(self) -> bool:
        return self.statistic < 0

    def to_json(self) -> dict:
        return {"statistic": self.statistic, "pair": list(self.violating_pair),
                "n_pairs": self.n_pairs}


def comono_diagnostic(pairs) -> ComonoDiagnostic:
    """Minimum over all point pairs of (a_i - a_j)(b_i - b_j).

    ``pairs`` is an (m, 2) array of the two groups' conditional-mean estimates
    at frontier points. A negative minimum means some pair is ranked
    differently by the two means. Exhaustive O(m^2) search; ties resolve to
    the lexicographically first pair.
    """
    p = np.asarray(pairs, dtype=float)
    if p.ndim != 2 or p.shape[1] != 2:
        raise ValueError("pairs must be an (m, 2) array")
    m = p.shape[0]
    if m < 2:
        raise TooFewPoints(f"need at least 2 frontier points, got {m}")
    a, b = p[:, 0], p[:, 1]
    best, best_pair = np.inf, (0, 1)
    chunk = max(1, (1 << 22) // m)
    for s in range(0, m - 1, chunk):
        i = np.arange(s, min(s + chunk, m - 1))
        prod = (a[i, None] - a[None, :]) * (b[i, None] - b[None, :])
        prod[np.arange(m)[None, :] <= i[:, None]] = np.inf  # keep j > i only
        flat = int(np.argmin(prod))
        r, c = divmod(flat, m)
        if prod[r, c] < best:
            best, best_pair = float(prod[r, c]), (int(i[r]), c)
    return ComonoDiagnostic(best, best_pair, m * (m - 1) // 2)


def frontier_pairs(ds: Dataset, kernel="uniform", h: dict | None = None, epsilon: dict | None = None,
                   fi: FrontierInfo | None = None, n_bins: int | None = 5) -> np.ndarray:
    """(untreated mean, treated mean) estimates at near-frontier units.

    Every near-frontier unit contributes its own-group fit and the
    extrapolated fit of the other group. With ``n_bins`` the units are sorted
    by the untreated-mean estimate, split into equal-count bins and averaged
    within bins, so the pairwise statistic compares well-separated frontier
    locations instead of first-stage noise between near neighbours. Pass
    ``n_bins=None`` for the raw unit pairs.
    """
    from .extrapolate import QEstimator

    kernel = get_kernel(kernel)
    fi = cross_nn(ds) if fi is None else fi
    h = h or {}
    epsilon = epsilon or {}
    cols = []
    for d in (1, 0):
        # units of group 1 - d carry the extrapolated group-d mean
        est = QEstimator(ds, d, kernel, h=h.get(d), epsilon=epsilon.get(d), b=1.0, fi=fi)
        cross = est.gtilde_values()
        h_own = h.get(1 - d) or rule_of_thumb_h(int(np.sum(ds.d == 1 - d)))
        own_sm = LocalLinear.for_group(ds, 1 - d, kernel, h_own)
        own = own_sm.fit(ds.x[est.sample]).values
        g1, g0 = (cross, own) if d == 1 else (own, cross)
        cols.append(np.column_stack([g0, g1]))
    pts = np.vstack(cols)
    pts = pts[np.all(np.isfinite(pts), axis=1)]
    if n_bins is None or len(pts) <= n_bins:
        return pts
    order = np.argsort(pts[:, 0], kind="stable")
    bins = np.array_split(order, n_bins)
    return np.array([pts[b].mean(axis=0) for b in bins])
