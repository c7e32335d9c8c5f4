"""Multivariate local linear regression within one treatment group.

The smoother keeps a kd-tree over the group's covariates (brute force for
small groups) and evaluates many points at once: kernel weights are gathered
as a sparse (points x observations) list of pairs and the small weighted
normal equations are solved in one batch.

Small batches accumulate every design row centred exactly on its own
evaluation point. Large batches instead take one sparse product of the kernel
matrix with the group's monomials and re-centre algebraically; bootstrap
multipliers then only rescale the monomials, so the kernel matrix is built
once and reused by every draw. The path depends only on the number of pairs,
so a batch and its bootstrap replays always share it.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from .dataset import Dataset
from .errors import AllCandidatesFailed, InsufficientSupport
from .kernels import KernelSpec, get_kernel, kernel_weights

BRUTE_FORCE_BELOW = 256
RIDGE_FLOOR = 1e-10
_CHUNK = 1 << 20
# above this many kernel pairs the normal equations come from a sparse product
EXACT_PAIRS_MAX = 1 << 18

STATUS_OK = 0
STATUS_RIDGED = 1
STATUS_INSUFFICIENT = 2


class BandwidthMode(str, enum.Enum):
    MANUAL = "manual"
    RULE_OF_THUMB = "rule_of_thumb"
    CROSS_VALIDATED = "cross_validated"


@dataclass(frozen=True)
class BandwidthConfig:
    h: float
    b: float
    epsilon: float
    mode: BandwidthMode = BandwidthMode.MANUAL

    def __post_init__(self):
        for name in ("h", "b", "epsilon"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive, got {v!r}")


def rule_of_thumb_h(n_group: int) -> float:
    """Default first-stage bandwidth in standardized units, 1.06 * n**(-1/6)."""
    return 1.06 * float(n_group) ** (-1.0 / 6.0)


@dataclass(frozen=True)
class LocalFit:
    value: float
    gradient: np.ndarray
    effective_n: int
    x0: np.ndarray
    ridged: bool = False


@dataclass(frozen=True)
class LocalFitBatch:
    values: np.ndarray
    gradients: np.ndarray
    effective_n: np.ndarray
    status: np.ndarray

    @property
    def ok(self) -> np.ndarray:
        return self.status != STATUS_INSUFFICIENT

    def __len__(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class KernelPairs:
    """Nonzero kernel weights between evaluation points and group observations.

    ``rows`` index the evaluation points, ``cols`` the group observations
    (positions within the group, not dataset rows). Pairs are sorted by
    ``(rows, cols)`` so every reduction runs in a fixed order.
    """

    rows: np.ndarray
    cols: np.ndarray
    weights: np.ndarray
    n_points: int
    n_obs: int

    @cached_property
    def matrix(self):
        return sparse.csr_matrix((self.weights, (self.rows, self.cols)),
                                 shape=(self.n_points, self.n_obs))

    @cached_property
    def support(self):
        return sparse.csr_matrix((np.ones(len(self.rows)), (self.rows, self.cols)),
                                 shape=(self.n_points, self.n_obs))


class LocalLinear:
    """Local linear smoother over a fixed set of observations.

    Parameters
    ----------
    x, y : arrays of shape (m, k) and (m,)
        The group's covariates and outcomes.
    kernel : KernelSpec or name
    h : float
        Bandwidth, in the units of ``x``.
    index : array of int, optional
        Dataset row of each observation; used to pick this group's slice out
        of a full-length multiplier vector.
    """

    def __init__(self, x, y, kernel, h: float, index=None):
        if not (np.isfinite(h) and h > 0):
            raise ValueError(f"bandwidth must be positive, got {h!r}")
        self.x = np.asarray(x, dtype=float)
        if self.x.ndim == 1:
            self.x = self.x[:, None]
        self.y = np.asarray(y, dtype=float)
        self.kernel = get_kernel(kernel)
        self.h = float(h)
        self.index = np.arange(len(self.y)) if index is None else np.asarray(index)
        self.tree = cKDTree(self.x) if len(self.y) >= BRUTE_FORCE_BELOW else None
        # monomials of the scaled, group-centred covariates (centring keeps
        # the re-centring step below well conditioned)
        self._center = self.x.mean(axis=0) if len(self.y) else np.zeros(self.x.shape[1])
        z = (self.x - self._center) / self.h
        iu, ju = np.triu_indices(z.shape[1])
        self._z = z
        self._monomials = np.column_stack([np.ones(len(z)), z, z[:, iu] * z[:, ju]])

    @classmethod
    def for_group(cls, ds: Dataset, group, kernel, h: float) -> "LocalLinear":
        """Smoother over the rows of ``ds`` listed in ``group`` (or with ``d == group``)."""
        idx = np.flatnonzero(ds.d == group) if np.isscalar(group) else np.asarray(group)
        return cls(ds.x[idx], ds.y[idx], kernel, h, index=idx)

    @property
    def k(self) -> int:
        return self.x.shape[1]

    @property
    def radius(self) -> float:
        return self.kernel.support * self.h

    def kernel_pairs(self, points, exclude=None) -> KernelPairs:
        """Kernel weights of every observation within the kernel radius of each point.

        ``exclude[j]`` (an observation position, or -1) is dropped from point
        ``j``'s neighbourhood; used for leave-one-out fits.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        r = self.radius
        if self.tree is None:
            rows_l, cols_l, dist_l = [], [], []
            step = max(1, _CHUNK // max(1, len(self.y)))
            for s in range(0, len(pts), step):
                diff = pts[s:s + step, None, :] - self.x[None, :, :]
                dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
                rr, cc = np.nonzero(dist <= r)
                rows_l.append(rr + s)
                cols_l.append(cc)
                dist_l.append(dist[rr, cc])
            rows = np.concatenate(rows_l) if rows_l else np.empty(0, int)
            cols = np.concatenate(cols_l) if cols_l else np.empty(0, int)
            dist = np.concatenate(dist_l) if dist_l else np.empty(0)
        else:
            res = cKDTree(pts).sparse_distance_matrix(self.tree, r, output_type="ndarray")
            rows, cols, dist = res["i"].astype(np.int64), res["j"].astype(np.int64), res["v"]
            order = np.lexsort((cols, rows))
            rows, cols, dist = rows[order], cols[order], dist[order]
        if exclude is not None:
            exclude = np.asarray(exclude)
            keep = cols != exclude[rows]
            rows, cols, dist = rows[keep], cols[keep], dist[keep]
        w = kernel_weights(self.kernel, dist / self.h)
        keep = w > 0
        return KernelPairs(rows[keep], cols[keep], np.asarray(w[keep], dtype=float), len(pts),
                           len(self.y))

    def fit_pairs(self, pairs: KernelPairs, points, multipliers=None, response=None) -> LocalFitBatch:
        """Solve the weighted least squares problems described by ``pairs``.

        ``multipliers`` is either a full dataset-length vector (sliced with
        ``self.index``) or one weight per group observation. ``response``
        replaces the group outcomes when given.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        m, k = pts.shape[0], self.k
        p = k + 1
        y = self.y if response is None else np.asarray(response, dtype=float)
        if multipliers is None:
            mult = np.ones(len(self.y))
        else:
            mult = np.asarray(multipliers, dtype=float)
            if mult.shape[0] != len(self.y):
                mult = mult[self.index]
            if np.any(mult < 0):
                raise ValueError("multipliers must be nonnegative")
        eff = np.rint(pairs.support @ (mult > 0).astype(float)).astype(np.int64)

        if len(pairs.rows) <= EXACT_PAIRS_MAX:
            A, rhs = self._moments_exact(pairs, pts, mult, y)
        else:
            A, rhs = self._moments_sparse(pairs, pts, mult, y)

        status = np.full(m, STATUS_OK, dtype=np.int8)
        insufficient = eff < p
        status[insufficient] = STATUS_INSUFFICIENT
        good = ~insufficient
        values = np.full(m, np.nan)
        grads = np.full((m, k), np.nan)
        if np.any(good):
            Ag = A[good]
            trace = np.trace(Ag, axis1=1, axis2=2)
            floor = RIDGE_FLOOR * trace
            lam_min = np.linalg.eigvalsh(Ag)[:, 0]
            binds = lam_min < floor
            if np.any(binds):
                Ag = Ag.copy()
                Ag[binds] += floor[binds, None, None] * np.eye(p)
                st = status[good]
                st[binds] = STATUS_RIDGED
                status[good] = st
            beta = np.linalg.solve(Ag, rhs[good][..., None])[..., 0]
            values[good] = beta[:, 0]
            grads[good] = beta[:, 1:] / self.h
        return LocalFitBatch(values, grads, eff, status)

    def _moments_exact(self, pairs, pts, mult, y):
        m, k = pts.shape
        p = k + 1
        rows = pairs.rows
        w = pairs.weights * mult[pairs.cols]
        iu, ju = np.triu_indices(p)
        A_flat = np.zeros((m, len(iu)))
        rhs = np.zeros((m, p))
        for s in range(0, len(rows), _CHUNK):
            r_ = rows[s:s + _CHUNK]
            c_ = pairs.cols[s:s + _CHUNK]
            w_ = w[s:s + _CHUNK]
            u = np.empty((len(r_), p))
            u[:, 0] = 1.0
            u[:, 1:] = (self.x[c_] - pts[r_]) / self.h
            wy = w_ * y[c_]
            for t, (a, b) in enumerate(zip(iu, ju)):
                A_flat[:, t] += np.bincount(r_, weights=w_ * u[:, a] * u[:, b], minlength=m)
            for a in range(p):
                rhs[:, a] += np.bincount(r_, weights=wy * u[:, a], minlength=m)
        A = np.zeros((m, p, p))
        A[:, iu, ju] = A_flat
        A[:, ju, iu] = A_flat
        return A, rhs

    def _moments_sparse(self, pairs, pts, mult, y):
        m, k = pts.shape
        p = k + 1
        # kernel-weighted sums of monomials in z = (x - c) / h, then shifted
        # to u = z - z0 for every evaluation point
        z0 = (pts - self._center) / self.h
        feats = np.column_stack([self._monomials, y, self._z * y[:, None]]) * mult[:, None]
        S = pairs.matrix @ feats
        ntri = k * (k + 1) // 2
        S0 = S[:, 0]
        S1 = S[:, 1:1 + k]
        S2 = np.zeros((m, k, k))
        iu, ju = np.triu_indices(k)
        S2[:, iu, ju] = S[:, 1 + k:1 + k + ntri]
        S2[:, ju, iu] = S[:, 1 + k:1 + k + ntri]
        Sy = S[:, 1 + k + ntri]
        Szy = S[:, 2 + k + ntri:]

        A = np.empty((m, p, p))
        A[:, 0, 0] = S0
        off = S1 - S0[:, None] * z0
        A[:, 0, 1:] = off
        A[:, 1:, 0] = off
        A[:, 1:, 1:] = (S2 - z0[:, :, None] * S1[:, None, :] - S1[:, :, None] * z0[:, None, :]
                        + S0[:, None, None] * z0[:, :, None] * z0[:, None, :])
        rhs = np.empty((m, p))
        rhs[:, 0] = Sy
        rhs[:, 1:] = Szy - z0 * Sy[:, None]
        return A, rhs

    def fit(self, points, multipliers=None, response=None, exclude=None) -> LocalFitBatch:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return self.fit_pairs(self.kernel_pairs(pts, exclude), pts, multipliers, response)

    def fit_one(self, x0, multipliers=None) -> LocalFit:
        x0 = np.asarray(x0, dtype=float).ravel()
        if not np.all(np.isfinite(x0)):
            raise ValueError("evaluation point must be finite")
        batch = self.fit(x0[None, :], multipliers)
        if batch.status[0] == STATUS_INSUFFICIENT:
            raise InsufficientSupport(tuple(x0.tolist()), int(batch.effective_n[0]))
        return LocalFit(
            value=float(batch.values[0]),
            gradient=batch.gradients[0].copy(),
            effective_n=int(batch.effective_n[0]),
            x0=x0,
            ridged=bool(batch.status[0] == STATUS_RIDGED),
        )


def fit_at(ds: Dataset, group, x0, kernel: KernelSpec, h: float, multipliers=None) -> LocalFit:
    """Local linear fit of ``y`` on ``x`` at ``x0`` using only the rows in ``group``.

    ``group`` is a treatment value (0/1) or an explicit index array.
    ``multipliers`` (length n) rescale each row's kernel weight.

    Raises
    ------
    InsufficientSupport
        Fewer than k + 1 observations carry positive weight at ``x0``.
    """
    return LocalLinear.for_group(ds, group, kernel, h).fit_one(x0, multipliers)


def loo_error(smoother: LocalLinear) -> tuple[float, float]:
    """Leave-one-out mean squared prediction error and the fraction of failed fits."""
    m = len(smoother.y)
    fits = smoother.fit(smoother.x, exclude=np.arange(m))
    ok = fits.ok
    if not np.any(ok):
        return np.inf, 1.0
    resid = smoother.y[ok] - fits.values[ok]
    return float(np.mean(resid * resid)), float(1.0 - ok.mean())


def select_min_score(grid, scores) -> float:
    """Grid value with the smallest score; near-ties go to the larger value."""
    grid = np.asarray(grid, dtype=float)
    scores = np.asarray(scores, dtype=float)
    finite = np.isfinite(scores)
    best = scores[finite].min()
    tied = finite & np.isclose(scores, best, rtol=1e-9, atol=1e-15)
    return float(grid[tied].max())


def cv_bandwidth(ds: Dataset, group, kernel: KernelSpec, grid, max_fail: float = 0.05) -> float:
    """Leave-one-out cross-validated first-stage bandwidth.

    Candidates whose leave-one-out fit fails at more than ``max_fail`` of the
    group's points are discarded.
    """
    grid = np.asarray(list(grid), dtype=float)
    if grid.size == 0 or np.any(~np.isfinite(grid)) or np.any(grid <= 0):
        raise ValueError("bandwidth grid must be nonempty and strictly positive")
    scores = []
    for h in grid:
        err, fail = loo_error(LocalLinear.for_group(ds, group, kernel, h))
        scores.append(err if fail <= max_fail else np.inf)
    if not np.any(np.isfinite(scores)):
        raise AllCandidatesFailed(f"every candidate h in {grid.tolist()} lacks support")
    return select_min_score(grid, scores)


def log_grid(lo: float, hi: float, steps: int) -> np.ndarray:
    if not (0 < lo <= hi) or steps < 1:
        raise ValueError("log grid needs 0 < lo <= hi and steps >= 1")
    return np.geomspace(lo, hi, steps)
