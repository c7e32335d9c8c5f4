"""Transfer-function estimation and CATE imputation away from the frontier.

For a first-stage group ``d`` the estimator

1. fits a local linear regression of ``y`` on ``x`` within group ``d`` at the
   nearest group-``d`` neighbour of every near-frontier unit of group
   ``1 - d`` and extrapolates linearly along the fitted gradient
   (:func:`gtilde`);
2. regresses those units' outcomes on the extrapolated values with a
   univariate local linear smoother, giving ``q_{1-d}(y)``, the mean of the
   opposite potential outcome at frontier points where group ``d``'s
   conditional mean equals ``y``.

The domain of the curve runs between the smallest and largest own-group fits
at near-frontier units of group ``d``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import isotonic_regression

from .dataset import Dataset
from .errors import EstimationError, InsufficientSupport, NoFrontierUnits
from .frontier import FrontierInfo, _nn_into, cross_nn, domain_endpoints, set_weights
from .kernels import KernelSpec, get_kernel, kernel_weights, omega_rule
from .loclin import (
    BandwidthConfig,
    BandwidthMode,
    LocalLinear,
    rule_of_thumb_h,
    select_min_score,
)

log = logging.getLogger(__name__)

DEFAULT_GRID_SIZE = 100
MAX_DROPPED_SHARE = 0.20
DISCRETE_MAX_LEVELS = 10


@dataclass(frozen=True)
class QCurve:
    """Estimated transfer curve ``q_target`` on an equally spaced grid.

    ``values`` is NaN where the grid point was dropped for lack of local
    support (``dropped`` marks those points). ``lower``/``upper`` hold
    bootstrap bands when computed.
    """

    grid: np.ndarray
    values: np.ndarray
    y_low: float
    y_high: float
    target: int
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    dropped: np.ndarray | None = None
    b: float | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.dropped is None:
            object.__setattr__(self, "dropped", ~np.isfinite(self.values))

    @property
    def n_dropped(self) -> int:
        return int(np.sum(self.dropped))

    def in_domain(self, v):
        v = np.asarray(v, dtype=float)
        return (v >= self.y_low) & (v <= self.y_high)

    def __call__(self, v):
        """Linear interpolation over retained grid points; NaN outside them (never clamps)."""
        v = np.asarray(v, dtype=float)
        keep = ~self.dropped
        g, q = self.grid[keep], self.values[keep]
        if g.size == 0:
            return np.full(v.shape, np.nan) if v.ndim else float("nan")
        if g.size == 1:
            out = np.where(v == g[0], q[0], np.nan)
        else:
            out = np.interp(v, g, q)
            out = np.where((v >= g[0]) & (v <= g[-1]), out, np.nan)
        return float(out) if out.ndim == 0 else out

    def rearranged(self) -> "QCurve":
        """Monotone (nondecreasing) projection of the retained values by pool-adjacent-violators."""
        vals = self.values.copy()
        keep = ~self.dropped
        if keep.sum() > 1:
            vals[keep] = isotonic_regression(vals[keep]).x
        return replace(self, values=vals)


@dataclass(frozen=True)
class CurvePair:
    """``q0`` (applied to treated units) and ``q1`` (applied to untreated units)."""

    q0: QCurve
    q1: QCurve

    def opposing(self, d0: int) -> QCurve:
        """Curve that imputes the missing potential outcome for a unit in region ``d0``."""
        return self.q0 if d0 == 1 else self.q1


@dataclass(frozen=True)
class CateEstimate:
    x0: np.ndarray
    tau: float | None
    s: int
    ey1: float | None
    ey0: float | None


def _univariate_fit(r, resp, kernel, b, grid, multipliers=None, index=None):
    sm = LocalLinear(r[:, None], resp, kernel, b, index=index)
    return sm.fit(np.asarray(grid)[:, None], multipliers)


def _univariate_loo(r, resp, kernel, b, groups, chunk: int = 1024):
    """Leave-one-cluster-out local linear prediction error on a scalar regressor.

    Each unit is predicted from units outside its own ``groups`` label. With
    labels taken from the shared first-stage fit, units whose generated
    regressors carry the same first-stage error are left out together.
    """
    m = r.size
    sse, n_ok = 0.0, 0
    for s in range(0, m, chunk):
        diff = r[None, :] - r[s:s + chunk, None]
        u = diff / b
        w = kernel_weights(kernel, u)
        w[groups[s:s + chunk, None] == groups[None, :]] = 0.0
        s0 = w.sum(axis=1)
        s1 = (w * u).sum(axis=1)
        s2 = (w * u * u).sum(axis=1)
        t0 = w @ resp
        t1 = (w * u) @ resp
        det = s0 * s2 - s1 * s1
        ok = (np.count_nonzero(w, axis=1) >= 2) & (det > 1e-10 * (s0 + s2) ** 2)
        pred = (s2[ok] * t0[ok] - s1[ok] * t1[ok]) / det[ok]
        resid = resp[s:s + chunk][ok] - pred
        sse += float(resid @ resid)
        n_ok += int(ok.sum())
    if n_ok == 0:
        return np.inf, 1.0
    return sse / n_ok, 1.0 - n_ok / m


def cv_second_stage(r, resp, kernel, grid=None, groups=None, max_fail: float = 0.05) -> float:
    """Cross-validated bandwidth for the regression of ``resp`` on the generated regressor ``r``.

    ``groups`` labels units that share a first-stage fit (default: every unit
    its own label, i.e. plain leave-one-out). Ties go to the larger ``b``.
    """
    r = np.asarray(r, dtype=float)
    resp = np.asarray(resp, dtype=float)
    span = float(np.ptp(r))
    if not span > 0:
        raise EstimationError("generated regressor is constant; cannot choose b")
    if grid is None:
        grid = np.geomspace(span / 100.0, span / 2.0, 25)
    groups = np.arange(r.size) if groups is None else np.asarray(groups)
    scores = []
    for b in grid:
        err, fail = _univariate_loo(r, resp, kernel, b, groups)
        scores.append(err if fail <= max_fail else np.inf)
    if not np.any(np.isfinite(scores)):
        raise EstimationError("no second-stage bandwidth candidate has enough support")
    return select_min_score(grid, scores)


class QEstimator:
    """Reusable estimator of ``q_{1-d}``.

    Everything that does not depend on bootstrap multipliers (nearest
    neighbours, near-frontier sets, kernel neighbourhoods, bandwidths and the
    evaluation grid) is computed once here; :meth:`curve` then evaluates the
    curve for any multiplier vector.

    Parameters
    ----------
    ds : Dataset
        Covariates should already be on the scale distances are measured in.
    d : int
        First-stage group. The returned curve targets ``1 - d``.
    h, epsilon, b : float, optional
        Defaults: rule-of-thumb ``h`` for group ``d``, ``epsilon = omega * h``,
        ``b`` by cross-validation that leaves out, together, all units sharing
        a first-stage fit.
    restrict : bool array, optional
        Keep only these rows in the second-stage and endpoint samples (used
        for per-stratum curves); the first stage always uses all of group d.
    """

    def __init__(
        self,
        ds: Dataset,
        d: int,
        kernel="uniform",
        h: float | None = None,
        epsilon: float | None = None,
        b: float | None = None,
        grid_size: int = DEFAULT_GRID_SIZE,
        fi: FrontierInfo | None = None,
        smooth_response: bool = False,
        rearrange: bool = False,
        b_grid=None,
        grid=None,
        restrict=None,
    ):
        if d not in (0, 1):
            raise ValueError("direction must be 0 or 1")
        if grid is None and grid_size < 2:
            raise ValueError("grid_size must be at least 2")
        self.ds = ds
        self.d = int(d)
        self.kernel = get_kernel(kernel)
        self.smooth_response = smooth_response
        self.rearrange = rearrange
        n_d = int(np.sum(ds.d == d))
        mode = BandwidthMode.MANUAL if h is not None else BandwidthMode.RULE_OF_THUMB
        self.h = float(h) if h is not None else rule_of_thumb_h(n_d)
        self.epsilon = float(epsilon) if epsilon is not None else omega_rule(self.kernel) * self.h
        if fi is None:
            fi = cross_nn(ds)
        self.fi = set_weights(fi, self.epsilon)

        sample = self.fi.near(1 - d)
        ends = self.fi.near(d)
        if restrict is not None:
            restrict = np.asarray(restrict, dtype=bool)
            sample = sample[restrict[sample]]
            ends = ends[restrict[ends]]
        if sample.size == 0 or ends.size == 0:
            raise NoFrontierUnits({1 - d: int(sample.size), d: int(ends.size)})
        self.sample = sample
        self.ends = ends

        self.first = LocalLinear.for_group(ds, d, self.kernel, self.h)
        nn = self.fi.nn_index[sample]
        self._nn_rows, self._nn_inv = np.unique(nn, return_inverse=True)
        self._nn_pairs = self.first.kernel_pairs(ds.x[self._nn_rows])
        self._step = ds.x[sample] - ds.x[nn]
        self._end_pairs = self.first.kernel_pairs(ds.x[ends])
        if smooth_response:
            self.own = LocalLinear.for_group(ds, 1 - d, self.kernel, self.h)
            self._resp_pairs = self.own.kernel_pairs(ds.x[sample])

        r0 = self.gtilde_values()
        ok = np.isfinite(r0)
        self.n_first_stage_failed = int(np.sum(~ok))
        end_vals = self.first.fit_pairs(self._end_pairs, ds.x[ends]).values
        self.y_low, self.y_high = domain_endpoints(end_vals)
        if grid is None:
            grid = np.linspace(self.y_low, self.y_high, grid_size)
        self.grid = np.asarray(grid, dtype=float)
        if b is None:
            self.b = cv_second_stage(r0[ok], self._response()[ok], self.kernel, b_grid,
                                     groups=nn[ok])
            self.b_mode = BandwidthMode.CROSS_VALIDATED
        else:
            self.b = float(b)
            self.b_mode = BandwidthMode.MANUAL
        self.bandwidths = BandwidthConfig(self.h, self.b, self.epsilon, mode)

    @property
    def target(self) -> int:
        return 1 - self.d

    def gtilde_values(self, multipliers=None) -> np.ndarray:
        """Extrapolated group-d mean at each second-stage unit (NaN where the fit failed)."""
        fits = self.first.fit_pairs(self._nn_pairs, self.ds.x[self._nn_rows], multipliers)
        val = fits.values[self._nn_inv]
        grad = fits.gradients[self._nn_inv]
        return val + np.einsum("ij,ij->i", grad, self._step)

    def _response(self, multipliers=None) -> np.ndarray:
        if not self.smooth_response:
            return self.ds.y[self.sample]
        return self.own.fit_pairs(self._resp_pairs, self.ds.x[self.sample], multipliers).values

    def second_stage(self, r, resp, multipliers=None) -> np.ndarray:
        ok = np.isfinite(r) & np.isfinite(resp)
        fits = _univariate_fit(
            r[ok], resp[ok], self.kernel, self.b, self.grid,
            None if multipliers is None else np.asarray(multipliers)[self.sample[ok]],
        )
        return np.where(fits.ok, fits.values, np.nan)

    def values(self, multipliers=None) -> np.ndarray:
        """Curve values on the fixed grid; NaN where a grid point lacks support."""
        r = self.gtilde_values(multipliers)
        vals = self.second_stage(r, self._response(multipliers), multipliers)
        if self.rearrange:
            keep = np.isfinite(vals)
            if keep.sum() > 1:
                vals[keep] = isotonic_regression(vals[keep]).x
        return vals

    def curve(self, multipliers=None, strict: bool = True) -> QCurve:
        vals = self.values(multipliers)
        dropped = ~np.isfinite(vals)
        share = dropped.mean()
        if strict and share > MAX_DROPPED_SHARE:
            raise EstimationError(
                f"{int(dropped.sum())} of {len(vals)} grid points lack support (b={self.b:.4g})"
            )
        if dropped.any():
            log.info("q%d: dropped %d grid points", self.target, int(dropped.sum()))
        info = {
            "h": self.h,
            "b": self.b,
            "epsilon": self.epsilon,
            "b_mode": self.b_mode.value,
            "n_second_stage": int(self.sample.size),
            "n_endpoint": int(self.ends.size),
            "n_first_stage_failed": self.n_first_stage_failed,
            "n_dropped": int(dropped.sum()),
            "near_frontier": {str(g): c for g, c in self.fi.counts().items()},
        }
        return QCurve(
            grid=self.grid.copy(), values=vals, y_low=self.y_low, y_high=self.y_high,
            target=self.target, dropped=dropped, b=self.b, info=info,
        )

    def scatter(self) -> tuple[np.ndarray, np.ndarray]:
        """(generated regressor, response) of the second-stage sample; the points the curve smooths."""
        return self.gtilde_values(), self._response()


def gtilde(ds: Dataset, d: int, x, kernel: KernelSpec, h: float, multipliers=None,
           fi: FrontierInfo | None = None) -> float:
    """Group-``d`` mean extrapolated to ``x`` from its nearest group-``d`` unit.

    The local linear fit is taken at the neighbour and moved to ``x`` along the
    fitted gradient. ``fi`` is accepted for symmetry with the batch estimator
    but the neighbour is always recomputed for an arbitrary ``x``.
    """
    x = np.asarray(x, dtype=float).ravel()
    rows = np.flatnonzero(ds.d == d)
    j, _ = _nn_into(x[None, :], ds.x[rows])
    xn = ds.x[rows[j[0]]]
    fit = LocalLinear.for_group(ds, d, kernel, h).fit_one(xn, multipliers)
    return float(fit.value + fit.gradient @ (x - xn))


def estimate_q(ds: Dataset, fi: FrontierInfo | None, d: int, kernel="uniform",
               bw: BandwidthConfig | None = None, grid_size: int = DEFAULT_GRID_SIZE,
               multipliers=None, **kw) -> QCurve:
    """Estimate ``q_{1-d}``; ``bw`` fixes h, b and epsilon (otherwise defaults apply)."""
    if bw is not None:
        kw.setdefault("h", bw.h)
        kw.setdefault("b", bw.b)
        kw.setdefault("epsilon", bw.epsilon)
    est = QEstimator(ds, d, kernel, grid_size=grid_size, fi=fi, **kw)
    return est.curve(multipliers)


def estimate_both(ds: Dataset, kernel="uniform", fi=None, **kw) -> tuple[CurvePair, dict]:
    """Both curves with default bandwidths; returns the curves and their estimators."""
    fi = cross_nn(ds) if fi is None else fi
    ests = {d: QEstimator(ds, d, kernel, fi=fi, **kw) for d in (1, 0)}
    return CurvePair(q0=ests[1].curve(), q1=ests[0].curve()), ests


def _is_discrete(cols: np.ndarray) -> bool:
    return all(np.unique(cols[:, j]).size <= DISCRETE_MAX_LEVELS for j in range(cols.shape[1]))


def estimate_q_conditional(ds: Dataset, fi: FrontierInfo | None, d: int, strata_cols,
                           kernel="uniform", bw: BandwidthConfig | None = None,
                           grid_size: int = DEFAULT_GRID_SIZE, strata_points=None,
                           multipliers=None, discrete: bool | None = None, **kw) -> dict:
    """Stratum-specific curves ``q_{1-d}(y, x2)`` for the covariate subset ``strata_cols``.

    Discrete strata (few distinct values) are handled by running the pooled
    estimator separately within each stratum. Continuous strata use a local
    linear regression of the response on ``(gtilde, x2)`` with kernel argument
    ``(|gtilde - y| + ||x2_i - x2||) / b``.

    Returns a dict keyed by the stratum point (a tuple). Grid points without
    local support are left NaN and flagged in ``dropped``; nothing raises for
    an empty stratum.
    """
    cols = [ds.column(c) if isinstance(c, str) else int(c) for c in strata_cols]
    if not cols or len(cols) >= ds.k:
        raise ValueError("strata columns must be a proper nonempty subset of the covariates")
    if ds.k - len(cols) < 2:
        warnings.warn("fewer than two covariates remain outside the strata", stacklevel=2)
    kernel = get_kernel(kernel)
    if bw is not None:
        kw.setdefault("h", bw.h)
        kw.setdefault("b", bw.b)
        kw.setdefault("epsilon", bw.epsilon)
    fi = cross_nn(ds) if fi is None else fi
    x2 = ds.x[:, cols]
    if discrete is None:
        discrete = _is_discrete(x2)
    pooled = QEstimator(ds, d, kernel, grid_size=grid_size, fi=fi, **kw)
    if strata_points is None:
        if discrete:
            strata_points = np.unique(x2[pooled.sample], axis=0)
        else:
            strata_points = np.quantile(x2[pooled.sample], [0.25, 0.5, 0.75], axis=0)
    strata_points = np.atleast_2d(np.asarray(strata_points, dtype=float))
    if strata_points.shape[1] != len(cols):
        strata_points = strata_points.T
    out = {}
    for pt in strata_points:
        key = tuple(float(v) for v in pt)
        if discrete:
            mask = np.all(x2 == pt, axis=1)
            try:
                # b=None cross-validates within the stratum
                est = QEstimator(ds, d, kernel, grid_size=grid_size, fi=fi, restrict=mask, **kw)
                out[key] = est.curve(multipliers, strict=False)
            except (NoFrontierUnits, EstimationError) as exc:
                out[key] = _empty_curve(pooled, exc)
        else:
            out[key] = _continuous_stratum_curve(pooled, x2, pt, multipliers)
    return out


def _empty_curve(pooled: QEstimator, exc: Exception) -> QCurve:
    n = len(pooled.grid)
    errors = [InsufficientSupport(float(y), 0) for y in pooled.grid]
    return QCurve(grid=pooled.grid.copy(), values=np.full(n, np.nan), y_low=pooled.y_low,
                  y_high=pooled.y_high, target=pooled.target, dropped=np.ones(n, bool),
                  b=pooled.b, info={"error": str(exc), "errors": errors})


def _continuous_stratum_curve(pooled: QEstimator, x2: np.ndarray, pt, multipliers) -> QCurve:
    r = pooled.gtilde_values(multipliers)
    resp = pooled._response(multipliers)
    ok = np.isfinite(r) & np.isfinite(resp)
    rows = pooled.sample[ok]
    r, resp = r[ok], resp[ok]
    z2 = x2[rows] - pt
    dist2 = np.sqrt(np.sum(z2 * z2, axis=1))
    mult = np.ones(rows.size) if multipliers is None else np.asarray(multipliers)[rows]
    grid = pooled.grid
    b = pooled.b
    u = (np.abs(r[None, :] - grid[:, None]) + dist2[None, :]) / b
    w = kernel_weights(pooled.kernel, u) * mult[None, :]
    p = 2 + z2.shape[1]
    design = np.empty((len(grid), rows.size, p))
    design[:, :, 0] = 1.0
    design[:, :, 1] = (r[None, :] - grid[:, None]) / b
    design[:, :, 2:] = z2[None, :, :] / b
    A = np.einsum("gi,gia,gib->gab", w, design, design)
    rhs = np.einsum("gi,gia,i->ga", w, design, resp)
    eff = np.sum(w > 0, axis=1)
    vals = np.full(len(grid), np.nan)
    errors = []
    for g in range(len(grid)):
        if eff[g] < p:
            errors.append(InsufficientSupport((float(grid[g]), *map(float, pt)), int(eff[g])))
            continue
        Ag = A[g]
        floor = 1e-10 * np.trace(Ag)
        if np.linalg.eigvalsh(Ag)[0] < floor:
            Ag = Ag + floor * np.eye(p)
        vals[g] = np.linalg.solve(Ag, rhs[g])[0]
    return QCurve(grid=grid.copy(), values=vals, y_low=pooled.y_low, y_high=pooled.y_high,
                  target=pooled.target, b=b,
                  info={"stratum": [float(v) for v in pt], "errors": errors})


def cate_at(ds: Dataset, curves: CurvePair, x0, d0: int, kernel="uniform", h: float | None = None,
            fit_value: float | None = None) -> CateEstimate:
    """Impute the missing conditional mean at ``x0`` (in region ``d0``) and form the CATE.

    ``fit_value`` is the own-group fit at ``x0``; it is computed with
    bandwidth ``h`` when not supplied. Outside the opposing curve's domain the
    effect is not identified: ``s = 0`` and ``tau`` is ``None``.
    """
    x0 = np.asarray(x0, dtype=float).ravel()
    if fit_value is None:
        if h is None:
            h = rule_of_thumb_h(int(np.sum(ds.d == d0)))
        try:
            fit_value = LocalLinear.for_group(ds, d0, kernel, h).fit_one(x0).value
        except InsufficientSupport:
            return CateEstimate(x0, None, 0, None, None)
    curve = curves.opposing(d0)
    if not bool(curve.in_domain(fit_value)):
        return CateEstimate(x0, None, 0, None, None)
    other = curve(fit_value)
    if not np.isfinite(other):
        return CateEstimate(x0, None, 0, None, None)
    ey1, ey0 = (fit_value, other) if d0 == 1 else (other, fit_value)
    return CateEstimate(x0, float(ey1 - ey0), 1, float(ey1), float(ey0))


class OwnFits:
    """Own-group fits ``ghat_{D_i}(X_i)`` at every unit (or at given points), reusable under multipliers."""

    def __init__(self, ds: Dataset, kernel="uniform", h: dict | None = None, points=None, regions=None):
        self.ds = ds
        self.kernel = get_kernel(kernel)
        if h is None:
            h = {g: rule_of_thumb_h(int(np.sum(ds.d == g))) for g in (0, 1)}
        self.h = dict(h)
        self.points = ds.x if points is None else np.atleast_2d(np.asarray(points, dtype=float))
        self.regions = ds.d if regions is None else np.asarray(regions)
        self._parts = {}
        for g in (0, 1):
            rows = np.flatnonzero(self.regions == g)
            sm = LocalLinear.for_group(ds, g, self.kernel, self.h[g])
            self._parts[g] = (rows, sm, sm.kernel_pairs(self.points[rows]))

    def values(self, multipliers=None) -> np.ndarray:
        out = np.full(len(self.points), np.nan)
        for g, (rows, sm, pairs) in self._parts.items():
            fits = sm.fit_pairs(pairs, self.points[rows], multipliers)
            out[rows] = np.where(fits.ok, fits.values, np.nan)
        return out
