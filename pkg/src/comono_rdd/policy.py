"""Counterfactual treatment rules and their plug-in mean effects.

Effects are averaged over units whose conditional mean lies inside the
opposing transfer curve's domain (``S_i = 1``); for the other units the
missing potential outcome is not identified and they are left out.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .dataset import Dataset
from .errors import NoIdentifiedUnits
from .extrapolate import CurvePair


@dataclass(frozen=True)
class PolicySpec:
    """A treatment probability ``p(x, d)`` in [0, 1].

    ``d`` is the factual treatment, passed so rules can be defined relative to
    the factual assignment (in a sharp design it is itself a function of x).
    """

    rule: Callable
    description: str = "custom"

    def __call__(self, x, d) -> np.ndarray:
        p = np.asarray(self.rule(np.asarray(x, dtype=float), np.asarray(d)), dtype=float)
        p = np.broadcast_to(p, np.shape(d)).astype(float)
        if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
            raise ValueError(f"policy {self.description!r} produced probabilities outside [0, 1]")
        return p

    @classmethod
    def factual(cls) -> "PolicySpec":
        return cls(lambda x, d: d.astype(float), "factual")

    @classmethod
    def constant(cls, prob: float) -> "PolicySpec":
        if not 0 <= prob <= 1:
            raise ValueError("probability must lie in [0, 1]")
        return cls(lambda x, d: np.full(len(d), float(prob)), f"p={prob}")

    @classmethod
    def threshold(cls, coefs, cutoff: float, le: bool = True) -> "PolicySpec":
        """Treat iff ``coefs @ x <= cutoff`` (or ``>=`` when ``le`` is false)."""
        a = np.asarray(coefs, dtype=float)

        def rule(x, d):
            s = x @ a
            return (s <= cutoff if le else s >= cutoff).astype(float)

        return cls(rule, f"{a.tolist()}.x {'<=' if le else '>='} {cutoff}")

    @classmethod
    def mixture(cls, lam: float, p1: "PolicySpec", p2: "PolicySpec") -> "PolicySpec":
        return cls(lambda x, d: lam * p1(x, d) + (1 - lam) * p2(x, d),
                   f"{lam}*({p1.description}) + {1 - lam}*({p2.description})")


@dataclass(frozen=True)
class PolicyEffect:
    theta: float
    n_identified: int
    n_affected: float
    net_cost: float
    net_cost_count: float
    lower: float | None = None
    upper: float | None = None


_TERM = re.compile(r"\s*([+-]?)\s*(?:(\d*\.?\d+(?:[eE][+-]?\d+)?)\s*\*?\s*)?([A-Za-z_]\w*)\s*")


def parse_rule(text: str, names: Sequence[str]) -> PolicySpec:
    """Parse ``'0.4*x1 + x2 <= 0.7'``, ``'x1>=0.5'`` or ``'p=0.3'`` into a policy."""
    text = text.strip()
    m = re.fullmatch(r"p\s*=\s*([0-9.eE+-]+)", text)
    if m:
        return PolicySpec.constant(float(m.group(1)))
    m = re.fullmatch(r"(.+?)(<=|>=|<|>)\s*([+-]?[0-9.eE+-]+)", text)
    if not m:
        raise ValueError(f"cannot parse rule {text!r}")
    lhs, op, rhs = m.group(1), m.group(2), float(m.group(3))
    coefs = np.zeros(len(names))
    pos = 0
    while pos < len(lhs):
        t = _TERM.match(lhs, pos)
        if not t or t.end() == pos:
            raise ValueError(f"cannot parse rule {text!r}")
        sign = -1.0 if t.group(1) == "-" else 1.0
        coef = float(t.group(2)) if t.group(2) else 1.0
        name = t.group(3)
        if name not in names:
            raise ValueError(f"unknown covariate {name!r} in rule")
        coefs[list(names).index(name)] += sign * coef
        pos = t.end()
    spec = PolicySpec.threshold(coefs, rhs, le=op in ("<=", "<"))
    return PolicySpec(spec.rule, text)


def s_indicator(ds: Dataset, curves: CurvePair, fits) -> np.ndarray:
    """1 where the unit's own-group fit lies in the opposing curve's closed domain.

    A unit also needs the curve to be evaluable at its fit (retained grid
    points on both sides), otherwise its imputed mean would be undefined.
    """
    fits = np.asarray(fits, dtype=float)
    s = np.zeros(ds.n, dtype=np.int8)
    for d0 in (0, 1):
        rows = np.flatnonzero(ds.d == d0)
        curve = curves.opposing(d0)
        g = fits[rows]
        ok = np.isfinite(g) & curve.in_domain(g)
        ok[ok] &= np.isfinite(curve(g[ok]))
        s[rows] = ok
    return s


def imputed_means(ds: Dataset, curves: CurvePair, fits, s) -> np.ndarray:
    """Imputed opposite potential-outcome mean for units with ``s == 1`` (0 elsewhere)."""
    fits = np.asarray(fits, dtype=float)
    out = np.zeros(ds.n)
    for d0 in (0, 1):
        rows = np.flatnonzero((ds.d == d0) & (np.asarray(s) == 1))
        out[rows] = curves.opposing(d0)(fits[rows])
    return out


def _effect(d, y, p, s, imputed, weights=None) -> PolicyEffect:
    s = np.asarray(s) == 1
    if not s.any():
        raise NoIdentifiedUnits("no unit has an identified counterfactual mean (sum S = 0)")
    w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=float)
    ds_, ys, ps, imp, ws = d[s], y[s], p[s], imputed[s], w[s]
    switch_on = np.where(ds_ == 0, ps, 0.0)
    switch_off = np.where(ds_ == 1, 1.0 - ps, 0.0)
    moved = switch_on + switch_off
    # units the policy leaves alone contribute an exact zero, even if their
    # imputed mean is undefined
    contrib = np.where(moved > 0, moved * (imp - ys), 0.0)
    total = float(np.sum(ws))
    theta = float(np.sum(ws * contrib)) / total
    n_aff = float(np.sum(switch_on + switch_off))
    net = float(np.sum(switch_on - switch_off))
    return PolicyEffect(theta=theta, n_identified=int(s.sum()), n_affected=n_aff,
                        net_cost=net / int(s.sum()), net_cost_count=net)


def policy_effect(ds: Dataset, spec: PolicySpec, curves: CurvePair, fits, s,
                  x_raw=None, multipliers=None) -> PolicyEffect:
    """Plug-in mean effect of moving from the factual assignment to ``spec``.

    ``x_raw`` are the covariates the rule is written in (defaults to
    ``ds.x``). With ``multipliers`` the average is multiplier-weighted, as in
    a bootstrap draw.
    """
    x = ds.x if x_raw is None else np.asarray(x_raw, dtype=float)
    p = spec(x, ds.d)
    imputed = imputed_means(ds, curves, fits, s)
    return _effect(ds.d, ds.y, p, s, imputed, multipliers)


def sweep_policy(axis: int, cutoff: float, direction: int = 1, combine: str = "union") -> PolicySpec:
    """Single-covariate threshold rule used by :func:`threshold_sweep`.

    ``direction=+1`` treats ``x[axis] <= cutoff``, ``-1`` treats ``x[axis] >= cutoff``.
    ``combine='union'`` keeps every factually treated unit treated (the
    threshold widens the existing rule); ``'replace'`` uses the threshold alone.
    """
    if direction not in (1, -1):
        raise ValueError("direction must be +1 or -1")
    if combine not in ("union", "replace"):
        raise ValueError("combine must be 'union' or 'replace'")

    def rule(x, d):
        hit = (x[:, axis] <= cutoff) if direction == 1 else (x[:, axis] >= cutoff)
        if combine == "union":
            hit = hit | (d == 1)
        return hit.astype(float)

    op = "<=" if direction == 1 else ">="
    return PolicySpec(rule, f"x[{axis}] {op} {cutoff} ({combine})")


def threshold_sweep(ds: Dataset, axis: int, cutoffs, direction: int, curves: CurvePair, fits,
                    s=None, x_raw=None, combine: str = "union", multipliers=None) -> list:
    """Effect of each threshold rule in ``cutoffs``.

    Returns ``(cutoff, PolicyEffect | NoIdentifiedUnits)`` pairs; a failing
    cutoff is recorded and the sweep continues. ``multipliers`` weight the
    averages as in :func:`policy_effect`.
    """
    cutoffs = np.asarray(list(cutoffs), dtype=float)
    if np.any(np.diff(cutoffs) < 0):
        raise ValueError("cutoffs must be sorted")
    if s is None:
        s = s_indicator(ds, curves, fits)
    x = ds.x if x_raw is None else np.asarray(x_raw, dtype=float)
    imputed = imputed_means(ds, curves, fits, s)
    out = []
    for c in cutoffs:
        p = sweep_policy(axis, c, direction, combine)(x, ds.d)
        try:
            out.append((float(c), _effect(ds.d, ds.y, p, s, imputed, multipliers)))
        except NoIdentifiedUnits as exc:
            out.append((float(c), exc))
    return out
