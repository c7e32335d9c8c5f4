"""Synthetic sharp-RDD samples with closed-form conditional means.

Every generator returns the sample together with a :class:`SyntheticTruth`
that knows both conditional mean potential outcomes, the CATE, the transfer
curves and the treatment rule, so estimators can be checked against exact
targets.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dataset import Dataset
from .errors import InvalidCovariance


@dataclass(frozen=True)
class SyntheticTruth:
    name: str
    params: dict
    mu1: Callable
    mu0: Callable
    rule: Callable
    q0: Callable | None = None
    q1: Callable | None = None
    q0_domain: tuple | None = None
    q1_domain: tuple | None = None
    forms: dict = field(default_factory=dict)

    def tau(self, x):
        return self.mu1(x) - self.mu0(x)

    def to_json(self) -> dict:
        return {
            "dgp": self.name,
            "params": self.params,
            "forms": self.forms,
            "q0_domain": list(self.q0_domain) if self.q0_domain else None,
            "q1_domain": list(self.q1_domain) if self.q1_domain else None,
        }


def _x(x):
    x = np.asarray(x, dtype=float)
    return x[None, :] if x.ndim == 1 else x


def _squeeze(x, out):
    return float(out[0]) if np.asarray(x).ndim == 1 else out


def _sample(n, x, rule, mu1, mu0, noise_sd, rng, names):
    d = rule(x).astype(int)
    mean = np.where(d == 1, mu1(x), mu0(x))
    y = mean + noise_sd * rng.standard_normal(n)
    return Dataset(y, d, x, names)


# ---------------------------------------------------------------------------
# linear oracle


def gen_linear_oracle(n: int, c: float = 0.5, noise_sd: float = 0.1, seed=None,
                      offset: float = 0.0) -> tuple[Dataset, SyntheticTruth]:
    """X uniform on the unit square, treated iff x1 <= 0.5.

    E[Y(1)|X] = x1 + x2 and E[Y(0)|X] = c (x1 + x2) + offset, so on the
    frontier q0(y) = c y + offset over [0.5, 1.5]. ``c < 0`` breaks
    comonotonicity; ``c = 1`` with ``offset = -delta`` gives a constant effect.
    """
    if c == 0:
        raise ValueError("c must be nonzero")
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(n, 2))

    def rule(x):
        return _x(x)[:, 0] <= 0.5

    def mu1(x):
        z = _x(x)
        return _squeeze(x, z[:, 0] + z[:, 1])

    def mu0(x):
        z = _x(x)
        return _squeeze(x, c * (z[:, 0] + z[:, 1]) + offset)

    dom0 = (0.5, 1.5)
    dom1 = tuple(sorted((c * 0.5 + offset, c * 1.5 + offset)))
    truth = SyntheticTruth(
        name="linear",
        params={"c": c, "noise_sd": noise_sd, "offset": offset},
        mu1=mu1,
        mu0=mu0,
        rule=lambda x: _squeeze(x, rule(x)),
        q0=lambda y: c * np.asarray(y) + offset,
        q1=lambda y: (np.asarray(y) - offset) / c,
        q0_domain=dom0,
        q1_domain=dom1,
        forms={"mu1": "x1 + x2", "mu0": "c*(x1 + x2) + offset", "rule": "x1 <= 0.5"},
    )
    ds = _sample(n, x, rule, mu1, mu0, noise_sd, rng, ("x1", "x2"))
    return ds, truth


def gen_stratified_linear(n: int, slopes=(0.5, 0.8), noise_sd: float = 0.1,
                          seed=None) -> tuple[Dataset, SyntheticTruth]:
    """Linear oracle with a binary third covariate ``x3`` that changes the untreated slope."""
    rng = np.random.default_rng(seed)
    x = np.column_stack([rng.uniform(size=(n, 2)), rng.integers(0, 2, n)]).astype(float)
    s = np.asarray(slopes, dtype=float)

    def rule(x):
        return _x(x)[:, 0] <= 0.5

    def mu1(x):
        z = _x(x)
        return _squeeze(x, z[:, 0] + z[:, 1])

    def mu0(x):
        z = _x(x)
        return _squeeze(x, s[z[:, 2].astype(int)] * (z[:, 0] + z[:, 1]))

    truth = SyntheticTruth(
        name="stratified",
        params={"slopes": list(map(float, s)), "noise_sd": noise_sd},
        mu1=mu1, mu0=mu0, rule=lambda x: _squeeze(x, rule(x)),
        q0_domain=(0.5, 1.5),
        forms={"mu1": "x1 + x2", "mu0": "slopes[x3]*(x1 + x2)", "rule": "x1 <= 0.5"},
    )
    return _sample(n, x, rule, mu1, mu0, noise_sd, rng, ("x1", "x2", "x3")), truth


# ---------------------------------------------------------------------------
# expository design: treated iff 0.4 x1 + x2 <= 0.7 on the unit square

EXPO_A, EXPO_C = 0.4, 0.7
EXPO_INDEX = (1.0, 0.25)  # mean functions depend on x1 + 0.25 x2
EXPO_TREATED_AREA = EXPO_C - EXPO_A / 2.0


def _expo_index(x):
    z = _x(x)
    return EXPO_INDEX[0] * z[:, 0] + EXPO_INDEX[1] * z[:, 1]


def _expo_mu0_of_index(t):
    return t + 0.2 * t * t


def _expo_mu1_of_index(t):
    return 0.4 + 0.8 * t


def _expo_frontier_index_range():
    # along 0.4 x1 + x2 = 0.7 with x1 in [0, 1], x2 stays in [0.3, 0.7]
    ends = np.array([[0.0, EXPO_C], [1.0, EXPO_C - EXPO_A]])
    t = _expo_index(ends)
    return float(t.min()), float(t.max())


def gen_expository(n: int, seed=None, noise_sd: float = 0.1) -> tuple[Dataset, SyntheticTruth]:
    """Two scores uniform on the unit square, treated iff 0.4 x1 + x2 <= 0.7.

    Both conditional means are increasing functions of the index
    t = x1 + 0.25 x2, whose contours cut the frontier at an angle:
    E[Y(0)|X] = t + 0.2 t^2 and E[Y(1)|X] = 0.4 + 0.8 t. The frontier covers
    t in [0.175, 1.075], so treated points with t < 0.175 and untreated
    points with t > 1.075 cannot be extrapolated to.
    """
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(n, 2))

    def rule(x):
        z = _x(x)
        return EXPO_A * z[:, 0] + z[:, 1] <= EXPO_C

    def mu1(x):
        return _squeeze(x, _expo_mu1_of_index(_expo_index(x)))

    def mu0(x):
        return _squeeze(x, _expo_mu0_of_index(_expo_index(x)))

    t_lo, t_hi = _expo_frontier_index_range()

    def q0(y):
        t = (np.asarray(y, dtype=float) - 0.4) / 0.8
        return _expo_mu0_of_index(t)

    def q1(y):
        t = (-1.0 + np.sqrt(1.0 + 0.8 * np.asarray(y, dtype=float))) / 0.4
        return _expo_mu1_of_index(t)

    truth = SyntheticTruth(
        name="expository",
        params={"noise_sd": noise_sd, "rule": [EXPO_A, EXPO_C], "index": list(EXPO_INDEX)},
        mu1=mu1, mu0=mu0, rule=lambda x: _squeeze(x, rule(x)),
        q0=q0, q1=q1,
        q0_domain=(float(_expo_mu1_of_index(t_lo)), float(_expo_mu1_of_index(t_hi))),
        q1_domain=(float(_expo_mu0_of_index(t_lo)), float(_expo_mu0_of_index(t_hi))),
        forms={"index": "t = x1 + 0.25*x2", "mu1": "0.4 + 0.8*t", "mu0": "t + 0.2*t**2",
               "rule": "0.4*x1 + x2 <= 0.7"},
    )
    return _sample(n, x, rule, mu1, mu0, noise_sd, rng, ("x1", "x2")), truth


# ---------------------------------------------------------------------------
# skill-formation model


@dataclass(frozen=True)
class SkillModelParams:
    """Latent reading/math skills observed through noisy test scores.

    Skills are bivariate normal; each score adds independent normal noise.
    Potential later skill is ``a_d + b_d * xi_m + eta`` (strictly increasing in
    math skill for ``b_d > 0``) and the later score adds further noise.
    ``g0``/``g1`` hold ``(a_d, b_d)``.
    """

    mu_r: float = 0.0
    mu_m: float = 0.0
    sigma_r2: float = 1.0
    sigma_m2: float = 1.0
    sigma_rm: float = 0.6
    omega_r2: float = 0.5
    omega_m2: float = 0.5
    g0: tuple = (0.0, 1.0)
    g1: tuple = (0.5, 0.6)
    eta_sd: float = 0.1
    score_sd: float = 0.1

    def validate(self):
        det = self.sigma_r2 * self.sigma_m2 - self.sigma_rm ** 2
        if not (self.sigma_r2 > 0 and self.sigma_m2 > 0 and det > 0):
            raise InvalidCovariance("skill covariance must be positive definite")
        if not (self.omega_r2 > 0 and self.omega_m2 > 0):
            raise InvalidCovariance("score noise variances must be positive")
        if not (self.g0[1] > 0 and self.g1[1] > 0):
            raise InvalidCovariance("skill maps must be strictly increasing (b_d > 0)")

    @property
    def gamma(self) -> float:
        """Weight on the reading score in the index x_m + gamma * x_r."""
        num = self.sigma_rm * self.omega_m2
        den = (self.sigma_m2 * self.omega_r2 + self.sigma_m2 * self.sigma_r2
               - self.sigma_rm ** 2)
        return num / den

    @property
    def score_cov(self) -> np.ndarray:
        """Covariance of (x_r, x_m)."""
        return np.array([[self.sigma_r2 + self.omega_r2, self.sigma_rm],
                         [self.sigma_rm, self.sigma_m2 + self.omega_m2]])

    def posterior_coef(self) -> tuple[float, np.ndarray]:
        """E[xi_m | x] = const + coef @ x."""
        cov_xi_x = np.array([self.sigma_rm, self.sigma_m2])
        coef = np.linalg.solve(self.score_cov, cov_xi_x)
        const = self.mu_m - coef @ np.array([self.mu_r, self.mu_m])
        return float(const), coef


def either_below(cut_r: float = -0.5, cut_m: float = -0.5):
    """Treated iff either score falls at or below its cutoff (columns: reading, math)."""
    def rule(x):
        z = _x(x)
        return (z[:, 0] <= cut_r) | (z[:, 1] <= cut_m)
    rule.form = f"x_r <= {cut_r} or x_m <= {cut_m}"
    return rule


def gen_skill_model(n: int, params: SkillModelParams | None = None, rule=None,
                    seed=None) -> tuple[Dataset, SyntheticTruth]:
    """Scores ``(x_r, x_m)`` and a later math score under the skill-formation model.

    Conditional means are affine in E[xi_m | scores], itself a function of
    ``x_m + gamma * x_r``, so the two potential-outcome means are comonotone.
    """
    params = SkillModelParams() if params is None else params
    params.validate()
    rule = either_below() if rule is None else rule
    rng = np.random.default_rng(seed)
    mean = np.array([params.mu_r, params.mu_m])
    cov = np.array([[params.sigma_r2, params.sigma_rm], [params.sigma_rm, params.sigma_m2]])
    xi = rng.multivariate_normal(mean, cov, size=n, method="cholesky")
    noise = rng.standard_normal((n, 2)) * np.sqrt([params.omega_r2, params.omega_m2])
    x = xi + noise
    d = np.asarray(rule(x), dtype=bool)
    a, b = np.where(d, params.g1[0], params.g0[0]), np.where(d, params.g1[1], params.g0[1])
    zeta = a + b * xi[:, 1] + params.eta_sd * rng.standard_normal(n)
    y = zeta + params.score_sd * rng.standard_normal(n)
    const, coef = params.posterior_coef()

    def post(x):
        return const + _x(x) @ coef

    def mu1(x):
        return _squeeze(x, params.g1[0] + params.g1[1] * post(x))

    def mu0(x):
        return _squeeze(x, params.g0[0] + params.g0[1] * post(x))

    (a0, b0), (a1, b1) = params.g0, params.g1
    truth = SyntheticTruth(
        name="skill",
        params={k: (list(v) if isinstance(v, tuple) else v) for k, v in params.__dict__.items()}
        | {"gamma": params.gamma},
        mu1=mu1, mu0=mu0, rule=lambda x: _squeeze(x, np.asarray(rule(x))),
        q0=lambda y: a0 + b0 * (np.asarray(y) - a1) / b1,
        q1=lambda y: a1 + b1 * (np.asarray(y) - a0) / b0,
        forms={"index": "x_m + gamma*x_r", "mu_d": "a_d + b_d*E[xi_m|x]",
               "rule": getattr(rule, "form", "custom")},
    )
    return Dataset(y, d.astype(int), x, ("x_r", "x_m")), truth


def gen_anti(n: int, seed=None, noise_sd: float = 0.1):
    """Linear oracle with c = -0.5: untreated mean falls where the treated mean rises."""
    return gen_linear_oracle(n, c=-0.5, noise_sd=noise_sd, seed=seed)


GENERATORS = {
    "expository": lambda n, seed, **kw: gen_expository(n, seed=seed, **kw),
    "skill": lambda n, seed, **kw: gen_skill_model(n, seed=seed, **kw),
    "linear": lambda n, seed, **kw: gen_linear_oracle(n, seed=seed, **kw),
    "anti": lambda n, seed, **kw: gen_anti(n, seed=seed, **kw),
}
