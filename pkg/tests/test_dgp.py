import json

import numpy as np
import pytest

from comono_rdd.dgp import (
    EXPO_TREATED_AREA,
    GENERATORS,
    SkillModelParams,
    gen_anti,
    gen_expository,
    gen_linear_oracle,
    gen_skill_model,
    gen_stratified_linear,
)
from comono_rdd.errors import InvalidCovariance


def test_expository_rule_examples():
    _, truth = gen_expository(10, seed=0)
    assert truth.rule(np.array([0.2, 0.3]))
    assert not truth.rule(np.array([0.9, 0.9]))


def test_expository_treated_area():
    # region 0.4 x1 + x2 <= 0.7 on the unit square: a trapezoid of area 0.7 - 0.2
    assert EXPO_TREATED_AREA == pytest.approx(0.5)
    ds, _ = gen_expository(100000, seed=1)
    assert ds.d.mean() == pytest.approx(0.5, abs=0.01)


def test_expository_transfer_curves_consistent():
    _, truth = gen_expository(10, seed=0)
    t = np.linspace(0.2, 1.0, 9)
    # points on the frontier sharing the index t: x2 = (0.7 - 0.4 x1)
    x1 = (t - 0.175) / 0.9
    x = np.column_stack([x1, 0.7 - 0.4 * x1])
    assert np.allclose(truth.q0(truth.mu1(x)), truth.mu0(x))
    assert np.allclose(truth.q1(truth.mu0(x)), truth.mu1(x))


def test_gamma_formula():
    p = SkillModelParams(sigma_rm=0.0)
    assert p.gamma == 0.0
    p = SkillModelParams(sigma_rm=0.3, sigma_r2=1.0, sigma_m2=2.0, omega_r2=0.5, omega_m2=0.4)
    assert p.gamma == pytest.approx(0.3 * 0.4 / (2.0 * 0.5 + 2.0 * 1.0 - 0.09))
    assert p.gamma > 0
    assert SkillModelParams(sigma_rm=-0.3).gamma < 0


def test_zero_covariance_means_depend_on_math_only():
    _, truth = gen_skill_model(10, SkillModelParams(sigma_rm=0.0), seed=0)
    a = truth.mu0(np.array([-1.0, 0.3]))
    b = truth.mu0(np.array([2.0, 0.3]))
    assert a == pytest.approx(b, abs=1e-12)


def test_skill_means_follow_index():
    p = SkillModelParams()
    _, truth = gen_skill_model(10, p, seed=0)
    const, coef = p.posterior_coef()
    # coefficient ratio is the index weight
    assert coef[0] / coef[1] == pytest.approx(p.gamma, rel=1e-12)
    x = np.random.default_rng(0).normal(size=(50, 2))
    idx = x[:, 1] + p.gamma * x[:, 0]
    order = np.argsort(idx)
    assert np.all(np.diff(truth.mu0(x)[order]) > 0)
    assert np.all(np.diff(truth.mu1(x)[order]) > 0)


@pytest.mark.parametrize("kw", [
    {"sigma_rm": 1.0}, {"sigma_r2": -1.0}, {"omega_r2": 0.0}, {"omega_m2": -0.1}, {"g0": (0.0, -1.0)},
])
def test_invalid_covariance(kw):
    with pytest.raises(InvalidCovariance):
        gen_skill_model(10, SkillModelParams(**kw), seed=0)


def test_score_covariance_converges():
    p = SkillModelParams()
    ds, _ = gen_skill_model(200000, p, seed=3)
    assert np.max(np.abs(np.cov(ds.x.T) - p.score_cov)) <= 0.02


def test_skill_outcome_mean_matches_truth():
    ds, truth = gen_skill_model(200000, seed=4)
    resid = ds.y - np.where(ds.d == 1, truth.mu1(ds.x), truth.mu0(ds.x))
    assert abs(resid.mean()) < 0.01
    # residual is uncorrelated with the scores when the means are right
    assert np.max(np.abs(resid @ (ds.x - ds.x.mean(0)) / ds.n)) < 0.01


@pytest.mark.parametrize("name", sorted(GENERATORS))
def test_tau_identity_and_determinism(name):
    ds1, truth = GENERATORS[name](500, 11)
    ds2, _ = GENERATORS[name](500, 11)
    assert np.array_equal(ds1.x, ds2.x) and np.array_equal(ds1.y, ds2.y)
    assert np.array_equal(ds1.d, ds2.d)
    x = np.random.default_rng(0).uniform(size=(1000, 2))
    assert np.array_equal(truth.tau(x), truth.mu1(x) - truth.mu0(x))
    json.dumps(truth.to_json())
    ds3, _ = GENERATORS[name](500, 12)
    assert not np.array_equal(ds1.y, ds3.y)


def test_linear_oracle_forms():
    _, truth = gen_linear_oracle(10, c=1.0, seed=0)
    x = np.random.default_rng(1).uniform(size=(100, 2))
    assert np.all(truth.tau(x) == 0)
    assert np.array_equal(truth.q0(x[:, 0]), x[:, 0])
    _, truth = gen_linear_oracle(10, c=0.5, seed=0)
    assert truth.q0_domain == (0.5, 1.5)
    assert truth.q0(1.2) == pytest.approx(0.6)
    assert np.allclose(truth.tau(x), 0.5 * x.sum(axis=1))
    with pytest.raises(ValueError):
        gen_linear_oracle(10, c=0.0)


def test_linear_rule_and_noise():
    ds, truth = gen_linear_oracle(50000, seed=2)
    assert np.array_equal(ds.d == 1, ds.x[:, 0] <= 0.5)
    resid = ds.y - np.where(ds.d == 1, truth.mu1(ds.x), truth.mu0(ds.x))
    assert resid.std() == pytest.approx(0.1, rel=0.02)


def test_anti_is_decreasing():
    _, truth = gen_anti(10, seed=0)
    assert truth.params["c"] == -0.5
    assert truth.mu0(np.array([0.6, 0.6])) < truth.mu0(np.array([0.5, 0.5]))


def test_stratified_slopes():
    ds, truth = gen_stratified_linear(1000, slopes=(0.5, 0.8), seed=0)
    assert set(np.unique(ds.x[:, 2])) == {0.0, 1.0}
    assert truth.mu0(np.array([0.5, 0.5, 1.0])) == pytest.approx(0.8)
    assert truth.mu0(np.array([0.5, 0.5, 0.0])) == pytest.approx(0.5)
