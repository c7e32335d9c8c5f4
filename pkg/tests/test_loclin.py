import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from comono_rdd.dataset import Dataset
from comono_rdd.errors import AllCandidatesFailed, InsufficientSupport
from comono_rdd.kernels import KernelSpec, kernel_weights
from comono_rdd.loclin import (
    EXACT_PAIRS_MAX,
    STATUS_RIDGED,
    BandwidthConfig,
    LocalLinear,
    cv_bandwidth,
    fit_at,
    log_grid,
    rule_of_thumb_h,
    select_min_score,
)

from conftest import dense_wls


def _affine_ds(n, seed, k=2):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(n, k))
    coef = np.array([2.0, -1.0, 0.5][:k])
    y = 1.0 + x @ coef
    d = np.zeros(n, int)
    d[: n // 2] = 1
    return Dataset(y, d, x), coef


@pytest.mark.parametrize("kernel", list(KernelSpec))
def test_affine_reproduction(kernel):
    ds, coef = _affine_ds(400, 0)
    rng = np.random.default_rng(1)
    sm = LocalLinear.for_group(ds, 1, kernel, 0.35)
    pts = rng.uniform(0.15, 0.85, size=(100, 2))
    fits = sm.fit(pts)
    assert fits.ok.all()
    assert np.max(np.abs(fits.values - (1.0 + pts @ coef))) < 1e-9
    assert np.max(np.abs(fits.gradients - coef)) < 1e-9


def test_affine_reproduction_hand_example():
    # y = 1 + 2 x1 - x2 on 50 scattered points
    rng = np.random.default_rng(3)
    x = rng.uniform(-1, 1, size=(50, 2))
    ds = Dataset(1 + 2 * x[:, 0] - x[:, 1], (np.arange(50) < 49).astype(int), x)
    f = fit_at(ds, 1, np.array([0.1, -0.2]), KernelSpec.UNIFORM, 1.0)
    assert f.value == pytest.approx(1 + 0.2 + 0.2, abs=1e-9)
    assert np.allclose(f.gradient, [2, -1], atol=1e-9)
    assert f.effective_n >= 3 and not f.ridged


@pytest.mark.parametrize("kernel", list(KernelSpec))
def test_sparse_path_matches_exact(kernel):
    # enough pairs to leave the exact accumulation path
    rng = np.random.default_rng(5)
    n = 6000
    x = rng.normal(size=(n, 2))
    y = np.sin(x[:, 0]) + x[:, 1] ** 2 + 0.1 * rng.normal(size=n)
    sm = LocalLinear(x, y, kernel, 0.5)
    pts = x[:3000]
    pairs = sm.kernel_pairs(pts)
    assert len(pairs.rows) > EXACT_PAIRS_MAX
    mult = rng.exponential(size=n)
    A1, r1 = sm._moments_exact(pairs, pts, mult, y)
    A2, r2 = sm._moments_sparse(pairs, pts, mult, y)
    ok = np.bincount(pairs.rows, minlength=len(pts)) >= 10
    b1 = np.linalg.solve(A1[ok], r1[ok][..., None])
    b2 = np.linalg.solve(A2[ok], r2[ok][..., None])
    assert np.max(np.abs(b1 - b2)) < 1e-10
    # affine data through the sparse path
    ya = 1.0 + 2 * x[:, 0] - x[:, 1]
    f = LocalLinear(x, ya, kernel, 0.5).fit(pts)
    assert np.nanmax(np.abs(f.values - (1 + 2 * pts[:, 0] - pts[:, 1]))) < 1e-9


def test_five_point_hand_oracle():
    # symmetric cross: intercept is the mean, slopes are the centred contrasts
    x = np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    y = np.array([1.5, 3.0, -1.0, 2.0, 0.0])
    ds = Dataset(np.r_[y, 9.0], np.r_[np.ones(5), 0].astype(int), np.vstack([x, [5.0, 5.0]]))
    f = fit_at(ds, 1, np.zeros(2), KernelSpec.UNIFORM, 1.0)
    assert f.value == pytest.approx(1.1, abs=1e-12)
    assert np.allclose(f.gradient, [2.0, 1.0], atol=1e-12)
    v, g = dense_wls(x, y, np.zeros(2), np.full(5, 0.5))
    assert f.value == pytest.approx(v, abs=1e-12) and np.allclose(f.gradient, g, atol=1e-12)


def test_large_h_is_global_ols():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(60, 2))
    y = rng.normal(size=60)
    ds = Dataset(y, np.ones(60, int) * (np.arange(60) > 0), x)
    rows = np.arange(1, 60)
    x0 = np.array([0.3, -0.1])
    f = fit_at(ds, 1, x0, KernelSpec.UNIFORM, 100.0)
    X = np.column_stack([np.ones(59), x[rows]])
    beta = np.linalg.lstsq(X, y[rows], rcond=None)[0]
    assert f.value == pytest.approx(beta[0] + x0 @ beta[1:], abs=1e-9)
    assert np.allclose(f.gradient, beta[1:], atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0), st.sampled_from(list(KernelSpec)))
def test_multiplier_neutrality(seed, c, kernel):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(80, 2))
    y = np.cos(3 * x[:, 0]) + rng.normal(size=80)
    sm = LocalLinear(x, y, kernel, 0.4)
    pts = rng.uniform(0.2, 0.8, size=(5, 2))
    a = sm.fit(pts)
    b = sm.fit(pts, multipliers=np.full(80, c))
    assert np.allclose(a.values, b.values, rtol=0, atol=1e-10)
    assert np.allclose(a.gradients, b.gradients, rtol=0, atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([KernelSpec.UNIFORM, KernelSpec.TRIANGULAR,
                                                KernelSpec.EPANECHNIKOV]))
def test_locality(seed, kernel):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(120, 2))
    y = rng.normal(size=120)
    x0 = np.array([0.5, 0.5])
    h = 0.3
    far = np.linalg.norm(x - x0, axis=1) > h
    y2 = y.copy()
    y2[far] += rng.normal(size=far.sum()) * 100
    x2 = x.copy()
    x2[far] += 5.0  # move far points even further away
    a = LocalLinear(x, y, kernel, h).fit(x0[None])
    b = LocalLinear(x2, y2, kernel, h).fit(x0[None])
    if a.ok[0]:
        assert a.values[0] == b.values[0] and np.array_equal(a.gradients, b.gradients)


def test_small_instance_oracle_uniform():
    rng = np.random.default_rng(11)
    for rep in range(20):
        n = int(rng.integers(10, 31))
        x = rng.uniform(size=(n, 2))
        y = rng.normal(size=n)
        d = (rng.uniform(size=n) < 0.6).astype(int)
        d[0], d[1] = 0, 1
        ds = Dataset(y, d, x)
        x0 = rng.uniform(0.3, 0.7, size=2)
        idx = np.flatnonzero(d == 1)
        w = 0.5 * (np.linalg.norm(x[idx] - x0, axis=1) <= 0.6)
        if (w > 0).sum() < 4:
            continue
        v, g = dense_wls(x[idx], y[idx], x0, w)
        f = fit_at(ds, 1, x0, KernelSpec.UNIFORM, 0.6)
        assert abs(f.value - v) < 1e-9 and np.max(np.abs(f.gradient - g)) < 1e-9


def test_gradient_against_finite_differences():
    rng = np.random.default_rng(4)
    n = 10_000
    x = rng.uniform(-1, 1, size=(n, 2))
    y = np.sin(x[:, 0]) + x[:, 1] ** 2 + 0.1 * rng.normal(size=n)
    h = 0.25
    sm = LocalLinear(x, y, KernelSpec.EPANECHNIKOV, h)
    delta = 1e-3
    for x0 in ([0.1, 0.2], [-0.3, 0.4], [0.5, -0.5]):
        x0 = np.array(x0)
        pts = np.array([x0, x0 + [delta, 0], x0 - [delta, 0], x0 + [0, delta], x0 - [0, delta]])
        f = sm.fit(pts)
        fd = np.array([f.values[1] - f.values[2], f.values[3] - f.values[4]]) / (2 * delta)
        assert np.max(np.abs(f.gradients[0] - fd)) <= h + 5e-3
        assert np.max(np.abs(f.gradients[0] - [np.cos(x0[0]), 2 * x0[1]])) <= h + 5e-3


def test_insufficient_support_and_ridge():
    ds = Dataset([0.0, 1.0, 2.0, 3.0], [1, 1, 1, 0], [[0, 0], [1, 1], [2, 2], [9, 9]])
    with pytest.raises(InsufficientSupport):
        fit_at(ds, 1, np.array([0.0, 0.0]), KernelSpec.UNIFORM, 0.5)
    # collinear support: the ridge floor binds and the fit is flagged
    f = LocalLinear.for_group(ds, 1, KernelSpec.UNIFORM, 10.0).fit(np.array([[1.0, 1.0]]))
    assert f.status[0] == STATUS_RIDGED and np.isfinite(f.values[0])
    assert f.values[0] == pytest.approx(1.0, abs=1e-6)


def test_fit_at_full_length_multipliers():
    rng = np.random.default_rng(8)
    x = rng.uniform(size=(40, 2))
    y = rng.normal(size=40)
    d = (np.arange(40) % 2).astype(int)
    ds = Dataset(y, d, x)
    m = rng.exponential(size=40)
    x0 = np.array([0.5, 0.5])
    f = fit_at(ds, 1, x0, KernelSpec.UNIFORM, 0.5, multipliers=m)
    idx = np.flatnonzero(d == 1)
    w = 0.5 * (np.linalg.norm(x[idx] - x0, axis=1) <= 0.5) * m[idx]
    v, g = dense_wls(x[idx], y[idx], x0, w)
    assert abs(f.value - v) < 1e-9 and np.allclose(f.gradient, g, atol=1e-9)
    with pytest.raises(ValueError):
        fit_at(ds, 1, x0, KernelSpec.UNIFORM, 0.5, multipliers=-m)


def test_cv_pure_noise_prefers_large_h():
    wins = 0
    for rep in range(100):
        rng = np.random.default_rng(100 + rep)
        n = 150
        x = rng.uniform(size=(n, 2))
        ds = Dataset(rng.normal(size=n), (np.arange(n) < 100).astype(int), x)
        wins += cv_bandwidth(ds, 1, KernelSpec.UNIFORM, [0.1, 10.0]) == 10.0
    assert wins > 90


def test_cv_ties_and_errors():
    ds, _ = _affine_ds(200, 9)
    assert cv_bandwidth(ds, 1, KernelSpec.UNIFORM, [0.3, 0.6, 2.0]) == 2.0
    with pytest.raises(ValueError):
        cv_bandwidth(ds, 1, KernelSpec.UNIFORM, [-1.0])
    with pytest.raises(ValueError):
        cv_bandwidth(ds, 1, KernelSpec.UNIFORM, [])
    with pytest.raises(AllCandidatesFailed):
        cv_bandwidth(ds, 1, KernelSpec.UNIFORM, [1e-6])
    assert select_min_score([1.0, 2.0, 3.0], [0.5, 0.5 * (1 + 1e-12), 0.7]) == 2.0


def test_bandwidth_helpers():
    assert rule_of_thumb_h(64) == pytest.approx(1.06 / 2)
    assert np.allclose(log_grid(0.1, 10, 3), [0.1, 1, 10])
    with pytest.raises(ValueError):
        BandwidthConfig(h=0.1, b=-1.0, epsilon=0.1)
    with pytest.raises(ValueError):
        LocalLinear(np.zeros((3, 1)), np.zeros(3), "uniform", 0.0)


def test_kernel_pairs_brute_and_tree_agree():
    rng = np.random.default_rng(12)
    x = rng.uniform(size=(600, 2))
    pts = rng.uniform(size=(50, 2))
    big = LocalLinear(x, np.zeros(600), "triangular", 0.2)
    small = LocalLinear(x[:200], np.zeros(200), "triangular", 0.2)
    assert big.tree is not None and small.tree is None
    pb = big.kernel_pairs(pts)
    ps = small.kernel_pairs(pts)
    keep = pb.cols < 200
    assert np.array_equal(pb.rows[keep], ps.rows) and np.array_equal(pb.cols[keep], ps.cols)
    assert np.allclose(pb.weights[keep], ps.weights, atol=1e-15)
    d = np.linalg.norm(pts[pb.rows] - x[pb.cols], axis=1)
    assert np.allclose(pb.weights, kernel_weights(KernelSpec.TRIANGULAR, d / 0.2))
