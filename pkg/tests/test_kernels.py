import math

import numpy as np
import pytest
from scipy import integrate, stats

from comono_rdd.kernels import KernelSpec, get_kernel, kernel_eval, kernel_moments, kernel_weights, omega_rule

FAMILIES = list(KernelSpec)


def _quad(f, k):
    lim = np.inf if k is KernelSpec.GAUSSIAN else 1.0
    return integrate.quad(f, -lim, lim, epsabs=1e-12, limit=200)[0]


def test_trivial_values():
    assert kernel_eval(KernelSpec.UNIFORM, 0.3) == 0.5
    assert kernel_eval(KernelSpec.UNIFORM, 1.5) == 0.0
    assert kernel_eval(KernelSpec.TRIANGULAR, 0.5) == 0.5
    assert kernel_eval(KernelSpec.EPANECHNIKOV, 0.0) == 0.75
    assert kernel_eval(KernelSpec.GAUSSIAN, 0.0) == pytest.approx(1 / math.sqrt(2 * math.pi))


@pytest.mark.parametrize("k", FAMILIES)
def test_density_and_symmetry(k):
    # trapezoid rule on a fine grid, as well as adaptive quadrature
    lim = 10.0 if k is KernelSpec.GAUSSIAN else 1.0
    u = np.linspace(-lim, lim, 200001)
    assert abs(integrate.trapezoid(kernel_eval(k, u), u) - 1) < 1e-6
    assert abs(integrate.trapezoid(u * kernel_eval(k, u), u)) < 1e-6
    us = np.linspace(-3, 3, 601)
    assert np.array_equal(kernel_eval(k, us), kernel_eval(k, -us))
    assert np.all(kernel_eval(k, us) >= 0)
    if k is not KernelSpec.GAUSSIAN:
        assert np.all(kernel_eval(k, np.array([1.0001, 2.0, -5.0])) == 0)


@pytest.mark.parametrize("k", FAMILIES)
def test_moments_match_quadrature(k):
    mom = kernel_moments(k)
    assert mom.mu2 == pytest.approx(_quad(lambda u: u * u * kernel_eval(k, u), k), abs=1e-8)
    assert mom.rk == pytest.approx(_quad(lambda u: kernel_eval(k, u) ** 2, k), abs=1e-8)
    # q75 inverts the numerically integrated CDF
    cdf = _quad(lambda u: kernel_eval(k, u) * (u <= mom.q75), k) if k is KernelSpec.GAUSSIAN else \
        integrate.quad(lambda u: kernel_eval(k, u), -1, mom.q75, epsabs=1e-13)[0]
    assert cdf == pytest.approx(0.75, abs=1e-8)


def test_closed_form_moments():
    u = kernel_moments(KernelSpec.UNIFORM)
    assert (u.mu2, u.rk, u.q75) == (pytest.approx(1 / 3), 0.5, 0.5)
    g = kernel_moments(KernelSpec.GAUSSIAN)
    assert g.mu2 == 1.0 and g.rk == pytest.approx(0.28209479177387814)
    e = kernel_moments(KernelSpec.EPANECHNIKOV)
    assert e.mu2 == pytest.approx(0.2) and e.rk == pytest.approx(0.6)


def test_omega_rule():
    assert omega_rule(KernelSpec.UNIFORM) == 1.0
    assert omega_rule(KernelSpec.GAUSSIAN) == pytest.approx(2 * stats.norm.ppf(0.75), abs=1e-12)
    assert omega_rule(KernelSpec.TRIANGULAR) == pytest.approx(2 * (1 - math.sqrt(0.5)), abs=1e-12)
    assert omega_rule(KernelSpec.TRIANGULAR) == pytest.approx(0.58579, abs=1e-5)


def test_gaussian_truncation_in_weights():
    k = KernelSpec.GAUSSIAN
    assert kernel_weights(k, np.array([4.5]))[0] == 0
    assert kernel_weights(k, np.array([3.9]))[0] > 0
    assert k.support == 4


def test_get_kernel():
    assert get_kernel("triangular") is KernelSpec.TRIANGULAR
    assert get_kernel(KernelSpec.UNIFORM) is KernelSpec.UNIFORM
    with pytest.raises(ValueError):
        get_kernel("cosine")
