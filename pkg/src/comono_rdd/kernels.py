"""Second-order kernels used by both smoothing stages."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

# Gaussian weights beyond |u| = 4 are dropped so neighbourhood queries stay finite.
GAUSSIAN_TRUNCATION = 4.0


class KernelSpec(str, enum.Enum):
    UNIFORM = "uniform"
    TRIANGULAR = "triangular"
    EPANECHNIKOV = "epanechnikov"
    GAUSSIAN = "gaussian"

    @property
    def support(self) -> float:
        """Radius (in bandwidth units) outside which the kernel is treated as zero."""
        return GAUSSIAN_TRUNCATION if self is KernelSpec.GAUSSIAN else 1.0

    def __call__(self, u):
        return kernel_eval(self, u)


@dataclass(frozen=True)
class KernelMoments:
    mu2: float
    rk: float
    q75: float


def get_kernel(name) -> KernelSpec:
    if isinstance(name, KernelSpec):
        return name
    try:
        return KernelSpec(str(name).lower())
    except ValueError:
        choices = ", ".join(k.value for k in KernelSpec)
        raise ValueError(f"unknown kernel {name!r}; choose one of {choices}") from None


def kernel_eval(k: KernelSpec, u):
    """Evaluate the kernel density at ``u`` (scalar or array)."""
    k = get_kernel(k)
    a = np.abs(np.asarray(u, dtype=float))
    if k is KernelSpec.UNIFORM:
        out = np.where(a <= 1.0, 0.5, 0.0)
    elif k is KernelSpec.TRIANGULAR:
        out = np.clip(1.0 - a, 0.0, None)
    elif k is KernelSpec.EPANECHNIKOV:
        out = 0.75 * np.clip(1.0 - a * a, 0.0, None)
    else:
        out = np.exp(-0.5 * a * a) / math.sqrt(2.0 * math.pi)
    if np.ndim(out) == 0:
        return float(out)
    return out


def kernel_weights(k: KernelSpec, u):
    """Like :func:`kernel_eval` but applies the Gaussian truncation used for neighbourhoods."""
    k = get_kernel(k)
    w = kernel_eval(k, u)
    if k is KernelSpec.GAUSSIAN:
        w = np.where(np.abs(u) <= GAUSSIAN_TRUNCATION, w, 0.0)
    return w


_MOMENTS = {
    KernelSpec.UNIFORM: KernelMoments(mu2=1.0 / 3.0, rk=0.5, q75=0.5),
    KernelSpec.TRIANGULAR: KernelMoments(mu2=1.0 / 6.0, rk=2.0 / 3.0, q75=1.0 - math.sqrt(0.5)),
    # q75 is the root in (0, 1) of u**3 - 3u + 1 = 0
    KernelSpec.EPANECHNIKOV: KernelMoments(mu2=0.2, rk=0.6, q75=2.0 * math.cos(4.0 * math.pi / 9.0)),
    KernelSpec.GAUSSIAN: KernelMoments(
        mu2=1.0, rk=1.0 / (2.0 * math.sqrt(math.pi)), q75=0.6744897501960817
    ),
}


def kernel_moments(k: KernelSpec) -> KernelMoments:
    return _MOMENTS[get_kernel(k)]


def omega_rule(k: KernelSpec) -> float:
    """Twice the 0.75 quantile of the kernel; the default near-frontier radius is this times h."""
    return 2.0 * kernel_moments(k).q75
