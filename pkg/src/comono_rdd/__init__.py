"""Extrapolating treatment effects away from the cutoff in sharp multivariate RDDs.

Under comonotone conditional means the treated and untreated means are
linked on the treatment frontier by a monotone transfer curve ``q``; the
package estimates that curve with a two-stage local linear procedure and
uses it to impute missing potential-outcome means, CATEs and the effects of
counterfactual treatment rules.
"""

__version__ = "0.1.0"

from .dataset import Dataset, Standardization, load_csv, partition, standardize, write_csv
from .errors import (
    ComonoError,
    DataError,
    EstimationError,
    InsufficientSupport,
    NoFrontierUnits,
    NoIdentifiedUnits,
)
from .extrapolate import (
    CateEstimate,
    CurvePair,
    OwnFits,
    QCurve,
    QEstimator,
    cate_at,
    estimate_both,
    estimate_q,
    estimate_q_conditional,
    gtilde,
)
from .frontier import FrontierInfo, cross_nn, domain_endpoints, set_weights
from .inference import BootstrapConfig, bootstrap_bands, comono_diagnostic, frontier_pairs
from .kernels import KernelSpec, kernel_eval, kernel_moments, omega_rule
from .loclin import BandwidthConfig, LocalFit, cv_bandwidth, fit_at, rule_of_thumb_h
from .policy import PolicyEffect, PolicySpec, policy_effect, s_indicator, threshold_sweep
