import numpy as np
import pytest

from comono_rdd.dataset import Dataset, standardize
from comono_rdd.dgp import gen_linear_oracle


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: Monte Carlo checks that take tens of seconds")


def dense_wls(x, y, x0, w):
    """Independent weighted least squares oracle: (value, gradient) at ``x0``."""
    X = np.column_stack([np.ones(len(x)), np.asarray(x) - x0])
    W = np.diag(w)
    beta = np.linalg.solve(X.T @ W @ X, X.T @ W @ y)
    return beta[0], beta[1:]


@pytest.fixture(scope="session")
def linear_20k():
    ds, truth = gen_linear_oracle(20000, c=0.5, seed=7)
    z, _ = standardize(ds)
    return ds, z, truth


@pytest.fixture
def tiny():
    x = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, 2.0], [3.0, 1.0]])
    return Dataset(y=np.arange(6.0), d=np.array([1, 1, 1, 0, 0, 0]), x=x)
