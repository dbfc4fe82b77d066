import numpy as np
import pytest

from nmelab import ActivationSpec, Model


def central_diff(f, theta, eps=1e-5):
    """Central-difference gradient of a scalar function of a flat vector."""
    theta = np.asarray(theta, dtype=np.float64)
    g = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = eps
        g[i] = (f(theta + e) - f(theta - e)) / (2 * eps)
    return g


def rel(a, b):
    nb = np.linalg.norm(b)
    d = np.linalg.norm(np.asarray(a) - np.asarray(b))
    return d / nb if nb > 0 else d


def tiny_problem(kind="gelu", loss="cross_entropy", widths=(3, 4, 4, 2), batch=3, seed=0, beta=1.0):
    rng = np.random.default_rng(seed)
    model = Model.init(widths, ActivationSpec(kind, beta), seed=seed)
    x = rng.standard_normal((batch, widths[0]))
    if loss == "mse":
        y = rng.standard_normal((batch, widths[-1]))
    else:
        y = rng.integers(0, widths[-1], batch)
    return model, x, y


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
