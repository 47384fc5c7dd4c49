import numpy as np
import pytest

from optrl.diffcore import MlpLayout, ParamVector, mlp_init


def central_fd(f, x, h=1e-5):
    """Central finite differences of a scalar function of a flat vector."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    """Max abs difference scaled by the largest reference magnitude."""
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def min_abs_preactivation(params, x):
    """Smallest |pre-activation| over hidden units; finite differences are unreliable near relu kinks."""
    h, smallest = np.atleast_2d(x), np.inf
    pairs = params.layout.unpack(params.values)
    for W, b in pairs[:-1]:
        z = h @ W.T + b
        smallest = min(smallest, float(np.min(np.abs(z))))
        h = np.maximum(z, 0.0) if params.layout.activation == "relu" else np.tanh(z)
    return smallest


def small_net(seed=0, input_dim=3, hidden=(5,), activation="tanh", output_activation="identity"):
    layout = MlpLayout(input_dim, hidden, 1, activation, output_activation)
    return mlp_init(layout, seed)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


__all__ = ["central_fd", "rel_err", "small_net", "min_abs_preactivation", "ParamVector"]
