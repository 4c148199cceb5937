import numpy as np
import pytest

from maskft import net
from maskft.tensor import stream


def tiny_spec(input_dim=4, hidden=(5,), feature_dim=3, n_classes=3, activation="tanh", temperature=0.5):
    return net.NetworkSpec(input_dim, hidden, feature_dim, n_classes, activation, temperature)


def toy_data(spec, n, seed):
    rng = stream(seed, "test", "toy")
    x = rng.standard_normal((n, spec.input_dim))
    y = rng.integers(0, spec.n_classes, n)
    return x, y


@pytest.fixture
def spec():
    return tiny_spec()


@pytest.fixture
def params(spec):
    return net.init_params(spec, stream(0, "test", "params"))


def finite_difference(f, flat, h=1e-5):
    """Fourth-order central differences; truncation error O(h^4) instead of O(h^2)."""
    g = np.zeros_like(flat)
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = h
        g[i] = (-f(flat + 2 * e) + 8 * f(flat + e) - 8 * f(flat - e) + f(flat - 2 * e)) / (12 * h)
    return g


def relative_error(a, b, floor=1e-4):
    """Per-coordinate relative error.

    The denominator is floored at ``floor``: central differences with h=1e-5
    carry ~1e-11 of round-off, so coordinates far below that scale can only be
    compared absolutely (here to ``1e-6 * floor``).
    """
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
