import numpy as np
import pytest

from gradperm import nn_core


def random_network(rng, p, hidden, activation="identity", scale=1.0):
    """Network with N(0, scale^2) weights and biases, independent of the trainer."""
    sizes = (p, *hidden)
    W = [rng.normal(0, scale, (sizes[k + 1], sizes[k])) for k in range(len(hidden))]
    b = [rng.normal(0, scale, h) for h in hidden]
    return nn_core.Network(W, b, rng.normal(0, scale, hidden[-1]), rng.normal(0, scale),
                           activation)


def central_difference(net, x, j, h=1e-5):
    e = np.zeros_like(x)
    e[j] = h
    return (nn_core.forward(net, x + e) - nn_core.forward(net, x - e)) / (2 * h)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
