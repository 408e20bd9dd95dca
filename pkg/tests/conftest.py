"""Shared fixtures and independent straight-line numpy oracles."""

import numpy as np
import pytest

from flashback import model as mdl
from flashback.tasks import SyntheticSpec, generate_synthetic


def oracle_mlp(x, weights, biases, psi=None):
    """ReLU after every layer of the extractor, then an optional bias-free head."""
    h = np.asarray(x, dtype=np.float64)
    for W, b in zip(weights, biases):
        h = np.maximum(h @ W.T + b, 0.0)
    return h if psi is None else h @ psi.T


def oracle_softmax(o, tau=1.0):
    o = np.asarray(o, dtype=np.float64) / tau
    e = np.exp(o - o.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def oracle_ce_sum(o, y):
    p = oracle_softmax(o)
    return float(-np.sum(np.log(p[np.arange(len(y)), y])))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_params():
    p = mdl.init_model(4, seed=3, hidden=(5,), embed_dim=3)
    return mdl.extend_classifier(p, 3, seed=4)


@pytest.fixture(scope="session")
def small_stream():
    return generate_synthetic(SyntheticSpec(T=3, K=2, n=8, train_per_class=20, test_per_class=20, seed=7))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
