import numpy as np
import pytest

from hfblab.fields import Field, Kernel, state_from_pair, SYMMETRIC
from hfblab.grid import make_grid


def smooth_field(g, rng, kcut=None):
    """Random band-limited complex field."""
    kc = kcut if kcut is not None else 0.3 * np.pi / g.h
    a = rng.standard_normal(g.shape) + 1j * rng.standard_normal(g.shape)
    a = np.fft.ifftn(np.fft.fftn(a) * np.exp(-0.5 * g.k2 / kc ** 2))
    return Field(g, a / g.l2_norm(a))


def smooth_pair_kernel(g, rng, amp=0.3):
    """Random symmetric band-limited pair kernel with operator norm ~ amp."""
    u = [smooth_field(g, rng).flat for _ in range(3)]
    K = sum(np.outer(x, x) for x in u)
    K = 0.5 * (K + K.T)
    K *= amp / (np.linalg.norm(K, 2) * g.weight)
    return Kernel(g, K, SYMMETRIC)


def random_state(g, rng, N=8.0, beta=0.5, amp=0.3):
    phi = smooth_field(g, rng)
    phi = Field(g, 0.9 * phi.data)
    return state_from_pair(phi, smooth_pair_kernel(g, rng, amp), N, beta)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def g1():
    return make_grid(1, 16, 8.0)


# acceptance lines are collected here and echoed in the terminal summary so
# they survive output capture
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda x: int(x.split()[2].rstrip(':'))):
            terminalreporter.write_line(line)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance runs")
