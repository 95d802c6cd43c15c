import numpy as np
import pytest

from irsgame.scenario import ChannelSet, ScenarioConfig


def cn(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def random_instance(seed, M=2, K=2, S=2, N=2):
    """Unit-scale channels, a feasible W and a feasible phi."""
    rng = np.random.default_rng(seed)
    ch = ChannelSet(cn(rng, S * N, M), cn(rng, K, S * N), cn(rng, K, M), N)
    W = cn(rng, M, K)
    W *= np.sqrt(rng.uniform(0.2, 1.0) / np.sum(np.abs(W) ** 2))
    phi = cn(rng, S * N)
    phi /= np.maximum(1.0, np.abs(phi))
    return ch, W, phi


def unit_config(M=2, K=2, S=2, N=2, **kw):
    base = dict(num_antennas=M, num_users=K, num_modules=S, elements_per_module=N,
                noise_power=1.0, max_power=1.0)
    base.update(kw)
    return ScenarioConfig(**base)


@pytest.fixture
def tiny():
    return random_instance(0)


# one line per acceptance criterion, printed after the test run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
