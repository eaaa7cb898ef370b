import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from trajstitch.data import Dataset, Trajectory

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_trajectory(rng, traj_id, length, dS=3, dA=2, terminal=False):
    states = rng.standard_normal((length + 1, dS))
    return Trajectory(traj_id, states[:-1].copy(), rng.standard_normal((length, dA)),
                      rng.standard_normal(length), states[1:].copy(),
                      np.array([False] * (length - 1) + [terminal]))


def random_dataset(seed, n_traj=5, dS=3, dA=2, max_len=6):
    rng = np.random.default_rng(seed)
    trajs = [random_trajectory(rng, i, int(rng.integers(1, max_len + 1)), dS, dA, bool(rng.integers(2)))
             for i in range(n_traj)]
    return Dataset(trajs, (dS, dA), {"source": "random", "seed": seed})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
