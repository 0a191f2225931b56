import numpy as np
import pytest

from trajrecover.traj_data import NormStats, Trajectory, synth_generate


@pytest.fixture(scope="session")
def synth_small():
    return synth_generate(40, 32, seed=3)


@pytest.fixture(scope="session")
def norm_small(synth_small):
    return NormStats.from_trajectories(synth_small)


def straight_line(L=16, v=(1e-4, -2e-4), start=(116.3, 39.9), dt=10.0, t0=0.0):
    t = t0 + dt * np.arange(L)
    xy = np.asarray(start) + np.outer(t - t0, v)
    return Trajectory(np.column_stack([xy, t]))


# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
