import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hrflow.grid_geometry import Grid, MetricField

settings.register_profile("hrf", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("hrf")


def smooth_field(grid, rng, modes=2, scale=1.0):
    """Random low-mode trigonometric sum with max-abs ``scale``."""
    X, Y = grid.coords()
    f = np.zeros(grid.shape)
    for kx in range(-modes, modes + 1):
        for ky in range(0, modes + 1):
            if ky == 0 and kx <= 0:
                continue
            a, b = rng.standard_normal(2)
            ph = 2 * math.pi * (kx * X / grid.Lx + ky * Y / grid.Ly)
            f += a * np.cos(ph) + b * np.sin(ph)
    return scale * f / np.abs(f).max()


def random_metric(grid, rng, amp=0.1, modes=2):
    p11, p12, p22 = (smooth_field(grid, rng, modes, amp) for _ in range(3))
    return MetricField(1.0 + p11, p12, 1.0 + p22, grid)


@pytest.fixture
def grid32():
    return Grid(32, 32)


@pytest.fixture
def grid64():
    return Grid(64, 64)


# ---------------------------------------------------------------- acceptance summary

@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects ``(number, line)`` pairs printed once more at the end of the session."""
    return request.config.__dict__.setdefault("_hrf_acceptance", [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_hrf_acceptance", [])
    if not lines:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for _, line in sorted(lines):
        terminalreporter.write_line(line)
