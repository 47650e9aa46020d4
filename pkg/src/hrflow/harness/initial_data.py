"""Initial data presets."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from ..errors import ConfigError, DomainError
from ..flow_engine import FlowState
from ..grid_geometry import Grid, MetricField
from .config import GridSpec, InitialSpec, TrigTerm

__all__ = ["make_grid", "make_initial_data", "low_mode_field", "trig_sum", "MIN_METRIC_EIGENVALUE"]

# smallest admissible eigenvalue of a generated metric
MIN_METRIC_EIGENVALUE = 0.1


def make_grid(spec: GridSpec) -> Grid:
    return Grid(spec.nx, spec.ny, spec.Lx, spec.Ly)


def low_mode_field(grid: Grid, rng: np.random.Generator, modes: int) -> np.ndarray:
    """Random trigonometric sum over ``max(|kx|, |ky|) <= modes`` (half-plane of
    wave vectors), scaled to max-abs one."""
    X, Y = grid.coords()
    f = np.zeros(grid.shape)
    for kx in range(-modes, modes + 1):
        for ky in range(-modes, modes + 1):
            if kx > 0 or (kx == 0 and ky > 0):
                a, b = rng.standard_normal(2)
                ph = 2.0 * math.pi * (kx * X / grid.Lx + ky * Y / grid.Ly)
                f += a * np.cos(ph) + b * np.sin(ph)
    return f / np.abs(f).max()


def trig_sum(grid: Grid, terms: Sequence[TrigTerm]) -> np.ndarray:
    X, Y = grid.coords()
    out = np.zeros(grid.shape)
    fn = {"sin": np.sin, "cos": np.cos}
    for t in terms:
        out += t.a * fn[t.x](2.0 * math.pi * t.kx * X / grid.Lx) * fn[t.y](2.0 * math.pi * t.ky * Y / grid.Ly)
    return out


def make_initial_data(spec: InitialSpec, grid: Grid) -> FlowState:
    """Build the initial ``(g, u)`` for a preset.

    ``perturbed``: ``g = delta + amplitude * P`` with independent low-mode
    components of ``P`` (symmetric by construction) and ``u = amplitude * q``
    for another low-mode field ``q``.  ``conformal``: ``g = e^{2 phi} delta`` with
    ``phi`` and ``u`` given as trigonometric sums.

    Raises
    ------
    ConfigError
        The generated metric has an eigenvalue below ``MIN_METRIC_EIGENVALUE``
        (amplitude too large), or a required field is missing.
    """
    if spec.preset == "flat":
        return FlowState(0.0, MetricField.flat(grid), grid.zeros())
    if spec.preset == "perturbed":
        if spec.seed is None:
            raise ConfigError("perturbed preset needs a seed")
        rng = np.random.default_rng(spec.seed)
        p11, p12, p22, q = (low_mode_field(grid, rng, spec.modes) for _ in range(4))
        a = spec.amplitude
        g11, g12, g22 = 1.0 + a * p11, a * p12, 1.0 + a * p22
        # smaller eigenvalue of the 2x2 component matrix
        lam_min = 0.5 * (g11 + g22) - np.sqrt(0.25 * (g11 - g22) ** 2 + g12 ** 2)
        if float(lam_min.min()) < MIN_METRIC_EIGENVALUE:
            raise ConfigError(
                f"amplitude {a} too large: metric eigenvalue {float(lam_min.min()):.3g} "
                f"below {MIN_METRIC_EIGENVALUE}")
        return FlowState(0.0, MetricField(g11, g12, g22, grid), a * q)
    if spec.preset == "conformal":
        phi = trig_sum(grid, spec.phi)
        try:
            g = MetricField.conformal(phi, grid)
        except DomainError as exc:  # overflow in e^{2 phi}
            raise ConfigError(str(exc)) from exc
        return FlowState(0.0, g, trig_sum(grid, spec.u))
    raise ConfigError(f"unknown preset {spec.preset!r}")
