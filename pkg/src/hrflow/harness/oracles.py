"""Standalone numerical oracles runnable from the command line."""
from __future__ import annotations

import math
from typing import Callable, Dict

import numpy as np

from .. import grid_geometry as gg
from .. import spectral
from ..grid_geometry import Grid, MetricField

__all__ = ["ORACLES", "run_oracle", "flat_spectrum", "conformal_curvature", "rate_agreement"]


def _slopes(errs):
    return [math.log2(a / b) for a, b in zip(errs[:-1], errs[1:])]


def flat_spectrum(sizes=(64, 128)) -> Dict:
    """Smallest nonzero Laplacian eigenvalues of the flat unit torus against ``4 pi^2``."""
    exact = 4.0 * math.pi ** 2
    rows = []
    ok = True
    for n, limit in zip(sizes, (0.01, 0.0025)):
        pairs = spectral.laplacian_eigs(MetricField.flat(Grid(n, n)), 4)
        vals = [p.value for p in pairs]
        rel = abs(vals[0] - exact) / exact
        near = sum(abs(v - vals[0]) <= 1e-8 * vals[0] for v in vals)
        rows.append({"n": n, "lambda1": vals[0], "relative_error": rel, "multiplicity": near})
        ok = ok and rel <= limit and near >= 2
    return {"name": "flat-spectrum", "exact": exact, "rows": rows, "pass": ok}


def conformal_curvature(sizes=(32, 64, 128), amp: float = 0.1) -> Dict:
    """Scalar curvature of ``e^{2 phi} delta`` against ``-2 e^{-2 phi} Laplace(phi)``."""
    errs = []
    for n in sizes:
        grid = Grid(n, n)
        X, Y = grid.coords()
        s, c = np.sin(2 * np.pi * X), np.sin(2 * np.pi * Y)
        phi = amp * s * c
        lap = -8.0 * np.pi ** 2 * phi
        exact = -2.0 * np.exp(-2.0 * phi) * lap
        _, R = gg.curvature(MetricField.conformal(phi, grid))
        errs.append(float(np.abs(R - exact).max()))
    sl = _slopes(errs)
    return {"name": "conformal-curvature", "sizes": list(sizes), "errors": errs, "slopes": sl,
            "pass": min(sl) >= 1.9}


def rate_agreement(n: int = 64, seeds=(0, 1, 2, 3, 4), modes: int = 1) -> Dict:
    """Relative gap between the two closed forms of the ground-state eigenvalue rate.

    The gap is second order in h with a constant that grows with the
    wavenumber of the data, so the default uses single-mode perturbations.
    """
    from .config import InitialSpec
    from .initial_data import make_initial_data

    grid = Grid(n, n)
    rows = []
    ok = True
    for seed in seeds:
        st = make_initial_data(InitialSpec("perturbed", seed, 0.05, modes), grid)
        f = spectral.guc_ground_state(st.g, st.u).function
        a, b = spectral.lambda_dot_guc(st.g, st.u, f)
        rel = abs(a - b) / max(abs(a), 1e-300)
        rows.append({"seed": seed, "rateA": a, "rateB": b, "relative_gap": rel})
        ok = ok and rel <= 10.0 / n ** 2
    return {"name": "rate-agreement", "n": n, "modes": modes, "rows": rows, "pass": ok}


ORACLES: Dict[str, Callable[[], Dict]] = {
    "flat-spectrum": flat_spectrum,
    "conformal-curvature": conformal_curvature,
    "rate-agreement": rate_agreement,
}


def run_oracle(name: str) -> Dict:
    try:
        fn = ORACLES[name]
    except KeyError:
        raise KeyError(f"unknown oracle {name!r}; available: {', '.join(sorted(ORACLES))}") from None
    return fn()
