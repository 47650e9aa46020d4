"""Variational formulas checked against finite-difference oracles.

Each closed-form expression is assembled from the grid primitives in
:mod:`hrflow.grid_geometry`; the oracles re-evaluate (or re-minimize) the
discrete quantity along ``g + s h, u + s v`` and take central differences.
Closed form and oracle agree up to the truncation error of the grid, so the
step sizes must keep the O(s^2) finite-difference error above that floor
for a slope measurement to mean anything.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import entropy
from . import grid_geometry as gg
from .errors import DomainError, PreconditionError
from .flow_engine import s_tensor
from .grid_geometry import Grid, MetricField, SymTensorField

__all__ = [
    "VariationDirection",
    "random_direction",
    "linearized_scalar_curvature",
    "nu_first_variation",
    "euler_lagrange_residual",
    "soliton_residual",
    "central_differences",
    "convergence_slopes",
    "fd_scalar_curvature",
    "fd_nu_variation",
]


@dataclass
class VariationDirection:
    """Direction ``(h, v)`` with the step sizes used for differencing."""

    h: SymTensorField
    v: np.ndarray
    s_steps: Tuple[float, ...] = (1e-2, 5e-3, 2.5e-3)

    def check(self, g: MetricField) -> None:
        """Raise DomainError unless ``g +- s h`` is positive definite for every step."""
        for s in self.s_steps:
            for sg in (s, -s):
                g.plus(self.h, sg)


def _smooth_field(grid: Grid, rng: np.random.Generator, modes: int) -> np.ndarray:
    X, Y = grid.coords()
    f = np.zeros(grid.shape)
    for kx in range(-modes, modes + 1):
        for ky in range(0, modes + 1):
            if ky == 0 and kx <= 0:
                continue
            a, b = rng.standard_normal(2)
            ph = 2.0 * math.pi * (kx * X / grid.Lx + ky * Y / grid.Ly)
            f += a * np.cos(ph) + b * np.sin(ph)
    return f / np.abs(f).max()


def random_direction(grid: Grid, seed: int, amplitude: float = 1.0, modes: int = 2,
                     v_amplitude: Optional[float] = None,
                     s_steps: Sequence[float] = (1e-2, 5e-3, 2.5e-3)) -> VariationDirection:
    """Low-mode random direction with components scaled to max-abs ``amplitude``."""
    rng = np.random.default_rng(seed)
    h = SymTensorField(*(amplitude * _smooth_field(grid, rng, modes) for _ in range(3)))
    va = amplitude if v_amplitude is None else v_amplitude
    v = va * _smooth_field(grid, rng, modes)
    return VariationDirection(h, v, tuple(s_steps))


# ---------------------------------------------------------------------------
# closed forms


def _divergence_1form(g: MetricField, X: np.ndarray) -> np.ndarray:
    """``(1/sqrt g) d_a(sqrt g g^ab X_b)`` with centered differences."""
    grid = g.grid
    gi = g.inv_array
    up = np.einsum("ab...,b...->a...", gi, X) * g.sqrt_det
    return (gg.diff(up[0], 0, grid) + gg.diff(up[1], 1, grid)) / g.sqrt_det


def linearized_scalar_curvature(g: MetricField, h: SymTensorField) -> np.ndarray:
    """``-h^ij R_ij + nabla^i nabla^j h_ij - Laplace(tr_g h)``."""
    gam = gg.christoffel(g)
    ric, _ = gg.curvature(g, gam)
    dh = gg.covariant_derivative_2(g, h.array(), gam.data)  # [a, i, j]
    X = np.einsum("ia...,aij...->j...", g.inv_array, dh)
    return (-gg.inner(g, h, ric) + _divergence_1form(g, X)
            - gg.laplace_beltrami(g, gg.trace(g, h)))


def _minimizer_measure(g: MetricField, f: np.ndarray, tau: float, n: int) -> np.ndarray:
    return np.exp(-f) / (4.0 * math.pi * tau) ** (n / 2.0)


class _ComplexMetric:
    """Metric-like view of ``g + i eps h`` that the geometry routines can read.

    Evaluating a discrete quantity on it and taking ``imag / eps`` gives its
    exact directional derivative (complex step), with no truncation error.
    """

    def __init__(self, g: MetricField, h: SymTensorField, eps: float):
        self.grid = g.grid
        self.g11 = g.g11 + 1j * eps * h.t11
        self.g12 = g.g12 + 1j * eps * h.t12
        self.g22 = g.g22 + 1j * eps * h.t22
        self.det = self.g11 * self.g22 - self.g12 * self.g12
        self.sqrt_det = np.sqrt(self.det)
        self.inverse = (self.g22 / self.det, -self.g12 / self.det, self.g11 / self.det)


_EPS = 1e-30


def _discrete_tangents(g: MetricField, u: np.ndarray, h: SymTensorField, v: np.ndarray):
    """Exact s-derivatives of the nodal S, the flux coefficients and sqrt(det g)."""
    gc = _ComplexMetric(g, h, _EPS)
    _, S = s_tensor(gc, u + 1j * _EPS * np.asarray(v, dtype=float))
    flux = tuple(c.imag / _EPS for c in gg._flux_coefficients(gc))
    return S.imag / _EPS, flux, gc.sqrt_det.imag / _EPS


def _discrete_envelope(g, u, h, v, res, s, n) -> float:
    """Derivative of the discrete ``w``-functional at its constrained minimizer.

    With ``Phi(w) = tau (4 D(w) + sum S w^2 m) +- sum m w^2 ln w^2`` on
    ``sum m w^2 = 1``, stationarity in ``w`` and ``tau`` leaves
    ``d nu / ds = dPhi/ds - lam * d(sum m w^2)/ds`` at fixed ``(w, tau)``,
    where ``lam`` is the multiplier of the constraint.
    """
    grid = g.grid
    tau = res.tau_star
    w = np.asarray(res.w_star, dtype=float)
    w2 = w * w
    area = grid.cell_area
    _, S = s_tensor(g, u)
    m = g.sqrt_det * area
    logw2 = np.log(np.maximum(w2, 1e-300))
    lam = (tau * (4.0 * gg.dirichlet_form(g, w, w) + gg.tree_sum(S * m * w2))
           + s * gg.tree_sum(m * w2 * (logw2 + 1.0)))
    dS, (dfx, dfy, dc), dsq = _discrete_tangents(g, u, h, v)
    dxw = (np.roll(w, -1, 0) - w) / grid.hx
    dyw = (np.roll(w, -1, 1) - w) / grid.hy
    cross = 2.0 * dc * gg.diff(w, 0, grid) * gg.diff(w, 1, grid)
    dD = gg.tree_sum((dfx * dxw * dxw + dfy * dyw * dyw + cross) * area)
    dm = dsq * area
    dphi = (tau * (4.0 * dD + gg.tree_sum((dS * m + S * dm) * w2))
            + s * gg.tree_sum(dm * w2 * logw2))
    return dphi - lam * gg.tree_sum(dm * w2)


def nu_first_variation(g: MetricField, u: np.ndarray, h: SymTensorField, v: np.ndarray,
                       sign, n: int = 2,
                       minimizer: Optional[entropy.MinimizerResult] = None,
                       form: str = "continuum") -> float:
    """Closed-form ``d/ds nu_+-(g + s h, u + s v)`` at ``s = 0``.

    ``form="continuum"`` evaluates
    ``-tau int (<h, Stensor> + <h, Hess f> +- tr h / (2 tau)) dmu
    + 4 tau int v (Laplace u - <du, df>) dmu`` with ``dmu = e^{-f} (4 pi tau)^{-n/2} dV``
    at the minimizing pair ``(f, tau)``.  Its derivation integrates by parts, so it
    agrees with the discrete functional only while ``f`` is resolved by the grid.

    ``form="discrete"`` is the same envelope argument applied to the discrete
    functional before any integration by parts: the partial s-derivative at the
    fixed minimizer ``(w, tau)`` minus the constraint multiplier term.  It is the
    exact derivative of the discrete ``nu`` even for lattice-scale minimizers.

    Raises
    ------
    PreconditionError
        The minimizing ``tau`` lies on the edge of the search window.
    """
    s = entropy._sign(sign)
    if form not in ("continuum", "discrete"):
        raise DomainError(f"unknown form {form!r}")
    res = entropy.nu_pm(g, u, s, n) if minimizer is None else minimizer
    if res.boundary_hit:
        raise PreconditionError(
            f"minimizing tau = {res.tau_star:.6g} is on the window edge; the first-variation "
            "formula needs an interior optimum")
    if form == "discrete":
        return _discrete_envelope(g, u, h, v, res, s, n)
    tau, f = res.tau_star, res.f_star
    gam = gg.christoffel(g)
    st, _ = s_tensor(g, u, gg.curvature(g, gam))
    rho = _minimizer_measure(g, f, tau, n)
    metric_part = (gg.inner(g, h, st) + gg.inner(g, h, gg.hessian(g, f, gam))
                   + s * gg.trace(g, h) / (2.0 * tau))
    map_part = v * (gg.laplace_beltrami(g, u) - gg.grad_inner(g, u, f))
    return -tau * gg.integrate(g, metric_part, rho) + 4.0 * tau * gg.integrate(g, map_part, rho)


def euler_lagrange_residual(g: MetricField, u: np.ndarray, f: np.ndarray, tau: float, nu: float,
                            sign, n: int = 2, tol: float = 1e-8) -> Tuple[float, float]:
    """Residuals of the two optimality conditions for ``(f, tau)``.

    ``eq1`` is the ``dmu``-weighted L2 norm of
    ``tau (-2 Laplace f + |grad f|^2 - S) +- f -+ n + nu``, where the combination
    ``-2 Laplace f + |grad f|^2`` is evaluated as ``4 Laplace(w) / w`` with
    ``w = e^{-f/2}``; this is the form whose discrete minimizers make ``eq1``
    vanish exactly.  ``eq2 = |int f dmu - (n/2 -+ nu)|``.
    """
    s = entropy._sign(sign)
    rho = _minimizer_measure(g, f, tau, n)
    mass = gg.integrate(g, rho)
    if abs(mass - 1.0) > tol:
        raise DomainError(f"normalization violated: mass {mass!r}")
    _, S = s_tensor(g, u)
    w = np.exp(-0.5 * f)
    combo = 4.0 * gg.laplace_beltrami(g, w) / w
    e1 = tau * (combo - S) + s * f - s * n + nu
    eq1 = math.sqrt(max(gg.integrate(g, e1 * e1, rho), 0.0))
    eq2 = abs(gg.integrate(g, f, rho) - (0.5 * n - s * nu))
    return eq1, eq2


def soliton_residual(g: MetricField, u: np.ndarray, f: np.ndarray, c: float) -> Tuple[float, float]:
    """Max-node ``|Stensor + Hess f + c g|_g`` and ``|Laplace u - <du, df>|``."""
    gam = gg.christoffel(g)
    st, _ = s_tensor(g, u, gg.curvature(g, gam))
    t = st + gg.hessian(g, f, gam) + g.as_tensor() * c
    tensor_norm = float(np.sqrt(np.max(gg.norm2(g, t))))
    scalar = gg.laplace_beltrami(g, u) - gg.grad_inner(g, u, f)
    return tensor_norm, float(np.max(np.abs(scalar)))


# ---------------------------------------------------------------------------
# finite-difference oracles


def central_differences(fun: Callable[[float], object], s_steps: Sequence[float]) -> List[object]:
    """``(fun(s) - fun(-s)) / (2 s)`` for each step."""
    return [(fun(s) - fun(-s)) / (2.0 * s) for s in s_steps]


def convergence_slopes(errors: Sequence[float], s_steps: Sequence[float]) -> List[float]:
    """Observed orders ``log(e_i / e_{i+1}) / log(s_i / s_{i+1})`` between consecutive steps."""
    out = []
    for i in range(len(errors) - 1):
        a, b = errors[i], errors[i + 1]
        if a <= 0 or b <= 0:
            out.append(float("inf") if b == 0 and a > 0 else float("nan"))
            continue
        out.append(math.log(a / b) / math.log(s_steps[i] / s_steps[i + 1]))
    return out


def fd_scalar_curvature(g: MetricField, h: SymTensorField,
                        s_steps: Sequence[float]) -> List[np.ndarray]:
    """Central differences of the nodal scalar curvature along ``g + s h``."""
    return central_differences(lambda s: gg.curvature(g.plus(h, s))[1], s_steps)


def fd_nu_variation(g: MetricField, u: np.ndarray, direction: VariationDirection, sign,
                    minimizer: entropy.MinimizerResult, n: int = 2,
                    window: Tuple[float, float] = (1e-2, 1e2)) -> List[float]:
    """Central differences of ``nu_+-`` with re-minimization at every step.

    Each perturbed problem is solved by a local search started from the base
    minimizer, so all evaluations follow the same branch of minimizers.

    Raises
    ------
    PreconditionError
        A perturbed minimizing ``tau`` lies on the window edge.
    """
    direction.check(g)
    s = entropy._sign(sign)

    def nu(step):
        gs = g.plus(direction.h, step)
        r = entropy.nu_pm(gs, u + step * direction.v, s, n, window=window,
                          tau0=minimizer.tau_star, w0=minimizer.w_star)
        if r.boundary_hit:
            raise PreconditionError(f"perturbed minimizer at s = {step:g} sits on the tau-window edge")
        return r.value

    return central_differences(nu, direction.s_steps)
