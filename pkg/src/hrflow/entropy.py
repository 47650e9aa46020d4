"""Entropy functionals and their constrained infima.

Every discrete occurrence of ``int |grad f|^2 e^{-f} dV`` is the Fisher form
``4 dirichlet_form(g, w, w)`` with ``w = e^{-f/2}``.  The integrand
``(Laplace f) e^{-f}`` is discretized through the pointwise identity
``e^{-f} Laplace f = -4 w Laplace w + Laplace(e^{-f})``, so the integration by
parts relating the W_+ and F families is exact on the grid, and the spectral
ground state reproduces ``mu_k`` exactly when inserted into ``F_k``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import optimize

from . import grid_geometry as gg
from . import spectral
from .errors import ConvergenceError, DomainError, PreconditionError
from .flow_engine import s_tensor
from .grid_geometry import MetricField

__all__ = [
    "MinimizerResult",
    "normalize_f",
    "weighted_gradient_energy",
    "laplacian_weighted_density",
    "functional_F_k",
    "functional_F",
    "functional_E",
    "mu_k",
    "mu_k_pair",
    "W_plus_family",
    "mu_plus",
    "W_pm",
    "W_pm_w_form",
    "mu_pm",
    "nu_pm",
]

Sign = Union[int, str]


def _sign(sign: Sign) -> int:
    if sign in (1, "+", "plus"):
        return 1
    if sign in (-1, "-", "minus"):
        return -1
    raise DomainError(f"sign must be + or -, got {sign!r}")


@dataclass
class MinimizerResult:
    """Outcome of a constrained minimization.

    ``gradient_residual`` is the mass-weighted norm of the projected gradient,
    which equals the Euler-Lagrange residual of the minimized functional.
    ``identity_residual`` is ``|int f dmu - (n/2 -+ value)|``; it vanishes only
    when ``tau`` is also stationary.
    """

    value: float
    f_star: np.ndarray
    tau_star: float
    gradient_residual: float
    boundary_hit: bool = False
    w_star: Optional[np.ndarray] = None
    identity_residual: float = float("nan")
    iterations: int = 0
    sign: int = 1
    samples: List[Tuple[float, float]] = field(default_factory=list)


# ---------------------------------------------------------------------------
# F-family


def normalize_f(g: MetricField, f: np.ndarray, tau: Optional[float] = None, n: int = 2) -> np.ndarray:
    """Shift ``f`` by a constant so that ``int e^{-f} dV`` (divided by ``(4 pi tau)^{n/2}``
    when ``tau`` is given) equals one."""
    z = gg.integrate(g, np.exp(-f))
    if tau is not None:
        z /= (4.0 * math.pi * tau) ** (n / 2.0)
    return f + math.log(z)


def _check_mass(g, f, rescale, tau=None, n=2, tol=1e-8):
    z = gg.integrate(g, np.exp(-f))
    if tau is not None:
        z /= (4.0 * math.pi * tau) ** (n / 2.0)
    if abs(z - 1.0) <= tol:
        return f
    if rescale:
        return f + math.log(z)
    raise DomainError(f"normalization violated: mass {z!r} differs from 1 by more than {tol:g}")


def weighted_gradient_energy(g: MetricField, f: np.ndarray) -> float:
    """Discrete ``int |grad f|^2 e^{-f} dV`` as ``4 D(w, w)``, ``w = e^{-f/2}``."""
    w = np.exp(-0.5 * f)
    return 4.0 * gg.dirichlet_form(g, w, w)


def laplacian_weighted_density(g: MetricField, f: np.ndarray) -> np.ndarray:
    """Nodal ``(Laplace f) e^{-f}`` as ``-4 w Laplace w + Laplace(e^{-f})``."""
    w = np.exp(-0.5 * f)
    return -4.0 * w * gg.laplace_beltrami(g, w) + gg.laplace_beltrami(g, w * w)


def functional_F_k(g: MetricField, u: np.ndarray, f: np.ndarray, k: float = 1.0,
                   rescale: bool = False) -> float:
    """``int (k R + |grad f|^2 - 2k |grad u|^2) e^{-f} dV`` with ``int e^{-f} dV = 1``."""
    if k < 1:
        raise DomainError("k must be at least 1")
    f = _check_mass(g, f, rescale)
    _, S = s_tensor(g, u)
    return k * gg.integrate(g, S, np.exp(-f)) + weighted_gradient_energy(g, f)


def functional_F(g, u, f, rescale=False) -> float:
    return functional_F_k(g, u, f, 1.0, rescale)


def functional_E(g: MetricField, u: np.ndarray, f: np.ndarray, rescale: bool = False) -> float:
    """``int (R - 2|grad u|^2) e^{-f} dV`` with ``int e^{-f} dV = 1``."""
    f = _check_mass(g, f, rescale)
    _, S = s_tensor(g, u)
    return gg.integrate(g, S, np.exp(-f))


def mu_k_pair(g: MetricField, u: np.ndarray, k: float = 1.0, x0=None) -> spectral.EigenPair:
    """Ground state of ``-4 Laplace + k (R - 2|grad u|^2)``."""
    if k < 1:
        raise DomainError("k must be at least 1")
    _, S = s_tensor(g, u)
    op = spectral.assemble(g, k * S, 4.0)
    return spectral.smallest_eigs(op, 1, x0=x0)[0]


def mu_k(g: MetricField, u: np.ndarray, k: float = 1.0, x0=None) -> float:
    """Lowest eigenvalue of ``-4 Laplace + k (R - 2|grad u|^2)``."""
    return mu_k_pair(g, u, k, x0).value


def W_plus_family(g: MetricField, u: np.ndarray, f: np.ndarray, tau: float, k: float = 1.0,
                  n: int = 2) -> float:
    """``tau^2 int (k (R + n/(2 tau)) + Laplace f - 2k |grad u|^2) e^{-f} dV``."""
    if not tau > 0:
        raise DomainError("tau must be positive")
    _, S = s_tensor(g, u)
    ef = np.exp(-f)
    body = (k * gg.integrate(g, S, ef)
            + k * n / (2.0 * tau) * gg.integrate(g, ef)
            + gg.integrate(g, laplacian_weighted_density(g, f)))
    return tau * tau * body


def _minimize_F_k_direct(g, u, k, w0=None) -> float:
    """Direct minimization of F_k over normalized f, written in ``w = e^{-f/2}``
    (L-BFGS on the unconstrained Rayleigh form); cross-check only."""
    _, S = s_tensor(g, u)
    L = spectral.dirichlet_matrix(g)
    m = (g.sqrt_det * g.grid.cell_area).ravel()
    A = (4.0 * L + sp.diags(k * S.ravel() * m)).tocsr()
    x0 = np.ones(m.size) if w0 is None else np.asarray(w0, dtype=float).ravel()

    def fun(x):
        q = float(x @ (m * x))
        Ax = A @ x
        val = float(x @ Ax) / q
        return val, 2.0 * (Ax - val * m * x) / q

    res = optimize.minimize(fun, x0, jac=True, method="L-BFGS-B",
                            options={"maxiter": 50000, "maxcor": 30, "ftol": 1e-16, "gtol": 1e-13})
    return float(res.fun)


def mu_plus(g: MetricField, u: np.ndarray, tau: float, k: float = 1.0, n: int = 2,
            direct: bool = False) -> float:
    """``inf_f W_{+,k}`` over ``int e^{-f} dV = 1``, via ``tau^2 mu_k + (k n / 2) tau``.

    With ``direct=True`` the infimum is instead computed by minimizing
    ``tau^2 F_k + (k n / 2) tau`` over ``f`` numerically.
    """
    if not tau > 0:
        raise DomainError("tau must be positive")
    base = _minimize_F_k_direct(g, u, k) if direct else mu_k(g, u, k)
    return tau * tau * base + 0.5 * k * n * tau


# ---------------------------------------------------------------------------
# W_+- family


def W_pm(g: MetricField, u: np.ndarray, f: np.ndarray, tau: float, sign: Sign, n: int = 2,
         rescale: bool = False) -> float:
    """``int [tau (S + |grad f|^2) -+ f +- n] e^{-f} (4 pi tau)^{-n/2} dV``."""
    s = _sign(sign)
    if not tau > 0:
        raise DomainError("tau must be positive")
    f = _check_mass(g, f, rescale, tau, n)
    _, S = s_tensor(g, u)
    P = (4.0 * math.pi * tau) ** (n / 2.0)
    rho = np.exp(-f) / P
    w = np.sqrt(rho)
    grad_term = 4.0 * gg.dirichlet_form(g, w, w)
    return (tau * gg.integrate(g, S, rho) + tau * grad_term
            - s * gg.integrate(g, f, rho) + s * n * gg.integrate(g, rho))


def W_pm_w_form(g: MetricField, u: np.ndarray, w: np.ndarray, tau: float, sign: Sign,
                n: int = 2) -> float:
    """``int (4 tau |grad w|^2 + tau S w^2 +- w^2 ln w^2) dV +- (n/2) ln(4 pi tau) +- n``."""
    s = _sign(sign)
    _, S = s_tensor(g, u)
    w2 = w * w
    return (4.0 * tau * gg.dirichlet_form(g, w, w) + tau * gg.integrate(g, S, w2)
            + s * gg.integrate(g, w2 * np.log(np.maximum(w2, 1e-300)))
            + s * (0.5 * n * math.log(4.0 * math.pi * tau) + n))


class _WProblem:
    """Discrete ``Phi(w) = w.A w +- sum m w^2 ln w^2`` on ``sum m w^2 = 1`` with
    ``A = tau (4 L + diag(S m))``."""

    def __init__(self, g: MetricField, S: np.ndarray, tau: float, sign: int, n: int):
        self.g = g
        self.tau = tau
        self.sign = sign
        self.n = n
        self.m = (g.sqrt_det * g.grid.cell_area).ravel()
        self.S = S
        self.L = spectral.dirichlet_matrix(g)
        self.A = (tau * (4.0 * self.L + sp.diags(S.ravel() * self.m))).tocsr()
        self.const = sign * (0.5 * n * math.log(4.0 * math.pi * tau) + n)

    def normalize(self, w):
        w = np.abs(w)
        return w / math.sqrt(float(w @ (self.m * w)))

    def phi(self, w) -> float:
        w2 = w * w
        return float(w @ (self.A @ w)) + self.sign * float(self.m @ (w2 * np.log(np.maximum(w2, 1e-300))))

    def mgrad(self, w):
        """Half the Euclidean gradient divided by the mass: ``A w / m +- (ln w^2 + 1) w``."""
        return (self.A @ w) / self.m + self.sign * (np.log(np.maximum(w * w, 1e-300)) + 1.0) * w

    def tangent_residual(self, w):
        G = self.mgrad(w)
        lam = float(self.m @ (w * G))
        r = G - lam * w
        return r, lam

    def norm_m(self, v) -> float:
        return math.sqrt(float(self.m @ (v * v)))


def _preconditioner(prob: "_WProblem", w: np.ndarray):
    """Factor ``K - (lam0 - 1) M`` where ``K`` is the operator linearized at ``w``
    (potential ``tau S +- (ln w^2 + 1)``) and ``lam0`` its ground eigenvalue,
    so the factor is SPD with smallest eigenvalue one."""
    nl = prob.sign * (np.log(np.maximum(w * w, 1e-300)) + 1.0)
    grid = prob.g.grid
    V = prob.S + nl.reshape(grid.shape) / prob.tau
    op = spectral.assemble(prob.g, prob.tau * V, 4.0 * prob.tau)
    try:
        # only a rough shift is needed here
        lam0 = spectral.smallest_eigs(op, 1, x0=w.reshape(grid.shape)[None], tol=1e-6,
                                      max_iter=500)[0].value
    except ConvergenceError:
        lam0 = float(np.min(op.potential))  # variational lower bound keeps K - (lam0 - 1) M SPD
    K = op.stiffness - (lam0 - 1.0) * sp.diags(prob.m)
    return spla.splu(K.tocsc())


def _newton_direction(prob: "_WProblem", w: np.ndarray, r: np.ndarray):
    """Tangent Newton step: ``H d + nu M w = -M r``, ``w.M d = 0``, with
    ``H = A + M (+-(ln w^2 + 3) - lam)`` the Hessian of the Lagrangian."""
    m = prob.m
    G = prob.mgrad(w)
    lam = float(m @ (w * G))
    diag = m * (prob.sign * (np.log(np.maximum(w * w, 1e-300)) + 3.0) - lam)
    try:
        lu = spla.splu((prob.A + sp.diags(diag)).tocsc())
    except RuntimeError:
        return False
    y1 = lu.solve(m * r)
    y2 = lu.solve(m * w)
    den = float(m @ (w * y2))
    if not np.isfinite(den) or abs(den) < 1e-300:
        return False
    nu = -float(m @ (w * y1)) / den
    d = -y1 - nu * y2
    return d if np.all(np.isfinite(d)) else False


def _solve_w(prob: _WProblem, w0: np.ndarray, tol: float, max_iter: int, rebuild: int = 30,
             newton_switch: float = 1e-2):
    """Preconditioned nonlinear conjugate gradients on the sphere ``||w||_M = 1``.

    Retraction is ``|w + a d| / ||w + a d||_M`` (magnitude projection keeps w
    positive) with Armijo backtracking on Phi.  The preconditioner is refreshed
    every ``rebuild`` iterations; once the residual drops below
    ``newton_switch`` a tangent Newton step is tried first.
    """
    m = prob.m
    w = prob.normalize(w0)
    # residual round-off floor: the stiffness rows cancel to order eps * |A| |w|
    floor = 100.0 * np.finfo(float).eps * prob.norm_m(abs(prob.A) @ w / m)
    tol = max(tol, floor)
    lu = _preconditioner(prob, w)
    phi = prob.phi(w)
    r, _ = prob.tangent_residual(w)
    res = prob.norm_m(r)
    d_prev = z_prev = r_prev = None
    alpha = 1.0
    it = 0
    stall = 0
    while res > tol and it < max_iter:
        it += 1
        if it % rebuild == 0:
            lu = _preconditioner(prob, w)
            d_prev = None
        z = lu.solve(m * r)
        z = z - float(m @ (z * w)) * w
        d = -z
        newton = res < newton_switch and _newton_direction(prob, w, r)
        if newton is not False and 2.0 * float(m @ (r * newton)) < 0:
            d = newton
            d_prev = None
        elif d_prev is not None:
            beta = max(0.0, float(m @ (z * (r - r_prev))) / max(float(m @ (z_prev * r_prev)), 1e-300))
            d = d + beta * (d_prev - float(m @ (d_prev * w)) * w)
        slope = 2.0 * float(m @ (r * d))
        if slope >= 0:
            d = -z
            slope = 2.0 * float(m @ (r * d))
        # fraction-to-boundary clipping: a full step never removes more than 90% of a node
        d = np.maximum(d, -0.9 * w)
        slope = 2.0 * float(m @ (r * d))
        if slope >= 0:
            d = np.maximum(-z, -0.9 * w)
            slope = 2.0 * float(m @ (r * d))
        a = 1.0 if d_prev is None and res < newton_switch else min(1.0, 2.0 * alpha)
        accepted = False
        for _ in range(50):
            trial = prob.normalize(w + a * d)
            ph = prob.phi(trial)
            if ph <= phi + 1e-4 * a * slope:
                accepted = True
                break
            # below the round-off level of Phi, fall back to residual decrease
            if ph <= phi + 1e-13 * (1.0 + abs(phi)):
                rt, _ = prob.tangent_residual(trial)
                if prob.norm_m(rt) < res:
                    accepted = True
                    break
            a *= 0.5
        if not accepted:
            # decrease no longer resolvable in floating point: keep the best point
            stall += 1
            if stall > 3:
                break
            d_prev = None
            continue
        stall = 0
        alpha = a
        w, phi = trial, ph
        d_prev, z_prev, r_prev = d, z, r
        r, _ = prob.tangent_residual(w)
        res = prob.norm_m(r)
    return w, phi, res, it


def _finish(prob: _WProblem, w: np.ndarray, phi: float, res: float, it: int) -> MinimizerResult:
    value = phi + prob.const
    P = (4.0 * math.pi * prob.tau) ** (prob.n / 2.0)
    f = -np.log(np.maximum(P * w * w, 1e-300)).reshape(prob.g.grid.shape)
    F = float(prob.m @ (f.ravel() * w * w))
    ident = abs(F - (0.5 * prob.n - prob.sign * value))
    return MinimizerResult(value=value, f_star=f, tau_star=prob.tau, gradient_residual=res,
                           w_star=w.reshape(prob.g.grid.shape), identity_residual=ident,
                           iterations=it, sign=prob.sign)


def _unstable_mode(prob: _WProblem, w: np.ndarray):
    """Unstable tangent direction of a positive critical point, or None.

    At such a point ``w`` is the ground state of the linearized operator ``K``,
    and the tangent Hessian of the minus problem is ``K - lam_1 - 2`` on the
    complement of ``w``; it is stable iff ``lam_2 - lam_1 >= 2``.
    """
    grid = prob.g.grid
    nl = prob.sign * (np.log(np.maximum(w * w, 1e-300)) + 1.0)
    op = spectral.assemble(prob.g, prob.tau * prob.S + nl.reshape(grid.shape), 4.0 * prob.tau)
    pairs = spectral.smallest_eigs(op, 2)
    if pairs[1].value - pairs[0].value >= 2.0 - 1e-9:
        return None
    v = pairs[1].function.ravel()
    v = v - float(prob.m @ (v * w)) * w
    return v / prob.norm_m(v)


def mu_pm(g: MetricField, u: np.ndarray, tau: float, sign: Sign, n: int = 2,
          w0: Optional[np.ndarray] = None, tol: float = 1e-10, max_iter: int = 5000,
          accept: float = 1e-6, max_escapes: int = 20) -> MinimizerResult:
    """``inf_f W_+-(g, u, f, tau)`` over ``int e^{-f} (4 pi tau)^{-n/2} dV = 1``.

    Minimizes over ``w`` with ``int w^2 dV = 1``, starting from the ground state of
    ``tau (-4 Laplace + S)`` unless ``w0`` is given.  For the minus sign each
    converged critical point is tested for second-order stability and, if it is
    a saddle, the descent restarts from a displacement along the unstable mode.
    The result is a local minimizer; the plus problem is convex in ``w^2``.

    Raises
    ------
    ConvergenceError
        The projected gradient stays above ``accept`` (mass-weighted norm).
    """
    s = _sign(sign)
    if not tau > 0:
        raise DomainError("tau must be positive")
    _, S = s_tensor(g, u)
    prob = _WProblem(g, S, tau, s, n)
    if w0 is None:
        op = spectral.assemble(g, tau * S, 4.0 * tau)
        try:
            w0 = spectral.smallest_eigs(op, 1)[0].function
        except ConvergenceError:
            # nearly degenerate ground state: any positive start will do
            w0 = np.ones(g.grid.shape)
    w, phi, res, it = _solve_w(prob, np.asarray(w0, dtype=float).ravel(), tol, max_iter)
    if s < 0:
        # the minus problem is nonconvex: leave saddle points along the unstable mode
        for _ in range(max_escapes):
            v = _unstable_mode(prob, w)
            if v is None:
                break
            moved = False
            for eps in (0.5, 0.25, 0.1, 0.03):
                for sgn in (1.0, -1.0):
                    trial = prob.normalize(w + sgn * eps * v)
                    if prob.phi(trial) < phi - 1e-12 * (1.0 + abs(phi)):
                        w2, phi2, res2, it2 = _solve_w(prob, trial, tol, max_iter)
                        if phi2 < phi:
                            w, phi, res, it = w2, phi2, res2, it + it2
                            moved = True
                            break
                if moved:
                    break
            if not moved:
                break
    if res > accept:
        raise ConvergenceError(f"mu_pm descent stalled with residual {res:.3e}", best_residual=res)
    return _finish(prob, w, phi, res, it)


def _tau_derivative(g, S, w, tau, sign, n) -> float:
    """``d mu / d tau`` at a minimizer (envelope theorem): ``4D + int S w^2 +- n/(2 tau)``."""
    return (4.0 * gg.dirichlet_form(g, w, w) + gg.integrate(g, S * w * w)
            + sign * n / (2.0 * tau))


def nu_pm(g: MetricField, u: np.ndarray, sign: Sign, n: int = 2,
          window: Tuple[float, float] = (1e-2, 1e2), scan_points: int = 17,
          w0: Optional[np.ndarray] = None, tau0: Optional[float] = None,
          xtol: float = 1e-5, tol: float = 1e-10) -> MinimizerResult:
    """``inf_tau mu_+-(g, u, tau)`` over ``log tau`` in ``window``.

    A log-spaced scan brackets the smallest sample; golden-section search
    refines it, and an interior optimum is polished by solving
    ``d mu / d tau = 0`` (envelope derivative) with Brent's method.  The
    result is flagged ``boundary_hit`` when the optimum sits on a window edge.
    With ``tau0`` (and optionally ``w0``) the scan is replaced by a local
    search around ``tau0``, which keeps a perturbed problem on the same branch.
    """
    s = _sign(sign)
    lo, hi = math.log(window[0]), math.log(window[1])
    _, S = s_tensor(g, u)
    cache: dict = {}
    samples: List[Tuple[float, float]] = []

    def solve(x, start=None):
        if x in cache:
            return cache[x]
        tau = math.exp(x)
        if start is None and cache:
            nearest = min(cache, key=lambda y: abs(y - x))
            start = cache[nearest].w_star
        r = mu_pm(g, u, tau, s, n, w0=start, tol=tol)
        cache[x] = r
        samples.append((tau, r.value))
        return r

    if tau0 is not None:
        x0 = min(max(math.log(tau0), lo), hi)
        solve(x0, w0)
        step = 0.05
        a, b = max(lo, x0 - step), min(hi, x0 + step)
        # expand until the sample bracket has a smaller interior point, or an edge is reached
        while True:
            fa, fb, fm = solve(a).value, solve(b).value, solve(x0).value
            if fm <= fa and fm <= fb:
                break
            if fa < fm and a > lo:
                x0, a = a, max(lo, a - 2 * step)
            elif fb < fm and b < hi:
                x0, b = b, min(hi, b + 2 * step)
            else:
                break
            step *= 2
    else:
        xs = np.linspace(lo, hi, scan_points)
        vals = [solve(float(x)).value for x in xs]
        j = int(np.argmin(vals))
        a = float(xs[max(j - 1, 0)])
        b = float(xs[min(j + 1, len(xs) - 1)])

    # golden-section refinement on [a, b]
    gr = (math.sqrt(5.0) - 1.0) / 2.0
    c = b - gr * (b - a)
    d = a + gr * (b - a)
    fc, fd = solve(c).value, solve(d).value
    while b - a > xtol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - gr * (b - a)
            fc = solve(c).value
        else:
            a, c, fc = c, d, fd
            d = a + gr * (b - a)
            fd = solve(d).value
    best_x = min(cache, key=lambda y: cache[y].value)
    best = cache[best_x]
    edge = 10 * xtol
    boundary = best_x <= lo + edge or best_x >= hi - edge

    if not boundary:
        def dmu(x):
            r = solve(x)
            return math.exp(x) * _tau_derivative(g, S, r.w_star, math.exp(x), s, n)

        xa, xb = best_x - 4 * xtol, best_x + 4 * xtol
        fa, fb = dmu(xa), dmu(xb)
        widen = 0
        while fa * fb > 0 and widen < 8:
            xa, xb = xa - 4 * xtol * 2 ** widen, xb + 4 * xtol * 2 ** widen
            fa, fb = dmu(xa), dmu(xb)
            widen += 1
        if fa * fb <= 0:
            xr = optimize.brentq(dmu, xa, xb, xtol=1e-14, rtol=1e-14, maxiter=200)
            cand = solve(xr)
            if cand.value <= best.value + 1e-10:
                best_x, best = xr, cand

    out = MinimizerResult(value=best.value, f_star=best.f_star, tau_star=math.exp(best_x),
                          gradient_residual=best.gradient_residual, boundary_hit=boundary,
                          w_star=best.w_star, identity_residual=best.identity_residual,
                          iterations=best.iterations, sign=s, samples=sorted(samples))
    return out
