"""Sparse assembly of ``-a*Laplace + V`` and its lowest eigenpairs.

The stiffness matrix is built from the same face and node terms as
:func:`hrflow.grid_geometry.dirichlet_form`, so ``f @ K @ q`` reproduces the
discrete Dirichlet pairing exactly and ``K f = -M * laplace_beltrami(g, f)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import grid_geometry as gg
from .errors import ConvergenceError, DomainError, PreconditionError
from .grid_geometry import Grid, MetricField, SymTensorField

__all__ = [
    "SpectralOperator",
    "EigenPair",
    "assemble",
    "smallest_eigs",
    "laplacian_eigs",
    "guc_ground_state",
    "rayleigh_quotient",
    "eigen_residual",
    "lambda_dot_laplacian",
    "lambda_dot_guc",
]

RESIDUAL_TOL = 1e-9
MAX_ITER = 10_000


@dataclass(frozen=True, eq=False)
class SpectralOperator:
    """Generalized symmetric pencil ``K f = lambda M f`` for ``-a*Laplace_g + V``.

    Attributes
    ----------
    stiffness : scipy.sparse.csr_matrix
        ``K = a*L + diag(V*m)`` where ``L`` is the Dirichlet-form matrix.
    potential : ndarray
        ``V`` on the grid.
    scale : float
        The coefficient ``a``.
    mass : ndarray
        Diagonal weights ``m = sqrt(det g) * hx * hy`` (flattened, C order).
    """

    stiffness: sp.csr_matrix
    potential: np.ndarray
    scale: float
    mass: np.ndarray
    grid: Grid

    @property
    def size(self) -> int:
        return self.mass.size

    def apply(self, f: np.ndarray) -> np.ndarray:
        """``(-a*Laplace + V) f`` as a grid function."""
        return (self.stiffness @ f.ravel() / self.mass).reshape(self.grid.shape)


@dataclass(frozen=True, eq=False)
class EigenPair:
    value: float
    function: np.ndarray
    residual: float
    iterations: int


def _index(grid: Grid) -> np.ndarray:
    return np.arange(grid.nx * grid.ny).reshape(grid.shape)


def _centered_difference_matrix(grid: Grid, axis: int) -> sp.csr_matrix:
    idx = _index(grid)
    n = idx.size
    h = grid.spacing(axis)
    plus = np.roll(idx, -1, axis).ravel()
    minus = np.roll(idx, 1, axis).ravel()
    rows = np.concatenate([idx.ravel(), idx.ravel()])
    cols = np.concatenate([plus, minus])
    vals = np.concatenate([np.full(n, 0.5 / h), np.full(n, -0.5 / h)])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def dirichlet_matrix(g: MetricField) -> sp.csr_matrix:
    """Matrix ``L`` with ``f @ L @ q == dirichlet_form(g, f, q)``."""
    grid = g.grid
    idx = _index(grid)
    n = idx.size
    fx, fy, c = gg._flux_coefficients(g)
    rows, cols, vals = [], [], []
    for axis, face, h, hperp in ((0, fx, grid.hx, grid.hy), (1, fy, grid.hy, grid.hx)):
        a = idx.ravel()
        b = np.roll(idx, -1, axis).ravel()
        w = (face * (hperp / h)).ravel()
        rows += [a, b, a, b]
        cols += [a, b, b, a]
        vals += [w, w, -w, -w]
    faces = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    d0 = _centered_difference_matrix(grid, 0)
    d1 = _centered_difference_matrix(grid, 1)
    x = (d0.T @ sp.diags((c * grid.cell_area).ravel()) @ d1).tocsr()
    return (faces + (x + x.T)).tocsr()


def _exact_constant_kernel(K: sp.csr_matrix) -> sp.csr_matrix:
    """Re-store ``K`` with each diagonal placed last in its row and set to minus the
    left-to-right sum of the off-diagonals, so a CSR product with the constant
    vector (which accumulates in storage order) returns exact zeros."""
    n = K.shape[0]
    coo = K.tocsr().tocoo()
    off = coo.row != coo.col
    rows, cols, vals = coo.row[off], coo.col[off], coo.data[off]
    counts = np.bincount(rows, minlength=n)
    start = np.concatenate([[0], np.cumsum(counts)])
    pos = np.arange(rows.size) - start[rows]
    P = np.zeros((n, int(counts.max()) if n else 0))
    P[rows, pos] = vals
    acc = np.zeros(n)
    for j in range(P.shape[1]):
        acc = acc + P[:, j]
    indptr = start + np.arange(n + 1)
    data = np.empty(rows.size + n)
    indices = np.empty(rows.size + n, dtype=np.int64)
    data[np.arange(rows.size) + rows] = vals
    indices[np.arange(rows.size) + rows] = cols
    data[indptr[1:] - 1] = -acc
    indices[indptr[1:] - 1] = np.arange(n)
    return sp.csr_matrix((data, indices, indptr), shape=K.shape)


def assemble(g: MetricField, V: Optional[np.ndarray] = None, a: float = 1.0) -> SpectralOperator:
    """Discretize ``-a*Laplace_g + V`` with the flux stencil of the geometry module."""
    if not a > 0:
        raise DomainError("operator scale a must be positive")
    grid = g.grid
    V = np.zeros(grid.shape) if V is None else np.asarray(V, dtype=np.float64)
    if not np.all(np.isfinite(V)):
        raise DomainError("potential is not finite")
    mass = (g.sqrt_det * grid.cell_area).ravel()
    K = _exact_constant_kernel(a * dirichlet_matrix(g))
    if np.any(V != 0):
        K = (K + sp.diags(V.ravel() * mass)).tocsr()
    return SpectralOperator(K, V, float(a), mass, grid)


def rayleigh_quotient(op: SpectralOperator, f: np.ndarray) -> float:
    v = f.ravel()
    return float(v @ (op.stiffness @ v)) / float(v @ (op.mass * v))


def eigen_residual(op: SpectralOperator, lam: float, f: np.ndarray) -> float:
    """``||K f - lam M f||_{M^-1} / ||f||_M``."""
    v = f.ravel()
    r = op.stiffness @ v - lam * op.mass * v
    return float(np.sqrt(np.sum(r * r / op.mass)) / np.sqrt(np.sum(op.mass * v * v)))


def _start_block(grid: Grid, p: int) -> np.ndarray:
    """Deterministic smooth starting vectors: low Fourier modes in increasing frequency."""
    x, y = grid.coords()
    tx = 2 * np.pi * x / grid.Lx
    ty = 2 * np.pi * y / grid.Ly
    cols = [np.ones(grid.shape)]
    r = 1
    while len(cols) < p:
        for kx in range(-r, r + 1):
            for ky in range(-r, r + 1):
                if max(abs(kx), abs(ky)) != r:
                    continue
                ph = kx * tx + ky * ty
                # small irrational offsets break exact symmetries of the start block
                cols.append(np.cos(ph + 0.1 * r) + 1e-3 * np.sin(3 * tx + 5 * ty + kx))
        r += 1
    return np.stack([c.ravel() for c in cols[:p]], axis=1)


def _m_orthonormalize(Y: np.ndarray, m: np.ndarray) -> np.ndarray:
    B = Y.T @ (m[:, None] * Y)
    B = 0.5 * (B + B.T)
    w, Q = np.linalg.eigh(B)
    keep = w > w.max() * 1e-14
    return Y @ (Q[:, keep] / np.sqrt(w[keep]))


def smallest_eigs(
    op: SpectralOperator,
    k: int = 1,
    deflate_constants: bool = False,
    x0: Optional[Sequence[np.ndarray]] = None,
    tol: float = RESIDUAL_TOL,
    max_iter: int = MAX_ITER,
) -> List[EigenPair]:
    """Lowest ``k`` eigenpairs of ``K f = lambda M f`` by shift-invert subspace iteration.

    Parameters
    ----------
    op : SpectralOperator
    k : int
        Number of eigenpairs wanted.
    deflate_constants : bool
        Project the constant vector out of every iterate (for the Laplacian this
        makes the first returned value the smallest nonzero eigenvalue).
    x0 : sequence of grid functions, optional
        Warm-start vectors, e.g. eigenfunctions at the previous time step.
    tol : float
        Required eigen-residual ``||K f - lam M f||_{M^-1}`` for ``||f||_M = 1``.

    Returns
    -------
    list of EigenPair
        Sorted by value; functions are M-orthonormal, so a degenerate eigenvalue
        comes back as an orthonormal basis of (part of) its eigenspace.  Each
        function has a nonnegative node sum.
    """
    if k < 1:
        raise PreconditionError("k must be at least 1")
    n = op.size
    m = op.mass
    K = op.stiffness
    p = min(n - 1, 2 * k + 4)
    sigma = float(np.min(op.potential)) - 1.0
    lu = spla.splu((K - sigma * sp.diags(m)).tocsc())
    ones = np.ones(n)
    total = float(ones @ m)

    def deflate(Z):
        if deflate_constants:
            Z = Z - np.outer(ones, (m @ Z) / total)
        return Z

    X = _start_block(op.grid, p + (1 if deflate_constants else 0))
    X = deflate(X)
    if x0 is not None:
        warm = np.stack([np.asarray(v, dtype=np.float64).ravel() for v in x0], axis=1)
        X = np.concatenate([deflate(warm), X], axis=1)[:, :p]
    X = _m_orthonormalize(X, m)[:, :p]

    best = np.inf
    lam = None
    for it in range(1, max_iter + 1):
        Y = deflate(lu.solve(m[:, None] * X))
        Y = _m_orthonormalize(Y, m)
        KY = K @ Y
        H = Y.T @ KY
        theta, Z = sla.eigh(0.5 * (H + H.T))
        X = Y @ Z
        KX = KY @ Z
        lam = theta
        R = KX[:, :k] - m[:, None] * X[:, :k] * lam[:k]
        res = np.sqrt(np.sum(R * R / m[:, None], axis=0))
        best = min(best, float(res.max()))
        if res.max() <= tol:
            break
    else:
        raise ConvergenceError(
            f"eigensolver did not reach residual {tol:g} in {max_iter} iterations", best_residual=best
        )

    vmin = float(np.min(op.potential))
    if lam[0] < vmin - 1e-9 * max(1.0, abs(vmin)):
        raise ConvergenceError(f"variational bound violated: {lam[0]} < min V = {vmin}", best_residual=best)

    out = []
    for j in range(k):
        v = X[:, j]
        if v.sum() < 0:
            v = -v
        out.append(EigenPair(float(lam[j]), v.reshape(op.grid.shape), float(res[j]), it))
    return out


def laplacian_eigs(g: MetricField, k: int = 1, x0=None) -> List[EigenPair]:
    """Smallest nonzero eigenvalues of ``-Laplace_g``."""
    return smallest_eigs(assemble(g), k, deflate_constants=True, x0=x0)


def guc_ground_state(g: MetricField, u: np.ndarray, x0=None) -> EigenPair:
    """Ground state of ``-Laplace + (R - 2|grad u|^2)/2``."""
    from .flow_engine import s_tensor

    _, S = s_tensor(g, u)
    return smallest_eigs(assemble(g, 0.5 * S, 1.0), 1, x0=x0)[0]


def lambda_dot_laplacian(g: MetricField, u: np.ndarray, lam: float, f: np.ndarray,
                         residual_tol: float = 1e-6) -> float:
    """Time derivative of a Laplacian eigenvalue along the flow.

    ``[lam int S f^2 - int S |grad f|^2 + 2 int <Stensor, df x df>] / int f^2``.
    """
    from .flow_engine import s_tensor

    op = assemble(g)
    res = eigen_residual(op, lam, f)
    if res > residual_tol * max(1.0, abs(lam)):
        raise PreconditionError(f"(lam, f) is not an eigenpair: residual {res:.3e}")
    St, S = s_tensor(g, u)
    df = gg.gradient(f, g.grid)
    num = (lam * gg.integrate(g, S * f * f)
           - gg.integrate(g, S * gg.grad_norm2(g, f))
           + 2.0 * gg.integrate(g, gg.inner(g, St, SymTensorField.outer(df))))
    return num / gg.integrate(g, f * f)


def lambda_dot_guc(g: MetricField, u: np.ndarray, f: np.ndarray):
    """Two closed forms for the derivative of the ground-state eigenvalue of
    ``-Laplace + S/2`` along the flow.

    Returns
    -------
    rateA : float
        ``int 2<Stensor, df x df> + int f^2 (|Stensor|^2 + 2 |Laplace u|^2)``.
    rateB : float
        The same derivative written in ``phi = -ln f^2`` with weight ``e^{-phi}``.
    """
    from .flow_engine import s_tensor

    if np.any(f <= 0):
        raise DomainError("ground state must be strictly positive")
    St, _ = s_tensor(g, u)
    gamma = gg.christoffel(g)
    grid = g.grid
    df = gg.gradient(f, grid)
    lap_u = gg.laplace_beltrami(g, u)
    du = gg.gradient(u, grid)
    St2 = gg.norm2(g, St)

    rate_a = (2.0 * gg.integrate(g, gg.inner(g, St, SymTensorField.outer(df)))
              + gg.integrate(g, f * f * (St2 + 2.0 * lap_u * lap_u)))

    phi = -np.log(f * f)
    w = f * f
    hess_phi = gg.hessian(g, phi, gamma)
    hess_u = gg.hessian(g, u, gamma)
    dudphi = gg.grad_inner(g, u, phi)
    dudu = SymTensorField.outer(du)
    rate_b = (0.5 * gg.integrate(g, gg.norm2(g, St + hess_phi), w)
              + 0.25 * gg.integrate(g, St2, w)
              + gg.integrate(g, dudphi * dudphi, w)
              + 2.0 * gg.integrate(g, gg.norm2(g, hess_u), w)
              + 0.25 * gg.integrate(g, gg.norm2(g, St + 4.0 * dudu), w)
              - gg.integrate(g, gg.laplace_beltrami(g, gg.grad_norm2(g, u)), w))
    return rate_a, rate_b
