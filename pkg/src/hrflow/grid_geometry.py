"""Discrete tensor calculus on a periodic rectangular grid.

Fields are ``numpy`` arrays of shape ``(nx, ny)`` indexed ``[i, j]`` with
``x = i*hx`` and ``y = j*hy``.  Coordinate index 0 is ``x``, index 1 is ``y``.

All first derivatives are centered second-order differences.  The
Laplace-Beltrami operator uses a flux (divergence-form) stencil with
arithmetic face averages, so that summation by parts against
:func:`dirichlet_form` holds to round-off.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Tuple

import numpy as np

from .errors import DomainError

__all__ = [
    "Grid",
    "SymTensorField",
    "MetricField",
    "ChristoffelField",
    "tree_sum",
    "diff",
    "diff2",
    "diff_xy",
    "gradient",
    "christoffel",
    "riemann",
    "lowered_riemann",
    "curvature",
    "hessian",
    "laplace_beltrami",
    "dirichlet_form",
    "grad_inner",
    "grad_norm2",
    "inner",
    "norm2",
    "tensor_ops",
    "trace",
    "integrate",
    "covariant_derivative_2",
    "bianchi_residuals",
]


@dataclass(frozen=True)
class Grid:
    """Periodic lattice with ``nx * ny`` nodes on ``[0, Lx) x [0, Ly)``."""

    nx: int
    ny: int
    Lx: float = 1.0
    Ly: float = 1.0

    def __post_init__(self):
        if int(self.nx) != self.nx or int(self.ny) != self.ny:
            raise DomainError("node counts must be integers")
        if self.nx < 8 or self.ny < 8:
            raise DomainError(f"need at least 8 nodes per axis, got {self.nx}x{self.ny}")
        if not (self.Lx > 0 and self.Ly > 0 and np.isfinite(self.Lx) and np.isfinite(self.Ly)):
            raise DomainError("periods must be positive and finite")

    @property
    def hx(self) -> float:
        return self.Lx / self.nx

    @property
    def hy(self) -> float:
        return self.Ly / self.ny

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def cell_area(self) -> float:
        return self.hx * self.hy

    def spacing(self, axis: int) -> float:
        return self.hx if axis == 0 else self.hy

    def coords(self) -> Tuple[np.ndarray, np.ndarray]:
        """Node coordinates as two ``(nx, ny)`` arrays."""
        x = np.arange(self.nx) * self.hx
        y = np.arange(self.ny) * self.hy
        return np.meshgrid(x, y, indexing="ij")

    def zeros(self) -> np.ndarray:
        return np.zeros(self.shape)


def tree_sum(values) -> float:
    """Sum in a fixed pairwise order, independent of platform blocking."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        return 0.0
    while v.size > 1:
        if v.size % 2:
            v = np.append(v, 0.0)
        v = v[0::2] + v[1::2]
    return float(v[0])


# ---------------------------------------------------------------------------
# finite differences


def _centered(f: np.ndarray, ax: int) -> np.ndarray:
    """``f[i+1] - f[i-1]`` along array axis ``ax`` with periodic wrap."""
    f = np.asarray(f)
    out = np.empty_like(f, dtype=np.result_type(f.dtype, np.float64))
    n = f.shape[ax]
    sl = [slice(None)] * f.ndim

    def at(i):
        sl[ax] = i
        return tuple(sl)

    np.subtract(f[at(slice(2, None))], f[at(slice(0, n - 2))], out=out[at(slice(1, n - 1))])
    np.subtract(f[at(slice(1, 2))], f[at(slice(n - 1, n))], out=out[at(slice(0, 1))])
    np.subtract(f[at(slice(0, 1))], f[at(slice(n - 2, n - 1))], out=out[at(slice(n - 1, n))])
    return out


def diff(f: np.ndarray, axis: int, grid: Grid) -> np.ndarray:
    """Centered first difference in coordinate direction ``axis`` (periodic).

    The two trailing array axes are the spatial ones, so stacked tensor
    components are differentiated componentwise.
    """
    out = _centered(f, np.ndim(f) - 2 + axis)
    out *= 1.0 / (2.0 * grid.spacing(axis))
    return out


def diff2(f: np.ndarray, axis: int, grid: Grid) -> np.ndarray:
    """Compact centered second difference in coordinate direction ``axis``."""
    ax = axis - 2
    h = grid.spacing(axis)
    return (np.roll(f, -1, ax) - 2.0 * f + np.roll(f, 1, ax)) / (h * h)


def diff_xy(f: np.ndarray, grid: Grid) -> np.ndarray:
    """Four-point cross difference for the mixed derivative."""
    return diff(diff(f, 1, grid), 0, grid)


def gradient(f: np.ndarray, grid: Grid) -> np.ndarray:
    """Coordinate gradient, shape ``(2, nx, ny)``."""
    return np.stack([diff(f, 0, grid), diff(f, 1, grid)])


def _second_partials(f: np.ndarray, grid: Grid) -> np.ndarray:
    fxy = diff_xy(f, grid)
    return np.stack(
        [np.stack([diff2(f, 0, grid), fxy]), np.stack([fxy, diff2(f, 1, grid)])]
    )


# ---------------------------------------------------------------------------
# field types


def _as_field(a, grid: Grid, name: str) -> np.ndarray:
    arr = np.array(np.broadcast_to(np.asarray(a, dtype=np.float64), grid.shape))
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise DomainError(f"{name} is not finite at node {tuple(int(b) for b in bad)}",
                          node=tuple(int(b) for b in bad))
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SymTensorField:
    """Symmetric covariant 2-tensor field stored as (t11, t12, t22)."""

    t11: np.ndarray
    t12: np.ndarray
    t22: np.ndarray

    @classmethod
    def from_array(cls, a: np.ndarray) -> "SymTensorField":
        """Build from a ``(2, 2, nx, ny)`` array, averaging the off-diagonal pair."""
        return cls(a[0, 0].copy(), 0.5 * (a[0, 1] + a[1, 0]), a[1, 1].copy())

    @classmethod
    def outer(cls, a: np.ndarray, b: Optional[np.ndarray] = None) -> "SymTensorField":
        """Symmetrized product of two covector fields given as ``(2, nx, ny)``."""
        if b is None:
            return cls(a[0] * a[0], a[0] * a[1], a[1] * a[1])
        return cls(a[0] * b[0], 0.5 * (a[0] * b[1] + a[1] * b[0]), a[1] * b[1])

    @classmethod
    def zeros_like(cls, f: np.ndarray) -> "SymTensorField":
        z = np.zeros_like(f)
        return cls(z, z.copy(), z.copy())

    def array(self) -> np.ndarray:
        return np.stack([np.stack([self.t11, self.t12]), np.stack([self.t12, self.t22])])

    def __add__(self, other):
        return SymTensorField(self.t11 + other.t11, self.t12 + other.t12, self.t22 + other.t22)

    def __sub__(self, other):
        return SymTensorField(self.t11 - other.t11, self.t12 - other.t12, self.t22 - other.t22)

    def __neg__(self):
        return SymTensorField(-self.t11, -self.t12, -self.t22)

    def __mul__(self, c):
        return SymTensorField(self.t11 * c, self.t12 * c, self.t22 * c)

    __rmul__ = __mul__

    def roll(self, shift, axis) -> "SymTensorField":
        return SymTensorField(*(np.roll(t, shift, axis) for t in (self.t11, self.t12, self.t22)))

    def max_abs(self) -> float:
        return float(max(np.max(np.abs(t)) for t in (self.t11, self.t12, self.t22)))


class MetricField:
    """Pointwise positive-definite metric on a grid.

    Components are copied and frozen on construction, so the
    positivity check performed here holds for the lifetime of the object.
    """

    __slots__ = ("grid", "g11", "g12", "g22", "__dict__")

    def __init__(self, g11, g12, g22, grid: Grid):
        self.grid = grid
        self.g11 = _as_field(g11, grid, "g11")
        self.g12 = _as_field(g12, grid, "g12")
        self.g22 = _as_field(g22, grid, "g22")
        det = self.g11 * self.g22 - self.g12 * self.g12
        bad = ~((self.g11 > 0) & (det > 0))
        if np.any(bad):
            node = tuple(int(b) for b in np.argwhere(bad)[0])
            raise DomainError(f"metric is not positive-definite at node {node}", node=node)

    # construction helpers
    @classmethod
    def flat(cls, grid: Grid) -> "MetricField":
        one = np.ones(grid.shape)
        return cls(one, np.zeros(grid.shape), one, grid)

    @classmethod
    def conformal(cls, phi: np.ndarray, grid: Grid) -> "MetricField":
        """The metric ``exp(2 phi) * delta``."""
        e = np.exp(2.0 * np.asarray(phi, dtype=np.float64))
        return cls(e, np.zeros(grid.shape), e, grid)

    @classmethod
    def from_tensor(cls, t: SymTensorField, grid: Grid) -> "MetricField":
        return cls(t.t11, t.t12, t.t22, grid)

    def as_tensor(self) -> SymTensorField:
        return SymTensorField(self.g11, self.g12, self.g22)

    def plus(self, h: SymTensorField, s: float = 1.0) -> "MetricField":
        """The metric ``g + s*h`` (validated)."""
        return MetricField(self.g11 + s * h.t11, self.g12 + s * h.t12, self.g22 + s * h.t22, self.grid)

    def scaled(self, alpha: float) -> "MetricField":
        return MetricField(alpha * self.g11, alpha * self.g12, alpha * self.g22, self.grid)

    def roll(self, shift, axis) -> "MetricField":
        return MetricField(np.roll(self.g11, shift, axis), np.roll(self.g12, shift, axis),
                           np.roll(self.g22, shift, axis), self.grid)

    # derived quantities
    @cached_property
    def det(self) -> np.ndarray:
        return self.g11 * self.g22 - self.g12 * self.g12

    @cached_property
    def sqrt_det(self) -> np.ndarray:
        return np.sqrt(self.det)

    @cached_property
    def inverse(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Contravariant components ``(g^11, g^12, g^22)``."""
        d = self.det
        return self.g22 / d, -self.g12 / d, self.g11 / d

    def array(self) -> np.ndarray:
        return np.stack([np.stack([self.g11, self.g12]), np.stack([self.g12, self.g22])])

    @cached_property
    def inv_array(self) -> np.ndarray:
        a, b, c = self.inverse
        return np.stack([np.stack([a, b]), np.stack([b, c])])

    def eigenvalue_bounds(self) -> Tuple[float, float]:
        """Smallest and largest pointwise eigenvalues over the grid."""
        tr = self.g11 + self.g22
        disc = np.sqrt(0.25 * (self.g11 - self.g22) ** 2 + self.g12 ** 2)
        return float(np.min(0.5 * tr - disc)), float(np.max(0.5 * tr + disc))

    def volume(self) -> float:
        return integrate(self, np.ones(self.grid.shape))


@dataclass(frozen=True, eq=False)
class ChristoffelField:
    """Connection coefficients ``data[k, i, j] = Gamma^k_ij``."""

    data: np.ndarray

    def __getitem__(self, idx):
        return self.data[idx]

    def contracted(self) -> np.ndarray:
        """``Gamma^k_ki`` as a covector, shape ``(2, nx, ny)``."""
        return np.einsum("kki...->i...", self.data)


# ---------------------------------------------------------------------------
# connection and curvature


def christoffel(g: MetricField) -> ChristoffelField:
    """Levi-Civita connection from centered differences of ``g``."""
    grid = g.grid
    comps = np.stack([g.g11, g.g12, g.g22])
    d0 = diff(comps, 0, grid)
    d1 = diff(comps, 1, grid)
    # dg[l][(i, j)] = d_l g_ij
    dg = []
    for d in (d0, d1):
        dg.append({(0, 0): d[0], (0, 1): d[1], (1, 0): d[1], (1, 1): d[2]})
    gi = g.inverse
    ginv = {(0, 0): gi[0], (0, 1): gi[1], (1, 0): gi[1], (1, 1): gi[2]}
    gam = np.empty((2, 2, 2) + grid.shape, dtype=comps.dtype)
    for i, j in ((0, 0), (0, 1), (1, 1)):
        first = [0.5 * (dg[i][(j, l)] + dg[j][(i, l)] - dg[l][(i, j)]) for l in range(2)]
        for k in range(2):
            val = ginv[(k, 0)] * first[0] + ginv[(k, 1)] * first[1]
            gam[k, i, j] = val
            gam[k, j, i] = val
    return ChristoffelField(gam)


def _ricci_from_connection(gam: np.ndarray, grid: Grid) -> SymTensorField:
    """Symmetric part of ``R^k_{kjl}`` expanded for two dimensions."""
    c = gam[0, 0] + gam[1, 1]  # c[l] = Gamma^k_kl
    dk = diff(gam[0], 0, grid) + diff(gam[1], 1, grid)  # [j, l] = d_k Gamma^k_jl
    dc = [diff(c, j, grid) for j in range(2)]  # dc[j][l] = d_j c_l
    out = {}
    for j, l in ((0, 0), (0, 1), (1, 1)):
        quad = c[0] * gam[0, j, l] + c[1] * gam[1, j, l]
        for k in range(2):
            for p in range(2):
                quad = quad - gam[k, j, p] * gam[p, k, l]
        out[(j, l)] = dk[j, l] - 0.5 * (dc[j][l] + dc[l][j]) + quad
    return SymTensorField(out[(0, 0)], out[(0, 1)], out[(1, 1)])


def riemann(g: MetricField, gamma: Optional[ChristoffelField] = None) -> np.ndarray:
    """``R[k, i, j, l] = R^k_{ijl}``, built from centered differences of the connection.

    Sign convention: ``R^k_{ijl} = d_i G^k_jl - d_j G^k_il + G^k_ip G^p_jl - G^k_jp G^p_il``,
    so that ``Ric_jl = R^k_{kjl}`` is positive on round spheres.
    """
    grid = g.grid
    gam = christoffel(g).data if gamma is None else gamma.data
    dgam = np.stack([diff(gam, i, grid) for i in range(2)])  # [i, k, j, l]
    a = np.einsum("ikjl...->kijl...", dgam) + np.einsum("kip...,pjl...->kijl...", gam, gam)
    return a - np.swapaxes(a, 1, 2)


def lowered_riemann(g: MetricField, rm: Optional[np.ndarray] = None) -> np.ndarray:
    """Fully covariant curvature ``Rm[a, b, c, d] = g_bm R^m_{cda}``.

    With this placement of indices every identity checked by
    :func:`bianchi_residuals` is a true identity of smooth geometry.
    """
    if rm is None:
        rm = riemann(g)
    return np.einsum("bm...,mcda...->abcd...", g.array(), rm)


def curvature(g: MetricField, gamma: Optional[ChristoffelField] = None):
    """Ricci tensor and scalar curvature.

    Returns
    -------
    ric : SymTensorField
        ``Ric_jl = R^k_{kjl}`` (the contraction of :func:`riemann`, expanded
        term by term).  The discrete contraction is symmetric only up to
        truncation error; the stored field is its symmetric part.
    scalar : ndarray
        ``R = g^{jl} Ric_jl``.
    """
    gam = christoffel(g).data if gamma is None else gamma.data
    ric = _ricci_from_connection(gam, g.grid)
    gi11, gi12, gi22 = g.inverse
    scalar = gi11 * ric.t11 + 2.0 * gi12 * ric.t12 + gi22 * ric.t22
    return ric, scalar


def hessian(g: MetricField, f: np.ndarray, gamma: Optional[ChristoffelField] = None) -> SymTensorField:
    """Covariant Hessian ``d_i d_j f - Gamma^k_ij d_k f``."""
    grid = g.grid
    gam = christoffel(g).data if gamma is None else gamma.data
    df = gradient(f, grid)
    h = _second_partials(f, grid) - np.einsum("kij...,k...->ij...", gam, df)
    return SymTensorField(h[0, 0], 0.5 * (h[0, 1] + h[1, 0]), h[1, 1])


# ---------------------------------------------------------------------------
# Laplace-Beltrami operator and the matching Dirichlet form


def _flux_coefficients(g: MetricField):
    gi11, gi12, gi22 = g.inverse
    s = g.sqrt_det
    a11 = s * gi11
    a22 = s * gi22
    # face averages: x-face (i+1/2, j) and y-face (i, j+1/2)
    fx = 0.5 * (a11 + np.roll(a11, -1, 0))
    fy = 0.5 * (a22 + np.roll(a22, -1, 1))
    return fx, fy, s * gi12


def _divergence_part(g: MetricField, f: np.ndarray) -> np.ndarray:
    """``d_i(sqrt(det g) g^ij d_j f)`` in flux form (not yet divided by sqrt det)."""
    grid = g.grid
    fx, fy, c = _flux_coefficients(g)
    flux_x = fx * (np.roll(f, -1, 0) - f) / grid.hx
    flux_y = fy * (np.roll(f, -1, 1) - f) / grid.hy
    out = (flux_x - np.roll(flux_x, 1, 0)) / grid.hx + (flux_y - np.roll(flux_y, 1, 1)) / grid.hy
    out = out + diff(c * diff(f, 1, grid), 0, grid) + diff(c * diff(f, 0, grid), 1, grid)
    return out


def laplace_beltrami(g: MetricField, f: np.ndarray) -> np.ndarray:
    """Divergence-form Laplace-Beltrami operator ``(1/sqrt g) d_i(sqrt g g^ij d_j f)``."""
    return _divergence_part(g, f) / g.sqrt_det


def dirichlet_form(g: MetricField, f: np.ndarray, q: np.ndarray) -> float:
    """Discrete ``int <grad f, grad q> dV`` paired with :func:`laplace_beltrami`.

    ``integrate(g, laplace_beltrami(g, f) * q) == -dirichlet_form(g, f, q)``
    up to round-off for every pair of grid functions.
    """
    grid = g.grid
    fx, fy, c = _flux_coefficients(g)
    dxf = (np.roll(f, -1, 0) - f) / grid.hx
    dxq = (np.roll(q, -1, 0) - q) / grid.hx
    dyf = (np.roll(f, -1, 1) - f) / grid.hy
    dyq = (np.roll(q, -1, 1) - q) / grid.hy
    cross = c * (diff(f, 0, grid) * diff(q, 1, grid) + diff(f, 1, grid) * diff(q, 0, grid))
    return tree_sum((fx * dxf * dxq + fy * dyf * dyq + cross) * grid.cell_area)


# ---------------------------------------------------------------------------
# pointwise algebra and integration


def grad_inner(g: MetricField, f: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Pointwise ``g^ij d_i f d_j q`` with centered differences."""
    df = gradient(f, g.grid)
    dq = df if q is f else gradient(q, g.grid)
    gi11, gi12, gi22 = g.inverse
    return gi11 * df[0] * dq[0] + gi12 * (df[0] * dq[1] + df[1] * dq[0]) + gi22 * df[1] * dq[1]


def grad_norm2(g: MetricField, f: np.ndarray) -> np.ndarray:
    return grad_inner(g, f, f)


def _raise_first(g: MetricField, a: SymTensorField) -> np.ndarray:
    gi = g.inv_array
    return np.einsum("ip...,pj...->ij...", gi, a.array())


def inner(g: MetricField, a: SymTensorField, b: SymTensorField) -> np.ndarray:
    """Pointwise ``g^ip g^jq A_ij B_pq``."""
    ma = _raise_first(g, a)
    mb = ma if b is a else _raise_first(g, b)
    return np.einsum("ij...,ji...->...", ma, mb)


def norm2(g: MetricField, a: SymTensorField) -> np.ndarray:
    return inner(g, a, a)


def tensor_ops(g: MetricField, a: SymTensorField, b: SymTensorField):
    """Return ``(inner(g, a, b), norm2(g, a))``."""
    return inner(g, a, b), norm2(g, a)


def trace(g: MetricField, a: SymTensorField) -> np.ndarray:
    gi11, gi12, gi22 = g.inverse
    return gi11 * a.t11 + 2.0 * gi12 * a.t12 + gi22 * a.t22


def integrate(g: MetricField, s, weight=None) -> float:
    """``sum(s * weight * sqrt(det g)) * hx * hy`` in fixed pairwise order."""
    s = np.broadcast_to(np.asarray(s, dtype=np.float64), g.grid.shape)
    w = 1.0 if weight is None else weight
    return tree_sum(s * w * g.sqrt_det * g.grid.cell_area)


# ---------------------------------------------------------------------------
# covariant derivatives and Bianchi identities


def covariant_derivative_2(g: MetricField, a: np.ndarray, gam: np.ndarray) -> np.ndarray:
    """``nabla_k A_ij`` for a covariant 2-tensor given as ``(2, 2, nx, ny)``; result ``[k, i, j]``."""
    grid = g.grid
    da = np.stack([diff(a, k, grid) for k in range(2)])
    return (da - np.einsum("mki...,mj...->kij...", gam, a)
            - np.einsum("mkj...,im...->kij...", gam, a))


def _covariant_derivative_4(g: MetricField, t: np.ndarray, gam: np.ndarray) -> np.ndarray:
    grid = g.grid
    dt = np.stack([diff(t, q, grid) for q in range(2)])  # [q, i, j, k, l]
    return (dt
            - np.einsum("mqi...,mjkl...->qijkl...", gam, t)
            - np.einsum("mqj...,imkl...->qijkl...", gam, t)
            - np.einsum("mqk...,ijml...->qijkl...", gam, t)
            - np.einsum("mql...,ijkm...->qijkl...", gam, t))


def _covariant_derivative_1(g: MetricField, v: np.ndarray, gam: np.ndarray) -> np.ndarray:
    grid = g.grid
    dv = np.stack([diff(v, k, grid) for k in range(2)])
    return dv - np.einsum("mki...,m...->ki...", gam, v)


def bianchi_residuals(g: MetricField) -> Tuple[float, float, float, float]:
    """Max-norm residuals of the algebraic, differential and two contracted Bianchi identities.

    Uses ``Rm[a, b, c, d] = g_bm R^m_{cda}`` (see :func:`lowered_riemann`):

    * first: ``Rm_ijkl + Rm_iklj + Rm_iljk``
    * second: ``nabla_q Rm_ijkl + nabla_i Rm_jqkl + nabla_j Rm_qikl``
    * contracted1: ``2 nabla^j R_ij - nabla_i R``
    * contracted2: ``nabla_i R_jk - nabla_j R_ik + nabla^l Rm_lkij``
    """
    gamma = christoffel(g)
    gam = gamma.data
    rm = riemann(g, gamma)
    low = lowered_riemann(g, rm)
    ric_arr = np.einsum("kkjl...->jl...", rm)
    ric_arr = 0.5 * (ric_arr + np.swapaxes(ric_arr, 0, 1))
    gi = g.inv_array
    scalar = np.einsum("jl...,jl...->...", gi, ric_arr)

    first = (low
             + np.einsum("iklj...->ijkl...", low)
             + np.einsum("iljk...->ijkl...", low))

    nabla_rm = _covariant_derivative_4(g, low, gam)  # [q, i, j, k, l]
    second = (nabla_rm
              + np.einsum("ijqkl...->qijkl...", nabla_rm)
              + np.einsum("jqikl...->qijkl...", nabla_rm))

    nabla_ric = covariant_derivative_2(g, ric_arr, gam)  # [k, i, j]
    div_ric = np.einsum("jk...,kij...->i...", gi, nabla_ric)
    grad_r = gradient(scalar, g.grid)
    contracted1 = 2.0 * div_ric - grad_r

    div_rm = np.einsum("lq...,qlkij...->kij...", gi, nabla_rm)  # nabla^l Rm_lkij -> [k, i, j]
    contracted2 = (nabla_ric
                   - np.einsum("jik...->ijk...", nabla_ric)
                   + np.einsum("kij...->ijk...", div_rm))

    def mx(a):
        return float(np.max(np.abs(a)))

    return mx(first), mx(second), mx(contracted1), mx(contracted2)
