"""Pointwise hypothesis checkers and monotonicity verdicts."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .. import grid_geometry as gg
from ..errors import DomainError
from ..flow_engine import s_tensor
from ..grid_geometry import MetricField, SymTensorField

__all__ = [
    "Verdict",
    "min_g_eigenvalue",
    "check_pinching_alpha",
    "check_surface_conditions",
    "thm72_weight",
    "monotonicity_verdict",
    "brute_force_min",
]

PASS, FAIL, INCONCLUSIVE = "pass", "fail", "inconclusive"


@dataclass
class Verdict:
    verdict: str
    worst_violation: float = 0.0
    t: Optional[float] = None
    node: Optional[Tuple[int, int]] = None
    note: str = ""

    def as_dict(self):
        return {"verdict": self.verdict, "worst_violation": self.worst_violation,
                "location": {"t": self.t, "node": None if self.node is None else list(self.node)},
                "note": self.note}


def min_g_eigenvalue(g: MetricField, a: SymTensorField) -> np.ndarray:
    """Smaller root of ``det(A - lam g) = 0`` at every node (closed form)."""
    det_g = g.det
    b = a.t11 * g.g22 + a.t22 * g.g11 - 2.0 * a.t12 * g.g12
    det_a = a.t11 * a.t22 - a.t12 * a.t12
    disc = np.maximum(b * b - 4.0 * det_g * det_a, 0.0)
    # roots of det_g lam^2 - b lam + det_a, without cancellation
    q = 0.5 * (b + np.copysign(np.sqrt(disc), b))
    with np.errstate(divide="ignore", invalid="ignore"):
        r1 = q / det_g
        r2 = np.where(q != 0, det_a / q, 0.5 * b / det_g)
    return np.minimum(r1, r2)


def _margin(g, t: SymTensorField, tol: float):
    lam = min_g_eigenvalue(g, t)
    idx = np.unravel_index(int(np.argmin(lam)), lam.shape)
    margin = float(lam[idx])
    return margin >= -tol, margin, (int(idx[0]), int(idx[1]))


def check_pinching_alpha(g: MetricField, u: np.ndarray, alpha: float, tol: float = 0.0,
                         with_node: bool = False):
    """Whether ``Stensor - alpha S g`` is positive semidefinite at every node.

    Returns ``(holds, margin)`` where margin is the smallest g-eigenvalue over the
    grid (and its node when ``with_node``).
    """
    if alpha < 0.5:
        raise DomainError("alpha must be at least 1/2")
    st, S = s_tensor(g, u)
    aS = alpha * S
    t = st - SymTensorField(aS * g.g11, aS * g.g12, aS * g.g22)
    holds, margin, node = _margin(g, t, tol)
    return (holds, margin, node) if with_node else (holds, margin)


def check_surface_conditions(g: MetricField, u: np.ndarray, epsilon: float, tol: float = 0.0):
    """``(cond1, cond2, (margin1, margin2))`` for
    ``epsilon du x du - Ric >= 0`` and ``|grad u|^2 g - 2 du x du >= 0``."""
    ric, _ = gg.curvature(g)
    du = gg.gradient(u, g.grid)
    dudu = SymTensorField.outer(du)
    c1, m1, _ = _margin(g, dudu * epsilon - ric, tol)
    gu = gg.grad_norm2(g, u)
    t2 = SymTensorField(gu * g.g11, gu * g.g12, gu * g.g22) - dudu * 2.0
    c2, m2, _ = _margin(g, t2, tol)
    return c1, c2, (m1, m2)


def brute_force_min(g: MetricField, a: SymTensorField, directions: int = 64) -> np.ndarray:
    """Min of ``A(V, V) / g(V, V)`` over ``directions`` sampled angles, per node."""
    out = np.full(g.grid.shape, np.inf)
    for th in np.linspace(0.0, math.pi, directions, endpoint=False):
        c, s = math.cos(th), math.sin(th)
        q = a.t11 * c * c + 2 * a.t12 * c * s + a.t22 * s * s
        n = g.g11 * c * c + 2 * g.g12 * c * s + g.g22 * s * s
        out = np.minimum(out, q / n)
    return out


def thm72_weight(t: np.ndarray, alpha: float, S_min0: float, n: int = 2) -> np.ndarray:
    """``(1 - (2/n) S_min0 t)^{n alpha}``; DomainError if the base is not positive."""
    base = 1.0 - (2.0 / n) * S_min0 * np.asarray(t, dtype=float)
    if np.any(base <= 0):
        raise DomainError("thm72 weight undefined: 1 - (2/n) S_min0 t <= 0 within the series")
    return base ** (n * alpha)


def monotonicity_verdict(series: Sequence[Tuple[float, float]], transform="identity",
                         tol: float = 1e-8) -> Verdict:
    """Check that successive differences are ``>= -tol``.

    ``transform`` is ``"identity"`` or ``("thm72", alpha, S_min0, n)``; the
    latter multiplies each value by :func:`thm72_weight` first.
    """
    if len(series) == 0:
        raise DomainError("series must be nonempty")
    t = np.array([p[0] for p in series], dtype=float)
    v = np.array([p[1] for p in series], dtype=float)
    if np.any(np.diff(t) <= 0):
        raise DomainError("series times must be increasing")
    if transform != "identity":
        name, alpha, s0, n = transform
        if name != "thm72":
            raise DomainError(f"unknown transform {name!r}")
        v = v * thm72_weight(t, alpha, s0, n)
    if len(v) < 2:
        return Verdict(PASS, 0.0)
    d = np.diff(v)
    j = int(np.argmin(d))
    worst = max(0.0, -float(d[j]))
    verdict = PASS if worst <= tol else FAIL
    return Verdict(verdict, worst, float(t[j + 1]) if worst > 0 else None)
