"""Time integration of the coupled metric / scalar flow

    dg/dt = -2 Ric + 4 du (x) du,        du/dt = Laplace_g u,

together with its evolution-equation residuals, the backward conjugate heat
solve ``dw/ds = Laplace w - S w`` (``s = T - t``) and the ODE lower bound
for ``S = R - 2|grad u|^2``.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import grid_geometry as gg
from .errors import BlowUpError, DomainError, PreconditionError
from .grid_geometry import MetricField, SymTensorField

__all__ = [
    "FlowState",
    "GaugeSetting",
    "UNGAUGED",
    "Trajectory",
    "s_tensor",
    "flow_rhs",
    "stability_bound",
    "evolve",
    "evolution_rhs",
    "evolution_residuals",
    "ResidualMonitor",
    "ConjugateHeatSolution",
    "conjugate_heat_solve",
    "maximum_principle_bound",
]


@dataclass(frozen=True, eq=False)
class FlowState:
    t: float
    g: MetricField
    u: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.u)):
            raise DomainError("u is not finite")


@dataclass(frozen=True, eq=False)
class GaugeSetting:
    """``mode`` is ``"ungauged"`` or ``"deturck"``; the DeTurck vector field is
    measured against ``background`` (flat when omitted)."""

    mode: str = "deturck"
    background: Optional[MetricField] = None

    def __post_init__(self):
        if self.mode not in ("ungauged", "deturck"):
            raise DomainError(f"unknown gauge mode {self.mode!r}")

    @cached_property
    def background_gamma(self) -> Optional[np.ndarray]:
        if self.background is None:
            return None
        return gg.christoffel(self.background).data


UNGAUGED = GaugeSetting("ungauged")


@dataclass
class Trajectory:
    """Stored states plus per-step bookkeeping and monitor records."""

    states: List[FlowState]
    gauge: GaugeSetting
    step_sizes: List[float] = field(default_factory=list)
    halvings: List[int] = field(default_factory=list)
    records: List[Tuple[float, Dict[str, float]]] = field(default_factory=list)
    blown_up: bool = False
    message: str = ""

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.states])

    @property
    def final(self) -> FlowState:
        return self.states[-1]

    def series(self, name: str) -> Tuple[np.ndarray, np.ndarray]:
        pts = [(t, r[name]) for t, r in self.records if name in r]
        if not pts:
            return np.array([]), np.array([])
        t, v = zip(*pts)
        return np.array(t), np.array(v)

    def monitor_names(self) -> List[str]:
        names: List[str] = []
        for _, rec in self.records:
            for k in rec:
                if k not in names:
                    names.append(k)
        return names


# ---------------------------------------------------------------------------
# right-hand side


def s_tensor(g: MetricField, u: np.ndarray, curv=None):
    """``Stensor_ij = R_ij - 2 d_i u d_j u`` and its trace ``R - 2|grad u|^2``."""
    ric, R = gg.curvature(g) if curv is None else curv
    du = gg.gradient(u, g.grid)
    st = ric - 2.0 * SymTensorField.outer(du)
    return st, R - 2.0 * gg.grad_norm2(g, u)


def _deturck_field(g: MetricField, gam: np.ndarray, gauge: GaugeSetting) -> np.ndarray:
    """``W^k = g^pq (Gamma^k_pq - background Gamma^k_pq)``."""
    diffgam = gam if gauge.background_gamma is None else gam - gauge.background_gamma
    return np.einsum("pq...,kpq...->k...", g.inv_array, diffgam)


def flow_rhs(state: FlowState, gauge: GaugeSetting = UNGAUGED):
    """Time derivatives ``(dg, du)`` of the flow at ``state``.

    In DeTurck mode ``L_W g`` is added to ``dg`` and ``W . grad u`` to ``du``.
    Nested centered differences of the connection leave the grid-scale mode
    undamped, so the DeTurck right side also swaps the wide second difference
    in the diagonal part of its principal term ``g^pq d_p d_q g_ij`` for the
    compact one; the change is of truncation-error size on smooth data.
    """
    g, u = state.g, state.u
    grid = g.grid
    gamma = gg.christoffel(g)
    ric, _ = gg.curvature(g, gamma)
    du = gg.gradient(u, grid)
    dg = -2.0 * ric + 4.0 * SymTensorField.outer(du)
    dudt = gg.laplace_beltrami(g, u)
    if gauge.mode == "deturck":
        gam = gamma.data
        W = _deturck_field(g, gam, gauge)
        G = g.array()
        w_low = np.einsum("jk...,k...->j...", G, W)
        dw = np.stack([gg.diff(w_low, i, grid) for i in range(2)])  # [i, j]
        lie = dw + np.swapaxes(dw, 0, 1) - 2.0 * np.einsum("kij...,k...->ij...", gam, w_low)
        gi = g.inv_array
        for p in range(2):
            lie = lie + gi[p, p] * (gg.diff2(G, p, grid) - gg.diff(gg.diff(G, p, grid), p, grid))
        dg = dg + SymTensorField.from_array(lie)
        dudt = dudt + W[0] * du[0] + W[1] * du[1]
    return dg, dudt


def stability_bound(g: MetricField) -> float:
    """Explicit step limit ``0.1 * min(hx, hy)^2 * min_node lambda_min(g)``.

    ``1 / lambda_min(g)`` is the largest pointwise diffusion coefficient of
    ``Laplace_g`` in coordinates.
    """
    lo, _ = g.eigenvalue_bounds()
    h = min(g.grid.hx, g.grid.hy)
    return 0.1 * h * h * lo


def _pack(state: FlowState) -> np.ndarray:
    g = state.g
    return np.stack([g.g11, g.g12, g.g22, state.u])


def _unpack(y: np.ndarray, t: float, grid) -> FlowState:
    return FlowState(t, MetricField(y[0], y[1], y[2], grid), y[3])


def _rk4(state: FlowState, dt: float, gauge: GaugeSetting) -> FlowState:
    grid = state.g.grid

    def rhs(st):
        dg, du = flow_rhs(st, gauge)
        return np.stack([dg.t11, dg.t12, dg.t22, du])

    y0 = _pack(state)
    k1 = rhs(state)
    k2 = rhs(_unpack(y0 + 0.5 * dt * k1, state.t + 0.5 * dt, grid))
    k3 = rhs(_unpack(y0 + 0.5 * dt * k2, state.t + 0.5 * dt, grid))
    k4 = rhs(_unpack(y0 + dt * k3, state.t + dt, grid))
    y1 = y0 + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(y1)):
        raise DomainError("non-finite values after step")
    return _unpack(y1, state.t + dt, grid)


def _guarded_step(state, dt, gauge, max_halvings, depth=0):
    """One step of size ``dt``; on positivity/NaN loss, two half steps (recursively)."""
    try:
        return _rk4(state, dt, gauge), depth
    except DomainError:
        if depth >= max_halvings:
            raise
        mid, d1 = _guarded_step(state, 0.5 * dt, gauge, max_halvings, depth + 1)
        end, d2 = _guarded_step(mid, 0.5 * dt, gauge, max_halvings, depth + 1)
        return end, max(d1, d2)


Monitor = Callable[[FlowState], Optional[Dict[str, float]]]


def evolve(
    state: FlowState,
    T: float,
    dt: float,
    gauge: GaugeSetting = GaugeSetting(),
    monitors: Sequence[Monitor] = (),
    cadence: int = 1,
    store_every: int = 1,
    max_halvings: int = 6,
    check_bound: bool = True,
    executor=None,
) -> Trajectory:
    """Classical RK4 integration on ``[state.t, state.t + T]``.

    Parameters
    ----------
    state : FlowState
    T, dt : float
        Duration and nominal step; the last step is shortened to land on ``T``.
    gauge : GaugeSetting
    monitors : callables
        Each maps a state to a dict of named scalars (or None).  Called on the
        initial state, every ``cadence`` steps and on the final state.  A monitor
        with attribute ``every_step = True`` sees every step instead.
    store_every : int
        Keep every ``store_every``-th state (the first and last are always kept).
    max_halvings : int
        Retry cap for step halving on positivity or NaN loss.
    executor : concurrent.futures.Executor, optional
        Evaluates the monitors of one snapshot concurrently.

    Raises
    ------
    PreconditionError
        ``dt`` above :func:`stability_bound` (when ``check_bound``) or ``T <= 0``.
    BlowUpError
        Positivity could not be restored; ``err.trajectory`` holds the valid prefix.
    """
    if not T > 0:
        raise PreconditionError("T must be positive")
    if not dt > 0:
        raise PreconditionError("dt must be positive")
    bound = stability_bound(state.g)
    if check_bound and dt > bound * (1 + 1e-12):
        raise PreconditionError(f"dt = {dt:.3e} exceeds the stability bound {bound:.3e}")

    n_steps = max(1, int(math.ceil(T / dt - 1e-9)))
    t0 = state.t
    traj = Trajectory([state], gauge)

    def run_monitors(st: FlowState, step: int, final: bool):
        due = [m for m in monitors
               if getattr(m, "every_step", False) or final or step % cadence == 0]
        if not due:
            return
        if executor is not None and len(due) > 1:
            outs = list(executor.map(lambda m: m(st), due))
        else:
            outs = [m(st) for m in due]
        rec: Dict[str, float] = {}
        for o in outs:
            if o:
                rec.update(o)
        if rec:
            traj.records.append((st.t, rec))

    run_monitors(state, 0, False)
    current = state
    for n in range(1, n_steps + 1):
        t_target = t0 + (T if n == n_steps else n * dt)
        h = t_target - current.t
        try:
            nxt, depth = _guarded_step(current, h, gauge, max_halvings)
        except DomainError as exc:
            traj.blown_up = True
            traj.message = f"blow-up at t = {current.t:.6g}: {exc}"
            if traj.states[-1] is not current:
                traj.states.append(current)
            raise BlowUpError(traj.message, trajectory=traj) from exc
        # pin the time to the nominal grid to avoid drift
        current = FlowState(t_target, nxt.g, nxt.u)
        traj.step_sizes.append(h)
        traj.halvings.append(depth)
        if n % store_every == 0 or n == n_steps:
            traj.states.append(current)
        run_monitors(current, n, n == n_steps)
    return traj


# ---------------------------------------------------------------------------
# evolution-equation residuals


def evolution_rhs(g: MetricField, u: np.ndarray):
    """Values ``(R, |grad u|^2, S)`` and the right sides of their evolution equations."""
    gamma = gg.christoffel(g)
    ric, R = gg.curvature(g, gamma)
    du = gg.gradient(u, g.grid)
    dudu = SymTensorField.outer(du)
    grad2 = gg.grad_norm2(g, u)
    S = R - 2.0 * grad2
    st = ric - 2.0 * dudu
    lap_u = gg.laplace_beltrami(g, u)
    hess2 = gg.norm2(g, gg.hessian(g, u, gamma))
    rhs_R = (gg.laplace_beltrami(g, R) + 2.0 * gg.norm2(g, ric) + 4.0 * lap_u ** 2
             - 4.0 * hess2 - 8.0 * gg.inner(g, ric, dudu))
    rhs_G = gg.laplace_beltrami(g, grad2) - 2.0 * hess2 - 4.0 * grad2 ** 2
    rhs_S = gg.laplace_beltrami(g, S) + 2.0 * gg.norm2(g, st) + 4.0 * lap_u ** 2
    return (R, grad2, S), (rhs_R, rhs_G, rhs_S)


_D1 = {3: (np.array([-0.5, 0.0, 0.5]), 1), 5: (np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0, 2)}


def _window_residual(window: Sequence[FlowState]):
    n = len(window)
    coef, c = _D1[n]
    dt = (window[-1].t - window[0].t) / (n - 1)
    vals = [evolution_rhs(s.g, s.u)[0] if i != c else None for i, s in enumerate(window)]
    center_vals, center_rhs = evolution_rhs(window[c].g, window[c].u)
    vals[c] = center_vals
    out = []
    for q in range(3):
        ddt = sum(coef[i] * vals[i][q] for i in range(n) if coef[i] != 0.0) / dt
        out.append(float(np.max(np.abs(ddt - center_rhs[q]))))
    return window[c].t, out


def _uniform(window, rtol=1e-9) -> bool:
    t = np.array([s.t for s in window])
    d = np.diff(t)
    return bool(np.all(np.abs(d - d[0]) <= rtol * abs(d[0])))


def evolution_residuals(traj: Trajectory, order: int = 4):
    """Residual series of the evolution equations for ``R``, ``|grad u|^2`` and ``S``.

    At every stored state with ``order // 2`` uniformly spaced neighbours on each
    side, a centered time difference (order 2 or 4) is compared with the right
    sides; each series entry is the max over nodes.

    Returns
    -------
    times, res_R, res_gradu, res_S : ndarray
    """
    if traj.gauge.mode != "ungauged":
        raise PreconditionError("evolution residuals need an ungauged trajectory")
    width = 5 if order >= 4 else 3
    half = width // 2
    st = traj.states
    rows = []
    for c in range(half, len(st) - half):
        win = st[c - half:c + half + 1]
        if _uniform(win):
            t, r = _window_residual(win)
            rows.append((t, *r))
    if not rows:
        return tuple(np.array([]) for _ in range(4))
    arr = np.array(rows)
    return arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3]


class ResidualMonitor:
    """Streaming version of :func:`evolution_residuals` for long runs.

    Keeps the last five states (fourth-order time difference) and evaluates the
    residuals at the center of the window every ``cadence`` steps, so no full
    history is required.
    """

    every_step = True

    def __init__(self, cadence: int = 1, order: int = 4):
        self.cadence = cadence
        self.width = 5 if order >= 4 else 3
        self.buffer: deque = deque(maxlen=self.width)
        self.count = 0
        self.rows: List[Tuple[float, float, float, float]] = []

    def __call__(self, state: FlowState):
        self.buffer.append(state)
        self.count += 1
        center_index = self.count - 1 - self.width // 2
        if len(self.buffer) == self.width and center_index % self.cadence == 0 and _uniform(self.buffer):
            t, r = _window_residual(list(self.buffer))
            self.rows.append((t, *r))
        return None

    def result(self):
        if not self.rows:
            return tuple(np.array([]) for _ in range(4))
        arr = np.array(self.rows)
        return arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3]


# ---------------------------------------------------------------------------
# conjugate heat equation


@dataclass
class ConjugateHeatSolution:
    times: np.ndarray
    w: List[np.ndarray]
    mass: np.ndarray
    substeps: int

    def f(self, index: int) -> np.ndarray:
        return -np.log(np.maximum(self.w[index], 1e-300))


class _Snapshot:
    """Quantities reused at every conjugate-heat stage between two stored states."""

    def __init__(self, state: FlowState, gauge: GaugeSetting):
        g = state.g
        self.t = state.t
        self.comps = np.stack([g.g11, g.g12, g.g22])
        dg, _ = flow_rhs(state, gauge)
        self.dcomps = np.stack([dg.t11, dg.t12, dg.t22])
        self.W = None
        if gauge.mode == "deturck":
            self.W = _deturck_field(g, gg.christoffel(g).data, gauge)


def conjugate_heat_solve(traj: Trajectory, w_final: np.ndarray, max_halvings: int = 6,
                         mass_rtol: float = 1e-8) -> ConjugateHeatSolution:
    """Solve ``dw/ds = Laplace_{g(t)} w - S w`` for ``s = T - t`` from ``t = T`` back to ``t0``.

    Between stored states the metric is the cubic Hermite interpolant built
    from the stored components and their flow derivatives.  The zeroth-order
    coefficient is taken as ``-(1/2) tr(g^-1 dg/dt)`` of that interpolant (plus
    ``div W`` in DeTurck mode), which is ``S`` at the stored states of an
    ungauged run and makes ``int w dV`` an exact invariant of the
    semi-discrete problem.  For a DeTurck trajectory the gauge advection
    ``-W . grad w`` is included so that ``w`` stays the pull-back of the
    ungauged solution.

    Returns ``w`` at every stored time (ascending order) with the masses
    ``int w dV``.
    """
    grid = traj.states[0].g.grid
    w = np.array(w_final, dtype=np.float64)
    if np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise PreconditionError("w_final must be positive and finite")
    g_T = traj.final.g
    m0 = gg.integrate(g_T, w)
    if abs(m0 - 1.0) > mass_rtol:
        raise PreconditionError(f"w_final must have unit mass, got {m0!r}")

    snaps = [_Snapshot(s, traj.gauge) for s in traj.states]

    def interp(a: _Snapshot, b: _Snapshot, t: float):
        span = b.t - a.t
        x = (t - a.t) / span
        x2, x3 = x * x, x * x * x
        comps = ((2 * x3 - 3 * x2 + 1) * a.comps + (x3 - 2 * x2 + x) * span * a.dcomps
                 + (3 * x2 - 2 * x3) * b.comps + (x3 - x2) * span * b.dcomps)
        rate = ((6 * x2 - 6 * x) * (a.comps - b.comps) / span
                + (3 * x2 - 4 * x + 1) * a.dcomps + (3 * x2 - 2 * x) * b.dcomps)
        g = MetricField(comps[0], comps[1], comps[2], grid)
        i11, i12, i22 = g.inverse
        S = -0.5 * (i11 * rate[0] + 2.0 * i12 * rate[1] + i22 * rate[2])
        W = None
        if a.W is not None:
            W = (1 - x) * a.W + x * b.W
            sw = g.sqrt_det
            S = S + (gg.diff(sw * W[0], 0, grid) + gg.diff(sw * W[1], 1, grid)) / sw
        return g, S, W

    def rate(a, b, t, wv):
        g, S, W = interp(a, b, t)
        r = gg.laplace_beltrami(g, wv) - S * wv
        if W is not None:
            dw = gg.gradient(wv, grid)
            r = r - (W[0] * dw[0] + W[1] * dw[1])
        return r

    def rk4_back(a, b, t, wv, h):
        # marching downward in t: dw/dt = -rate
        k1 = rate(a, b, t, wv)
        k2 = rate(a, b, t - 0.5 * h, wv + 0.5 * h * k1)
        k3 = rate(a, b, t - 0.5 * h, wv + 0.5 * h * k2)
        k4 = rate(a, b, t - h, wv + h * k3)
        return wv + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)

    def guarded(a, b, t, wv, h, depth=0):
        out = rk4_back(a, b, t, wv, h)
        if np.all(out > 0) and np.all(np.isfinite(out)):
            return out
        if depth >= max_halvings:
            raise BlowUpError(f"conjugate heat solution lost positivity near t = {t:.6g}")
        mid = guarded(a, b, t, wv, 0.5 * h, depth + 1)
        return guarded(a, b, t - 0.5 * h, mid, 0.5 * h, depth + 1)

    out_w = [w.copy()]
    masses = [m0]
    total_sub = 0
    for k in range(len(snaps) - 1, 0, -1):
        a, b = snaps[k - 1], snaps[k]
        span = b.t - a.t
        hmax = min(stability_bound(traj.states[k - 1].g), stability_bound(traj.states[k].g))
        nsub = max(1, int(math.ceil(span / hmax - 1e-9)))
        h = span / nsub
        t = b.t
        for j in range(nsub):
            w = guarded(a, b, t, w, h)
            t = b.t - (j + 1) * h
        total_sub += nsub
        out_w.append(w.copy())
        masses.append(gg.integrate(traj.states[k - 1].g, w))
    out_w.reverse()
    masses.reverse()
    return ConjugateHeatSolution(traj.times, out_w, np.array(masses), total_sub)


# ---------------------------------------------------------------------------


def maximum_principle_bound(S_min0: float, n: int, t: float) -> float:
    """ODE comparison bound ``a(t) = S_min0 / (1 - (2/n) S_min0 t)``."""
    denom = 1.0 - (2.0 / n) * S_min0 * t
    if denom <= 0:
        raise DomainError(f"t = {t} is at or beyond the blow-up time n/(2 S_min0)")
    return S_min0 / denom
