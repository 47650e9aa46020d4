"""Experiment orchestration: initial data, evolution, monitors, checks, output."""
from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .. import entropy, spectral
from .. import grid_geometry as gg
from ..errors import BlowUpError, ConfigError, HRFError, PreconditionError
from ..flow_engine import (FlowState, GaugeSetting, Trajectory, conjugate_heat_solve, evolve,
                           maximum_principle_bound, s_tensor, stability_bound)
from .checks import (FAIL, INCONCLUSIVE, PASS, Verdict, check_pinching_alpha,
                     check_surface_conditions, min_g_eigenvalue, monotonicity_verdict)
from .config import CheckSpec, ExperimentConfig
from .initial_data import make_grid, make_initial_data

__all__ = ["RunResult", "run_experiment", "default_tolerance", "thread_count", "build_monitors",
           "write_series", "write_report", "EXIT_OK", "EXIT_FAIL", "EXIT_CONFIG", "EXIT_BLOWUP"]

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_BLOWUP = 0, 1, 2, 3
N_DIM = 2
# rates below this (relative to the eigenvalue scale) count as zero
RATE_FLOOR = 1e-6


def default_tolerance(cfg: ExperimentConfig) -> float:
    """``10 (h^2 + dt)`` with ``h`` the larger grid spacing."""
    h = max(cfg.grid.Lx / cfg.grid.nx, cfg.grid.Ly / cfg.grid.ny)
    return 10.0 * (h * h + cfg.flow.dt)


def thread_count() -> int:
    """Worker cap from ``HRF_THREADS`` (unset or invalid means one)."""
    raw = os.environ.get("HRF_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# monitors


class _EigenCounter:
    def __init__(self):
        self.iterations = 0


class _Basic:
    def __init__(self, names):
        self.names = names

    def __call__(self, st: FlowState):
        _, S = s_tensor(st.g, st.u)
        out = {}
        if "S_min" in self.names:
            out["S_min"] = float(S.min())
        if "volume" in self.names:
            out["volume"] = st.g.volume()
            out["int_S"] = gg.integrate(st.g, S)
        return out


class _Lambda1:
    def __init__(self, rate: bool, counter: _EigenCounter):
        self.rate = rate
        self.counter = counter
        self.x0 = None
        self.names = ["lambda1"] + (["lambda1_rate"] if rate else [])

    def __call__(self, st: FlowState):
        pair = spectral.laplacian_eigs(st.g, 1, x0=self.x0)[0]
        self.counter.iterations += pair.iterations
        self.x0 = [pair.function]
        out = {"lambda1": pair.value}
        if self.rate:
            out["lambda1_rate"] = spectral.lambda_dot_laplacian(st.g, st.u, pair.value, pair.function)
        return out


class _MuK:
    def __init__(self, ks, plus_taus, plus_k, counter: _EigenCounter):
        self.ks = list(ks)
        self.plus_taus = list(plus_taus)
        self.plus_k = plus_k
        self.counter = counter
        self.x0: Dict[float, Any] = {}
        self.names = [mu_name(k) for k in self.ks] + [mu_plus_name(plus_k, t) for t in self.plus_taus]

    def __call__(self, st: FlowState):
        out = {}
        need = list(self.ks) + ([self.plus_k] if self.plus_taus else [])
        vals = {}
        for k in dict.fromkeys(need):
            pair = entropy.mu_k_pair(st.g, st.u, k, x0=self.x0.get(k))
            self.counter.iterations += pair.iterations
            self.x0[k] = [pair.function]
            vals[k] = pair.value
        for k in self.ks:
            out[mu_name(k)] = vals[k]
        for tau in self.plus_taus:
            out[mu_plus_name(self.plus_k, tau)] = tau * tau * vals[self.plus_k] + 0.5 * self.plus_k * N_DIM * tau
        return out


class _GucRates:
    names = ["guc_lambda", "rateA", "rateB", "stensor_min_eig"]

    def __init__(self, counter: _EigenCounter):
        self.counter = counter
        self.x0 = None

    def __call__(self, st: FlowState):
        pair = spectral.guc_ground_state(st.g, st.u, x0=self.x0)
        self.counter.iterations += pair.iterations
        self.x0 = [pair.function]
        a, b = spectral.lambda_dot_guc(st.g, st.u, pair.function)
        stt, _ = s_tensor(st.g, st.u)
        return {"guc_lambda": pair.value, "rateA": a, "rateB": b,
                "stensor_min_eig": float(min_g_eigenvalue(st.g, stt).min())}


class _Hypotheses:
    def __init__(self, checks):
        self.checks = checks
        self.names = []
        for c in checks:
            if c.id == "thm7.2":
                self.names.append(f"pinching_margin_{c.alpha:g}")
            elif c.id == "cor7.3":
                self.names.append(f"cond{c.condition}_margin")

    def __call__(self, st: FlowState):
        out = {}
        for c in self.checks:
            if c.id == "thm7.2":
                out[f"pinching_margin_{c.alpha:g}"] = check_pinching_alpha(st.g, st.u, c.alpha)[1]
            elif c.id == "cor7.3":
                _, _, (m1, m2) = check_surface_conditions(st.g, st.u, c.epsilon or 0.0)
                out[f"cond{c.condition}_margin"] = m1 if c.condition == 1 else m2
        return out


def mu_name(k: float) -> str:
    return f"mu_{k:g}"


def mu_plus_name(k: float, tau: float) -> str:
    return f"mu_plus_k{k:g}_tau{tau:g}"


def _required(cfg: ExperimentConfig):
    """Monitors implied by the configured checks, merged with the explicit ones."""
    m = cfg.monitors
    want = {"lambda1": m.lambda1, "lambda1_rate": m.lambda1_rate, "S_min": m.S_min,
            "volume": m.volume, "F": m.F_conjugate_heat, "guc": m.guc_rates}
    ids = {c.id for c in cfg.checks}
    if ids & {"thm7.2", "cor7.3", "thm7.1"}:
        want["lambda1"] = True
    if "thm7.1" in ids:
        want["lambda1_rate"] = True
    if ids & {"thm7.2", "cor7.3", "max_principle"}:
        want["S_min"] = True
    if "volume_identity" in ids:
        want["volume"] = True
    if "entropy_F" in ids:
        want["F"] = True
    if "thm8.2" in ids:
        want["guc"] = True
    ks = list(m.mu_k)
    if "thm5.2" in ids and not ks:
        ks = [1.0, 2.0]
    return want, ks


def build_monitors(cfg: ExperimentConfig, counter: _EigenCounter):
    want, ks = _required(cfg)
    mons = []
    basic = [n for n in ("S_min", "volume") if want[n]]
    if basic:
        mons.append(_Basic(basic))
    if want["lambda1"]:
        mons.append(_Lambda1(want["lambda1_rate"], counter))
    if ks or cfg.monitors.mu_plus_tau:
        mons.append(_MuK(ks, cfg.monitors.mu_plus_tau, cfg.monitors.mu_plus_k, counter))
    if want["guc"]:
        mons.append(_GucRates(counter))
    hyp = [c for c in cfg.checks if c.id in ("thm7.2", "cor7.3")]
    if hyp:
        mons.append(_Hypotheses(hyp))
    return mons, want["F"]


# ---------------------------------------------------------------------------
# checks


def _series(records, name) -> List[Tuple[float, float]]:
    return [(t, r[name]) for t, r in records if name in r]


def _missing(name) -> Verdict:
    return Verdict(INCONCLUSIVE, note=f"series {name!r} unavailable")


def _check_monotone(records, names, tol) -> Verdict:
    worst = Verdict(PASS, 0.0)
    notes = []
    for name in names:
        s = _series(records, name)
        if not s:
            return _missing(name)
        v = monotonicity_verdict(s, "identity", tol)
        notes.append(f"{name}: worst {v.worst_violation:.3e}")
        if v.worst_violation > worst.worst_violation or (v.verdict == FAIL and worst.verdict != FAIL):
            worst = Verdict(v.verdict, v.worst_violation, v.t)
    worst.note = "; ".join(notes)
    return worst


def _hypothesis_along(records, name, tol) -> Tuple[bool, float]:
    s = _series(records, name)
    margin = min(v for _, v in s) if s else -math.inf
    return margin >= -tol, margin


def _check_weighted_lambda(records, alpha, S_min0, T_end, hyp_name, tol, weight_alpha) -> Verdict:
    ok, margin = _hypothesis_along(records, hyp_name, 0.0)
    if not ok:
        return Verdict(INCONCLUSIVE, 0.0, note=f"hypothesis fails along the flow (margin {margin:.3e})")
    if S_min0 > 0 and T_end >= N_DIM / (2.0 * S_min0):
        return Verdict(INCONCLUSIVE, 0.0, note="run extends beyond n / (2 S_min(0))")
    s = _series(records, "lambda1")
    if not s:
        return _missing("lambda1")
    transform = "identity" if S_min0 == 0 else ("thm72", weight_alpha, S_min0, N_DIM)
    v = monotonicity_verdict(s, transform, tol)
    v.note = f"hypothesis margin {margin:.3e}; S_min(0) = {S_min0:.6g}"
    return v


def _centered_rate(s: List[Tuple[float, float]]):
    t = np.array([p[0] for p in s])
    v = np.array([p[1] for p in s])
    out = []
    for i in range(1, len(t) - 1):
        d1, d2 = t[i] - t[i - 1], t[i + 1] - t[i]
        if abs(d1 - d2) > 1e-9 * max(d1, d2):
            continue
        out.append((i, (v[i + 1] - v[i - 1]) / (t[i + 1] - t[i - 1])))
    return t, out


def _check_thm71(records, tol) -> Verdict:
    lam = _series(records, "lambda1")
    rate = dict(_series(records, "lambda1_rate"))
    if len(lam) < 3:
        return _missing("lambda1")
    t, fd = _centered_rate(lam)
    worst, where = 0.0, None
    lam_scale = max(1.0, max(abs(v) for _, v in lam))
    for i, d in fd:
        r = rate.get(t[i])
        if r is None:
            continue
        # absolute floor so that a vanishing rate is not judged relatively
        rel = abs(d - r) / max(abs(r), RATE_FLOOR * lam_scale)
        if rel > worst:
            worst, where = rel, float(t[i])
    return Verdict(PASS if worst <= tol else FAIL, worst, where, note="relative error of the closed-form rate")


def _check_max_principle(records, S_min0, tol) -> Verdict:
    s = _series(records, "S_min")
    if not s:
        return _missing("S_min")
    worst, where = 0.0, None
    if S_min0 > 0 and s[-1][0] >= N_DIM / (2.0 * S_min0):
        return Verdict(INCONCLUSIVE, note="run reaches the comparison blow-up time")
    for t, v in s:
        a = maximum_principle_bound(S_min0, N_DIM, t)
        viol = a - v
        if viol > worst:
            worst, where = viol, t
    return Verdict(PASS if worst <= tol else FAIL, worst, where, note="max of a(t) - S_min(t)")


def _derivative(t: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Time derivative of a uniformly sampled series, fourth order throughout
    (one-sided stencils at the ends) when at least five samples exist."""
    n = len(t)
    h = (t[-1] - t[0]) / (n - 1)
    if n < 5:
        return np.gradient(v, h, edge_order=2)
    d = np.empty(n)
    d[2:-2] = (v[:-4] - 8 * v[1:-3] + 8 * v[3:-1] - v[4:]) / (12 * h)
    d[0] = (-25 * v[0] + 48 * v[1] - 36 * v[2] + 16 * v[3] - 3 * v[4]) / (12 * h)
    d[1] = (-3 * v[0] - 10 * v[1] + 18 * v[2] - 6 * v[3] + v[4]) / (12 * h)
    d[-1] = (25 * v[-1] - 48 * v[-2] + 36 * v[-3] - 16 * v[-4] + 3 * v[-5]) / (12 * h)
    d[-2] = (3 * v[-1] + 10 * v[-2] - 18 * v[-3] + 6 * v[-4] - v[-5]) / (12 * h)
    return d


def _uniform_times(s) -> bool:
    t = np.array([p[0] for p in s])
    if len(t) < 3:
        return False
    dt = np.diff(t)
    return bool(np.all(np.abs(dt - dt[0]) <= 1e-9 * dt[0]))


def _check_volume(records, tol) -> Verdict:
    vol = _series(records, "volume")
    ints = dict(_series(records, "int_S"))
    if len(vol) < 3:
        return _missing("volume")
    if not _uniform_times(vol):
        # drop a shortened final interval
        vol = vol[:-1]
        if not _uniform_times(vol):
            return Verdict(INCONCLUSIVE, note="volume samples are not uniformly spaced")
    t = np.array([p[0] for p in vol])
    v = np.array([p[1] for p in vol])
    d = _derivative(t, v)
    res = np.array([abs(d[i] + ints[t[i]]) for i in range(len(t))])
    j = int(np.argmax(res))
    return Verdict(PASS if res[j] <= tol else FAIL, float(res[j]), float(t[j]),
                   note="max |dVol/dt + int S dV|")


def _check_thm82(records, tol) -> Verdict:
    a = _series(records, "rateA")
    b = dict(_series(records, "rateB"))
    eig = dict(_series(records, "stensor_min_eig"))
    if not a:
        return _missing("rateA")
    worst, where, notes = 0.0, None, []
    for t, ra in a:
        rel = abs(ra - b[t]) / max(abs(ra), abs(b[t]), RATE_FLOOR)
        if rel > worst:
            worst, where = rel, t
        if eig[t] >= 0 and ra < -1e-8:
            notes.append(f"rateA = {ra:.3e} < 0 at t = {t:.6g} with Stensor >= 0")
    verdict = PASS if worst <= tol and not notes else FAIL
    return Verdict(verdict, worst, where, note="; ".join(notes) or "relative |rateA - rateB|")


def _check_entropy_F(records, tol, mass_drift) -> Verdict:
    v = _check_monotone(records, ["F"], tol)
    if v.verdict == PASS and mass_drift > 1e-6:
        return Verdict(FAIL, v.worst_violation, v.t, note=f"mass drift {mass_drift:.3e} exceeds 1e-6")
    v.note += f"; mass drift {mass_drift:.3e}"
    return v


def _evaluate(check: CheckSpec, cfg, records, S_min0, T_end, extra) -> Verdict:
    tol = check.tol if check.tol is not None else (
        0.05 if check.id == "thm7.1" else default_tolerance(cfg))
    if check.id == "thm8.2":
        h = max(cfg.grid.Lx / cfg.grid.nx, cfg.grid.Ly / cfg.grid.ny)
        tol = check.tol if check.tol is not None else 10.0 * h * h
        return _check_thm82(records, tol)
    if check.id == "thm5.2":
        names = list(check.series) or [n for n in _names(records) if n.startswith("mu_") and not n.startswith("mu_plus")]
        return _check_monotone(records, names, tol)
    if check.id == "thm7.1":
        return _check_thm71(records, tol)
    if check.id == "thm7.2":
        return _check_weighted_lambda(records, check.alpha, S_min0, T_end,
                                      f"pinching_margin_{check.alpha:g}", tol, check.alpha)
    if check.id == "cor7.3":
        alpha = check.alpha
        if check.condition == 1:
            if not (alpha > 0.5 and check.epsilon <= 4 * (1 - alpha) / (1 - 2 * alpha)):
                return Verdict(INCONCLUSIVE, note="epsilon/alpha outside the admissible range")
            return _check_weighted_lambda(records, alpha, S_min0, T_end, "cond1_margin", tol, alpha)
        return _check_weighted_lambda(records, alpha, S_min0, T_end, "cond2_margin", tol, 0.5)
    if check.id == "max_principle":
        return _check_max_principle(records, S_min0, tol)
    if check.id == "volume_identity":
        return _check_volume(records, tol)
    if check.id == "entropy_F":
        return _check_entropy_F(records, tol, extra.get("mass_drift", math.inf))
    raise ConfigError(f"unknown check {check.id!r}")  # pragma: no cover


def _names(records) -> List[str]:
    out: List[str] = []
    for _, r in records:
        for k in r:
            if k not in out:
                out.append(k)
    return out


# ---------------------------------------------------------------------------
# output


def _clean(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, (np.floating,)):
        return _clean(float(obj))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def write_series(path: str, records) -> None:
    names = _names(records)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t"] + names)
    for t, r in records:
        w.writerow(["%.17g" % t] + ["%.17g" % r[n] if n in r else "" for n in names])
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def write_report(path: str, report: Dict[str, Any]) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_clean(report), fh, sort_keys=True, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    report: Dict[str, Any]
    exit_code: int
    trajectory: Optional[Trajectory] = None
    records: List = field(default_factory=list)


def _conjugate_F(traj: Trajectory):
    """F(t) along the stored states from the backward conjugate heat solve."""
    gT = traj.final.g
    w_final = np.full(gT.grid.shape, 1.0 / gT.volume())
    sol = conjugate_heat_solve(traj, w_final)
    vals = {}
    for i, st in enumerate(traj.states):
        vals[st.t] = entropy.functional_F(st.g, st.u, sol.f(i), rescale=True)
    drift = float(np.max(np.abs(sol.mass - 1.0)))
    return vals, drift, sol.substeps


def run_experiment(cfg: ExperimentConfig, write: bool = True, executor=None) -> RunResult:
    """Run one configured experiment and (optionally) write its series and report.

    The exit code is 0 when no check failed, 1 on a failed check or a module
    error, 2 on a configuration error (including a refused time step) and 3 on
    numerical blow-up.
    """
    report: Dict[str, Any] = {"config": cfg.echo(), "checks": [], "status": "completed"}
    grid = make_grid(cfg.grid)
    counter = _EigenCounter()
    records: List = []
    traj: Optional[Trajectory] = None
    code = EXIT_OK
    try:
        state = make_initial_data(cfg.initial, grid)
        _, S0 = s_tensor(state.g, state.u)
        S_min0 = float(S0.min())
        lo, _ = state.g.eigenvalue_bounds()
        report["initial_data"] = {"S_min0": S_min0, "metric_min_eigenvalue": lo,
                                  "positive_definite": bool(lo > 0),
                                  "stability_bound": stability_bound(state.g)}
        monitors, want_F = build_monitors(cfg, counter)
        n_steps = max(1, int(math.ceil(cfg.flow.T / cfg.flow.dt - 1e-9)))
        store_every = cfg.flow.cadence if want_F else n_steps
        gauge = GaugeSetting(cfg.flow.gauge, state.g if cfg.flow.gauge == "deturck" else None)
        own_pool = None
        if executor is None and thread_count() > 1:
            own_pool = executor = ThreadPoolExecutor(max_workers=thread_count())
        try:
            traj = evolve(state, cfg.flow.T, cfg.flow.dt, gauge, monitors, cadence=cfg.flow.cadence,
                          store_every=store_every, max_halvings=cfg.flow.max_halvings,
                          executor=executor)
        finally:
            if own_pool is not None:
                own_pool.shutdown()
        records = traj.records
        extra: Dict[str, Any] = {}
        if want_F:
            Fvals, drift, subs = _conjugate_F(traj)
            extra["mass_drift"] = drift
            report["conjugate_heat"] = {"mass_drift": drift, "substeps": subs}
            records = [(t, dict(r, F=Fvals[t])) if t in Fvals else (t, r) for t, r in records]
        report["solver"] = {"steps": len(traj.step_sizes), "halvings": int(sum(traj.halvings)),
                            "max_halving_depth": int(max(traj.halvings, default=0)),
                            "eigen_iterations": counter.iterations, "stored_states": len(traj.states)}
        T_end = traj.final.t
        any_fail = False
        for c in cfg.checks:
            v = _evaluate(c, cfg, records, S_min0, T_end, extra)
            entry = {"id": c.id}
            entry.update(v.as_dict())
            report["checks"].append(entry)
            any_fail = any_fail or v.verdict == FAIL
        code = EXIT_FAIL if any_fail else EXIT_OK
    except (ConfigError, PreconditionError) as exc:
        report["status"] = "refused"
        report["error"] = f"{type(exc).__name__}: {exc}"
        code = EXIT_CONFIG
    except BlowUpError as exc:
        report["status"] = "blow_up"
        report["error"] = str(exc)
        traj = exc.trajectory
        records = traj.records if traj is not None else []
        code = EXIT_BLOWUP
    except HRFError as exc:
        report["status"] = "error"
        report["error"] = f"{type(exc).__name__}: {exc}"
        code = EXIT_FAIL
    done = {c["id"] for c in report["checks"]}
    for c in cfg.checks:
        if c.id not in done:
            report["checks"].append({"id": c.id, "verdict": INCONCLUSIVE, "worst_violation": None,
                                     "location": {"t": None, "node": None},
                                     "note": "not evaluated: run did not complete"})
    report["exit_code"] = code
    if write:
        write_series(cfg.output.series_path, records)
        write_report(cfg.output.report_path, report)
    return RunResult(report, code, traj, records)
