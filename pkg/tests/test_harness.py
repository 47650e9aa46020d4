import copy
import json
import math
import os

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hrflow import grid_geometry as gg
from hrflow.errors import ConfigError, DomainError
from hrflow.flow_engine import s_tensor
from hrflow.grid_geometry import Grid, MetricField, SymTensorField
from hrflow.harness import checks as C
from hrflow.harness import cli
from hrflow.harness.config import InitialSpec, load_config, parse_config
from hrflow.harness.initial_data import make_initial_data
from hrflow.harness.runner import default_tolerance, run_experiment

from conftest import random_metric, smooth_field

ALL_CHECKS = [{"id": "thm5.2"}, {"id": "thm7.1"}, {"id": "thm7.2", "alpha": 0.5},
              {"id": "cor7.3", "alpha": 0.75, "epsilon": -2.0, "condition": 1},
              {"id": "max_principle"}, {"id": "volume_identity"}, {"id": "entropy_F"},
              {"id": "thm8.2"}]


def base_config(out, preset="flat", **flow):
    f = {"T": 1e-3, "dt": 5e-5, "cadence": 4}
    f.update(flow)
    return {"grid": {"nx": 16, "ny": 16}, "initial": {"preset": preset, "seed": 42},
            "flow": f, "checks": copy.deepcopy(ALL_CHECKS),
            "monitors": {"mu_k": [1, 2], "mu_plus_tau": [0.5]},
            "output": {"dir": str(out)}}


# ---------------------------------------------------------------- config

def test_config_round_trip(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(base_config(tmp_path)))
    cfg = load_config(str(p))
    assert cfg.grid.nx == 16 and len(cfg.checks) == len(ALL_CHECKS)
    assert parse_config(cfg.echo()) == cfg


@pytest.mark.parametrize("mutate, where", [
    (lambda d: d.update(extra=1), "config"),
    (lambda d: d["grid"].update(bogus=2), "config.grid"),
    (lambda d: d["checks"].append({"id": "thm99"}), "checks"),
    (lambda d: d["checks"][0].update(tol=0.0), "tol"),
    (lambda d: d["initial"].update(preset="perturbed", seed=None), "seed"),
    (lambda d: d.pop("flow"), "flow"),
    (lambda d: d["checks"].append({"id": "thm5.2"}), "once"),
])
def test_config_rejections(tmp_path, mutate, where):
    d = base_config(tmp_path)
    mutate(d)
    with pytest.raises(ConfigError) as info:
        parse_config(d)
    assert where in str(info.value)


def test_config_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/config.json")


# ---------------------------------------------------------------- initial data

def test_flat_preset():
    st0 = make_initial_data(InitialSpec("flat"), Grid(16, 16))
    assert np.all(gg.curvature(st0.g)[1] == 0.0) and np.all(st0.u == 0.0)


def test_perturbed_deterministic():
    spec = InitialSpec("perturbed", 7, 0.05, 2)
    a = make_initial_data(spec, Grid(32, 32))
    b = make_initial_data(spec, Grid(32, 32))
    assert np.array_equal(a.g.array(), b.g.array()) and np.array_equal(a.u, b.u)


def test_perturbed_positive_definite_64():
    st0 = make_initial_data(InitialSpec("perturbed", 42, 0.05, 2), Grid(64, 64))
    lo, _ = st0.g.eigenvalue_bounds()
    assert lo > 0.9
    assert np.isfinite(s_tensor(st0.g, st0.u)[1].min())


def test_perturbed_amplitude_too_large():
    with pytest.raises(ConfigError):
        make_initial_data(InitialSpec("perturbed", 1, 2.0, 2), Grid(16, 16))


def test_conformal_preset():
    from hrflow.harness.config import TrigTerm
    spec = InitialSpec("conformal", phi=(TrigTerm(0.1, 1, 1, "sin", "sin"),), u=(TrigTerm(0.05, 1, 0, "sin", "cos"),))
    grid = Grid(32, 32)
    st0 = make_initial_data(spec, grid)
    X, Y = grid.coords()
    phi = 0.1 * np.sin(2 * np.pi * X) * np.sin(2 * np.pi * Y)
    assert np.allclose(st0.g.g11, np.exp(2 * phi)) and np.all(st0.g.g12 == 0)


# ---------------------------------------------------------------- pointwise checkers

def sine_u(n=64, eps=0.1):
    grid = Grid(n, n)
    X, _ = grid.coords()
    return MetricField.flat(grid), eps * np.sin(2 * np.pi * X)


def test_pinching_flat():
    grid = Grid(16, 16)
    for alpha in (0.5, 1.0, 3.0):
        assert C.check_pinching_alpha(MetricField.flat(grid), np.zeros(grid.shape), alpha) == (True, 0.0)


def test_pinching_sine_map_fails():
    g, u = sine_u(64, 0.1)
    holds, margin = C.check_pinching_alpha(g, u, 0.5)
    assert not holds
    assert margin == pytest.approx(-(2 * math.pi * 0.1) ** 2, rel=5e-3)


def test_pinching_alpha_below_half():
    g, u = sine_u(16)
    with pytest.raises(DomainError):
        C.check_pinching_alpha(g, u, 0.4)


@given(st.integers(0, 10_000))
def test_pinching_margin_monotone_in_alpha(seed):
    # S >= 0 everywhere forces flat data on a torus, so check node by node:
    # the g-eigenvalues of Stensor - alpha S g are those of Stensor shifted by -alpha S
    rng = np.random.default_rng(seed)
    grid = Grid(12, 12)
    g = random_metric(grid, rng, 0.2)
    u = smooth_field(grid, rng, 2, 0.05)
    st_, S = s_tensor(g, u)
    lams = []
    for alpha in (0.5, 1.0, 2.0):
        aS = alpha * S
        lams.append(C.min_g_eigenvalue(g, st_ - SymTensorField(aS * g.g11, aS * g.g12, aS * g.g22)))
    pos = S >= 0
    scale = np.abs(lams[0]).max()
    assert np.all(lams[0][pos] >= lams[1][pos] - 1e-12 * scale)
    assert np.all(lams[1][pos] >= lams[2][pos] - 1e-12 * scale)
    assert np.allclose(lams[1] - lams[0], -0.5 * S, atol=1e-10 * scale)


def test_surface_conditions_constant_u():
    g = random_metric(Grid(16, 16), np.random.default_rng(0))
    c1, c2, (m1, m2) = C.check_surface_conditions(g, np.full(g.grid.shape, 2.0), 0.0)
    assert c2 and m2 == 0.0
    ric, _ = gg.curvature(g)
    assert m1 == pytest.approx(float(C.min_g_eigenvalue(g, ric * -1.0).min()), rel=1e-12)


def test_surface_conditions_sine_map():
    g, u = sine_u(64, 0.1)
    c1, c2, (m1, m2) = C.check_surface_conditions(g, u, 0.0)
    assert not c2 and m2 == pytest.approx(-(2 * math.pi * 0.1) ** 2, rel=5e-3)


def test_surface_condition1_flat():
    grid = Grid(16, 16)
    c1, _, (m1, _) = C.check_surface_conditions(MetricField.flat(grid), np.zeros(grid.shape), 0.0)
    assert c1 and m1 == 0.0


@given(st.integers(0, 10_000), st.floats(0.5, 3.0))
def test_checkers_agree_with_brute_force(seed, alpha):
    rng = np.random.default_rng(seed)
    grid = Grid(8, 8)
    g = random_metric(grid, rng, 0.3)
    u = smooth_field(grid, rng, 2, 0.3)
    st_, S = s_tensor(g, u)
    aS = alpha * S
    t = st_ - SymTensorField(aS * g.g11, aS * g.g12, aS * g.g22)
    exact = C.min_g_eigenvalue(g, t)
    brute = C.brute_force_min(g, t, 64)
    scale = np.abs(exact).max() + 1e-12
    # sampled minimum is above the exact one and within the angular resolution
    assert np.all(brute >= exact - 1e-12 * scale)
    assert np.all(brute - exact <= 5e-3 * scale)
    assert C.check_pinching_alpha(g, u, alpha)[1] == pytest.approx(float(exact.min()), rel=1e-12)


# ---------------------------------------------------------------- monotonicity verdicts

def test_verdict_constant_series():
    v = C.monotonicity_verdict([(0, 1.0), (1, 1.0), (2, 1.0)])
    assert v.verdict == C.PASS and v.worst_violation == 0.0


def test_verdict_decreasing_pair():
    v = C.monotonicity_verdict([(0, 1.0), (1, 0.9)], "identity", 1e-6)
    assert v.verdict == C.FAIL and v.worst_violation == pytest.approx(0.1, rel=1e-12)


def test_comparison_weight_zero_smin_is_identity():
    s = [(0, 1.0), (0.5, 1.2), (1.0, 1.1)]
    a = C.monotonicity_verdict(s, "identity", 1e-6)
    b = C.monotonicity_verdict(s, ("thm72", 0.7, 0.0, 2), 1e-6)
    assert (a.verdict, a.worst_violation) == (b.verdict, b.worst_violation)


def test_comparison_weight_domain():
    with pytest.raises(DomainError):
        C.monotonicity_verdict([(0, 1.0), (2.0, 1.0)], ("thm72", 0.5, 1.0, 2))


def test_verdict_rejects_bad_series():
    with pytest.raises(DomainError):
        C.monotonicity_verdict([])
    with pytest.raises(DomainError):
        C.monotonicity_verdict([(1, 0.0), (0, 0.0)])


# ---------------------------------------------------------------- runs

def test_default_tolerance():
    cfg = parse_config(base_config("x"))
    assert default_tolerance(cfg) == pytest.approx(10 * (1 / 256 + 5e-5))


def test_flat_run_all_pass(tmp_path):
    cfg = parse_config(base_config(tmp_path))
    res = run_experiment(cfg)
    assert res.exit_code == 0
    ids = [c["id"] for c in res.report["checks"]]
    assert ids == [c["id"] for c in ALL_CHECKS]
    assert all(c["verdict"] == "pass" for c in res.report["checks"])
    lines = (tmp_path / "series.csv").read_text().splitlines()
    header = lines[0].split(",")
    assert header[0] == "t"
    rows = [list(map(lambda x: float(x) if x else None, ln.split(","))) for ln in lines[1:]]
    for j, name in enumerate(header[1:], start=1):
        col = [r[j] for r in rows if r[j] is not None]
        assert max(col) - min(col) <= 1e-10 * max(1.0, abs(col[0])), name


def test_perturbed_mu_monotone_and_reproducible(tmp_path):
    d = base_config(tmp_path / "a", "perturbed", T=2e-3)
    d["grid"] = {"nx": 24, "ny": 24}
    d["checks"] = [{"id": "thm5.2", "series": ["mu_1", "mu_2"]}]
    a = run_experiment(parse_config(d))
    assert a.report["checks"][0]["verdict"] == "pass"
    d["output"]["dir"] = str(tmp_path / "b")
    b = run_experiment(parse_config(d))
    assert a.exit_code == b.exit_code == 0
    for name in ("series.csv", "report.json"):
        ra = (tmp_path / "a" / name).read_bytes()
        rb = (tmp_path / "b" / name).read_bytes()
        if name == "report.json":
            ra = ra.replace(str(tmp_path / "a").encode(), b"")
            rb = rb.replace(str(tmp_path / "b").encode(), b"")
        assert ra == rb


def test_threads_do_not_change_output(tmp_path, monkeypatch):
    d = base_config(tmp_path / "s", "perturbed", T=1e-3)
    a = run_experiment(parse_config(d))
    monkeypatch.setenv("HRF_THREADS", "4")
    d["output"]["dir"] = str(tmp_path / "t")
    b = run_experiment(parse_config(d))
    assert (tmp_path / "s" / "series.csv").read_bytes() == (tmp_path / "t" / "series.csv").read_bytes()
    assert a.exit_code == b.exit_code


def test_dt_above_bound_refused(tmp_path):
    cfg = parse_config(base_config(tmp_path, dt=1e-2))
    res = run_experiment(cfg)
    assert res.exit_code == 2 and res.report["status"] == "refused"
    assert res.report["solver"] if "solver" in res.report else True
    assert len(res.report["checks"]) == len(ALL_CHECKS)
    assert all(c["verdict"] == "inconclusive" for c in res.report["checks"])


def test_blow_up_exit_code(tmp_path):
    d = base_config(tmp_path, "perturbed", T=0.5, dt=5e-5, max_halvings=0)
    d["initial"]["amplitude"] = 0.6
    d["initial"]["modes"] = 3
    d["grid"] = {"nx": 24, "ny": 24}
    d["checks"] = [{"id": "max_principle"}]
    d["monitors"] = {}
    cfg = parse_config(d)
    from hrflow.flow_engine import stability_bound
    st0 = make_initial_data(cfg.initial, Grid(24, 24))
    d["flow"]["dt"] = 0.9 * stability_bound(st0.g)
    res = run_experiment(parse_config(d))
    assert res.exit_code == 3 and res.report["status"] == "blow_up"


def test_report_json_has_no_nonfinite(tmp_path):
    cfg = parse_config(base_config(tmp_path))
    run_experiment(cfg)
    text = (tmp_path / "report.json").read_text()
    assert "NaN" not in text and "Infinity" not in text
    rep = json.loads(text)
    assert set(rep) >= {"checks", "config", "solver", "initial_data", "exit_code", "status"}


# ---------------------------------------------------------------- cli

def test_cli_verify_and_run(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(base_config(tmp_path / "out")))
    assert cli.main(["verify", str(p)]) == 0
    assert cli.main(["run", str(p)]) == 0
    assert (tmp_path / "out" / "series.csv").exists()


def test_cli_config_error(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    assert cli.main(["verify", str(p)]) == 2
    assert cli.main(["run", str(p)]) == 2


def test_cli_oracle(capsys):
    assert cli.main(["oracle", "conformal-curvature"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["pass"] and min(out["slopes"]) >= 1.9


def test_series_derivative_is_fourth_order():
    from hrflow.harness.runner import _derivative
    errs = []
    for n in (11, 21, 41):
        t = np.linspace(0.0, 1.0, n)
        errs.append(np.abs(_derivative(t, np.exp(t)) - np.exp(t)).max())
    assert all(math.log2(a / b) >= 3.8 for a, b in zip(errs[:-1], errs[1:]))
    t = np.linspace(0.0, 1.0, 9)
    assert np.allclose(_derivative(t, t ** 4), 4 * t ** 3, atol=1e-12)
