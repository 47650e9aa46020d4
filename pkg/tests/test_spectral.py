import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st

from hrflow import grid_geometry as gg
from hrflow import spectral
from hrflow.errors import DomainError, PreconditionError
from hrflow.flow_engine import s_tensor
from hrflow.grid_geometry import Grid, MetricField

from conftest import random_metric, smooth_field


def five_point(nx, ny, hx, hy):
    def lap1(n, h):
        e = np.ones(n)
        T = sp.diags([-e[:-1], 2 * e, -e[:-1]], [-1, 0, 1], format="lil")
        T[0, n - 1] = T[n - 1, 0] = -1
        return T.tocsr() / h ** 2
    return sp.kron(lap1(nx, hx), sp.identity(ny)) + sp.kron(sp.identity(nx), lap1(ny, hy))


def test_flat_stiffness_is_five_point():
    grid = Grid(12, 10, 1.0, 2.0)
    op = spectral.assemble(MetricField.flat(grid))
    ref = five_point(12, 10, grid.hx, grid.hy) * grid.cell_area
    assert abs(op.stiffness - ref).max() < 1e-10
    assert np.all(op.stiffness @ np.ones(120) == 0.0)


@given(st.integers(0, 10_000))
def test_stiffness_exactly_symmetric(seed):
    g = random_metric(Grid(12, 12), np.random.default_rng(seed))
    K = spectral.assemble(g).stiffness
    assert abs(K - K.T).max() == 0.0
    assert np.all(K @ np.ones(144) == 0.0)


def test_constant_potential_shifts_rayleigh_quotient():
    rng = np.random.default_rng(0)
    grid = Grid(16, 16)
    g = random_metric(grid, rng)
    f = smooth_field(grid, rng)
    a = spectral.rayleigh_quotient(spectral.assemble(g), f)
    b = spectral.rayleigh_quotient(spectral.assemble(g, np.full(grid.shape, 2.5)), f)
    assert b - a == pytest.approx(2.5, rel=1e-12)


def test_assemble_rejects_bad_scale():
    with pytest.raises((DomainError, PreconditionError)):
        spectral.assemble(MetricField.flat(Grid(8, 8)), None, -1.0)


def test_flat_torus_first_eigenvalue():
    pairs = spectral.laplacian_eigs(MetricField.flat(Grid(64, 64)), 4)
    exact = 4 * math.pi ** 2
    vals = np.array([p.value for p in pairs])
    assert abs(vals[0] - exact) / exact < 0.01
    # the four modes (+-1, 0), (0, +-1) share the eigenvalue
    assert np.all(np.abs(vals - vals[0]) < 1e-8 * vals[0])
    F = np.stack([p.function.ravel() for p in pairs], 1)
    m = spectral.assemble(MetricField.flat(Grid(64, 64))).mass
    assert np.allclose(F.T @ (m[:, None] * F), np.eye(4), atol=1e-8)


def test_flat_mu_zero_with_constant_ground_state():
    grid = Grid(32, 32)
    g = MetricField.flat(grid)
    _, S = s_tensor(g, np.zeros(grid.shape))
    pair = spectral.smallest_eigs(spectral.assemble(g, S, 4.0), 1)[0]
    assert abs(pair.value) < 1e-10
    assert np.ptp(pair.function) < 1e-8 and pair.function.sum() > 0


@given(st.integers(0, 10_000))
def test_rayleigh_identity(seed):
    rng = np.random.default_rng(seed)
    grid = Grid(16, 16)
    g = random_metric(grid, rng)
    op = spectral.assemble(g, smooth_field(grid, rng, 2, 5.0), 4.0)
    pair = spectral.smallest_eigs(op, 1)[0]
    assert spectral.rayleigh_quotient(op, pair.function) == pytest.approx(pair.value, rel=1e-10, abs=1e-10)
    assert pair.value >= op.potential.min() - 1e-12
    assert np.all(pair.function > 0)


def test_eigenvalues_translation_invariant():
    rng = np.random.default_rng(2)
    g = random_metric(Grid(24, 24), rng)
    a = spectral.laplacian_eigs(g, 2)
    b = spectral.laplacian_eigs(g.roll(7, 1), 2)
    for p, q in zip(a, b):
        assert p.value == pytest.approx(q.value, rel=1e-10)


@pytest.mark.parametrize("alpha", [0.5, 2.0, 4.0])
def test_eigenvalue_scaling(alpha):
    g = random_metric(Grid(16, 16), np.random.default_rng(3))
    lam = spectral.laplacian_eigs(g, 1)[0].value
    lam_a = spectral.laplacian_eigs(g.scaled(alpha), 1)[0].value
    assert lam_a == pytest.approx(lam / alpha, rel=1e-10)


def test_warm_start_reproduces_value():
    g = random_metric(Grid(24, 24), np.random.default_rng(4))
    a = spectral.laplacian_eigs(g, 1)[0]
    b = spectral.laplacian_eigs(g, 1, x0=[a.function])[0]
    assert b.value == pytest.approx(a.value, rel=1e-11)
    assert b.iterations <= a.iterations


def test_k_must_be_positive():
    with pytest.raises(PreconditionError):
        spectral.smallest_eigs(spectral.assemble(MetricField.flat(Grid(8, 8))), 0)


# ---------------------------------------------------------------- rates

def test_lambda_dot_flat_zero():
    grid = Grid(32, 32)
    g = MetricField.flat(grid)
    pair = spectral.laplacian_eigs(g, 1)[0]
    assert spectral.lambda_dot_laplacian(g, np.full(grid.shape, 0.7), pair.value, pair.function) == pytest.approx(0.0, abs=1e-10)


def test_lambda_dot_requires_eigenpair():
    grid = Grid(16, 16)
    g = MetricField.flat(grid)
    f = smooth_field(grid, np.random.default_rng(0))
    with pytest.raises(PreconditionError):
        spectral.lambda_dot_laplacian(g, np.zeros(grid.shape), 10.0, f)


def test_lambda_dot_pure_ricci_matches_u_free_formula():
    rng = np.random.default_rng(5)
    grid = Grid(24, 24)
    g = random_metric(grid, rng, 0.05)
    pair = spectral.laplacian_eigs(g, 1)[0]
    f, lam = pair.function, pair.value
    ric, R = gg.curvature(g)
    df = gg.gradient(f, grid)
    from hrflow.grid_geometry import SymTensorField
    ref = (lam * gg.integrate(g, R * f * f) - gg.integrate(g, R * gg.grad_norm2(g, f))
           + 2 * gg.integrate(g, gg.inner(g, ric, SymTensorField.outer(df)))) / gg.integrate(g, f * f)
    got = spectral.lambda_dot_laplacian(g, np.zeros(grid.shape), lam, f)
    assert got == pytest.approx(ref, rel=1e-12)


def test_guc_rates_flat_zero():
    grid = Grid(16, 16)
    g = MetricField.flat(grid)
    u = np.zeros(grid.shape)
    f = spectral.guc_ground_state(g, u).function
    a, b = spectral.lambda_dot_guc(g, u, f)
    assert abs(a) < 1e-10 and abs(b) < 1e-10


def test_guc_rates_need_positive_ground_state():
    grid = Grid(16, 16)
    g = MetricField.flat(grid)
    f = smooth_field(grid, np.random.default_rng(1))
    with pytest.raises(DomainError):
        spectral.lambda_dot_guc(g, np.zeros(grid.shape), f)


def test_guc_rate_gap_is_second_order():
    gaps = []
    for n in (32, 64):
        rng = np.random.default_rng(7)
        grid = Grid(n, n)
        g = random_metric(grid, rng, 0.05, 1)
        u = smooth_field(grid, rng, 1, 0.05)
        f = spectral.guc_ground_state(g, u).function
        a, b = spectral.lambda_dot_guc(g, u, f)
        gaps.append(abs(a - b) / abs(a))
    assert 3.5 < gaps[0] / gaps[1] < 4.5
