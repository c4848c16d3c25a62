import math

import numpy as np
import pytest
from scipy.integrate import quad

from geotransport import geometry as geo
from geotransport import transport as tr


def bump(amp, width, dim=2, center=None):
    return tr.Bump(amp, center, width, 1.0, dim)


def gauss_pair(dim=2, sa=0.5, sk=0.2):
    return tr.CoefficientPair(tr.IsotropicAttenuation(bump(sa, 0.5, dim)),
                              tr.IsotropicKernel(bump(sk, 0.4, dim), dim), "gauss")


@pytest.fixture(scope="module")
def disk():
    return geo.Manifold(geo.euclidean(2), 1.0, 1.2)


@pytest.fixture(scope="module")
def coarse_solution(disk):
    pair = gauss_pair()
    grid = tr.PhaseGrid(disk, 1.0, spacing=0.1, ndir=32)
    solver = tr.TransportSolver(disk, pair, grid)
    return solver, solver.solve(lambda x, v: 1.0 + 0.5 * x[:, 0])


def test_cutoff_smooth_and_supported():
    x = np.array([[0.0, 0.0], [0.5, 0.0], [0.999, 0.0], [1.2, 0.0]])
    c = tr.smooth_cutoff(x, 1.0)
    assert c[0] == 1.0 and c[3] == 0.0 and 0 < c[2] < 1e-100
    assert c[1] == pytest.approx(math.exp(-0.25 / 0.75))


def test_bump_gradient():
    f = bump(0.7, 0.4, center=[0.1, -0.2])
    x = np.array([[0.3, 0.2], [-0.5, 0.1]])
    h = 1e-6
    fd = np.stack([(f(x + h * e) - f(x - h * e)) / (2 * h) for e in np.eye(2)], 1)
    assert np.allclose(f.grad(x), fd, atol=1e-8)


def test_isotropic_out_scattering_equals_field(disk):
    pair = gauss_pair()
    x = np.array([[0.1, 0.2], [0.0, -0.4]])
    v = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert np.allclose(tr.out_scattering(disk, pair, x, v), pair.k.field(x), rtol=1e-12)
    p3 = gauss_pair(3)
    m3 = geo.Manifold(geo.euclidean(3), 1.0, 1.2)
    x3 = np.array([[0.1, 0.2, 0.0]])
    v3 = np.array([[0.0, 0.0, 1.0]])
    assert tr.out_scattering(m3, p3, x3, v3)[0] == pytest.approx(p3.k.field(x3)[0], rel=1e-6)


def test_hg_normalized(disk):
    for dim in (2, 3):
        k = tr.HenyeyGreensteinKernel(tr.ConstantField(1.0), 0.6, dim)
        m = geo.Manifold(geo.euclidean(dim), 1.0, 1.2)
        x = np.zeros((1, dim))
        v = np.eye(dim)[:1]
        p = tr.CoefficientPair(tr.IsotropicAttenuation(tr.ConstantField(0.0)), k)
        assert tr.out_scattering(m, p, x, v)[0] == pytest.approx(1.0, rel=1e-6)


def test_line_integral_against_quad(disk):
    a = tr.IsotropicAttenuation(bump(0.5, 0.5))
    x = np.array([[-1.2 * math.cos(0.3), -1.2 * math.sin(0.3)]])
    v = np.array([[math.cos(0.25), math.sin(0.25)]])
    tp = geo.exit_state(disk, x, v)[0][0]
    ref = quad(lambda t: float(a.field((x + t * v))[0]), 0, tp, epsabs=1e-13, limit=200)[0]
    assert tr.line_integral(disk, a, x, v, 0.0, tp)[0] == pytest.approx(ref, abs=1e-9)


def test_E_constant_attenuation(disk):
    a = tr.IsotropicAttenuation(tr.ConstantField(0.3))
    E = tr.attenuation_E(disk, a, [0.0, 0.0], [0.3, 0.4])
    assert E[0] == pytest.approx(math.exp(-0.15), rel=1e-12)


def test_broken_F_factorizes(disk):
    pair = gauss_pair()
    xp = np.array([[-1.0, 0.1]])
    y = np.array([[0.2, 0.0]])
    w = np.array([[0.0, 1.0]])
    F = tr.broken_attenuation_F(disk, pair, xp, y, w)
    e1 = tr.attenuation_E(disk, pair, xp, y)
    e2 = tr.exit_attenuation(disk, pair.a, y, w)[0]
    assert F[0] == pytest.approx(e1[0] * e2[0], rel=1e-12)


def test_k_zero_matches_closed_form(disk):
    pair = tr.CoefficientPair(tr.IsotropicAttenuation(bump(0.5, 0.5)), tr.ZeroKernel())
    grid = tr.PhaseGrid(disk, 1.0, spacing=0.2, ndir=16)
    sol = tr.TransportSolver(disk, pair, grid).solve(lambda x, v: 1.0 + 0.5 * x[:, 0])
    rng = np.random.default_rng(1)
    x = rng.uniform(-0.6, 0.6, (6, 2))
    ang = rng.uniform(0, 2 * math.pi, 6)
    v = np.stack([np.cos(ang), np.sin(ang)], 1)
    got = sol.evaluate(x, v)[:, 0]
    for i in range(6):
        tm = geo.exit_state(disk, x[i:i + 1], v[i:i + 1], -1)[0][0]
        xin = x[i] - tm * v[i]
        A = quad(lambda t: float(pair.a.field((xin + t * v[i])[None])[0]), 0, tm,
                 epsabs=1e-13, limit=200)[0]
        assert got[i] == pytest.approx((1.0 + 0.5 * xin[0]) * math.exp(-A), abs=1e-7)


def test_neumann_ratios_bounded(coarse_solution):
    solver, sol = coarse_solution
    assert sol.converged
    assert np.max(sol.ratios[1:]) <= solver.q + 5e-3
    assert 0.4 < solver.margin < 0.6


def test_residual_coarse(coarse_solution):
    solver, sol = coarse_solution
    worst = 0.0
    for th, eta in [(0.3, 0.1), (2.0, -0.4), (4.0, 0.6)]:
        x, v = geo.boundary_point(solver.m, np.array([[th]]), np.array([[eta]]))
        chk = tr.along_characteristic(sol, x, v)
        worst = max(worst, np.max(np.abs(chk.residual)))
    assert worst < 2e-3


def test_batched_columns_match_single(disk, coarse_solution):
    solver, _ = coarse_solution
    f1 = lambda x, v: np.ones(len(x))
    f2 = lambda x, v: 1.0 + x[:, 1]
    both = solver.solve([f1, f2]).nodal()
    assert np.allclose(both[..., 1:], solver.solve(f2).nodal(), atol=1e-13)


def test_linearity(coarse_solution):
    solver, _ = coarse_solution
    f = lambda x, v: 1.0 + x[:, 0] ** 2
    g = lambda x, v: v[:, 1] ** 2
    s = solver.solve([f, g, lambda x, v: 2 * f(x, v) - 3 * g(x, v)]).nodal()
    assert np.allclose(s[..., 2], 2 * s[..., 0] - 3 * s[..., 1], atol=1e-12)


def test_subcriticality(disk):
    ok, margin = tr.subcritical_CS(disk, gauss_pair())
    assert ok and margin == pytest.approx(0.52, abs=0.02)
    ok, margin = tr.subcritical_CS(disk, gauss_pair(sk=2.0))
    assert not ok
    assert tr.subcritical_DL(disk, gauss_pair(sa=0.5, sk=0.2))


def test_supercritical_raises(disk):
    pair = gauss_pair(sk=2.5)
    solver = tr.TransportSolver(disk, pair, tr.PhaseGrid(disk, 1.0, spacing=0.25, ndir=12))
    with pytest.raises(tr.SubcriticalityError):
        solver.solve(1.0)


def test_coefficient_bounds(disk):
    b = tr.coefficient_bounds(disk, gauss_pair(), "n2")
    assert b.sigma == pytest.approx(0.5, rel=1e-3)
