import numpy as np
import pytest

from geotransport import albedo as al
from geotransport import gauge as ga
from geotransport import geometry as geo
from geotransport import transport as tr


def bump(amp, width, dim=2, center=None):
    return tr.Bump(amp, center, width, 1.0, dim)


@pytest.fixture(scope="module")
def disk():
    return geo.Manifold(geo.euclidean(2), 1.0, 1.2)


@pytest.fixture(scope="module")
def curved():
    return geo.Manifold(geo.conformal_bump(0.2, 1.0, 2), 1.0, 1.2)


@pytest.fixture(scope="module")
def base():
    return tr.CoefficientPair(tr.IsotropicAttenuation(bump(0.5, 0.5)),
                              tr.IsotropicKernel(bump(0.2, 0.4), 2), "base")


@pytest.fixture(scope="module")
def other():
    return tr.CoefficientPair(tr.IsotropicAttenuation(bump(0.55, 0.45, center=[0.2, -0.1])),
                              tr.IsotropicKernel(bump(0.2, 0.4), 2), "other")


def _phase_points(m, n=6, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-0.6, 0.6, (n, 2))
    ang = rng.uniform(0, 2 * np.pi, n)
    v = m.metric.normalize(x, np.stack([np.cos(ang), np.sin(ang)], 1))
    return x, v


def _derivative_along_flow(m, g, x, v, h=1e-4):
    xp, vp = geo.flow(m, x, v, h)
    xm, vm = geo.flow(m, x, v, -h)
    return (g.log_phi(m, xp, vp) - g.log_phi(m, xm, vm)) / (2 * h)


@pytest.mark.parametrize("which", ["disk", "curved"])
def test_polynomial_gauge_derivative(which, request):
    m = request.getfixturevalue(which)
    g = ga.make_polynomial_gauge(0.3, [0.1, 0.0], 0.4)
    x, v = _phase_points(m)
    assert np.allclose(g.dlog_phi(m, x, v), _derivative_along_flow(m, g, x, v), atol=1e-6)


def test_polynomial_gauge_vanishes_on_boundary(disk):
    g = ga.make_polynomial_gauge(0.6, None, 2.0, radius=1.2)
    bg = geo.make_boundary_grid(disk, 16, 8)
    assert np.max(np.abs(g.log_phi(disk, bg.x, bg.v))) < 1e-12


def test_trial_gauge_reproduces_a_tilde(curved, base, other):
    g = ga.trial_gauge(base.a, other.a)
    image = ga.apply_gauge(curved, base, g)
    x, v = _phase_points(curved)
    ctx = tr.point_context(curved, x, v)
    assert np.allclose(image.a(x, v, ctx), other.a(x, v), atol=1e-14)
    # log phi comes from a discretised line integral, hence the looser tolerance
    fd = _derivative_along_flow(curved, g, x, v, h=1e-3)
    assert np.allclose(g.dlog_phi(curved, x, v), fd, atol=1e-5)


def test_trial_gauge_boundary_value_is_lambda(disk, base, other):
    g = ga.trial_gauge(base.a, other.a)
    bg = geo.make_boundary_grid(disk, 8, 6, incoming=False)
    inner = bg.x * (1 - 1e-9)
    lam = g.chord_lambda(disk, inner, bg.v)
    assert np.allclose(g.log_phi(disk, inner, bg.v), lam, atol=1e-8)
    A = al.ballistic_amplitude(disk, base, *geo.exit_state(disk, bg.x, bg.v, -1)[1:])
    At = al.ballistic_amplitude(disk, other, *geo.exit_state(disk, bg.x, bg.v, -1)[1:])
    assert np.allclose(lam, np.log(At) - np.log(A), atol=1e-8)


def test_modified_gauge_is_one_on_boundary(disk, base, other):
    g = ga.modified_gauge(base.a, other.a)
    for incoming in (True, False):
        bg = geo.make_boundary_grid(disk, 8, 6, incoming=incoming)
        assert np.max(np.abs(g.log_phi(disk, bg.x * (1 - 1e-9), bg.v))) < 1e-8
    x, v = _phase_points(disk)
    fd = _derivative_along_flow(disk, g, x, v, h=1e-3)
    assert np.allclose(g.dlog_phi(disk, x, v), fd, atol=1e-5)


def test_gauged_kernel_matrix_matches_pointwise(disk, base):
    g = ga.make_polynomial_gauge(0.4, None, 0.4)
    k = ga.apply_gauge(disk, base, g).k
    x = np.array([[0.1, 0.2], [-0.3, 0.0]])
    fiber = tr.make_fiber_grid(2, 8)
    V = tr.fiber_vectors(disk, x, fiber)
    km = k.k_matrix(x, V, V)
    i, p, q = 1, 2, 5
    assert km[i, p, q] == pytest.approx(k(x[i:i + 1], V[i, p][None], V[i, q][None])[0], rel=1e-12)


def test_gauge_preserves_ballistic(disk, base):
    g = ga.make_polynomial_gauge(0.6, None, 0.4)
    image = ga.apply_gauge(disk, base, g)
    x, v = al.sample_incoming(disk, 8, 1.0)
    assert np.allclose(al.ballistic_amplitude(disk, base, x, v),
                       al.ballistic_amplitude(disk, image, x, v), atol=1e-9)


def test_chord_integrals_against_quadrature(disk, base, other):
    g = ga.trial_gauge(base.a, other.a)
    x, v = al.sample_incoming(disk, 4, 1.0)
    tau, _, _ = geo.exit_state(disk, x, v, 1)
    ref = tr.line_integral(disk, base.a, x, v, 0.0, tau, nsamp=4001) \
        - tr.line_integral(disk, other.a, x, v, 0.0, tau, nsamp=4001)
    assert np.allclose(g.chord_lambda(disk, x, v), ref, atol=1e-9)


def test_class_distance_zero_within_class(disk, base):
    g = ga.make_polynomial_gauge(0.3, None, 0.4)
    image = ga.apply_gauge(disk, base, g)
    cd = ga.class_distance_upper(disk, base, image, mode="n2")
    assert cd.delta_upper < 1e-6
    total, da, dk = ga.pairwise_distance(disk, base, image, mode="n2")
    assert total > 0.1


def test_class_distance_detects_change(disk, base, other):
    cd = ga.class_distance_upper(disk, base, other, mode="n2")
    assert cd.a_part > 1e-3
    lam_tau, _ = ga.sup_a_difference(disk, ga.trial_gauge(base.a, other.a))
    assert cd.a_part == pytest.approx(lam_tau)
