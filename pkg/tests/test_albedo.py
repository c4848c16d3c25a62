import math

import numpy as np
import pytest

from geotransport import albedo as al
from geotransport import geometry as geo
from geotransport import transport as tr


def bump(amp, width, dim=2, center=None):
    return tr.Bump(amp, center, width, 1.0, dim)


def pair(sa=0.5, sk=0.2, dim=2, ca=None):
    k = tr.IsotropicKernel(bump(sk, 0.4, dim), dim) if sk else tr.ZeroKernel()
    return tr.CoefficientPair(tr.IsotropicAttenuation(bump(sa, 0.5, dim, ca)), k)


@pytest.fixture(scope="module")
def disk():
    return geo.Manifold(geo.euclidean(2), 1.0, 1.2)


@pytest.fixture(scope="module")
def curved():
    return geo.Manifold(geo.conformal_bump(0.2, 1.0, 2), 1.0, 1.2)


def test_unit_ball_volume():
    assert al.unit_ball_volume(1) == 2.0
    assert al.unit_ball_volume(2) == pytest.approx(math.pi)
    assert al.unit_ball_volume(3) == pytest.approx(4 * math.pi / 3)


def test_ballistic_constant_attenuation(disk):
    p = tr.CoefficientPair(tr.IsotropicAttenuation(tr.ConstantField(0.4)), tr.ZeroKernel())
    x, v = geo.boundary_point(disk, np.array([[1.0]]), np.array([[0.3]]))
    chord = 2 * 1.2 * math.cos(0.3)
    assert al.ballistic_amplitude(disk, p, x, v)[0] == pytest.approx(math.exp(-0.4 * chord), rel=1e-12)


@pytest.mark.parametrize("dim", [2, 3])
@pytest.mark.parametrize("profile", ["indicator", "smooth"])
def test_beam_unit_mass(dim, profile):
    m = geo.Manifold(geo.euclidean(dim), 1.0, 1.2)
    pos = np.array([[0.8]]) if dim == 2 else np.array([[1.1, 0.4]])
    dirs = np.array([[0.2]]) if dim == 2 else np.array([[0.5, 1.0]])
    x, v = geo.boundary_point(m, pos, dirs)
    b = al.BeamSource(m, x[0], v[0], 0.05, profile)
    order = 12 if profile == "indicator" else 24
    assert b.l1_norm(order) == pytest.approx(1.0, abs=1e-6)


def test_beam_pairing_approximates_point_value(disk):
    x, v = geo.boundary_point(disk, np.array([[0.8]]), np.array([[0.2]]))
    f = lambda xx, vv: np.cos(xx[:, 0]) + xx[:, 1] * vv[:, 0]
    exact = f(x, v)[0]
    errs = [abs(al.BeamSource(disk, x[0], v[0], e).pairing(f) - exact) for e in (0.08, 0.04, 0.02)]
    assert errs[2] < errs[1] < errs[0] < 1e-2


def test_beam_rejects_outgoing(disk):
    x, v = geo.boundary_point(disk, np.array([[0.8]]), np.array([[0.2]]), incoming=False)
    with pytest.raises(ValueError):
        al.BeamSource(disk, x[0], v[0], 0.05)


def test_flat_chart_density_is_sin_psi(disk):
    x, v = geo.boundary_point(disk, np.array([[2.0]]), np.array([[0.25]]))
    ch = al.ScatterChart(disk, x[0], v[0], nt=20, nw=32)
    ok = ch.sin_psi() > 0.05
    assert np.allclose(ch.density[ok], ch.sin_psi()[ok], rtol=1e-5)


def test_chart_Fk_matches_direct(curved):
    p = pair()
    x, v = geo.boundary_point(curved, np.array([[2.0]]), np.array([[0.25]]))
    ch = al.ScatterChart(curved, x[0], v[0], nt=24, nw=16, leg_samples=61, jacobian=False)
    Fk = ch.Fk(p)
    i, j = 7, 5
    direct = al.single_scattering_value_3d(curved, p, x, v, ch.t[i], ch.w[i, j][None])[0]
    assert Fk[i, j] == pytest.approx(direct, rel=1e-6)


def test_intersection_flat(disk):
    x, v = geo.boundary_point(disk, np.array([[0.5]]), np.array([[0.1]]))
    y = x[0] + 0.9 * v[0]
    w = np.array([[math.cos(1.3), math.sin(1.3)]])
    _, xo, vo = geo.exit_state(disk, y[None], w, 1)
    inter = al.intersect_geodesics_2d(disk, xo, vo, x[0], v[0])
    assert inter.chi[0]
    assert inter.t[0] == pytest.approx(0.9, abs=1e-9)
    assert np.allclose(inter.y[0], y, atol=1e-9)
    cross = abs(v[0, 0] * w[0, 1] - v[0, 1] * w[0, 0])
    assert inter.sin_psi[0] == pytest.approx(cross, abs=1e-9)


def test_intersection_curved(curved):
    x, v = geo.boundary_point(curved, np.array([[0.5]]), np.array([[0.1]]))
    y, yd = geo.flow(curved, x, v, 0.9)
    w = curved.metric.normalize(y, np.array([[math.cos(1.3), math.sin(1.3)]]))
    _, xo, vo = geo.exit_state(curved, y, w, 1)
    inter = al.intersect_geodesics_2d(curved, xo, vo, x[0], v[0])
    assert inter.chi[0]
    assert np.allclose(inter.y[0], y[0], atol=1e-7)


def test_chords_cross():
    assert al.chords_cross(0.0, math.pi, math.pi / 2, -math.pi / 2)
    assert not al.chords_cross(0.0, math.pi, 0.2, 0.4)


def test_sample_incoming_hits_support(disk):
    x, v = al.sample_incoming(disk, 16, 0.8)
    assert np.all(np.einsum("ni,ni->n", x, v) < 0)
    b = np.abs(x[:, 0] * v[:, 1] - x[:, 1] * v[:, 0])
    assert np.all(b < 0.8)
    x2, _ = al.sample_incoming(disk, 16, 0.8, np.random.default_rng(3))
    x3, _ = al.sample_incoming(disk, 16, 0.8, np.random.default_rng(3))
    assert np.array_equal(x2, x3)


def test_opnorm_identical_is_zero(disk):
    p = pair()
    r = al.opnorm_L1(disk, p, p, nsamples=4, nt=20, nw=24, multiple="omit")
    assert r.epsilon == 0.0


def test_opnorm_ballistic_only(disk):
    a, b = pair(sk=0), pair(sa=0.55, sk=0)
    r = al.opnorm_L1(disk, a, b, nsamples=8, nt=20, nw=24, multiple="omit")
    x, v = r.x, r.v
    d = np.abs(al.ballistic_amplitude(disk, a, x, v) - al.ballistic_amplitude(disk, b, x, v))
    assert r.epsilon == pytest.approx(d.max(), rel=1e-12)
    assert np.all(r.single == 0)


def test_opnorm_symmetric(disk):
    a, b = pair(), pair(sk=0.25)
    r1 = al.opnorm_L1(disk, a, b, nsamples=4, nt=20, nw=24, multiple="omit")
    r2 = al.opnorm_L1(disk, b, a, nsamples=4, nt=20, nw=24, multiple="omit")
    assert r1.epsilon == pytest.approx(r2.epsilon, rel=1e-12)
    assert r1.epsilon > 0


def test_screen_finds_largest_jump(disk):
    a, b = pair(), pair(sa=0.6, ca=[0.3, 0.0])
    xs, vs = al.screen_incoming(disk, a, b, count=2)
    x, v = al.sample_incoming(disk, 16, 1.0)
    dj = lambda x, v: np.abs(al.ballistic_amplitude(disk, a, x, v) - al.ballistic_amplitude(disk, b, x, v))
    assert len(xs) == 2
    assert dj(xs, vs).max() >= dj(x, v).max()


def test_extract_ballistic_k_zero(disk):
    p = pair(sk=0)
    x, v = geo.boundary_point(disk, np.array([[1.0]]), np.array([[0.2]]))
    exact = al.ballistic_amplitude(disk, p, x, v)[0]
    err = [abs(al.extract_ballistic(disk, p, x[0], v[0], eps=e, spacing=0.2, ndir=16) - exact)
           for e in (0.04, 0.02)]
    assert err[1] < 2e-4
    assert err[0] / err[1] > 3
