import math

import numpy as np
import pytest

from geotransport import geometry as geo


@pytest.fixture(scope="module")
def disk():
    return geo.Manifold(geo.euclidean(2), 0.5, 1.0)


def test_exit_unit_disk(disk):
    t, xe, ve = geo.exit_state(disk, [0.0, 0.0], [1.0, 0.0])
    assert t[0] == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(xe[0], [1.0, 0.0], atol=1e-12)


def test_conformal_two_doubles_travel_time():
    m = geo.Manifold(geo.constant_conformal(2.0, 2), 0.5, 1.0)
    v = m.metric.normalize(np.zeros((1, 2)), np.array([[1.0, 0.0]]))
    t, xe, _ = geo.exit_state(m, np.zeros((1, 2)), v)
    assert t[0] == pytest.approx(2.0, abs=1e-8)
    assert np.allclose(xe[0], [1.0, 0.0], atol=1e-8)


def test_straight_samples():
    m = geo.Manifold(geo.euclidean(3), 1.0, 1.2)
    x = np.array([[0.1, -0.2, 0.3]])
    v = np.array([[0.0, 0.6, 0.8]])
    xs, vs = geo.sample_geodesics(m, x, v, 0.0, 0.5, 11)[:2]
    ts = np.linspace(0.0, 0.5, 11)
    assert np.allclose(xs[0], x[0] + ts[:, None] * v[0], atol=1e-12)


def test_curved_geodesic_conserves_speed():
    m = geo.Manifold(geo.conformal_bump(0.3, 1.0, 2), 1.0, 1.2)
    x = np.array([[-1.1, 0.2]])
    v = m.metric.normalize(x, np.array([[1.0, 0.05]]))
    xs, vs = geo.flow(m, x, v, 1.0)
    assert m.metric.norm(xs, vs)[0] == pytest.approx(1.0, abs=1e-8)


def test_travel_times_sum_is_chord():
    m = geo.Manifold(geo.euclidean(2), 1.0, 1.2)
    x = np.array([[0.3, 0.4]])
    v = np.array([[0.6, -0.8]])
    tm, tp = geo.travel_times(m, x, v)
    b = float(x[0] @ v[0])
    chord = 2 * math.sqrt(b * b - (x[0] @ x[0] - 1.44))
    assert tm[0] + tp[0] == pytest.approx(chord, abs=1e-12)


def test_connect_flat_and_curved():
    m = geo.Manifold(geo.euclidean(2), 1.0, 1.2)
    v, d = geo.connect(m, [0.0, 0.0], [0.3, 0.4])
    assert d[0] == pytest.approx(0.5) and np.allclose(v[0], [0.6, 0.8])
    mc = geo.Manifold(geo.conformal_bump(0.2, 1.0, 2), 1.0, 1.2)
    x = np.array([[-0.4, 0.1]])
    y = np.array([[0.5, -0.2]])
    v, d = geo.connect(mc, x, y)
    xe, _ = geo.flow(mc, x, v, d)
    assert np.allclose(xe, y, atol=1e-8)


def test_diam_c0_flat_ball():
    m = geo.Manifold(geo.euclidean(2), 1.0, 1.2)
    est = m.estimates()
    assert est.diam == pytest.approx(2.0, abs=1e-8)
    assert est.c0 == pytest.approx(2 * math.sqrt(1.2 ** 2 - 1.0), abs=1e-8)


def test_diam_c0_scale_with_conformal_factor():
    e = geo.Manifold(geo.euclidean(2), 1.0, 1.2).estimates()
    c = geo.Manifold(geo.constant_conformal(2.0, 2), 1.0, 1.2).estimates()
    assert c.diam == pytest.approx(2 * e.diam, abs=1e-8)
    assert c.c0 == pytest.approx(2 * e.c0, abs=1e-8)


def test_boundary_grid_volume():
    # flat disk of radius R: int over Gamma of d(mu) = 2 pi R * 2
    m = geo.Manifold(geo.euclidean(2), 1.0, 1.2)
    g = geo.make_boundary_grid(m, 64, 16)
    assert g.weight.sum() == pytest.approx(2 * math.pi * 1.2 * 2.0, rel=1e-10)
    assert np.all(np.einsum("ni,ni->n", g.x, g.v) < 0)


def test_boundary_params_round_trip():
    m = geo.Manifold(geo.conformal_bump(0.2, 1.0, 3), 1.0, 1.2)
    pos = np.array([[0.7, 2.0], [2.1, -1.0]])
    dirs = np.array([[0.4, 1.0], [1.1, 4.0]])
    x, v = geo.boundary_point(m, pos, dirs, incoming=True)
    p2, d2, inc = geo.boundary_params(m, x, v)
    assert inc.all()
    assert np.allclose(np.cos(p2), np.cos(pos)) and np.allclose(np.sin(p2), np.sin(pos))
    assert np.allclose(np.cos(d2), np.cos(dirs)) and np.allclose(np.sin(d2), np.sin(dirs))


def test_measure_invariance_flat():
    m = geo.Manifold(geo.euclidean(2), 1.0, 1.2)
    pos = np.linspace(0.1, 6.0, 9)[:, None]
    dirs = np.linspace(-1.0, 1.0, 9)[:, None]
    d = geo.measure_invariance_check(m, pos, dirs, ("sphere", 1.0))
    assert np.nanmax(d) < 1e-6


def test_measure_invariance_curved_converges():
    met = geo.conformal_bump(0.3, 1.0, 2)
    pos = np.linspace(0.3, 6.0, 12)[:, None]
    dirs = np.linspace(-1.0, 1.0, 12)[:, None]
    d = [np.nanmax(geo.measure_invariance_check(geo.Manifold(met, 1.0, 1.2, step=s), pos, dirs,
                                                ("sphere", 1.0), h=1e-5)) for s in (0.2, 0.1)]
    assert d[1] <= 1e-4
    assert d[0] / d[1] >= 4


def test_simplicity_flat_and_bump():
    rep = geo.simplicity_diagnostics(geo.Manifold(geo.euclidean(2), 1.0, 1.2))
    assert rep.ok and rep.convex
    rep = geo.simplicity_diagnostics(geo.Manifold(geo.conformal_bump(0.2, 1.0, 2), 1.0, 1.2))
    assert rep.ok


def test_bad_radii():
    with pytest.raises(geo.GeometryError):
        geo.Manifold(geo.euclidean(2), 1.0, 0.9)
    with pytest.raises(geo.GeometryError):
        geo.Metric(4)
