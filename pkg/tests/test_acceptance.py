"""Acceptance criteria 1-10.

Run with ``pytest tests/test_acceptance.py``; a summary line per criterion
is printed at the end.  The whole module takes roughly 25 minutes on one
core, most of it in the three-dimensional sweep.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.integrate import quad

from geotransport import albedo as al
from geotransport import gauge as ga
from geotransport import geometry as geo
from geotransport import stability as st
from geotransport import transport as tr
from geotransport.config import load_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SEED = 1
TOL = 1e-3


def bump(amp, width, dim=2, center=None):
    return tr.Bump(amp, center, width, 1.0, dim)


def base_pair(dim=2):
    return tr.CoefficientPair(tr.IsotropicAttenuation(bump(0.5, 0.5, dim)),
                              tr.IsotropicKernel(bump(0.2, 0.4, dim), dim), "baseline")


def _sweep(name):
    rc = load_config(CONFIGS / name)
    cfg = rc.experiment(1.0, SEED)
    t0 = time.time()
    rep = st.run_stability_experiment(cfg)
    return rc, cfg, rep, time.time() - t0


@pytest.fixture(scope="module")
def sweep3d():
    return _sweep("ball3d.toml")


@pytest.fixture(scope="module")
def sweep2d():
    return _sweep("disk2d.toml")


@pytest.fixture(scope="module")
def gauge_runs():
    """opnorm(coeffs, gauge image) for each configured strength on a coarse and the default grid."""
    rc = load_config(CONFIGS / "disk2d.toml")
    g = rc["gauge"]
    out = {}
    for gs in (0.7, 1.0):
        m = rc.manifold(gs)
        pair = rc.pair("coefficients", m)
        nt, nw = rc.chart_sizes(gs)
        for s in g["strength"]:
            gauge = ga.make_polynomial_gauge(s, g.get("center"), g.get("width", 0.4),
                                             g.get("radius", m.inner_radius), m.dim)
            image = ga.apply_gauge(m, pair, gauge)
            r = al.opnorm_L1(m, pair, image, nsamples=int(rc["experiment"]["nsamples"]),
                             nt=nt, nw=nw, beam_eps=rc["grids"]["beam_eps"],
                             grid_kw=rc.solver_grid_kw(gs), rng=np.random.default_rng(SEED))
            out[gs, s] = (r.epsilon, m, pair, image)
    return out


def _checks(rep, names):
    found = [c for row in rep.checks for c in row["checks"] if c["name"] in names]
    return found, max((c["violation"] for c in found), default=-np.inf)


@pytest.mark.criterion(1)
def test_geometry_sanity(record_property):
    rng = np.random.default_rng(SEED)
    err = 0.0
    for n in (2, 3):
        m = geo.Manifold(geo.euclidean(n), 1.0, 1.2)
        x = rng.uniform(-0.6, 0.6, (20, n))
        v = rng.normal(size=(20, n))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        _, xe, _ = geo.exit_state(m, x, v)
        b = np.einsum("ni,ni->n", x, v)
        t = -b + np.sqrt(b * b - np.einsum("ni,ni->n", x, x) + 1.44)
        err = max(err, np.max(np.abs(xe - (x + t[:, None] * v))))

    e = geo.Manifold(geo.euclidean(2), 1.0, 1.2)
    c = geo.Manifold(geo.constant_conformal(2.0, 2), 1.0, 1.2)
    x0, y0 = np.array([[0.1, -0.3]]), np.array([[-0.4, 0.5]])
    w = np.array([[0.6, 0.8]])
    te = geo.exit_state(e, x0, w)[0][0]
    tc = geo.exit_state(c, x0, c.metric.normalize(x0, w))[0][0]
    de, dc = geo.connect(e, x0, y0)[1][0], geo.connect(c, x0, y0)[1][0]
    ee, ec = e.estimates(), c.estimates()
    dbl = max(abs(tc - 2 * te), abs(dc - 2 * de), abs(ec.diam - 2 * ee.diam), abs(ec.c0 - 2 * ee.c0))

    met = geo.conformal_bump(0.3, 1.0, 2)
    pos = np.linspace(0.3, 6.0, 12)[:, None]
    dirs = np.linspace(-1.0, 1.0, 12)[:, None]
    d = [np.nanmax(geo.measure_invariance_check(geo.Manifold(met, 1.0, 1.2, step=s), pos, dirs,
                                                ("sphere", 1.0), h=1e-5)) for s in (0.2, 0.1)]
    ok = err <= 1e-8 and dbl <= 1e-8 and d[1] <= 1e-4 and d[0] / d[1] >= 4
    record_property("detail", f"exit err {err:.1e}, doubling err {dbl:.1e}, "
                              f"invariance {d[1]:.1e} (halving gain {d[0] / d[1]:.1f})")
    assert ok


@pytest.mark.criterion(2)
def test_gauge_invariance(gauge_runs, record_property):
    strengths = sorted({s for _, s in gauge_runs})
    fine = [gauge_runs[1.0, s][0] for s in strengths]
    coarse = [gauge_runs[0.7, s][0] for s in strengths]
    ok = max(fine) <= 5e-3 and all(f < c for f, c in zip(fine, coarse))
    record_property("detail", "opnorm " + ", ".join(
        f"s={s:g}: {c:.1e}->{f:.1e}" for s, c, f in zip(strengths, coarse, fine)))
    assert ok


@pytest.mark.criterion(3)
def test_stability_n3(sweep3d, record_property):
    rc, cfg, rep, seconds = sweep3d
    ok_cs, margin = tr.subcritical_CS(cfg.manifold, cfg.baseline)
    rows = rep.rows
    ok = (ok_cs and margin > 0.4 and cfg.Sigma == 0.5 and cfg.rho == 0.2
          and [r["delta"] for r in rows] == [0.01, 0.02, 0.05]
          and all(r["delta_upper"] <= r["C_eps"] + r["tol"] and r["closeness_in_a"]
                  and r["closeness_in_k"] and r["verdict"] for r in rows)
          and seconds <= 1800)
    record_property("detail", f"margin {margin:.2f}, " + ", ".join(
        f"d={r['delta']:g}: {r['delta_upper']:.2e}<={r['C_eps']:.2e}" for r in rows)
        + f", {seconds / 60:.1f} min")
    assert ok


@pytest.mark.criterion(4)
def test_gauge_degeneracy(gauge_runs, record_property):
    s = max(s for _, s in gauge_runs)
    eps, m, pair, image = gauge_runs[1.0, s]
    dist, _, _ = ga.pairwise_distance(m, pair, image, mode="n2")
    cd = ga.class_distance_upper(m, pair, image, mode="n2")
    ok = dist > 0.1 and eps <= 5e-3 and cd.delta_upper <= 1e-2
    record_property("detail", f"pairwise {dist:.3f}, eps {eps:.1e}, "
                              f"class distance {cd.delta_upper:.1e}")
    assert ok


CHAIN = ("trial_gauge_less_epsilon", "final_estimate_for_a", "lower_bound_E", "F-F")


@pytest.mark.criterion(5)
def test_trial_gauge_chain(sweep3d, sweep2d, record_property):
    f3, v3 = _checks(sweep3d[2], CHAIN)
    f2, v2 = _checks(sweep2d[2], CHAIN)
    names = {c["name"] for c in f3} & {c["name"] for c in f2}
    ok = names == set(CHAIN) and max(v3, v2) <= TOL
    record_property("detail", f"{len(f3) + len(f2)} checks, worst violation {max(v3, v2):.2e}")
    assert ok


@pytest.mark.criterion(6)
def test_ballistic_estimates(sweep3d, record_property):
    _, cfg, rep, _ = sweep3d
    found, worst = _checks(rep, ("bal_estimate1", "bal_estimate2"))
    nsamp = rep.grids["nsamples"] + rep.grids["screened"]
    ok = ({c["name"] for c in found} == {"bal_estimate1", "bal_estimate2"}
          and worst <= TOL and cfg.nsamples >= 32)
    record_property("detail", f"{nsamp} samples, worst violation {worst:.2e}")
    assert ok


@pytest.mark.criterion(7)
def test_isometry(record_property):
    m = geo.Manifold(geo.euclidean(2), 1.0, 1.2)
    p = base_pair()
    q = tr.CoefficientPair(tr.IsotropicAttenuation(bump(0.55, 0.45, center=[0.2, 0.1])),
                           tr.IsotropicKernel(bump(0.25, 0.4), 2))
    _, _, gap = st.check_isometry(m, p, q, 1.1, nsamples=16)
    a0 = tr.CoefficientPair(p.a, tr.ZeroKernel())
    b0 = tr.CoefficientPair(q.a, tr.ZeroKernel())
    _, _, gap0 = st.check_isometry(m, a0, b0, 1.1, nsamples=16, multiple="omit")
    ok = gap <= 1e-2 and gap0 <= 1e-6
    record_property("detail", f"relative gap {gap:.1e} generic, {gap0:.1e} ballistic only")
    assert ok


@pytest.mark.criterion(8)
def test_two_dimensional_mode(sweep2d, record_property):
    _, _, rep, _ = sweep2d
    names = ("beta-beta", "rho'", "lower_bound_E", "F-F")
    found, worst = _checks(rep, names)
    Ce = rep.fit["C_emp"]
    rows = [r for r in rep.rows if r["epsilon"] > 0]
    fit_ok = all(r["delta_upper"] <= Ce * r["epsilon"] * (1 + 1e-12) for r in rows)
    note = any("external constants" in n for n in rep.notes)
    ok = ({c["name"] for c in found} == set(names) and worst <= TOL and fit_ok
          and rep.fit["spread"] <= 0.25 and note)
    record_property("detail", f"worst violation {worst:.2e}, C_emp {Ce:.3g}, "
                              f"spread {100 * rep.fit['spread']:.1f}%")
    assert ok


@pytest.mark.criterion(9)
def test_beam_family(record_property):
    mass = []
    for n in (2, 3):
        m = geo.Manifold(geo.euclidean(n), 1.0, 1.2)
        pos = np.array([[0.8]]) if n == 2 else np.array([[1.1, 0.4]])
        dirs = np.array([[0.2]]) if n == 2 else np.array([[0.5, 1.0]])
        x, v = geo.boundary_point(m, pos, dirs)
        for e in (0.1, 0.05, 0.02):
            mass.append(al.BeamSource(m, x[0], v[0], e).l1_norm())
    m = geo.Manifold(geo.euclidean(2), 1.0, 1.2)
    x, v = geo.boundary_point(m, np.array([[0.8]]), np.array([[0.2]]))
    f = lambda xx, vv: np.cos(xx[:, 0]) + xx[:, 1] * vv[:, 0]
    exact = f(x, v)[0]
    errs = [abs(al.BeamSource(m, x[0], v[0], e).pairing(f) - exact) for e in (0.08, 0.04, 0.02)]
    ratios = [errs[i] / errs[i + 1] for i in range(2)]
    dm = max(abs(q - 1) for q in mass)
    ok = dm <= 1e-6 and all(1.5 <= r <= 3 for r in ratios)
    record_property("detail", f"mass error {dm:.1e}, halving ratios "
                              + ", ".join(f"{r:.2f}" for r in ratios))
    assert ok


@pytest.mark.criterion(10)
def test_solver_contract(record_property):
    m = geo.Manifold(geo.euclidean(2), 1.0, 1.2)
    solver = tr.TransportSolver(m, base_pair(), tr.PhaseGrid(m, 1.0))
    sol = solver.solve(lambda x, v: 1.0 + 0.5 * x[:, 0])
    ratio = float(np.max(sol.ratios[1:]))
    rng = np.random.default_rng(SEED)
    res = 0.0
    for _ in range(100):
        x, v = geo.boundary_point(m, rng.uniform(0, 2 * np.pi, (1, 1)),
                                  rng.uniform(-1.4, 1.4, (1, 1)))
        res = max(res, float(np.max(np.abs(tr.along_characteristic(sol, x, v).residual))))

    pair0 = tr.CoefficientPair(base_pair().a, tr.ZeroKernel())
    sol0 = tr.TransportSolver(m, pair0, tr.PhaseGrid(m, 1.0)).solve(lambda x, v: 1.0 + 0.5 * x[:, 0])
    xs = rng.uniform(-0.6, 0.6, (10, 2))
    ang = rng.uniform(0, 2 * np.pi, 10)
    vs = np.stack([np.cos(ang), np.sin(ang)], 1)
    got = sol0.evaluate(xs, vs)[:, 0]
    cf = 0.0
    for i in range(10):
        tm = geo.exit_state(m, xs[i:i + 1], vs[i:i + 1], -1)[0][0]
        xin = xs[i] - tm * vs[i]
        A = quad(lambda t: float(pair0.a.field((xin + t * vs[i])[None])[0]), 0, tm,
                 epsabs=1e-13, limit=200)[0]
        cf = max(cf, abs(got[i] - (1.0 + 0.5 * xin[0]) * math.exp(-A)))
    ok = ratio <= solver.q + 5e-3 and res <= 1e-4 and cf <= 1e-7
    record_property("detail", f"ratio {ratio:.3f} (q {solver.q:.3f}), residual {res:.1e}, "
                              f"k=0 error {cf:.1e}")
    assert ok
