"""Albedo operator: ballistic and single-scattering kernels, beams, norms.

The albedo kernel for an incoming boundary point p = (x', v') splits into
a ballistic point mass, a single-scattering density and a multiple
scattering remainder.  The first two are evaluated exactly (up to
quadrature) in the coordinates (t, w): t is the scattering time along the
geodesic of p and w the outgoing direction at the scattering point.  The
remainder is obtained from the phase-grid solver driven by a narrow beam
around p.
"""

import math
from dataclasses import dataclass, field
from types import SimpleNamespace

import numpy as np
from scipy.special import gamma

from . import geometry as geo
from . import transport as tr


def unit_ball_volume(d):
    """Volume of the unit ball in R^d (omega_1 = 2, omega_2 = pi)."""
    return math.pi ** (d / 2) / gamma(d / 2 + 1)


# ---------------------------------------------------------------------------
# Ballistic part
# ---------------------------------------------------------------------------

@dataclass
class Ballistic:
    A0: np.ndarray
    tau: np.ndarray
    x_out: np.ndarray
    v_out: np.ndarray


def ballistic_amplitude(m, pair, x, v, nsamp=None, full=False):
    """A0(x', v') = exp(-int_0^tau a) for incoming boundary states."""
    n = m.dim
    x = geo._points(x, n)
    v = m.metric.normalize(x, geo._points(v, n))
    tau, xo, vo = geo.exit_state(m, x, v, 1)
    A = tr.line_integral(m, pair.a, x, v, 0.0, tau, nsamp, tm=np.zeros(len(x)), tp=tau)
    out = Ballistic(np.exp(-A), tau, xo, vo)
    return out if full else out.A0


# ---------------------------------------------------------------------------
# Beams
# ---------------------------------------------------------------------------

def _wrap(d):
    return (d + np.pi) % (2 * np.pi) - np.pi


class BeamSource:
    """Normalised beam on Gamma_- concentrated near (x0, v0).

    In boundary coordinates (u, w) (position and direction parameters) the
    beam equals phi_eps(u - u0) phi_eps(w - w0) divided by the density of
    d(mu), so that its pairing with f is the (u, w)-average of f.  The
    ``indicator`` profile is the ball average of the construction used for
    approximate identities; ``smooth`` replaces it by the normalised
    (1 - |u|^2)^2 profile, which the grid solver resolves better.
    """

    def __init__(self, m, x0, v0, eps, profile="indicator", radius=None):
        self.m = m
        self.radius = m.outer_radius if radius is None else radius
        self.x0 = geo._points(x0, m.dim)[0]
        self.v0 = m.metric.normalize(self.x0[None], geo._points(v0, m.dim))[0]
        pos, dirs, inc = geo.boundary_params(m, self.x0[None], self.v0[None], self.radius)
        if not inc[0]:
            raise ValueError("beam centre must be an incoming boundary state")
        self.pos0, self.dirs0 = pos[0], dirs[0]
        self.eps = float(eps)
        if profile not in ("indicator", "smooth"):
            raise ValueError(f"unknown beam profile {profile!r}")
        self.profile = profile
        d = m.dim - 1
        if profile == "indicator":
            self.norm1 = unit_ball_volume(d)
        else:
            self.norm1 = 16.0 / 15.0 if d == 1 else math.pi / 3.0

    def _radial(self, r):
        r = r / self.eps
        base = (r < 1).astype(float) if self.profile == "indicator" else np.clip(1 - r * r, 0, None) ** 2
        return base / (self.norm1 * self.eps ** (self.m.dim - 1))

    def _offsets(self, pos, dirs):
        dp = pos - self.pos0
        dp[..., -1] = _wrap(dp[..., -1])
        return dp, dirs - self.dirs0

    def density(self, pos, dirs):
        """phi_eps(u - u0) phi_eps(w - w0) in coordinates."""
        dp, dd = self._offsets(np.atleast_2d(pos).copy(), np.atleast_2d(dirs))
        return self._radial(np.linalg.norm(dp, axis=-1)) * self._radial(np.linalg.norm(dd, axis=-1))

    def __call__(self, x, v):
        pos, dirs, inc = geo.boundary_params(self.m, x, v, self.radius)
        val = self.density(pos, dirs) / geo.boundary_measure_weight(self.m, pos, dirs, self.radius)
        return np.where(inc, val, 0.0)

    def support_quadrature(self, order=12):
        """Boundary states and d(mu) weights of a quadrature on the beam support.

        Gauss-Legendre on the coordinate balls (intervals in 2D, disks in
        polar form in 3D); exact for the indicator profile.
        """
        d = self.m.dim - 1
        xg, wg = np.polynomial.legendre.leggauss(order)
        if d == 1:
            off, w1 = xg * self.eps, wg * self.eps
        else:
            r = 0.5 * (xg + 1) * self.eps
            wr = 0.5 * wg * self.eps * r
            th = 2 * np.pi * np.arange(2 * order) / (2 * order)
            R, T = np.meshgrid(r, th, indexing="ij")
            off = np.stack([R * np.cos(T), R * np.sin(T)], -1).reshape(-1, 2)
            w1 = np.repeat(wr, len(th)) * (2 * np.pi / len(th))
        off = off.reshape(len(off), d)
        P = np.repeat(off, len(off), axis=0) + self.pos0
        D = np.tile(off, (len(off), 1)) + self.dirs0
        W = np.repeat(w1, len(w1)) * np.tile(w1, len(w1))
        x, v = geo.boundary_point(self.m, P, D, incoming=True, radius=self.radius)
        wmu = W * geo.boundary_measure_weight(self.m, P, D, self.radius)
        return x, v, wmu

    def pairing(self, f, order=12):
        """int phi_eps f d(mu) over Gamma_-."""
        x, v, wmu = self.support_quadrature(order)
        return float(np.sum(self(x, v) * np.asarray(f(x, v), float) * wmu))

    def l1_norm(self, order=12):
        x, v, wmu = self.support_quadrature(order)
        return float(np.sum(np.abs(self(x, v)) * wmu))


def beam_source(m, x0, v0, eps, profile="indicator"):
    return BeamSource(m, x0, v0, eps, profile)


# ---------------------------------------------------------------------------
# Scattering charts
# ---------------------------------------------------------------------------

def fiber_for_chart(dim, nw):
    return tr.make_fiber_grid(dim, nw)


class ScatterChart:
    """Geometry of single scattering for one incoming boundary state p.

    Scattering times t (midpoint rule on [0, tau(p)]) times outgoing fiber
    directions w at y(t).  Stores samples of the chord and of every second
    leg so that F k can be evaluated for several coefficient pairs.
    """

    def __init__(self, m, xp, vp, nt=80, nw=None, leg_samples=25, jacobian=True):
        n = m.dim
        self.m = m
        self.xp = geo._points(xp, n)[0]
        self.vp = m.metric.normalize(self.xp[None], geo._points(vp, n))[0]
        tau, xo, vo = geo.exit_state(m, self.xp[None], self.vp[None], 1)
        self.tau = float(tau[0])
        self.x_exit, self.v_exit = xo[0], vo[0]
        nw = nw or (96 if n == 2 else (16, 32))
        self.fiber = tr.make_fiber_grid(n, nw)
        self.nt = nt
        self.dt = self.tau / nt
        self.t = (np.arange(nt) + 0.5) * self.dt
        # chord nodes include every scattering time (as nodes 4i + 2)
        nch = 4 * nt + 1
        xs, vs, ts = geo.sample_geodesics(m, self.xp[None], self.vp[None], 0.0, self.tau, nch)
        self.chord_x, self.chord_v, self.chord_t = xs[0], vs[0], ts[0]
        ys, yd, _ = geo.sample_geodesics(m, self.xp[None], self.vp[None], self.t[0], self.t[-1], nt)
        self.y, self.ydot = ys[0], yd[0]
        W = tr.fiber_vectors(m, self.y, self.fiber)
        self.w = W
        Q = len(self.fiber)
        Y = np.repeat(self.y, Q, axis=0)
        Wf = W.reshape(-1, n)
        t2, xe, ve = geo.exit_state(m, Y, Wf, 1)
        self.leg_tau = t2
        self.x_out, self.v_out = xe, ve
        ls = tr._odd(leg_samples)
        self.leg_x, self.leg_v, lt = geo.sample_geodesics(m, Y, Wf, 0.0, t2, ls)
        self.leg_w = geo.simpson_weights(ls, t2)
        self.leg_t = lt
        self.density = None
        if jacobian:
            self.density = self._mu_density()

    @property
    def weights(self):
        """dt dw quadrature weights, (nt, Q)."""
        return self.dt * np.broadcast_to(self.fiber.weights, (self.nt, len(self.fiber)))

    def exit_params(self):
        pos, dirs, _ = geo.boundary_params(self.m, self.x_out, self.v_out)
        return pos, dirs

    def _mu_density(self, h=1e-5):
        """d(mu)/(dt dw) at the exit points (2D only; None in 3D)."""
        m = self.m
        if m.dim != 2:
            return None
        Q = len(self.fiber)
        ang = np.arctan2(self.fiber.omega[:, 1], self.fiber.omega[:, 0])

        def params(t_shift, a_shift):
            ys, yd, _ = geo.sample_geodesics(m, self.xp[None], self.vp[None],
                                             self.t[0] + t_shift, self.t[-1] + t_shift, self.nt)
            Y = np.repeat(ys[0], Q, axis=0)
            om = np.stack([np.cos(ang + a_shift), np.sin(ang + a_shift)], 1)
            Wv = m.metric.from_frame(Y, np.tile(om, (self.nt, 1)))
            _, xe, ve = geo.exit_state(m, Y, Wv, 1)
            pos, dirs, _ = geo.boundary_params(m, xe, ve)
            return pos[:, 0], dirs[:, 0]

        p_tp, d_tp = params(h, 0.0)
        p_tm, d_tm = params(-h, 0.0)
        p_wp, d_wp = params(0.0, h)
        p_wm, d_wm = params(0.0, -h)
        J11 = _wrap(p_tp - p_tm) / (2 * h)
        J21 = (d_tp - d_tm) / (2 * h)
        J12 = _wrap(p_wp - p_wm) / (2 * h)
        J22 = (d_wp - d_wm) / (2 * h)
        pos, dirs = self.exit_params()
        wmu = geo.boundary_measure_weight(m, pos, dirs)
        return (np.abs(J11 * J22 - J12 * J21) * wmu).reshape(self.nt, Q)

    def sin_psi(self):
        """|sin| of the angle between the chord direction and w, (nt, Q) (2D)."""
        m = self.m
        a = tr._unit(m.metric.to_frame(self.y, self.ydot))
        return np.abs(a[:, 0:1] * self.fiber.omega[None, :, 1] - a[:, 1:2] * self.fiber.omega[None, :, 0])

    def first_leg(self, a):
        """exp(-int_0^t a) along the chord at the scattering times."""
        from scipy.integrate import cumulative_simpson
        n = self.m.dim
        x0 = self.xp[None]
        ctx = None
        if a.needs_context:
            ctx = tr.sample_context(self.m, x0, self.vp[None], self.chord_t[None],
                                    np.zeros(1), np.array([self.tau]))
        av = a(self.chord_x, self.chord_v, ctx)
        A = cumulative_simpson(av, x=self.chord_t, initial=0.0)
        # scattering times are the chord nodes 4i + 2
        return np.exp(-A[2::4])

    def second_leg(self, a):
        n = self.m.dim
        N, S, _ = self.leg_x.shape
        ctx = None
        if a.needs_context:
            Y = np.repeat(self.y, len(self.fiber), axis=0)
            Wf = self.w.reshape(-1, n)
            tm, _ = geo.travel_times(self.m, Y, Wf)
            ctx = tr.sample_context(self.m, Y, Wf, self.leg_t, tm, self.leg_tau)
        av = a(self.leg_x.reshape(-1, n), self.leg_v.reshape(-1, n), ctx).reshape(N, S)
        return np.exp(-np.sum(self.leg_w * av, axis=1)).reshape(self.nt, len(self.fiber))

    def F(self, pair):
        return self.first_leg(pair.a)[:, None] * self.second_leg(pair.a)

    def k_values(self, pair):
        n = self.m.dim
        Q = len(self.fiber)
        Y = np.repeat(self.y, Q, axis=0)
        ydot = np.repeat(self.ydot, Q, axis=0)
        return pair.k(Y, ydot, self.w.reshape(-1, n)).reshape(self.nt, Q)

    def Fk(self, pair):
        """F(x', y(t), w) k(y(t), ydot(t), w): single-scattering density in (t, w)."""
        return self.F(pair) * self.k_values(pair)

    def A0(self, pair):
        return float(ballistic_amplitude(self.m, pair, self.xp[None], self.vp[None])[0])


def single_scattering_value_3d(m, pair, xp, vp, t, w):
    """F(x', y(t), w) k(y(t), ydot(t), w) at scattering time t and direction w."""
    n = m.dim
    xp = geo._points(xp, n)
    vp = m.metric.normalize(xp, geo._points(vp, n))
    t = np.broadcast_to(np.asarray(t, float), (len(xp),))
    y, yd = geo.flow(m, xp, vp, t)
    w = m.metric.normalize(y, geo._points(w, n))
    e1 = np.exp(-tr.line_integral(m, pair.a, xp, vp, 0.0, t))
    e2, _, _, _ = tr.exit_attenuation(m, pair.a, y, w)
    return e1 * e2 * pair.k(y, yd, w)


# ---------------------------------------------------------------------------
# Two-dimensional intersection geometry
# ---------------------------------------------------------------------------

@dataclass
class Intersection:
    """Crossing of an outgoing geodesic with the geodesic of p (2D)."""

    chi: np.ndarray
    t: np.ndarray
    s: np.ndarray
    y: np.ndarray
    w: np.ndarray
    sin_psi: np.ndarray


def _chord_angles(xa, xb):
    return np.arctan2(xa[..., 1], xa[..., 0]), np.arctan2(xb[..., 1], xb[..., 0])


def chords_cross(a_in, a_out, b_in, b_out):
    """Whether chords with endpoint angles (a_in, a_out) and (b_in, b_out) interleave."""
    def between(lo, hi, z):
        return np.mod(z - lo, 2 * np.pi) < np.mod(hi - lo, 2 * np.pi)
    return between(a_in, a_out, b_in) != between(a_in, a_out, b_out)


def intersect_geodesics_2d(m, x_out, v_out, xp, vp, x_in=None, nfine=801):
    """Locate where the outgoing geodesics through (x_out, v_out) crossed p's chord.

    Returns chi (crossing exists), t (time along p's geodesic), s (time
    backward from x_out), the crossing point y, the outgoing direction w at
    y, and |sin psi| of the crossing angle.
    """
    n = m.dim
    x_out = geo._points(x_out, n)
    v_out = geo._points(v_out, n)
    xp = geo._points(xp, n)[0]
    vp = m.metric.normalize(xp[None], geo._points(vp, n))[0]
    taup, xpe, _ = geo.exit_state(m, xp[None], vp[None], 1)
    if x_in is None:
        _, x_in, _ = geo.exit_state(m, x_out, v_out, -1)
    pa, pb = _chord_angles(xp, xpe[0])
    oa, ob = _chord_angles(x_in, x_out)
    chi = chords_cross(pa, pb, oa, ob)
    N = len(x_out)
    t = np.full(N, np.nan)
    s = np.full(N, np.nan)
    y = np.full((N, 2), np.nan)
    w = np.full((N, 2), np.nan)
    sp = np.full(N, np.nan)
    idx = np.nonzero(chi)[0]
    if len(idx) == 0:
        return Intersection(chi, t, s, y, w, sp)
    if m.metric.is_flat:
        d = v_out[idx]
        A = np.stack([np.broadcast_to(vp, d.shape), d], -1)
        rhs = x_out[idx] - xp
        sol = np.linalg.solve(A, rhs[..., None])[..., 0]
        t[idx] = sol[:, 0]
        s[idx] = sol[:, 1]
        y[idx] = xp + sol[:, :1] * vp
        w[idx] = d
    else:
        xs, vs, ts = geo.sample_geodesics(m, xp[None], vp[None], 0.0, taup, nfine)
        cx, cv, ct = xs[0], vs[0], ts[0]
        tm, _, _ = geo.exit_state(m, x_out[idx], v_out[idx], -1)
        bs, bv, bt = geo.sample_geodesics(m, x_out[idx], v_out[idx], 0.0, -tm, nfine)
        # signed side of each backward sample relative to the local chord tangent
        for r, i in enumerate(idx):
            z = bs[r]
            j = np.argmin(np.sum((z[:, None, :] - cx[None, ::8, :]) ** 2, -1), axis=1) * 8
            j = np.clip(j, 0, nfine - 1)
            rel = z - cx[j]
            side = cv[j, 0] * rel[:, 1] - cv[j, 1] * rel[:, 0]
            ch = np.nonzero(np.sign(side[:-1]) != np.sign(side[1:]))[0]
            if len(ch) == 0:
                chi[i] = False
                continue
            q = ch[0]
            f = side[q] / (side[q] - side[q + 1])
            zq = z[q] + f * (z[q + 1] - z[q])
            s[i] = -(bt[r, q] + f * (bt[r, q + 1] - bt[r, q]))
            jj = np.argmin(np.sum((cx - zq) ** 2, -1))
            lo, hi = max(jj - 1, 0), min(jj + 1, nfine - 1)
            seg = cx[hi] - cx[lo]
            g = np.clip(np.dot(zq - cx[lo], seg) / np.dot(seg, seg), 0, 1)
            t[i] = ct[lo] + g * (ct[hi] - ct[lo])
            y[i] = zq
            w[i] = bv[r, q] + f * (bv[r, q + 1] - bv[r, q])
        yy, yd = geo.flow(m, np.broadcast_to(xp, (len(idx), 2)), np.broadcast_to(vp, (len(idx), 2)),
                          np.nan_to_num(t[idx]))
        y[idx] = yy
    ok = chi & np.isfinite(t)
    if ok.any():
        yv = y[ok]
        tp_ = geo.flow(m, np.broadcast_to(xp, (ok.sum(), 2)), np.broadcast_to(vp, (ok.sum(), 2)), t[ok])[1]
        a1 = tr._unit(m.metric.to_frame(yv, tp_))
        a2 = tr._unit(m.metric.to_frame(yv, w[ok]))
        sp[ok] = np.abs(a1[:, 0] * a2[:, 1] - a1[:, 1] * a2[:, 0])
        w[ok] = m.metric.normalize(yv, w[ok])
    return Intersection(ok, t, s, y, w, sp)


# ---------------------------------------------------------------------------
# Albedo application and operator distances
# ---------------------------------------------------------------------------

def albedo_apply(m, pair, u_minus, out_grid=None, solver=None, **grid_kw):
    """Outgoing trace of the solution for boundary data u_minus.

    Returns (out_grid, dict of trace components) on a Gamma_+ grid.
    """
    out_grid = out_grid or geo.make_boundary_grid(m, 128, 32, incoming=False)
    solver = solver or tr.make_solver(m, pair, out_grid=out_grid, **grid_kw)
    return out_grid, solver.solve(u_minus).outgoing()


def sample_incoming(m, nsamples=32, support_radius=None, rng=None):
    """Incoming boundary states whose chords pass near the support.

    Positions are uniform in angle, directions spread (low discrepancy, or
    random with ``rng``) so that the flat-chart impact parameter covers the
    support radius.
    """
    n = m.dim
    R0 = m.outer_radius
    Rs = min(support_radius or m.inner_radius, R0)
    smax = min(1.0, Rs / R0) * 0.98
    i = np.arange(nsamples)
    if rng is None:
        u1 = (i + 0.5) / nsamples
        u2 = np.mod(0.5 + i * 0.6180339887498949, 1.0)
        u3 = np.mod(0.25 + i * 0.7548776662466927, 1.0)
        u4 = np.mod(0.75 + i * 0.5698402909980532, 1.0)
    else:
        u1, u2, u3, u4 = rng.uniform(size=(4, nsamples))
    if n == 2:
        pos = (2 * np.pi * u1)[:, None]
        dirs = np.arcsin((2 * u2 - 1) * smax)[:, None]
    else:
        pos = np.stack([np.arccos(1 - 2 * u3), 2 * np.pi * u1], 1)
        dirs = np.stack([np.arcsin(u2 * smax), 2 * np.pi * u4], 1)
    x, v = geo.boundary_point(m, pos, dirs, incoming=True)
    return x, v


def screen_incoming(m, pair_a, pair_b, count=4, npos=None, ndir=None):
    """Incoming states where the ballistic jump |A0 - A0~| is largest.

    The jump is cheap, so it is evaluated on a dense Gamma_- grid and the
    ``count`` best separated maxima are returned as (x, v).  Adding them to
    a sample set sharpens sup-type estimates that sparse samples miss.
    """
    if count <= 0:
        return np.empty((0, m.dim)), np.empty((0, m.dim))
    if m.dim == 2:
        bg = geo.make_boundary_grid(m, npos or 128, ndir or 64, incoming=True)
    else:
        bg = geo.make_boundary_grid(m, npos or (12, 24), ndir or (8, 16), incoming=True)
    d = np.abs(ballistic_amplitude(m, pair_a, bg.x, bg.v) - ballistic_amplitude(m, pair_b, bg.x, bg.v))
    params = np.concatenate([bg.pos, bg.dirs], 1)
    sep = 3 * max(bg.pos_spacing, bg.dir_spacing)
    picked = []
    for i in np.argsort(-d, kind="stable"):
        if d[i] <= 0 or len(picked) == count:
            break
        diff = params[picked] - params[i]
        diff[:, 0] = _wrap(diff[:, 0]) if m.dim == 2 else diff[:, 0]
        if m.dim == 3:
            diff[:, 1] = _wrap(diff[:, 1])
            diff[:, 3] = _wrap(diff[:, 3])
        if not picked or np.min(np.linalg.norm(diff, axis=1)) > sep:
            picked.append(i)
    return bg.x[picked], bg.v[picked]


@dataclass
class OpNormReport:
    """Estimate of the L1(d mu) operator distance sup_p ||(A - B) delta_p||."""

    epsilon: float
    per_sample: np.ndarray
    ballistic: np.ndarray
    single: np.ndarray
    multiple: np.ndarray
    argmax: int
    x: np.ndarray
    v: np.ndarray
    multiple_scattering: str
    grids: dict = field(default_factory=dict)

    def as_dict(self):
        return {"epsilon": self.epsilon, "argmax": int(self.argmax),
                "sup_ballistic": float(np.max(self.ballistic)),
                "sup_single": float(np.max(self.single)),
                "sup_multiple": float(np.max(self.multiple)),
                "multiple_scattering": self.multiple_scattering,
                "samples": int(len(self.per_sample)), "grids": self.grids}


def _interp_gamma_plus(grid, values, pos, dirs):
    """Bilinear interpolation of values (npos*ndir, B) on a 2D Gamma_+ grid."""
    npos, ndir = grid.shape
    V = values.reshape(npos, ndir, -1)
    th = np.mod(pos[:, 0], 2 * np.pi) / grid.pos_spacing - 0.5
    i0 = np.floor(th).astype(int)
    fi = th - i0
    i0 %= npos
    i1 = (i0 + 1) % npos
    eta = grid.dirs[:ndir, 0] if grid.dirs.ndim == 2 else grid.dirs[:ndir]
    e = dirs[:, 0]
    j1 = np.clip(np.searchsorted(eta, e), 1, ndir - 1)
    j0 = j1 - 1
    fj = np.clip((e - eta[j0]) / (eta[j1] - eta[j0]), 0, 1)
    return ((1 - fi)[:, None] * ((1 - fj)[:, None] * V[i0, j0] + fj[:, None] * V[i0, j1])
            + fi[:, None] * ((1 - fj)[:, None] * V[i1, j0] + fj[:, None] * V[i1, j1]))


def multiple_scattering_outputs(m, pairs, x, v, out_grid, beam_eps=0.1, profile="smooth",
                                grid_kw=None, solvers=None):
    """Orders >= 2 of the albedo kernel for beams at each (x, v), per pair.

    Returns a list of (N_out, B) arrays and the solvers used.
    """
    grid_kw = grid_kw or {}
    beams = [BeamSource(m, x[i], v[i], beam_eps, profile) for i in range(len(x))]
    solvers = list(solvers) if solvers is not None else [None] * len(pairs)
    solvers = [s if s is not None else tr.make_solver(m, p, out_grid=out_grid, **grid_kw)
               for s, p in zip(solvers, pairs)]
    outs = []
    for s in solvers:
        sol = s.solve(beams)
        outs.append(sol.outgoing()["multiple"])
    return outs, solvers


def opnorm_L1(m, pair_a, pair_b, nsamples=32, x=None, v=None, nt=80, nw=None,
              multiple="auto", beam_eps=0.1, out_grid=None, grid_kw=None, solvers=None,
              rng=None):
    """Estimate of ||A - B||_{L1 -> L1} as the sup over sampled p of the column mass.

    For each sample p the column difference is split into the ballistic
    jump |dA0(p)|, the single-scattering part evaluated exactly in (t, w)
    coordinates, and (2D) the multiple-scattering part from beam solves.
    In 3D the multiple-scattering part is omitted (``multiple='omit'``),
    which yields a lower bound on the column mass because the parts are
    mutually singular only up to the omitted term being added inside the
    same absolute value.
    """
    n = m.dim
    if x is None:
        sr = max(pair_a.support_radius, pair_b.support_radius)
        x, v = sample_incoming(m, nsamples, sr if np.isfinite(sr) else None, rng)
    if multiple == "auto":
        multiple = "beam" if n == 2 else "omit"
    multi = None
    if multiple == "beam":
        if n != 2:
            raise ValueError("beam-based multiple scattering is implemented in 2D")
        out_grid = out_grid or geo.make_boundary_grid(m, 128, 32, incoming=False)
        (ma, mb), solvers = multiple_scattering_outputs(m, [pair_a, pair_b], x, v, out_grid,
                                                        beam_eps, grid_kw=grid_kw, solvers=solvers)
        multi = ma - mb
        pos_g, dirs_g, _ = geo.boundary_params(m, out_grid.x, out_grid.v)
        _, entry_x, _ = geo.exit_state(m, out_grid.x, out_grid.v, -1)
    N = len(x)
    tot = np.zeros(N)
    bal = np.zeros(N)
    sing = np.zeros(N)
    mult = np.zeros(N)
    for i in range(N):
        ch = ScatterChart(m, x[i], v[i], nt=nt, nw=nw, jacobian=(multi is not None))
        bal[i] = abs(ch.A0(pair_a) - ch.A0(pair_b))
        dFk = ch.Fk(pair_a) - ch.Fk(pair_b)
        sing[i] = float(np.sum(np.abs(dFk) * ch.weights))
        col = sing[i]
        if multi is not None:
            pos, dirs = ch.exit_params()
            d2 = _interp_gamma_plus(out_grid, multi[:, i:i + 1], pos, dirs)[:, 0]
            d2 = d2.reshape(ch.nt, -1) * ch.density
            col = float(np.sum(np.abs(dFk + d2) * ch.weights))
            pa, pb = _chord_angles(ch.xp, ch.x_exit)
            oa, ob = _chord_angles(entry_x, out_grid.x)
            outside = ~chords_cross(pa, pb, oa, ob)
            rest = float(np.sum(np.abs(multi[outside, i]) * out_grid.weight[outside]))
            mult[i] = float(np.sum(np.abs(d2) * ch.weights)) + rest
            col += rest
        tot[i] = bal[i] + col
    j = int(np.argmax(tot))
    grids = {"nt": nt, "nw": [int(q) for q in np.atleast_1d(nw or (96 if n == 2 else (16, 32)))],
             "samples": N}
    if multi is not None:
        grids.update({"beam_eps": beam_eps, "out_grid": [int(q) for q in out_grid.shape],
                      "phase_grid": solvers[0].grid.describe()})
    rep = OpNormReport(float(tot[j]), tot, bal, sing, mult, j, x, v,
                       "beam" if multi is not None else "omitted", grids)
    rep.solvers = solvers
    return rep


@dataclass
class StarNormReport:
    """2D distance max(||dA0||_inf, ||d(beta) chi |sin psi|||_inf)."""

    value: float
    ballistic: float
    scattered: float
    per_sample: np.ndarray

    def as_dict(self):
        return {"star_norm": self.value, "ballistic": self.ballistic, "scattered": self.scattered}


def star_norm_diff_2d(m, pair_a, pair_b, nsamples=32, x=None, v=None, out_grid=None,
                      beam_eps=0.1, grid_kw=None, solvers=None, rng=None, nout=None):
    """The 2D star-norm distance of two albedo operators.

    The scattered kernel difference times |sin psi| is evaluated at the
    Gamma_+ grid points whose geodesic crosses that of p: the single part
    as dF k J with J = |sin psi| / (d mu / dt dw), the multiple part from
    beam solves.
    """
    if m.dim != 2:
        raise ValueError("the star norm is defined in two dimensions")
    if x is None:
        sr = max(pair_a.support_radius, pair_b.support_radius)
        x, v = sample_incoming(m, nsamples, sr if np.isfinite(sr) else None, rng)
    out_grid = out_grid or geo.make_boundary_grid(m, 128, 32, incoming=False)
    (ma, mb), solvers = multiple_scattering_outputs(m, [pair_a, pair_b], x, v, out_grid,
                                                    beam_eps, grid_kw=grid_kw, solvers=solvers)
    multi = ma - mb
    _, entry_x, _ = geo.exit_state(m, out_grid.x, out_grid.v, -1)
    bal = np.abs(ballistic_amplitude(m, pair_a, x, v) - ballistic_amplitude(m, pair_b, x, v))
    scat = np.zeros(len(x))
    for i in range(len(x)):
        inter = intersect_geodesics_2d(m, out_grid.x, out_grid.v, x[i], v[i], x_in=entry_x)
        idx = np.nonzero(inter.chi)[0]
        if len(idx) == 0:
            continue
        tt = inter.t[idx]
        w = inter.w[idx]
        xp = np.broadcast_to(x[i], (len(idx), 2))
        vp = np.broadcast_to(v[i], (len(idx), 2))
        fka = single_scattering_value_3d(m, pair_a, xp, vp, tt, w)
        fkb = single_scattering_value_3d(m, pair_b, xp, vp, tt, w)
        jac = _intersection_jacobian(m, x[i], v[i], tt, w, inter.sin_psi[idx])
        val = (fka - fkb) * jac + multi[idx, i] * inter.sin_psi[idx]
        scat[i] = float(np.max(np.abs(val)))
    rep = StarNormReport(float(max(bal.max(), scat.max())), float(bal.max()), float(scat.max()),
                         np.maximum(bal, scat))
    rep.solvers = solvers
    return rep


def _intersection_jacobian(m, xp, vp, t, w, sin_psi, h=1e-5):
    """J = |sin psi| / (d mu / dt dw) at crossings (t, w); identically 1 when flat."""
    if m.metric.is_flat:
        return np.ones(len(t))
    N = len(t)
    xp = np.broadcast_to(geo._points(xp, 2)[0], (N, 2))
    vp = m.metric.normalize(xp, np.broadcast_to(geo._points(vp, 2)[0], (N, 2)))

    def params(dt, da):
        y, _ = geo.flow(m, xp, vp, t + dt)
        y0, _ = geo.flow(m, xp, vp, t)
        om = tr._unit(m.metric.to_frame(y0, w))
        ang = np.arctan2(om[:, 1], om[:, 0]) + da
        wv = m.metric.from_frame(y, np.stack([np.cos(ang), np.sin(ang)], 1))
        _, xe, ve = geo.exit_state(m, y, wv, 1)
        pos, dirs, _ = geo.boundary_params(m, xe, ve)
        return pos[:, 0], dirs[:, 0], xe, ve

    p1, d1, _, _ = params(h, 0)
    p2, d2, _, _ = params(-h, 0)
    p3, d3, _, _ = params(0, h)
    p4, d4, _, _ = params(0, -h)
    det = (_wrap(p1 - p2) * (d3 - d4) - _wrap(p3 - p4) * (d1 - d2)) / (4 * h * h)
    p0, d0, _, _ = params(0, 0)
    dens = np.abs(det) * geo.boundary_measure_weight(m, p0[:, None], d0[:, None])
    return sin_psi / dens


def extract_ballistic(m, pair, xp, vp, eps=0.02, order=12, grid=None, **grid_kw):
    """Recover A0(p) from the albedo response to a narrow indicator beam.

    The outgoing trace is integrated over the forward image of the beam
    support.  Because the flow preserves d(mu), that integral is the sum
    of u(exit(p_q)) w_q over the beam's own quadrature nodes p_q.  The
    ballistic part gives A0(p) + O(eps^2); the scattered part is bounded
    by the measure of the support and vanishes with eps.
    """
    beam = BeamSource(m, xp, vp, eps, "indicator")
    xq, vq, wq = beam.support_quadrature(order)
    _, xo, vo = geo.exit_state(m, xq, vq, 1)
    targets = SimpleNamespace(x=xo, v=vo)
    solver = tr.make_solver(m, pair, grid, out_grid=targets, **grid_kw)
    out = solver.solve(beam).outgoing()
    return float(np.sum(out["total"][:, 0] * wq))
