"""Gauge transformations of coefficient pairs and class representatives.

A gauge is a positive function phi on SM equal to 1 on the boundary; it
maps (a, k) to (a - D log phi, k(x, v', v) phi(x, v) / phi(x, v')) and
leaves the albedo operator unchanged.  Gauges are represented through
L = log phi and its derivative along the geodesic flow, DL.
"""

from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_simpson
from scipy.optimize import minimize

from . import geometry as geo
from . import transport as tr


class Gauge:
    """log phi and D log phi on batches of phase points."""

    needs_context = True

    def log_phi(self, m, x, v, ctx=None):
        raise NotImplementedError

    def dlog_phi(self, m, x, v, ctx=None):
        raise NotImplementedError

    def spec(self):
        return {"type": type(self).__name__}


class IdentityGauge(Gauge):
    needs_context = False

    def log_phi(self, m, x, v, ctx=None):
        return np.zeros(len(x))

    def dlog_phi(self, m, x, v, ctx=None):
        return np.zeros(len(x))

    def spec(self):
        return {"type": "identity"}


def _taus(m, x, v, ctx):
    if ctx is not None:
        return ctx.tau_minus, ctx.tau_plus
    return geo.travel_times(m, x, v)


class PolynomialGauge(Gauge):
    """log phi = tau_- tau_+ h(x) for a smooth spatial field h.

    The travel-time product vanishes on the boundary, and
    D(tau_- tau_+) = tau_+ - tau_-, so D log phi is explicit.
    """

    def __init__(self, h):
        self.h = h

    def log_phi(self, m, x, v, ctx=None):
        tm, tp = _taus(m, x, v, ctx)
        return tm * tp * self.h(x)

    def dlog_phi(self, m, x, v, ctx=None):
        tm, tp = _taus(m, x, v, ctx)
        dh = np.einsum("ni,ni->n", self.h.grad(x), v)
        return (tp - tm) * self.h(x) + tm * tp * dh

    def spec(self):
        return {"type": "polynomial", "h": self.h.spec()}


def make_polynomial_gauge(strength, center=None, width=0.4, radius=1.0, dim=2):
    return PolynomialGauge(tr.Bump(strength, center, width, radius, dim))


def _hermite(rows, s, ds, F, f):
    """Cubic Hermite interpolation of cumulative integrals F (rows of F) with derivative f."""
    S = F.shape[1]
    j = np.clip(np.floor(s / ds).astype(int), 0, S - 2)
    th = np.clip(s / ds - j, 0.0, 1.0)
    r = rows
    h00 = 2 * th ** 3 - 3 * th ** 2 + 1
    h10 = th ** 3 - 2 * th ** 2 + th
    h01 = -2 * th ** 3 + 3 * th ** 2
    h11 = th ** 3 - th ** 2
    return (h00 * F[r, j] + h10 * ds * f[r, j] + h01 * F[r, j + 1] + h11 * ds * f[r, j + 1])


def chord_integrals(m, fn, ctx, step=None, chunk=2048):
    """Partial and total integrals of fn along the chords of a PathContext.

    For every sample the integral of fn from its chord's entry point up to
    the sample, and for every chord the integral over the whole chord.
    fn(x, v, ctx) is evaluated on chord samples.
    """
    C = len(ctx.chord_x)
    total = np.empty(C)
    partial = np.empty(len(ctx.chord))
    h = step or 2.0 * m.step
    order = np.argsort(ctx.chord, kind="stable")
    bounds = np.searchsorted(ctx.chord[order], np.arange(C + 1))
    for c0 in range(0, C, chunk):
        c1 = min(C, c0 + chunk)
        xr, vr = ctx.chord_x[c0:c1], ctx.chord_v[c0:c1]
        tm, tp = ctx.chord_tm[c0:c1], ctx.chord_tp[c0:c1]
        L = tm + tp
        ns = tr._odd(np.ceil(np.max(L, initial=0.0) / h) + 1)
        xs, vs, ts = geo.sample_geodesics(m, xr, vr, -tm, tp, ns)
        sctx = tr.sample_context(m, xr, vr, ts, tm, tp)
        n = m.dim
        fv = fn(xs.reshape(-1, n), vs.reshape(-1, n), sctx).reshape(len(xr), ns)
        ds = L / (ns - 1)
        F = cumulative_simpson(fv, dx=1.0, axis=1, initial=0.0) * ds[:, None]
        total[c0:c1] = F[:, -1]
        lo, hi = bounds[c0], bounds[c1]
        idx = order[lo:hi]
        loc = ctx.chord[idx] - c0
        sel_ds = np.where(ds[loc] > 0, ds[loc], 1.0)
        partial[idx] = _hermite(loc, ctx.tau_minus[idx], sel_ds, F, fv)
    return partial, total


class TrialGauge(Gauge):
    """log phi(x, v) = -int (a_tilde - a) along the backward geodesic from (x, v).

    Then a - D log phi = a_tilde exactly, and log phi on the outgoing
    boundary equals the chord integral Lambda of a - a_tilde.
    """

    def __init__(self, a, a_tilde):
        self.a = a
        self.a_tilde = a_tilde

    def _diff(self, x, v, ctx):
        return self.a(x, v, ctx) - self.a_tilde(x, v, ctx)

    def log_phi(self, m, x, v, ctx=None):
        ctx = ctx if ctx is not None and ctx.chord is not None else tr.point_context(m, x, v)
        partial, _ = chord_integrals(m, self._diff, ctx)
        return partial

    def dlog_phi(self, m, x, v, ctx=None):
        return self._diff(x, v, ctx)

    def chord_lambda(self, m, x, v):
        """Lambda = int_chord (a - a_tilde) for the chords through (x, v)."""
        _, total = chord_integrals(m, self._diff, tr.point_context(m, x, v))
        return total

    def spec(self):
        return {"type": "trial", "a": self.a.spec(), "a_tilde": self.a_tilde.spec()}


class ModifiedGauge(Gauge):
    """Trial gauge corrected to equal 1 on the whole boundary.

    log phi~ = log phi - (tau_- / tau) Lambda, Lambda the chord integral of
    a - a_tilde, so that D log phi~ = (a - a_tilde) - Lambda / tau.
    """

    def __init__(self, trial):
        self.trial = trial

    def _parts(self, m, x, v, ctx):
        ctx = ctx if ctx is not None and ctx.chord is not None else tr.point_context(m, x, v)
        partial, total = chord_integrals(m, self.trial._diff, ctx)
        lam = total[ctx.chord]
        tau = ctx.tau_minus + ctx.tau_plus
        return partial, lam, ctx.tau_minus, np.where(tau > 0, tau, 1.0), ctx

    def log_phi(self, m, x, v, ctx=None):
        partial, lam, tm, tau, _ = self._parts(m, x, v, ctx)
        return partial - tm / tau * lam

    def dlog_phi(self, m, x, v, ctx=None):
        lam_tau = self.lambda_over_tau(m, x, v, ctx)
        return self.trial._diff(x, v, ctx) - lam_tau

    def lambda_over_tau(self, m, x, v, ctx=None):
        ctx = ctx if ctx is not None and ctx.chord is not None else tr.point_context(m, x, v)
        C = len(ctx.chord_x)
        used = np.unique(ctx.chord)
        sub = tr.PathContext(ctx.chord_tm[used], ctx.chord_tp[used], np.arange(len(used)),
                             ctx.chord_x[used], ctx.chord_v[used], ctx.chord_tm[used],
                             ctx.chord_tp[used])
        _, tot = chord_integrals(m, self.trial._diff, sub)
        lam = np.zeros(C)
        lam[used] = tot
        tau = ctx.chord_tm + ctx.chord_tp
        lt = np.where(tau > 0, lam / np.where(tau > 0, tau, 1.0), 0.0)
        return lt[ctx.chord]

    def spec(self):
        return {"type": "modified", "trial": self.trial.spec()}


class GaugedAttenuation(tr.Attenuation):
    needs_context = True

    def __init__(self, m, base, gauge, support_radius=None):
        self.m = m
        self.base = base
        self.gauge = gauge
        self.support_radius = support_radius if support_radius is not None else m.outer_radius

    def __call__(self, x, v, ctx=None):
        return self.base(x, v, ctx) - self.gauge.dlog_phi(self.m, x, v, ctx)

    def spec(self):
        return {"type": "gauged", "base": self.base.spec(), "gauge": self.gauge.spec()}


class GaugedKernel(tr.Kernel):
    def __init__(self, m, base, gauge):
        self.m = m
        self.base = base
        self.gauge = gauge
        self.support_radius = base.support_radius

    def __call__(self, x, vp, v):
        L_out = self.gauge.log_phi(self.m, x, v)
        L_in = self.gauge.log_phi(self.m, x, vp)
        return self.base(x, vp, v) * np.exp(L_out - L_in)

    def _L(self, x, V):
        N, P, n = V.shape
        return self.gauge.log_phi(self.m, np.repeat(x, P, axis=0), V.reshape(-1, n)).reshape(N, P)

    def k_matrix(self, x, vin, vout):
        km = self.base.k_matrix(x, vin, vout)
        live = np.any(km != 0, axis=(1, 2))
        if not live.any():
            return km
        L_in = self._L(x[live], vin[live])
        L_out = L_in if vout is vin else self._L(x[live], vout[live])
        km[live] *= np.exp(L_out[:, None, :] - L_in[:, :, None])
        return km

    def spec(self):
        return {"type": "gauged", "base": self.base.spec(), "gauge": self.gauge.spec()}


def apply_gauge(m, pair, gauge, name=None):
    """Gauge image (a - D log phi, k phi(x, v) / phi(x, v'))."""
    support = pair.a.support_radius
    if isinstance(gauge, (TrialGauge, ModifiedGauge)):
        support = m.outer_radius
    elif isinstance(gauge, PolynomialGauge):
        support = max(support, gauge.h.radius)
    a = GaugedAttenuation(m, pair.a, gauge, support)
    k = GaugedKernel(m, pair.k, gauge)
    return tr.CoefficientPair(a, k, name or f"{pair.name}*gauge")


def trial_gauge(a, a_tilde):
    return TrialGauge(a, a_tilde)


def modified_gauge(a, a_tilde):
    return ModifiedGauge(TrialGauge(a, a_tilde))


def build_representative(m, pair, pair_tilde):
    """Representative (a', k') of the class of ``pair`` closest to ``pair_tilde``.

    a' = a_tilde + Lambda / tau and k' = k exp(L~(x, v) - L~(x, v')).
    """
    g = modified_gauge(pair.a, pair_tilde.a)
    return apply_gauge(m, pair, g, f"{pair.name}'"), g


# ---------------------------------------------------------------------------
# Distances
# ---------------------------------------------------------------------------

@dataclass
class ClassDistance:
    """Upper bound for the class distance via the modified-gauge representative."""

    delta_upper: float
    a_part: float
    k_part: float
    mode: str
    a_argmax: tuple
    grids: dict

    def as_dict(self):
        return {"delta_upper": self.delta_upper, "a_part": self.a_part, "k_part": self.k_part,
                "mode": self.mode, "grids": self.grids}


def _lambda_over_tau_boundary(m, trial, pos, dirs):
    x, v = geo.boundary_point(m, pos, dirs, incoming=True)
    lam = trial.chord_lambda(m, x, v)
    tau, _, _ = geo.exit_state(m, x, v, 1)
    return np.where(tau > 1e-12, lam / np.where(tau > 1e-12, tau, 1.0), 0.0)


def sup_a_difference(m, trial, npos=None, ndir=None, polish=4):
    """sup over chords of |Lambda| / tau = ||a' - a_tilde||_inf."""
    n = m.dim
    npos = npos or (128 if n == 2 else (12, 24))
    ndir = ndir or (32 if n == 2 else (8, 12))
    grid = geo.make_boundary_grid(m, npos, ndir, incoming=True)
    vals = np.abs(_lambda_over_tau_boundary(m, trial, grid.pos, grid.dirs))
    best = float(vals.max())
    arg = (grid.pos[vals.argmax()].tolist(), grid.dirs[vals.argmax()].tolist())
    for i in np.argsort(-vals)[:polish]:
        z0 = np.concatenate([grid.pos[i], grid.dirs[i]])
        d = n - 1

        def f(z):
            dz = np.clip(z[d:], -np.pi / 2 + 1e-6, np.pi / 2 - 1e-6) if n == 2 else z[d:]
            return -abs(_lambda_over_tau_boundary(m, trial, z[None, :d], dz[None])[0])
        res = minimize(f, z0, method="Nelder-Mead",
                       options={"xatol": 1e-6, "fatol": 1e-12, "maxiter": 200})
        if -res.fun > best:
            best, arg = float(-res.fun), (res.x[:d].tolist(), res.x[d:].tolist())
    return best, arg


def kernel_difference(m, k1, k2, radius, mode="n3", spacing=None, ndir=None):
    """||k1 - k2|| in L1(SM x S) (mode 'n3') or sup norm (mode 'n2') on a product grid."""
    n = m.dim
    h = spacing or radius / (20 if n == 2 else 7)
    ax = np.arange(-radius - h / 2, radius + h, h)
    ax = ax[np.abs(ax) <= radius + h]
    X = np.stack(np.meshgrid(*([ax] * n), indexing="ij"), -1).reshape(-1, n)
    X = X[np.sum(X ** 2, 1) < radius ** 2]
    fiber = tr.make_fiber_grid(n, ndir or (48 if n == 2 else (8, 16)))
    V = tr.fiber_vectors(m, X, fiber)
    dV = m.metric.volume_density(X) * h ** n
    out = 0.0
    for s in range(0, len(X), 32):
        d = np.abs(k1.k_matrix(X[s:s + 32], V[s:s + 32], V[s:s + 32])
                   - k2.k_matrix(X[s:s + 32], V[s:s + 32], V[s:s + 32]))
        if mode == "n3":
            out += float(np.einsum("ipq,p,q,i->", d, fiber.weights, fiber.weights, dV[s:s + 32]))
        else:
            out = max(out, float(d.max(initial=0.0)))
    return out


def class_distance_upper(m, pair, pair_tilde, mode="n3", refine=False, spacing=None, ndir=None):
    """Upper bound max(||a' - a_tilde||_inf, ||k' - k_tilde||) for the class distance.

    With ``refine`` the k-part is recomputed on a finer grid and the
    difference is reported as the quadrature error estimate.
    """
    rep, g = build_representative(m, pair, pair_tilde)
    a_part, arg = sup_a_difference(m, g.trial)
    radius = min(max(pair.k.support_radius, pair_tilde.k.support_radius), m.outer_radius)
    k_part = kernel_difference(m, rep.k, pair_tilde.k, radius, mode, spacing, ndir)
    grids = {"k_spacing": spacing or radius / (20 if m.dim == 2 else 7)}
    res = ClassDistance(max(a_part, k_part), a_part, k_part, mode, arg, grids)
    if refine:
        h = grids["k_spacing"] / 1.5
        nd = (72 if m.dim == 2 else (12, 24))
        k_fine = kernel_difference(m, rep.k, pair_tilde.k, radius, mode, h, nd)
        res.k_error = abs(k_fine - k_part)
        res.k_part_fine = k_fine
    return res


def pairwise_distance(m, pair, pair_tilde, mode="n3"):
    """max(||a - a_tilde||_inf, ||k - k_tilde||) without any gauge freedom."""
    n = m.dim
    R = m.outer_radius
    h = R / (20 if n == 2 else 8)
    ax = np.arange(-R, R + h / 2, h)
    X = np.stack(np.meshgrid(*([ax] * n), indexing="ij"), -1).reshape(-1, n)
    X = X[np.sum(X ** 2, 1) < R ** 2]
    fiber = tr.make_fiber_grid(n, 48 if n == 2 else (8, 16))
    V = tr.fiber_vectors(m, X, fiber)
    Q = len(fiber)
    Xr = np.repeat(X, Q, axis=0)
    Vr = V.reshape(-1, n)
    ctx = tr.point_context(m, Xr, Vr)
    da = float(np.max(np.abs(pair.a(Xr, Vr, ctx) - pair_tilde.a(Xr, Vr, ctx))))
    radius = min(max(pair.k.support_radius, pair_tilde.k.support_radius), R)
    dk = kernel_difference(m, pair.k, pair_tilde.k, radius, mode)
    return max(da, dk), da, dk
