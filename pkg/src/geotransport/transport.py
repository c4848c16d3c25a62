"""Coefficient pairs and the forward boundary-value transport problem.

Attenuations are callables ``a(x, v, ctx=None)`` and scattering kernels
callables ``k(x, vp, v)`` on batches of chart points and tangent vectors.
``ctx`` optionally carries travel times and chord identities of the
samples so that gauge-transformed fields can be evaluated without
re-tracing their geodesics.

The solver tabulates fields on a phase grid (Cartesian nodes covering the
scattering support times a fiber quadrature grid) and sums the collision
series u = sum_j K^j J u_-.  K is stored as a sparse path operator P
acting on the tabulated gain term T1 f.
"""

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.integrate import cumulative_simpson

from . import geometry as geo


class SubcriticalityError(RuntimeError):
    """The collision series is not guaranteed to converge."""


class ConvergenceError(RuntimeError):
    """The collision series did not reach its tolerance within the cap."""


def sphere_area(n):
    """Measure of the unit fiber S^{n-1}."""
    return 2 * np.pi if n == 2 else 4 * np.pi


# ---------------------------------------------------------------------------
# Spatial building blocks
# ---------------------------------------------------------------------------

def smooth_cutoff(x, radius):
    """exp(-s/(1-s)) with s = |x|^2/R^2: equal to 1 at the origin, C-infinity, 0 for |x| >= R."""
    s = np.sum(x ** 2, axis=-1) / radius ** 2
    out = np.zeros_like(s)
    inside = s < 1
    out[inside] = np.exp(-s[inside] / (1 - s[inside]))
    return out


def smooth_cutoff_grad(x, radius):
    s = np.sum(x ** 2, axis=-1) / radius ** 2
    out = np.zeros_like(x)
    inside = s < 1
    si = s[inside]
    fac = np.exp(-si / (1 - si)) * (-1.0 / (1 - si) ** 2) * (2.0 / radius ** 2)
    out[inside] = fac[:, None] * x[inside]
    return out


class SpatialField:
    """Scalar field on the chart with analytic gradient."""

    radius = np.inf

    def __call__(self, x):
        raise NotImplementedError

    def grad(self, x):
        raise NotImplementedError

    def __add__(self, other):
        return FieldSum([self, other])

    def __rmul__(self, c):
        return FieldSum([self], [float(c)])

    def spec(self):
        return {"type": type(self).__name__}


class Bump(SpatialField):
    """amplitude * exp(-|x - center|^2 / width^2), cut off smoothly at ``radius``."""

    def __init__(self, amplitude, center=None, width=0.4, radius=1.0, dim=2):
        self.amplitude = float(amplitude)
        self.center = np.zeros(dim) if center is None else np.asarray(center, dtype=float)
        self.width = float(width)
        self.radius = float(radius)

    def __call__(self, x):
        d = x - self.center
        g = np.exp(-np.sum(d ** 2, axis=-1) / self.width ** 2)
        return self.amplitude * g * smooth_cutoff(x, self.radius)

    def grad(self, x):
        d = x - self.center
        g = np.exp(-np.sum(d ** 2, axis=-1) / self.width ** 2)
        cut = smooth_cutoff(x, self.radius)
        dg = (-2.0 / self.width ** 2) * g[:, None] * d
        return self.amplitude * (dg * cut[:, None] + g[:, None] * smooth_cutoff_grad(x, self.radius))

    def spec(self):
        return {"type": "bump", "amplitude": self.amplitude, "center": self.center.tolist(),
                "width": self.width, "radius": self.radius}


class Plateau(SpatialField):
    """``value`` times the smooth cutoff of radius ``radius`` (no Gaussian factor)."""

    def __init__(self, value, radius=1.0):
        self.value = float(value)
        self.radius = float(radius)

    def __call__(self, x):
        return self.value * smooth_cutoff(x, self.radius)

    def grad(self, x):
        return self.value * smooth_cutoff_grad(x, self.radius)

    def spec(self):
        return {"type": "plateau", "value": self.value, "radius": self.radius}


class ConstantField(SpatialField):
    """Constant on the ball of ``radius`` (default everywhere); for closed-form tests."""

    def __init__(self, value, radius=np.inf):
        self.value = float(value)
        self.radius = float(radius)

    def __call__(self, x):
        r2 = np.sum(x ** 2, axis=-1)
        return np.where(r2 <= self.radius ** 2, self.value, 0.0)

    def grad(self, x):
        return np.zeros_like(x)

    def spec(self):
        return {"type": "constant", "value": self.value, "radius": self.radius}


class FieldSum(SpatialField):
    def __init__(self, fields, coefs=None):
        self.fields = list(fields)
        self.coefs = list(coefs) if coefs is not None else [1.0] * len(self.fields)
        self.radius = max(f.radius for f in self.fields)

    def __call__(self, x):
        return sum(c * f(x) for c, f in zip(self.coefs, self.fields))

    def grad(self, x):
        return sum(c * f.grad(x) for c, f in zip(self.coefs, self.fields))

    def spec(self):
        return {"type": "sum", "coefs": self.coefs, "fields": [f.spec() for f in self.fields]}


class FunctionField(SpatialField):
    """Wrap plain callables; the gradient falls back to central differences."""

    def __init__(self, fn, radius=np.inf, grad=None, label="function"):
        self.fn = fn
        self.radius = float(radius)
        self._grad = grad
        self.label = label

    def __call__(self, x):
        r2 = np.sum(x ** 2, axis=-1)
        return np.where(r2 <= self.radius ** 2, np.asarray(self.fn(x), dtype=float) * np.ones(len(x)), 0.0)

    def grad(self, x, h=1e-6):
        if self._grad is not None:
            return self._grad(x)
        out = np.zeros_like(x)
        for i in range(x.shape[1]):
            e = np.zeros(x.shape[1])
            e[i] = h
            out[:, i] = (self(x + e) - self(x - e)) / (2 * h)
        return out

    def spec(self):
        return {"type": "function", "label": self.label, "radius": self.radius}


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Path context
# ---------------------------------------------------------------------------

@dataclass
class PathContext:
    """Geodesic bookkeeping for a batch of samples.

    ``chord`` maps each sample to a row of ``chord_x``/``chord_v`` (a
    phase point on the sample's maximal geodesic) with travel times
    ``chord_tm``/``chord_tp`` measured from that reference point.
    """

    tau_minus: np.ndarray
    tau_plus: np.ndarray
    chord: np.ndarray = None
    chord_x: np.ndarray = None
    chord_v: np.ndarray = None
    chord_tm: np.ndarray = None
    chord_tp: np.ndarray = None

    @property
    def tau(self):
        return self.tau_minus + self.tau_plus


def point_context(m, x, v):
    """Context for isolated phase points (each is its own chord reference)."""
    tm, tp = geo.travel_times(m, x, v)
    idx = np.arange(len(x))
    return PathContext(tm, tp, idx, np.asarray(x, float), np.asarray(v, float), tm, tp)


# ---------------------------------------------------------------------------
# Attenuation and scattering families
# ---------------------------------------------------------------------------

class Attenuation:
    """a(x, v); nonnegative and supported in the ball of ``support_radius``."""

    support_radius = np.inf
    needs_context = False

    def __call__(self, x, v, ctx=None):
        raise NotImplementedError

    def __add__(self, other):
        return LinearAttenuation([self, other], [1.0, 1.0])

    def __rmul__(self, c):
        return LinearAttenuation([self], [float(c)])

    def spec(self):
        return {"type": type(self).__name__}


class IsotropicAttenuation(Attenuation):
    def __init__(self, field):
        self.field = field
        self.support_radius = field.radius

    def __call__(self, x, v, ctx=None):
        return self.field(x)

    def spec(self):
        return {"type": "isotropic", "field": self.field.spec()}


class DirectionalAttenuation(Attenuation):
    """sigma(x) (1 + beta <v/|v|, e>), the direction taken in chart-normalised form."""

    def __init__(self, field, beta, e):
        self.field = field
        self.beta = float(beta)
        self.e = _unit(np.asarray(e, dtype=float))
        self.support_radius = field.radius
        if abs(self.beta) > 1:
            raise ValueError("|beta| <= 1 keeps the attenuation nonnegative")

    def __call__(self, x, v, ctx=None):
        return self.field(x) * (1 + self.beta * _unit(v) @ self.e)

    def spec(self):
        return {"type": "directional", "field": self.field.spec(), "beta": self.beta,
                "e": self.e.tolist()}


class FunctionAttenuation(Attenuation):
    def __init__(self, fn, support_radius, label="function"):
        self.fn = fn
        self.support_radius = float(support_radius)
        self.label = label

    def __call__(self, x, v, ctx=None):
        r2 = np.sum(x ** 2, axis=-1)
        val = np.asarray(self.fn(x, v), dtype=float) * np.ones(len(x))
        return np.where(r2 <= self.support_radius ** 2, val, 0.0)

    def spec(self):
        return {"type": "function", "label": self.label, "support_radius": self.support_radius}


class LinearAttenuation(Attenuation):
    def __init__(self, terms, coefs):
        self.terms = list(terms)
        self.coefs = [float(c) for c in coefs]
        self.support_radius = max(t.support_radius for t in self.terms)
        self.needs_context = any(t.needs_context for t in self.terms)

    def __call__(self, x, v, ctx=None):
        return sum(c * t(x, v, ctx) for c, t in zip(self.coefs, self.terms))

    def spec(self):
        return {"type": "linear", "coefs": self.coefs, "terms": [t.spec() for t in self.terms]}


class Kernel:
    """k(x, vp, v): density for scattering from direction vp into v."""

    support_radius = np.inf

    def __call__(self, x, vp, v):
        raise NotImplementedError

    def k_matrix(self, x, vin, vout):
        """Values on products of direction sets: x (N,n), vin (N,P,n), vout (N,Q,n) -> (N,P,Q)."""
        N, P, n = vin.shape
        Q = vout.shape[1]
        X = np.broadcast_to(x[:, None, None, :], (N, P, Q, n)).reshape(-1, n)
        VI = np.broadcast_to(vin[:, :, None, :], (N, P, Q, n)).reshape(-1, n)
        VO = np.broadcast_to(vout[:, None, :, :], (N, P, Q, n)).reshape(-1, n)
        return self(X, VI, VO).reshape(N, P, Q)

    def __add__(self, other):
        return LinearKernel([self, other], [1.0, 1.0])

    def __rmul__(self, c):
        return LinearKernel([self], [float(c)])

    def spec(self):
        return {"type": type(self).__name__}


class ZeroKernel(Kernel):
    support_radius = 0.0

    def __call__(self, x, vp, v):
        return np.zeros(len(x))

    def k_matrix(self, x, vin, vout):
        return np.zeros((len(x), vin.shape[1], vout.shape[1]))

    def spec(self):
        return {"type": "zero"}


class IsotropicKernel(Kernel):
    """k = sigma_s(x) / |S^{n-1}|, so that the fiber integral equals sigma_s(x)."""

    def __init__(self, field, dim=2):
        self.field = field
        self.dim = dim
        self.support_radius = field.radius

    def __call__(self, x, vp, v):
        return self.field(x) / sphere_area(self.dim)

    def k_matrix(self, x, vin, vout):
        s = self.field(x) / sphere_area(self.dim)
        return np.broadcast_to(s[:, None, None], (len(x), vin.shape[1], vout.shape[1])).copy()

    def spec(self):
        return {"type": "isotropic", "field": self.field.spec(), "dim": self.dim}


def hg_phase(cos, g, dim):
    """Henyey-Greenstein phase function normalised on the unit fiber."""
    if dim == 2:
        return (1 - g * g) / (2 * np.pi * (1 + g * g - 2 * g * cos))
    return (1 - g * g) / (4 * np.pi * (1 + g * g - 2 * g * cos) ** 1.5)


class HenyeyGreensteinKernel(Kernel):
    """sigma_s(x) * HG_g(<vp, v>), the angle taken between chart-normalised vectors."""

    def __init__(self, field, g, dim=2):
        if not -1 < g < 1:
            raise ValueError("anisotropy g must lie in (-1, 1)")
        self.field = field
        self.g = float(g)
        self.dim = dim
        self.support_radius = field.radius

    def __call__(self, x, vp, v):
        cos = np.sum(_unit(vp) * _unit(v), axis=-1)
        return self.field(x) * hg_phase(cos, self.g, self.dim)

    def k_matrix(self, x, vin, vout):
        cos = np.einsum("npi,nqi->npq", _unit(vin), _unit(vout))
        return self.field(x)[:, None, None] * hg_phase(cos, self.g, self.dim)

    def spec(self):
        return {"type": "henyey_greenstein", "field": self.field.spec(), "g": self.g,
                "dim": self.dim}


class FunctionKernel(Kernel):
    def __init__(self, fn, support_radius, label="function"):
        self.fn = fn
        self.support_radius = float(support_radius)
        self.label = label

    def __call__(self, x, vp, v):
        r2 = np.sum(x ** 2, axis=-1)
        val = np.asarray(self.fn(x, vp, v), dtype=float) * np.ones(len(x))
        return np.where(r2 <= self.support_radius ** 2, val, 0.0)

    def spec(self):
        return {"type": "function", "label": self.label, "support_radius": self.support_radius}


class LinearKernel(Kernel):
    def __init__(self, terms, coefs):
        self.terms = list(terms)
        self.coefs = [float(c) for c in coefs]
        self.support_radius = max(t.support_radius for t in self.terms)

    def __call__(self, x, vp, v):
        return sum(c * t(x, vp, v) for c, t in zip(self.coefs, self.terms))

    def k_matrix(self, x, vin, vout):
        return sum(c * t.k_matrix(x, vin, vout) for c, t in zip(self.coefs, self.terms))

    def spec(self):
        return {"type": "linear", "coefs": self.coefs, "terms": [t.spec() for t in self.terms]}


class CoefficientPair:
    """An attenuation a(x, v) together with a scattering kernel k(x, v', v)."""

    def __init__(self, a, k, name=""):
        self.a = a
        self.k = k
        self.name = name

    @property
    def support_radius(self):
        return max(self.a.support_radius, self.k.support_radius)

    @property
    def scattering_radius(self):
        return self.k.support_radius

    def spec(self):
        return {"name": self.name, "a": self.a.spec(), "k": self.k.spec()}

    def __repr__(self):
        return f"CoefficientPair({self.name or 'unnamed'})"


def perturbed_pair(base, delta, da=None, dk=None, name=None):
    """(a + delta*da, k + delta*dk)."""
    a = base.a if da is None else base.a + delta * da
    k = base.k if dk is None else base.k + delta * dk
    return CoefficientPair(a, k, name or f"{base.name}+{delta:g}")


@dataclass
class BoundsProfile:
    sigma: float
    rho: float
    rho_kind: str

    def as_dict(self):
        return {"Sigma": self.sigma, "rho": self.rho, "rho_kind": self.rho_kind}


# ---------------------------------------------------------------------------
# Fiber quadrature
# ---------------------------------------------------------------------------

@dataclass
class FiberGrid:
    """Quadrature nodes on the unit sphere of the orthonormal frame."""

    omega: np.ndarray
    weights: np.ndarray
    shape: tuple
    theta: np.ndarray = None
    phi: np.ndarray = None

    def __len__(self):
        return len(self.omega)

    def interp(self, om):
        """Indices (P, c) and weights (P, c) of linear interpolation at directions om."""
        if self.omega.shape[1] == 2:
            Q = len(self.omega)
            ang = np.mod(np.arctan2(om[:, 1], om[:, 0]), 2 * np.pi) * Q / (2 * np.pi)
            j0 = np.floor(ang).astype(int)
            f = ang - j0
            j0 %= Q
            return np.stack([j0, (j0 + 1) % Q], 1), np.stack([1 - f, f], 1)
        nt, nph = self.shape
        th = np.arccos(np.clip(om[:, 2], -1, 1))
        ph = np.mod(np.arctan2(om[:, 1], om[:, 0]), 2 * np.pi) * nph / (2 * np.pi)
        i1 = np.clip(np.searchsorted(self.theta, th), 1, nt - 1)
        i0 = i1 - 1
        ft = np.clip((th - self.theta[i0]) / (self.theta[i1] - self.theta[i0]), 0.0, 1.0)
        j0 = np.floor(ph).astype(int)
        fp = ph - j0
        j0 %= nph
        j1 = (j0 + 1) % nph
        idx = np.stack([i0 * nph + j0, i0 * nph + j1, i1 * nph + j0, i1 * nph + j1], 1)
        w = np.stack([(1 - ft) * (1 - fp), (1 - ft) * fp, ft * (1 - fp), ft * fp], 1)
        return idx, w


def make_fiber_grid(dim, ndir):
    """Uniform angles in 2D; Gauss-Legendre in cos(theta) times uniform phi in 3D."""
    if dim == 2:
        Q = int(ndir)
        th = 2 * np.pi * np.arange(Q) / Q
        return FiberGrid(np.stack([np.cos(th), np.sin(th)], 1), np.full(Q, 2 * np.pi / Q), (Q,))
    nt, nph = ndir
    mu, wmu = np.polynomial.legendre.leggauss(nt)
    order = np.argsort(-mu)
    mu, wmu = mu[order], wmu[order]
    theta = np.arccos(mu)
    phi = 2 * np.pi * np.arange(nph) / nph
    T, P = np.meshgrid(theta, phi, indexing="ij")
    om = np.stack([np.sin(T) * np.cos(P), np.sin(T) * np.sin(P), np.cos(T)], -1).reshape(-1, 3)
    w = (wmu[:, None] * np.full(nph, 2 * np.pi / nph)[None, :]).ravel()
    return FiberGrid(om, w, (nt, nph), theta, phi)


def fiber_vectors(m, x, fiber):
    """Chart vectors of the fiber nodes at each x: (N, Q, n)."""
    N = len(x)
    Q = len(fiber)
    X = np.repeat(x, Q, axis=0)
    om = np.tile(fiber.omega, (N, 1))
    return m.metric.from_frame(X, om).reshape(N, Q, m.dim)


# ---------------------------------------------------------------------------
# Line integrals and attenuation
# ---------------------------------------------------------------------------

def _odd(k):
    k = max(3, int(k))
    return k if k % 2 else k + 1


def path_samples(m, x, v, t0, t1, nsamp=None, step=None):
    """Samples and Simpson weights of geodesic segments from t0 to t1 (per ray).

    Returns (xs, vs, ts, w) where w integrates in |t|.
    """
    n = m.dim
    x = geo._points(x, n)
    v = geo._points(v, n)
    t0 = np.broadcast_to(np.asarray(t0, float), (len(x),))
    t1 = np.broadcast_to(np.asarray(t1, float), (len(x),))
    if nsamp is None:
        h = step or 0.5 * m.step
        nsamp = _odd(math.ceil(np.max(np.abs(t1 - t0), initial=0.0) / h) + 1)
    xs, vs, ts = geo.sample_geodesics(m, x, v, t0, t1, nsamp)
    w = geo.simpson_weights(nsamp, np.abs(t1 - t0))
    return xs, vs, ts, w


def sample_context(m, x, v, ts, tm=None, tp=None):
    """PathContext for samples at times ts (N, S) along the geodesics through (x, v)."""
    if tm is None:
        tm, tp = geo.travel_times(m, x, v)
    N, S = ts.shape
    chord = np.repeat(np.arange(N), S)
    return PathContext((tm[:, None] + ts).ravel(), (tp[:, None] - ts).ravel(), chord,
                       np.asarray(x, float), np.asarray(v, float), tm, tp)


def line_integral(m, a, x, v, t0, t1, nsamp=None, tm=None, tp=None):
    """Integral of a along the geodesics through (x, v) over t in [t0, t1] (t0 <= t1 or reversed)."""
    xs, vs, ts, w = path_samples(m, x, v, t0, t1, nsamp)
    N, S, n = xs.shape
    ctx = sample_context(m, x, v, ts, tm, tp) if a.needs_context else None
    vals = a(xs.reshape(-1, n), vs.reshape(-1, n), ctx).reshape(N, S)
    return np.sum(w * vals, axis=1)


def attenuation_E(m, pair, x, y, nsamp=None):
    """E(x, y) = exp(-int a) along the geodesic from x to y."""
    a = pair.a if isinstance(pair, CoefficientPair) else pair
    v, d = geo.connect(m, x, y)
    return np.exp(-line_integral(m, a, geo._points(x, m.dim), v, 0.0, d, nsamp))


def exit_attenuation(m, a, x, v, nsamp=None):
    """exp(-int a) from (x, v) to the forward exit point, and the exit state."""
    tp, xe, ve = geo.exit_state(m, x, v, 1)
    return np.exp(-line_integral(m, a, x, v, 0.0, tp, nsamp)), tp, xe, ve


def broken_attenuation_F(m, pair, xprime, y, w, nsamp=None):
    """F(x', y, w) = E(x', y) E(y, exit of (y, w))."""
    a = pair.a if isinstance(pair, CoefficientPair) else pair
    e1 = attenuation_E(m, a, xprime, y, nsamp)
    y = geo._points(y, m.dim)
    w = m.metric.normalize(y, geo._points(w, m.dim))
    e2, _, _, _ = exit_attenuation(m, a, y, w, nsamp)
    return e1 * e2


# ---------------------------------------------------------------------------
# Pointwise operators
# ---------------------------------------------------------------------------

def apply_T1(m, pair, f, x, v, fiber=None):
    """T1 f(x, v) = int k(x, v', v) f(x, v') d(omega)(v') by fiber quadrature."""
    n = m.dim
    x = geo._points(x, n)
    v = geo._points(v, n)
    fiber = fiber or make_fiber_grid(n, 256 if n == 2 else (24, 48))
    V = fiber_vectors(m, x, fiber)
    N, Q, _ = V.shape
    X = np.repeat(x, Q, axis=0)
    fv = np.asarray(f(X, V.reshape(-1, n)), float).reshape(N, Q)
    kv = pair.k(X, V.reshape(-1, n), np.repeat(v, Q, axis=0)).reshape(N, Q)
    return np.sum(kv * fv * fiber.weights[None, :], axis=1)


def out_scattering(m, pair, x, v, fiber=None):
    """int k(x, v, v') d(omega)(v'): total scattering out of direction v."""
    n = m.dim
    x = geo._points(x, n)
    v = geo._points(v, n)
    fiber = fiber or make_fiber_grid(n, 256 if n == 2 else (24, 48))
    V = fiber_vectors(m, x, fiber)
    N, Q, _ = V.shape
    kv = pair.k(np.repeat(x, Q, axis=0), np.repeat(v, Q, axis=0), V.reshape(-1, n)).reshape(N, Q)
    return np.sum(kv * fiber.weights[None, :], axis=1)


def coefficient_bounds(m, pair, mode="n3", spacing=None, ndir=None, radius=None):
    """Grid estimates of (Sigma, rho): sup|a| and ||k||_{inf,1} (n3) or ||k||_inf (n2)."""
    n = m.dim
    R = radius or max(pair.support_radius if np.isfinite(pair.support_radius) else m.outer_radius,
                      1e-9)
    R = min(R, m.outer_radius)
    h = spacing or R / (20 if n == 2 else 8)
    ax = np.arange(-R, R + h / 2, h)
    X = np.stack(np.meshgrid(*([ax] * n), indexing="ij"), -1).reshape(-1, n)
    X = X[np.sum(X ** 2, 1) <= R ** 2]
    fiber = make_fiber_grid(n, ndir or (64 if n == 2 else (8, 16)))
    V = fiber_vectors(m, X, fiber)
    N, Q, _ = V.shape
    Xr = np.repeat(X, Q, axis=0)
    ctx = point_context(m, Xr, V.reshape(-1, n)) if pair.a.needs_context else None
    sigma = float(np.max(np.abs(pair.a(Xr, V.reshape(-1, n), ctx)), initial=0.0))
    rho = 0.0
    for s in range(0, N, 64):
        km = pair.k.k_matrix(X[s:s + 64], V[s:s + 64], V[s:s + 64])
        if mode == "n3":
            rho = max(rho, float(np.max(np.abs(km) @ fiber.weights, initial=0.0)))
        else:
            rho = max(rho, float(np.max(np.abs(km), initial=0.0)))
    return BoundsProfile(sigma, rho, "inf,1" if mode == "n3" else "inf")


# ---------------------------------------------------------------------------
# Phase grid and path operators
# ---------------------------------------------------------------------------

class PhaseGrid:
    """Cartesian nodes covering the scattering support times a fiber grid.

    ``radius`` is the ball in which T1 f may be nonzero (the kernel
    support); nodes extend one cell diagonal beyond it so that
    multilinear interpolation is exact-support inside the ball.
    """

    def __init__(self, m, radius, spacing=None, ndir=None, path_step=None, order=None):
        n = m.dim
        self.m = m
        self.radius = float(radius)
        self.spacing = float(spacing or self.radius / (18 if n == 2 else 6))
        self.ndir = ndir or (64 if n == 2 else (6, 12))
        self.path_step = float(path_step or 0.6 * self.spacing)
        order = order or (3 if n == 2 else 1)
        if order not in (1, 3):
            raise ValueError("spatial interpolation order must be 1 or 3")
        self.order = order
        h = self.spacing
        reach = 1 if order == 1 else 2
        margin = (reach * math.sqrt(n) + 0.1) * h
        kmax = int(math.ceil((self.radius + margin) / h)) + 1
        ax = np.arange(-kmax, kmax + 1) * h
        mesh = np.stack(np.meshgrid(*([ax] * n), indexing="ij"), -1)
        inside = np.sum(mesh ** 2, -1) <= (self.radius + margin) ** 2
        self.index = np.full(inside.shape, -1, dtype=np.int64)
        self.index[inside] = np.arange(int(inside.sum()))
        self.nodes = mesh[inside]
        self.kmax = kmax
        self.fiber = make_fiber_grid(n, self.ndir)
        self.V = fiber_vectors(m, self.nodes, self.fiber)

    @property
    def nx(self):
        return len(self.nodes)

    @property
    def nq(self):
        return len(self.fiber)

    def describe(self):
        return {"nodes": self.nx, "directions": self.nq, "spacing": self.spacing,
                "ndir": [int(d) for d in np.atleast_1d(self.ndir)], "path_step": self.path_step,
                "radius": self.radius, "spatial_order": self.order}

    @staticmethod
    def _weights_1d(f, order):
        if order == 1:
            return [0, 1], [1 - f, f]
        f2, f3 = f * f, f * f * f
        return [-1, 0, 1, 2], [(-f3 + 2 * f2 - f) / 2, (3 * f3 - 5 * f2 + 2) / 2,
                               (-3 * f3 + 4 * f2 + f) / 2, (f3 - f2) / 2]

    def spatial_weights(self, y):
        """Stencil node indices (P, s^n) and tensor-product weights for points y.

        Linear (order 1) or Catmull-Rom cubic convolution (order 3); absent
        nodes carry index -1.
        """
        n = y.shape[1]
        g = y / self.spacing + self.kmax
        i0 = np.floor(g).astype(np.int64)
        f = g - i0
        size = 2 * self.kmax + 1
        offs, w1 = zip(*[self._weights_1d(f[:, d], self.order) for d in range(n)])
        offs = offs[0]
        idx, wts = [], []
        for combo in itertools.product(range(len(offs)), repeat=n):
            ii = [i0[:, d] + offs[c] for d, c in enumerate(combo)]
            ok = np.all([(i >= 0) & (i < size) for i in ii], axis=0)
            ii = tuple(np.clip(i, 0, size - 1) for i in ii)
            node = np.where(ok, self.index[ii], -1)
            w = np.ones(len(y))
            for d, c in enumerate(combo):
                w = w * w1[d][c]
            idx.append(node)
            wts.append(w)
        return np.stack(idx, 1), np.stack(wts, 1)

    def interpolate(self, values, x, v):
        """Multilinear-in-space, linear-in-angle interpolation of nodal values (Nx, Q[, B])."""
        m = self.m
        si, sw = self.spatial_weights(x)
        om = _unit(m.metric.to_frame(x, v))
        di, dw = self.fiber.interp(om)
        flat = values.reshape(self.nx * self.nq, -1)
        out = np.zeros((len(x), flat.shape[1]))
        for a in range(si.shape[1]):
            ok = si[:, a] >= 0
            for b in range(di.shape[1]):
                col = si[ok, a] * self.nq + di[ok, b]
                out[ok] += (sw[ok, a] * dw[ok, b])[:, None] * flat[col]
        return out.reshape((len(x),) + values.shape[2:])


@dataclass
class EntryData:
    """Backward entry state and attenuation for a batch of phase points."""

    x_in: np.ndarray
    v_in: np.ndarray
    E_in: np.ndarray
    tau_minus: np.ndarray
    tau_plus: np.ndarray


def _trace_rows(m, grid, pair, x, v, with_operator=True, entry_step=None):
    """Backward paths from (x, v): sparse path-operator rows and entry data.

    With ``entry_step`` the entry attenuation (the ballistic factor) is
    recomputed with that finer quadrature step instead of the path step.
    """
    n = m.dim
    N = len(x)
    tm, _, _ = geo.exit_state(m, x, v, -1)
    tp, _, _ = geo.exit_state(m, x, v, 1)
    h = grid.path_step
    ns = _odd(math.ceil(np.max(tm, initial=0.0) / h) + 1)
    xs, vs, ts = geo.sample_geodesics(m, x, v, 0.0, -tm, ns)
    ctx = None
    if pair.a.needs_context:
        ctx = PathContext((tm[:, None] + ts).ravel(), (tp[:, None] - ts).ravel(),
                          np.repeat(np.arange(N), ns), x, v, tm, tp)
    av = pair.a(xs.reshape(-1, n), vs.reshape(-1, n), ctx).reshape(N, ns)
    hs = tm / (ns - 1)
    A = cumulative_simpson(av, dx=1.0, axis=1, initial=0.0) * hs[:, None]
    E = np.exp(-A)
    E_in = E[:, -1].copy()
    if entry_step is not None and entry_step < h:
        ps = path_samples(m, x, v, 0.0, -tm, step=entry_step)
        Nn, S = ps[0].shape[:2]
        ectx = sample_context(m, x, v, ps[2], tm, tp) if pair.a.needs_context else None
        vals = pair.a(ps[0].reshape(-1, n), ps[1].reshape(-1, n), ectx).reshape(Nn, S)
        E_in = np.exp(-np.sum(ps[3] * vals, axis=1))
    entry = EntryData(xs[:, -1].copy(), vs[:, -1].copy(), E_in, tm, tp)
    if not with_operator:
        return None, entry
    w = geo.simpson_weights(ns, tm) * E
    keep = np.sum(xs ** 2, -1) < grid.radius ** 2
    rows = np.broadcast_to(np.arange(N)[:, None], (N, ns))[keep]
    y = xs[keep]
    coef = w[keep]
    om = _unit(m.metric.to_frame(y, vs[keep]))
    si, sw = grid.spatial_weights(y)
    di, dw = grid.fiber.interp(om)
    R, C, D = [], [], []
    for a in range(si.shape[1]):
        for b in range(di.shape[1]):
            ok = si[:, a] >= 0
            R.append(rows[ok])
            C.append(si[ok, a] * grid.nq + di[ok, b])
            D.append((coef * sw[:, a] * dw[:, b])[ok])
    P = sparse.csr_matrix((np.concatenate(D), (np.concatenate(R), np.concatenate(C))),
                          shape=(N, grid.nx * grid.nq))
    return P, entry


def path_operator(m, grid, pair, x, v, chunk=4096, with_operator=True, entry_step=None):
    """Sparse P with (P g)(x, v) = int_0^{tau_-} E(y_s -> x) g(y_s, ydot_s) ds.

    g is tabulated on the phase grid and interpolated along the backward
    geodesic; composite Simpson in s.
    """
    Ps, ents = [], []
    for s in range(0, len(x), chunk):
        P, e = _trace_rows(m, grid, pair, x[s:s + chunk], v[s:s + chunk], with_operator,
                           entry_step)
        Ps.append(P)
        ents.append(e)
    entry = EntryData(*[np.concatenate([getattr(e, f) for e in ents])
                        for f in ("x_in", "v_in", "E_in", "tau_minus", "tau_plus")])
    P = sparse.vstack(Ps).tocsr() if with_operator else None
    return P, entry


def _evaluate_flux(m, u_minus, x, v):
    """Evaluate one or several boundary fluxes at incoming boundary states -> (N, B)."""
    fluxes = u_minus if isinstance(u_minus, (list, tuple)) else [u_minus]
    cols = []
    for f in fluxes:
        if callable(f):
            cols.append(np.asarray(f(x, v), float) * np.ones(len(x)))
        else:
            cols.append(np.full(len(x), float(f)))
    return np.stack(cols, 1)


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------

@dataclass
class Solution:
    """Collision-series solution for one or several boundary fluxes (columns)."""

    solver: "TransportSolver"
    u_minus: object
    u0: np.ndarray
    terms: list
    gain_all: np.ndarray
    gain_multi: np.ndarray
    term_norms: np.ndarray
    ratios: np.ndarray
    tail_bound: np.ndarray
    converged: bool

    @property
    def series_terms(self):
        return len(self.terms)

    def nodal(self):
        """u on the phase-grid nodes, shape (Nx, Q, B)."""
        return sum(self.terms)

    def evaluate(self, x, v, chunk=4096):
        """u(x, v) = J u_- + P (sum_j T1 u_j) at arbitrary phase points, (N, B)."""
        s = self.solver
        P, entry = path_operator(s.m, s.grid, s.pair, x, v, chunk, entry_step=0.5 * s.m.step)
        ballistic = entry.E_in[:, None] * _evaluate_flux(s.m, self.u_minus, entry.x_in, entry.v_in)
        return ballistic + P @ self.gain_all.reshape(s.grid.nx * s.grid.nq, -1)

    def outgoing(self):
        """Trace components on the solver's outgoing points: dict of (N_out, B) arrays."""
        s = self.solver
        if s.P_out is None:
            raise ValueError("solver was built without outgoing points")
        flat = lambda g: g.reshape(s.grid.nx * s.grid.nq, -1)
        ball = s.entry_out.E_in[:, None] * _evaluate_flux(s.m, self.u_minus, s.entry_out.x_in,
                                                          s.entry_out.v_in)
        multi = s.P_out @ flat(self.gain_multi)
        total_scat = s.P_out @ flat(self.gain_all)
        return {"ballistic": ball, "single": total_scat - multi, "multiple": multi,
                "scattered": total_scat, "total": ball + total_scat}


class TransportSolver:
    """Phase-grid collision-series solver for one coefficient pair.

    Parameters
    ----------
    grid : PhaseGrid
    out_x, out_v : optional outgoing boundary states at which traces are wanted
    oversample : fiber refinement factor used for the gain of J u_- only
    """

    def __init__(self, m, pair, grid, out_x=None, out_v=None, oversample=4):
        self.m = m
        self.pair = pair
        self.grid = grid
        n = m.dim
        X = np.repeat(grid.nodes, grid.nq, axis=0)
        Vn = grid.V.reshape(-1, n)
        self.P, self.entry = path_operator(m, grid, pair, X, Vn)
        kraw = self._kmatrix(grid.V, grid.V)
        self.kmat = kraw * grid.fiber.weights[None, :, None]
        self.out_scatter = np.einsum("ilj,j->il", kraw, grid.fiber.weights)
        tau = (self.entry.tau_minus + self.entry.tau_plus).reshape(grid.nx, grid.nq)
        self.q = float(np.max(tau * self.out_scatter, initial=0.0))
        if n == 2:
            fdir = int(grid.ndir * oversample)
        else:
            fdir = (int(grid.ndir[0] * oversample // 2), int(grid.ndir[1] * oversample // 2))
        self.fine = make_fiber_grid(n, fdir)
        self.V_fine = fiber_vectors(m, grid.nodes, self.fine)
        _, self.entry_fine = path_operator(m, grid, pair, np.repeat(grid.nodes, len(self.fine), 0),
                                           self.V_fine.reshape(-1, n), with_operator=False)
        self.kmat_fine = self._kmatrix(self.V_fine, grid.V) * self.fine.weights[None, :, None]
        self.P_out = None
        if out_x is not None:
            self.P_out, self.entry_out = path_operator(m, grid, pair, out_x, out_v,
                                                       entry_step=0.5 * m.step)

    def _kmatrix(self, vin, vout, chunk=64):
        nodes = self.grid.nodes
        out = np.empty((len(nodes), vin.shape[1], vout.shape[1]))
        for s in range(0, len(nodes), chunk):
            out[s:s + chunk] = self.pair.k.k_matrix(nodes[s:s + chunk], vin[s:s + chunk],
                                                    vout[s:s + chunk])
        return out

    @property
    def margin(self):
        return 1.0 - self.q

    def J_nodes(self, u_minus):
        """J u_- on the nodes, (Nx, Q, B)."""
        e = self.entry
        vals = e.E_in[:, None] * _evaluate_flux(self.m, u_minus, e.x_in, e.v_in)
        return vals.reshape(self.grid.nx, self.grid.nq, -1)

    def gain_of_J(self, u_minus):
        """T1 J u_- on the nodes using the refined fiber, (Nx, Q, B)."""
        e = self.entry_fine
        vals = e.E_in[:, None] * _evaluate_flux(self.m, u_minus, e.x_in, e.v_in)
        vals = vals.reshape(self.grid.nx, len(self.fine), -1)
        return np.einsum("ilj,ilb->ijb", self.kmat_fine, vals)

    def T1(self, f):
        return np.einsum("ilj,ilb->ijb", self.kmat, f)

    def K(self, f):
        """K f on the nodes for nodal f (Nx, Q, B)."""
        g = self.T1(f)
        return self.apply_P(g)

    def apply_P(self, g):
        B = g.shape[2]
        return (self.P @ g.reshape(-1, B)).reshape(self.grid.nx, self.grid.nq, B)

    def solve(self, u_minus, tol=1e-10, max_terms=50, require_subcritical=True):
        if require_subcritical and self.margin <= 0:
            raise SubcriticalityError(
                f"sup tau * int k = {self.q:.4g} >= 1; the collision series is not certified")
        u0 = self.J_nodes(u_minus)
        g = self.gain_of_J(u_minus)
        gain_all = g.copy()
        gain_multi = np.zeros_like(g)
        terms = [u0]
        norms = [np.max(np.abs(u0), axis=(0, 1))]
        scale = np.maximum(norms[0], 1.0)
        converged = False
        for j in range(1, max_terms):
            u = self.apply_P(g)
            terms.append(u)
            norms.append(np.max(np.abs(u), axis=(0, 1)))
            if np.all(norms[-1] <= tol * scale):
                converged = True
                break
            g = self.T1(u)
            gain_all += g
            gain_multi += g
        norms = np.array(norms)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratios = np.where(norms[:-1] > 0, norms[1:] / norms[:-1], 0.0)
        r = np.max(ratios[1:], axis=0) if len(ratios) > 1 else np.zeros(norms.shape[1])
        r = np.minimum(r, 0.999999)
        tail = norms[-1] * r / (1 - r)
        if not converged and self.margin > 0 and np.any(norms[-1] > 1e3 * tol * scale):
            raise ConvergenceError(f"series did not converge in {max_terms} terms "
                                   f"(last ratio {np.max(r):.4g})")
        sol = Solution(self, u_minus, u0, terms, gain_all, gain_multi, norms, ratios, tail,
                       converged)
        # cubic interpolation may undershoot slightly for rough data
        total = sol.nodal()
        sol.min_relative = float(np.min(total) / max(np.max(np.abs(total)), 1e-300))
        return sol


# ---------------------------------------------------------------------------
# Functional interface
# ---------------------------------------------------------------------------

def make_solver(m, pair, grid=None, out_grid=None, **kw):
    radius = min(pair.scattering_radius, m.inner_radius) if pair.scattering_radius > 0 else m.inner_radius
    grid = grid or PhaseGrid(m, radius, **kw)
    if out_grid is not None:
        return TransportSolver(m, pair, grid, out_grid.x, out_grid.v)
    return TransportSolver(m, pair, grid)


def solve_transport(m, pair, u_minus, grid=None, **kw):
    """Solve the boundary-value problem; returns (solution, number of terms, tail bound)."""
    sol = make_solver(m, pair, grid, **kw).solve(u_minus)
    return sol, sol.series_terms, sol.tail_bound


def apply_J(m, pair, u_minus, x, v):
    """(J u_-)(x, v) = E(entry, x) u_-(entry) at arbitrary phase points."""
    x = geo._points(x, m.dim)
    v = geo._points(v, m.dim)
    tm, xe, ve = geo.exit_state(m, x, v, -1)
    A = line_integral(m, pair.a, x, v, -tm, 0.0)
    return np.exp(-A) * _evaluate_flux(m, u_minus, xe, ve)[:, 0]


def apply_K(solver, f_nodes):
    """K applied to a nodal field."""
    f = f_nodes[..., None] if f_nodes.ndim == 2 else f_nodes
    out = solver.K(f)
    return out[..., 0] if f_nodes.ndim == 2 else out


def trace_gamma(solution, x, v):
    """Outgoing trace of a solution at boundary states (x, v) on Gamma_+."""
    return solution.evaluate(x, v)


def subcritical_CS(m, pair, grid=None, solver=None):
    """(holds, margin) with margin = 1 - sup tau(x, v) int k(x, v, v') d(omega)(v')."""
    if pair.scattering_radius <= 0:
        return True, 1.0
    if solver is None:
        g = grid or PhaseGrid(m, min(pair.scattering_radius, m.inner_radius))
        X = np.repeat(g.nodes, g.nq, axis=0)
        tm, tp = geo.travel_times(m, X, g.V.reshape(-1, m.dim))
        kraw = np.empty((g.nx, g.nq, g.nq))
        for s in range(0, g.nx, 64):
            kraw[s:s + 64] = pair.k.k_matrix(g.nodes[s:s + 64], g.V[s:s + 64], g.V[s:s + 64])
        osc = kraw @ g.fiber.weights
        q = float(np.max((tm + tp).reshape(g.nx, g.nq) * osc))
    else:
        q = solver.q
    return q < 1, 1.0 - q


def subcritical_DL(m, pair, grid=None, tol=1e-12):
    """a(x, v) - int k(x, v, v') d(omega)(v') >= 0 on the grid."""
    g = grid or PhaseGrid(m, min(max(pair.support_radius, 1e-6), m.outer_radius))
    X = np.repeat(g.nodes, g.nq, axis=0)
    Vn = g.V.reshape(-1, m.dim)
    ctx = point_context(m, X, Vn) if pair.a.needs_context else None
    av = pair.a(X, Vn, ctx).reshape(g.nx, g.nq)
    kraw = np.empty((g.nx, g.nq, g.nq))
    for s in range(0, g.nx, 64):
        kraw[s:s + 64] = pair.k.k_matrix(g.nodes[s:s + 64], g.V[s:s + 64], g.V[s:s + 64])
    osc = kraw @ g.fiber.weights
    return bool(np.all(av - osc >= -tol))


@dataclass
class CharacteristicCheck:
    t: np.ndarray
    u: np.ndarray
    du: np.ndarray
    au: np.ndarray
    gain: np.ndarray

    @property
    def residual(self):
        """Pointwise D u + a u - T1 u (zero for an exact solution)."""
        return self.du + self.au - self.gain


def along_characteristic(solution, x, v, nsamp=21, nfine=4001, column=0, fiber=None):
    """Transport-equation residual along the maximal geodesic through (x, v).

    u is reconstructed on a fine uniform grid of the whole chord by
    integrating the tabulated gain with the characteristic's own
    attenuation; D u is a second-order finite difference on that grid.
    The gain term T1 u is computed directly at each check point from u
    in all fiber directions, so the residual measures the error of the
    tabulated solution and not only quadrature consistency.
    """
    s = solution.solver
    m = s.m
    n = m.dim
    x = geo._points(x, n)
    v = m.metric.normalize(x, geo._points(v, n))
    tm, tp = geo.travel_times(m, x, v)
    xs, vs, ts = geo.sample_geodesics(m, x, v, -tm, tp, nfine)
    xs, vs, ts = xs[0], vs[0], ts[0]
    dt = ts[1] - ts[0]
    ctx = sample_context(m, x, v, ts[None], tm, tp) if s.pair.a.needs_context else None
    av = s.pair.a(xs, vs, ctx)
    G = s.grid.interpolate(solution.gain_all, xs, vs)[:, column]
    G[np.sum(xs ** 2, 1) >= s.grid.radius ** 2] = 0.0
    A = cumulative_simpson(av, dx=dt, initial=0.0)
    u_in = _evaluate_flux(m, solution.u_minus, xs[:1], vs[:1])[0, column]
    u = np.exp(-A) * (u_in + cumulative_simpson(np.exp(A) * G, dx=dt, initial=0.0))
    du = np.gradient(u, dt, edge_order=2)
    idx = np.unique(np.linspace(nfine // 20, nfine - 1 - nfine // 20, nsamp).astype(int))
    fiber = fiber or make_fiber_grid(n, 2 * s.grid.nq if n == 2 else (16, 32))
    V = fiber_vectors(m, xs[idx], fiber)
    S, Q, _ = V.shape
    uf = solution.evaluate(np.repeat(xs[idx], Q, 0), V.reshape(-1, n))[:, column].reshape(S, Q)
    kv = s.pair.k(np.repeat(xs[idx], Q, 0), V.reshape(-1, n), np.repeat(vs[idx], Q, 0)).reshape(S, Q)
    gain = np.sum(kv * uf * fiber.weights[None, :], axis=1)
    return CharacteristicCheck(ts[idx], u[idx], du[idx], av[idx] * u[idx], gain)
