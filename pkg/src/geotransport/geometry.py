"""Simple Riemannian manifolds in a single global chart.

The stage is a pair of concentric chart balls: the medium ``M`` of radius
``inner_radius`` and the measurement domain ``M0`` of radius
``outer_radius``.  Everything here is vectorised over batches of phase
points: positions and tangent vectors are ``(N, n)`` arrays in chart
coordinates, with tangent vectors of unit length in the metric.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize


class GeometryError(ValueError):
    """Invalid metric data (e.g. a non positive-definite tensor)."""


class SimplicityError(RuntimeError):
    """A geodesic failed to leave the domain within the step cap."""


class ShootingError(RuntimeError):
    """The two-point geodesic problem did not converge."""


def _points(x, n):
    x = np.asarray(x, dtype=float)
    return x.reshape(-1, n)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

class Metric:
    """Riemannian metric on a chart of R^n.

    Three kinds are supported.  ``euclidean`` needs nothing else.
    ``conformal`` takes ``c(x)`` and its gradient and represents
    ``g = c(x)^2 I``.  ``general`` takes ``g(x) -> (N, n, n)`` and
    ``dg(x) -> (N, n, n, n)`` with ``dg[..., i, j, l] = d_l g_ij``.

    ``spec`` is a plain dict describing how the metric was built; configs
    use it for round-tripping and reports embed it.
    """

    def __init__(self, dim, kind="euclidean", *, c=None, grad_c=None, g=None,
                 dg=None, constant=False, spec=None):
        if dim not in (2, 3):
            raise GeometryError(f"dimension must be 2 or 3, got {dim}")
        if kind not in ("euclidean", "conformal", "general"):
            raise GeometryError(f"unknown metric kind {kind!r}")
        if kind == "conformal" and (c is None or grad_c is None):
            raise GeometryError("conformal metric needs c and grad_c")
        if kind == "general" and (g is None or dg is None):
            raise GeometryError("general metric needs g and dg")
        self.dim = dim
        self.kind = kind
        self._c = c
        self._grad_c = grad_c
        self._g = g
        self._dg = dg
        self.constant = bool(constant) or kind == "euclidean"
        self.spec = dict(spec or {"kind": kind})

    def __repr__(self):
        return f"Metric(dim={self.dim}, spec={self.spec})"

    @property
    def is_flat(self):
        """True when all Christoffel symbols vanish identically."""
        return self.constant

    def conformal_factor(self, x):
        x = _points(x, self.dim)
        if self.kind == "euclidean":
            return np.ones(len(x))
        if self.kind == "conformal":
            return np.asarray(self._c(x), dtype=float).reshape(len(x))
        raise GeometryError("general metric has no conformal factor")

    def tensor(self, x):
        x = _points(x, self.dim)
        n = self.dim
        if self.kind == "euclidean":
            return np.broadcast_to(np.eye(n), (len(x), n, n)).copy()
        if self.kind == "conformal":
            c = self.conformal_factor(x)
            return (c ** 2)[:, None, None] * np.eye(n)
        return np.asarray(self._g(x), dtype=float).reshape(len(x), n, n)

    def check_positive(self, x):
        """Raise GeometryError unless g is symmetric positive-definite at x."""
        x = _points(x, self.dim)
        if self.kind == "conformal":
            c = self.conformal_factor(x)
            if np.any(~np.isfinite(c)) or np.any(c <= 0):
                raise GeometryError("conformal factor must be positive")
            return
        if self.kind == "euclidean":
            return
        g = self.tensor(x)
        if not np.allclose(g, np.swapaxes(g, -1, -2), atol=1e-12):
            raise GeometryError("metric tensor is not symmetric")
        if np.any(np.linalg.eigvalsh(g)[:, 0] <= 0):
            raise GeometryError("metric tensor is not positive-definite")

    def christoffel(self, x):
        """Christoffel symbols ``G[:, k, i, j]`` of the second kind."""
        x = _points(x, self.dim)
        n = self.dim
        self.check_positive(x)
        if self.kind == "euclidean" or self.constant:
            return np.zeros((len(x), n, n, n))
        if self.kind == "conformal":
            c = self.conformal_factor(x)
            dc = np.asarray(self._grad_c(x), dtype=float).reshape(len(x), n)
            q = dc / c[:, None]
            eye = np.eye(n)
            return (np.einsum("ki,nj->nkij", eye, q)
                    + np.einsum("kj,ni->nkij", eye, q)
                    - np.einsum("ij,nk->nkij", eye, q))
        g = self.tensor(x)
        dg = np.asarray(self._dg(x), dtype=float).reshape(len(x), n, n, n)
        ginv = np.linalg.inv(g)
        # first kind: [ij, l] = 1/2 (d_i g_lj + d_j g_li - d_l g_ij)
        first = 0.5 * (np.einsum("nlji->nlij", dg) + np.einsum("nlij->nlij", dg)
                       - np.einsum("nijl->nlij", dg))
        return np.einsum("nkl,nlij->nkij", ginv, first)

    def accel(self, x, v):
        """Geodesic acceleration ``-G^k_ij v^i v^j``."""
        if self.constant:
            return np.zeros_like(v)
        if self.kind == "conformal":
            c = self.conformal_factor(x)
            dc = np.asarray(self._grad_c(x), dtype=float).reshape(v.shape)
            vdc = np.einsum("ni,ni->n", v, dc)
            vv = np.einsum("ni,ni->n", v, v)
            return -(2.0 * vdc[:, None] * v - vv[:, None] * dc) / c[:, None]
        gam = self.christoffel(x)
        return -np.einsum("nkij,ni,nj->nk", gam, v, v)

    def inner(self, x, u, w):
        if self.kind == "euclidean":
            return np.einsum("ni,ni->n", u, w)
        if self.kind == "conformal":
            return self.conformal_factor(x) ** 2 * np.einsum("ni,ni->n", u, w)
        return np.einsum("ni,nij,nj->n", u, self.tensor(x), w)

    def norm(self, x, v):
        return np.sqrt(self.inner(x, v, v))

    def normalize(self, x, v):
        return v / self.norm(x, v)[:, None]

    def frame(self, x):
        """Columns form a g-orthonormal basis of T_xM, shape (N, n, n)."""
        x = _points(x, self.dim)
        n = self.dim
        if self.kind == "euclidean":
            return np.broadcast_to(np.eye(n), (len(x), n, n)).copy()
        if self.kind == "conformal":
            return np.eye(n) / self.conformal_factor(x)[:, None, None]
        w, q = np.linalg.eigh(self.tensor(x))
        return np.einsum("nij,nj,nkj->nik", q, 1.0 / np.sqrt(w), q)

    def to_frame(self, x, v):
        """Coordinates of chart vectors v in the orthonormal frame."""
        if self.kind == "euclidean":
            return np.array(v, dtype=float)
        if self.kind == "conformal":
            return v * self.conformal_factor(x)[:, None]
        w, q = np.linalg.eigh(self.tensor(x))
        half = np.einsum("nij,nj,nkj->nik", q, np.sqrt(w), q)
        return np.einsum("nij,nj->ni", half, v)

    def from_frame(self, x, omega):
        if self.kind == "euclidean":
            return np.array(omega, dtype=float)
        if self.kind == "conformal":
            return omega / self.conformal_factor(x)[:, None]
        return np.einsum("nij,nj->ni", self.frame(x), omega)

    def volume_density(self, x):
        """sqrt(det g) relative to chart Lebesgue measure."""
        x = _points(x, self.dim)
        if self.kind == "euclidean":
            return np.ones(len(x))
        if self.kind == "conformal":
            return self.conformal_factor(x) ** self.dim
        return np.sqrt(np.linalg.det(self.tensor(x)))

    def gaussian_curvature(self, x, h=1e-4):
        """Gaussian curvature of a 2D metric by central differences."""
        if self.dim != 2:
            raise GeometryError("Gaussian curvature is defined for n = 2")
        x = _points(x, 2)
        if self.is_flat:
            return np.zeros(len(x))
        if self.kind == "conformal":
            # K = -Laplacian(log c) / c^2
            lap = np.zeros(len(x))
            f0 = np.log(self.conformal_factor(x))
            for i in range(2):
                e = np.zeros(2)
                e[i] = h
                lap += (np.log(self.conformal_factor(x + e)) - 2 * f0
                        + np.log(self.conformal_factor(x - e))) / h ** 2
            return -lap / np.exp(2 * f0)
        # R^l_{ijk} = d_j G^l_ik - d_k G^l_ij + G^l_jm G^m_ik - G^l_km G^m_ij
        gam = self.christoffel(x)
        dgam = np.zeros(gam.shape + (2,))
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            dgam[..., j] = (self.christoffel(x + e) - self.christoffel(x - e)) / (2 * h)
        riem = (np.einsum("nlikj->nlijk", dgam) - np.einsum("nlijk->nlijk", dgam)
                + np.einsum("nljm,nmik->nlijk", gam, gam)
                - np.einsum("nlkm,nmij->nlijk", gam, gam))
        g = self.tensor(x)
        r1212 = np.einsum("nl,nl->n", g[:, 0, :], riem[:, :, 1, 0, 1])
        return r1212 / np.linalg.det(g)


def euclidean(dim=2):
    return Metric(dim, "euclidean", spec={"kind": "euclidean"})


def constant_conformal(value, dim=2):
    """g = value^2 I: flat, with every length scaled by ``value``."""
    value = float(value)
    if value <= 0:
        raise GeometryError("conformal constant must be positive")
    return Metric(dim, "conformal",
                  c=lambda x: np.full(len(x), value),
                  grad_c=lambda x: np.zeros_like(x),
                  constant=True,
                  spec={"kind": "conformal_constant", "value": value})


def conformal_bump(amplitude, width=1.0, dim=2, center=None):
    """c(x) = 1 + amplitude * exp(-|x - center|^2 / width^2)."""
    amplitude = float(amplitude)
    width = float(width)
    ctr = np.zeros(dim) if center is None else np.asarray(center, dtype=float)
    if amplitude <= -1:
        raise GeometryError("amplitude must exceed -1 for a positive factor")

    def c(x):
        r2 = np.sum((x - ctr) ** 2, axis=-1)
        return 1.0 + amplitude * np.exp(-r2 / width ** 2)

    def grad_c(x):
        d = x - ctr
        r2 = np.sum(d ** 2, axis=-1)
        return (-2.0 * amplitude / width ** 2 * np.exp(-r2 / width ** 2))[:, None] * d

    return Metric(dim, "conformal", c=c, grad_c=grad_c,
                  spec={"kind": "conformal_bump", "amplitude": amplitude,
                        "width": width, "center": ctr.tolist()})


def anisotropic_bump(amplitude, width=1.0, dim=2):
    """A non-conformal metric g = I + amplitude * exp(-|x|^2/w^2) e1 e1^T."""
    amplitude = float(amplitude)
    width = float(width)
    e = np.zeros((dim, dim))
    e[0, 0] = 1.0

    def g(x):
        b = amplitude * np.exp(-np.sum(x ** 2, axis=-1) / width ** 2)
        return np.eye(dim) + b[:, None, None] * e

    def dg(x):
        b = amplitude * np.exp(-np.sum(x ** 2, axis=-1) / width ** 2)
        grad = (-2.0 / width ** 2) * b[:, None] * x
        return e[None, :, :, None] * grad[:, None, None, :]

    return Metric(dim, "general", g=g, dg=dg,
                  spec={"kind": "anisotropic_bump", "amplitude": amplitude,
                        "width": width})


def metric_from_spec(spec, dim):
    """Rebuild a built-in metric from its ``spec`` dict."""
    kind = spec.get("kind", "euclidean")
    if kind == "euclidean":
        return euclidean(dim)
    if kind == "conformal_constant":
        return constant_conformal(spec["value"], dim)
    if kind == "conformal_bump":
        return conformal_bump(spec["amplitude"], spec.get("width", 1.0), dim,
                              spec.get("center"))
    if kind == "anisotropic_bump":
        return anisotropic_bump(spec["amplitude"], spec.get("width", 1.0), dim)
    raise GeometryError(f"unknown built-in metric {kind!r}")


def christoffel_fd(metric, x, h=1e-5):
    """Christoffel symbols from central differences of g (validation only)."""
    x = _points(x, metric.dim)
    n = metric.dim
    g = metric.tensor(x)
    dg = np.zeros((len(x), n, n, n))
    for l in range(n):
        e = np.zeros(n)
        e[l] = h
        dg[..., l] = (metric.tensor(x + e) - metric.tensor(x - e)) / (2 * h)
    ginv = np.linalg.inv(g)
    first = 0.5 * (np.einsum("nlji->nlij", dg) + dg - np.einsum("nijl->nlij", dg))
    return np.einsum("nkl,nlij->nkij", ginv, first)


def christoffel(metric, x):
    return metric.christoffel(x)


# ---------------------------------------------------------------------------
# Manifold and phase points
# ---------------------------------------------------------------------------

class Manifold:
    """Concentric chart balls M (inner) inside M0 (outer) with a metric.

    ``step`` is the RK4 step in arc length (default 1% of the outer
    radius).  Geometry estimates are cached on first use.
    """

    def __init__(self, metric, inner_radius=1.0, outer_radius=1.2, step=None,
                 max_steps=200000):
        inner_radius = float(inner_radius)
        outer_radius = float(outer_radius)
        if inner_radius <= 0:
            raise GeometryError("inner_radius must be positive")
        if outer_radius <= inner_radius:
            raise GeometryError("outer_radius must exceed inner_radius")
        self.metric = metric
        self.inner_radius = inner_radius
        self.outer_radius = outer_radius
        self.step = float(step) if step else 0.01 * outer_radius
        self.max_steps = int(max_steps)
        self._cache = {}

    @property
    def dim(self):
        return self.metric.dim

    def __repr__(self):
        return (f"Manifold({self.metric!r}, R_M={self.inner_radius}, "
                f"R_M0={self.outer_radius}, step={self.step})")

    def with_outer_radius(self, radius):
        return Manifold(self.metric, self.inner_radius, radius, self.step,
                        self.max_steps)

    def with_step(self, step):
        return Manifold(self.metric, self.inner_radius, self.outer_radius,
                        step, self.max_steps)

    @property
    def diam(self):
        return self.estimates().diam

    @property
    def c0(self):
        return self.estimates().c0

    def estimates(self, **kw):
        key = ("estimates", tuple(sorted(kw.items())))
        if key not in self._cache:
            self._cache[key] = estimate_diam_and_c0(self, **kw)
        return self._cache[key]


@dataclass(frozen=True)
class PhasePoint:
    x: np.ndarray
    v: np.ndarray


@dataclass
class GeodesicPath:
    """Samples of one geodesic, plus travel times from its launch point."""

    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    tau_plus: float
    tau_minus: float

    @property
    def tau(self):
        return self.tau_plus + self.tau_minus


# ---------------------------------------------------------------------------
# Integration
# ---------------------------------------------------------------------------

def _rk4(metric, x, v, h):
    h = np.asarray(h, dtype=float)
    if h.ndim:
        h = h[:, None]
    a1 = metric.accel(x, v)
    x2, v2 = x + 0.5 * h * v, v + 0.5 * h * a1
    a2 = metric.accel(x2, v2)
    x3, v3 = x + 0.5 * h * v2, v + 0.5 * h * a2
    a3 = metric.accel(x3, v3)
    x4, v4 = x + h * v3, v + h * a3
    a4 = metric.accel(x4, v4)
    xn = x + h / 6.0 * (v + 2 * v2 + 2 * v3 + v4)
    vn = v + h / 6.0 * (a1 + 2 * a2 + 2 * a3 + a4)
    return xn, metric.normalize(xn, vn)


def _sphere_event(radius):
    r2 = radius ** 2
    return lambda x: np.einsum("ni,ni->n", x, x) - r2


def _march(m, x, v, sign, events, step=None, bisect_tol=1e-12):
    """Integrate until the first event function turns positive.

    Events are functions of position; a ray stops when one goes from
    ``<= 0`` to ``> 0``.  The crossing is located by bisection on the
    length of a final partial RK4 step.  Returns ``(t, x, v, which)``
    with ``which = -1`` for rays that never triggered (cannot happen for
    the outer-boundary event on a simple manifold).
    """
    metric = m.metric
    h = sign * (step or m.step)
    x = np.array(x, dtype=float)
    v = np.array(v, dtype=float)
    nray = len(x)
    t = np.zeros(nray)
    which = np.full(nray, -1)
    active = np.arange(nray)
    for _ in range(m.max_steps):
        if len(active) == 0:
            break
        xa, va = x[active], v[active]
        xn, vn = _rk4(metric, xa, va, h)
        vals = np.stack([ev(xn) for ev in events])
        fired = vals > 0
        hit = fired.any(axis=0)
        if hit.any():
            idx = np.nonzero(hit)[0]
            first = np.argmax(fired[:, idx], axis=0)
            xs, vs = xa[idx], va[idx]
            lo = np.zeros(len(idx))
            hi = np.full(len(idx), abs(h))
            evs = [events[k] for k in range(len(events))]
            for _ in range(80):
                mid = 0.5 * (lo + hi)
                xm, _vm = _rk4(metric, xs, vs, sign * mid)
                val = np.stack([e(xm) for e in evs])[first, np.arange(len(idx))]
                inside = val <= 0
                lo = np.where(inside, mid, lo)
                hi = np.where(inside, hi, mid)
                if np.max(hi - lo) < bisect_tol:
                    break
            xh, vh = _rk4(metric, xs, vs, sign * hi)
            gi = active[idx]
            x[gi], v[gi] = xh, vh
            t[gi] += hi
            which[gi] = first
        keep = ~hit
        gk = active[keep]
        x[gk], v[gk] = xn[keep], vn[keep]
        t[gk] += abs(h)
        active = gk
    else:
        if len(active):
            raise SimplicityError(
                f"{len(active)} geodesics did not exit within {m.max_steps} steps")
    return t, x, v, which


def _line_exit(x, v, radius):
    """Forward exit time of straight chart lines from a ball."""
    a = np.einsum("ni,ni->n", v, v)
    b = 2 * np.einsum("ni,ni->n", x, v)
    c = np.einsum("ni,ni->n", x, x) - radius ** 2
    disc = np.maximum(b * b - 4 * a * c, 0.0)
    return np.maximum((-b + np.sqrt(disc)) / (2 * a), 0.0)


def exit_state(m, x, v, sign=1, radius=None):
    """Travel time to the boundary sphere (default dM0) and the state there.

    ``sign=-1`` traces backward; the returned velocity is the geodesic
    velocity at the boundary (pointing inward for backward traces).
    """
    n = m.dim
    x = _points(x, n)
    v = _points(v, n)
    radius = m.outer_radius if radius is None else radius
    if m.metric.is_flat:
        t = _line_exit(x, sign * v, radius)
        return t, x + (sign * t)[:, None] * v, v.copy()
    r2 = np.einsum("ni,ni->n", x, x)
    out = (r2 >= radius ** 2 * (1 - 1e-13)) & (sign * np.einsum("ni,ni->n", x, v) >= 0)
    t = np.zeros(len(x))
    xe, ve = x.copy(), v.copy()
    todo = ~out
    if todo.any():
        tt, xx, vv, _ = _march(m, x[todo], v[todo], sign, [_sphere_event(radius)])
        t[todo], xe[todo], ve[todo] = tt, xx, vv
    return t, xe, ve


def travel_times(m, x, v, radius=None):
    """(tau_minus, tau_plus) to the outer boundary."""
    tm, _, _ = exit_state(m, x, v, -1, radius)
    tp, _, _ = exit_state(m, x, v, 1, radius)
    return tm, tp


def flow(m, x, v, t, substeps=None):
    """Geodesic flow for per-ray times ``t`` (any sign)."""
    n = m.dim
    x = _points(x, n).copy()
    v = _points(v, n).copy()
    t = np.broadcast_to(np.asarray(t, dtype=float), (len(x),))
    if m.metric.is_flat:
        return x + t[:, None] * v, v
    k = substeps or max(1, int(math.ceil(np.max(np.abs(t)) / m.step))) if len(t) else 1
    h = t / k
    for _ in range(k):
        x, v = _rk4(m.metric, x, v, h)
    return x, v


def sample_geodesics(m, x, v, t0, t1, nsamp):
    """States at ``nsamp`` uniform times from t0 to t1 (per ray).

    Returns ``(xs, vs, ts)`` of shapes (N, nsamp, n), (N, nsamp, n),
    (N, nsamp).  Steps never exceed the manifold step.
    """
    n = m.dim
    x = _points(x, n)
    v = _points(v, n)
    N = len(x)
    t0 = np.broadcast_to(np.asarray(t0, dtype=float), (N,)).copy()
    t1 = np.broadcast_to(np.asarray(t1, dtype=float), (N,)).copy()
    frac = np.linspace(0.0, 1.0, nsamp)
    ts = t0[:, None] + (t1 - t0)[:, None] * frac[None, :]
    if m.metric.is_flat:
        xs = x[:, None, :] + ts[..., None] * v[:, None, :]
        vs = np.broadcast_to(v[:, None, :], xs.shape).copy()
        return xs, vs, ts
    xs = np.empty((N, nsamp, n))
    vs = np.empty((N, nsamp, n))
    if N == 0:
        return xs, vs, ts
    xc, vc = flow(m, x, v, t0)
    xs[:, 0], vs[:, 0] = xc, vc
    if nsamp > 1:
        dt = (t1 - t0) / (nsamp - 1)
        sub = max(1, int(math.ceil(np.max(np.abs(dt)) / m.step)))
        h = dt / sub
        for j in range(1, nsamp):
            for _ in range(sub):
                xc, vc = _rk4(m.metric, xc, vc, h)
            xs[:, j], vs[:, j] = xc, vc
    return xs, vs, ts


def integrate_geodesic(m, x, v, direction="forward", nsamp=None):
    """Trace one geodesic from (x, v) to dM0 and return a sampled path."""
    n = m.dim
    x = _points(x, n)
    v = m.metric.normalize(x, _points(v, n))
    tm, tp = travel_times(m, x, v)
    sign = 1 if direction == "forward" else -1
    t_end = tp[0] if sign > 0 else tm[0]
    if nsamp is None:
        nsamp = max(3, int(math.ceil(t_end / m.step)) + 1)
    xs, vs, ts = sample_geodesics(m, x, v, 0.0, sign * t_end, nsamp)
    return GeodesicPath(ts[0], xs[0], vs[0], float(tp[0]), float(tm[0]))


def simpson_weights(nsamp, length=1.0):
    """Composite Simpson weights on nsamp (odd) uniform nodes over [0, length]."""
    if nsamp < 3 or nsamp % 2 == 0:
        raise ValueError("Simpson needs an odd number >= 3 of nodes")
    w = np.ones(nsamp)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w * (np.asarray(length, dtype=float)[..., None] / (3.0 * (nsamp - 1)))


# ---------------------------------------------------------------------------
# Two-point problem
# ---------------------------------------------------------------------------

def _tangent_basis(omega):
    """Orthonormal complement of unit vectors omega (N, n) -> (N, n-1, n)."""
    n = omega.shape[1]
    if n == 2:
        return np.stack([-omega[:, 1], omega[:, 0]], axis=1)[:, None, :]
    ref = np.where(np.abs(omega[:, :1]) < 0.9, np.array([1.0, 0, 0]), np.array([0, 1.0, 0]))
    e1 = ref - np.einsum("ni,ni->n", ref, omega)[:, None] * omega
    e1 /= np.linalg.norm(e1, axis=1)[:, None]
    e2 = np.cross(omega, e1)
    return np.stack([e1, e2], axis=1)


def _straight_length(m, x, y, npts=65):
    s = np.linspace(0, 1, npts)
    pts = x[:, None, :] + s[None, :, None] * (y - x)[:, None, :]
    d = (y - x)
    flat = pts.reshape(-1, m.dim)
    dd = np.repeat(d, npts, axis=0)
    speed = m.metric.norm(flat, dd).reshape(len(x), npts)
    return np.trapezoid(speed, s, axis=1)


def connect(m, x, y, tol=1e-10, max_iter=40):
    """Unit initial vector v(x, y) and distance d(x, y) of the joining geodesic.

    Flat metrics are solved in closed form.  Otherwise Newton shooting
    on (tangent-plane direction offset, length) with a finite-difference
    Jacobian; rays that fail restart from eight perturbed directions.
    """
    n = m.dim
    x = _points(x, n)
    y = _points(y, n)
    if np.any(np.linalg.norm(y - x, axis=1) == 0):
        raise ShootingError("connect needs distinct points")
    metric = m.metric
    if metric.is_flat:
        d = y - x
        dist = metric.norm(x, d)
        return d / dist[:, None], dist
    lstraight = _straight_length(m, x, y)
    nsub = max(4, int(math.ceil(np.max(lstraight) / m.step)) + 2)
    omega0 = metric.to_frame(x, y - x)
    omega0 /= np.linalg.norm(omega0, axis=1)[:, None]
    v_out = np.zeros_like(x)
    d_out = np.zeros(len(x))
    todo = np.arange(len(x))
    starts = [np.zeros(n - 1)]
    angs = np.linspace(0, 2 * np.pi, 8, endpoint=False)
    for a in angs:
        if n == 2:
            starts.append(np.array([0.35 * np.cos(a)]))
        else:
            starts.append(0.35 * np.array([np.cos(a), np.sin(a)]))
    for off in starts:
        if len(todo) == 0:
            break
        ok, vv, dd = _shoot(m, x[todo], y[todo], omega0[todo], lstraight[todo],
                            off, nsub, tol, max_iter)
        v_out[todo[ok]] = vv[ok]
        d_out[todo[ok]] = dd[ok]
        todo = todo[~ok]
    if len(todo):
        raise ShootingError(f"shooting failed for {len(todo)} point pairs")
    return v_out, d_out


def _shoot(m, x, y, omega0, d0, offset, nsub, tol, max_iter):
    n = m.dim
    metric = m.metric
    basis = _tangent_basis(omega0)
    N = len(x)
    p = np.zeros((N, n))
    p[:, : n - 1] = offset
    p[:, -1] = d0

    def endpoint(p):
        om = omega0 + np.einsum("na,nai->ni", p[:, : n - 1], basis)
        om /= np.linalg.norm(om, axis=1)[:, None]
        v = metric.from_frame(x, om)
        xe, _ = flow(m, x, v, p[:, -1], substeps=nsub)
        return xe, v

    ok = np.zeros(N, dtype=bool)
    for _ in range(max_iter):
        xe, v = endpoint(p)
        res = xe - y
        err = np.linalg.norm(res, axis=1)
        ok = err < tol
        if ok.all():
            break
        jac = np.zeros((N, n, n))
        for j in range(n):
            dp = np.zeros_like(p)
            step = 1e-6 * (1.0 if j < n - 1 else max(1.0, float(np.max(d0))))
            dp[:, j] = step
            xp, _ = endpoint(p + dp)
            xm, _ = endpoint(p - dp)
            jac[:, :, j] = (xp - xm) / (2 * step)
        try:
            delta = np.linalg.solve(jac, -res[..., None])[..., 0]
        except np.linalg.LinAlgError:
            break
        delta = np.where(ok[:, None], 0.0, delta)
        # damp large updates
        scale = np.minimum(1.0, 0.5 / np.maximum(np.abs(delta[:, : n - 1]).max(axis=1), 1e-300))
        p = p + scale[:, None] * delta
        p[:, -1] = np.maximum(p[:, -1], 1e-9)
    xe, v = endpoint(p)
    ok = np.linalg.norm(xe - y, axis=1) < max(tol, 1e-9)
    return ok, v, p[:, -1]


# ---------------------------------------------------------------------------
# Boundary parameterisation and measures
# ---------------------------------------------------------------------------

def sphere_position(params, radius):
    """Chart point on the sphere of given radius from angle parameters."""
    params = np.atleast_2d(np.asarray(params, dtype=float))
    if params.shape[1] == 1:
        th = params[:, 0]
        return radius * np.stack([np.cos(th), np.sin(th)], axis=1)
    th, ph = params[:, 0], params[:, 1]
    return radius * np.stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph),
                              np.cos(th)], axis=1)


def _sphere_tangents(params, radius):
    params = np.atleast_2d(np.asarray(params, dtype=float))
    if params.shape[1] == 1:
        th = params[:, 0]
        return radius * np.stack([-np.sin(th), np.cos(th)], axis=1)[:, None, :]
    th, ph = params[:, 0], params[:, 1]
    d_th = radius * np.stack([np.cos(th) * np.cos(ph), np.cos(th) * np.sin(ph),
                              -np.sin(th)], axis=1)
    d_ph = radius * np.stack([-np.sin(th) * np.sin(ph), np.sin(th) * np.cos(ph),
                              np.zeros_like(th)], axis=1)
    return np.stack([d_th, d_ph], axis=1)


def surface_frame(metric, x, covector, tangents):
    """g-orthonormal (normal, tangent...) frame of a hypersurface.

    ``covector`` is the chart gradient of a defining function (pointing
    outward), ``tangents`` the chart coordinate tangents (N, n-1, n).
    Returns ``(nu, T, area)``, T of shape (N, n-1, n) and area the
    induced (n-1)-volume density in the surface parameters.
    """
    n = metric.dim
    g = metric.tensor(x)
    nu = np.linalg.solve(g, covector[..., None])[..., 0]
    nu /= metric.norm(x, nu)[:, None]
    gram = np.einsum("nai,nij,nbj->nab", tangents, g, tangents)
    area = np.sqrt(np.abs(np.linalg.det(gram)))
    T = np.empty_like(tangents)
    for a in range(n - 1):
        w = tangents[:, a].copy()
        for b in range(a):
            w -= metric.inner(x, w, T[:, b])[:, None] * T[:, b]
        w -= metric.inner(x, w, nu)[:, None] * nu
        T[:, a] = w / metric.norm(x, w)[:, None]
    return nu, T, area


def _dir_from_angles(nu, T, dirs, sign):
    dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
    eta = dirs[:, 0]
    if nu.shape[1] == 2:
        tang = np.sin(eta)[:, None] * T[:, 0]
    else:
        zeta = dirs[:, 1]
        tang = np.sin(eta)[:, None] * (np.cos(zeta)[:, None] * T[:, 0]
                                       + np.sin(zeta)[:, None] * T[:, 1])
    return sign * np.cos(eta)[:, None] * nu + tang


def boundary_point(m, pos, dirs, incoming=True, radius=None):
    """Phase point on the sphere from (position, direction) parameters.

    2D: pos = angle, dirs = eta in (-pi/2, pi/2) measured from the inward
    (incoming) or outward (outgoing) normal.  3D: pos = (Theta, Phi) and
    dirs = (eta, zeta) with eta in [0, pi/2) the angle from that normal.
    """
    radius = m.outer_radius if radius is None else radius
    x = sphere_position(pos, radius)
    nu, T, _ = surface_frame(m.metric, x, x, _sphere_tangents(pos, radius))
    v = _dir_from_angles(nu, T, dirs, -1.0 if incoming else 1.0)
    return x, v


def boundary_params(m, x, v, radius=None):
    """Inverse of boundary_point: returns (pos, dirs, incoming_mask)."""
    n = m.dim
    x = _points(x, n)
    v = _points(v, n)
    radius = m.outer_radius if radius is None else radius
    if n == 2:
        pos = np.arctan2(x[:, 1], x[:, 0])[:, None]
    else:
        r = np.linalg.norm(x, axis=1)
        pos = np.stack([np.arccos(np.clip(x[:, 2] / r, -1, 1)),
                        np.arctan2(x[:, 1], x[:, 0])], axis=1)
    nu, T, _ = surface_frame(m.metric, x, x, _sphere_tangents(pos, radius))
    vn = m.metric.inner(x, v, nu)
    incoming = vn < 0
    s = np.where(incoming, -1.0, 1.0)
    cos_eta = s * vn
    t1 = m.metric.inner(x, v, T[:, 0])
    if n == 2:
        eta = np.arctan2(t1, cos_eta)
        dirs = eta[:, None]
    else:
        t2 = m.metric.inner(x, v, T[:, 1])
        eta = np.arctan2(np.hypot(t1, t2), cos_eta)
        dirs = np.stack([eta, np.mod(np.arctan2(t2, t1), 2 * np.pi)], axis=1)
    return pos, dirs, incoming


def boundary_measure_weight(m, pos, dirs, radius=None):
    """Density of d(mu) = |<v, nu>| dSigma in the boundary parameters."""
    radius = m.outer_radius if radius is None else radius
    x = sphere_position(pos, radius)
    _, _, area = surface_frame(m.metric, x, x, _sphere_tangents(pos, radius))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
    eta = dirs[:, 0]
    dens = np.abs(np.cos(eta)) * area
    if m.dim == 3:
        dens = dens * np.abs(np.sin(eta))
    return dens


def boundary_volume(m, radius=None, npos=None):
    """Riemannian (n-1)-volume of the sphere of given radius."""
    radius = m.outer_radius if radius is None else radius
    if m.dim == 2:
        k = npos or 512
        th = np.linspace(0, 2 * np.pi, k, endpoint=False)[:, None]
        x = sphere_position(th, radius)
        _, _, area = surface_frame(m.metric, x, x, _sphere_tangents(th, radius))
        return float(np.sum(area) * 2 * np.pi / k)
    k = npos or 48
    gth, wth = np.polynomial.legendre.leggauss(k)
    th = 0.5 * np.pi * (gth + 1)
    wth = 0.5 * np.pi * wth
    ph = np.linspace(0, 2 * np.pi, 2 * k, endpoint=False)
    TH, PH = np.meshgrid(th, ph, indexing="ij")
    pos = np.stack([TH.ravel(), PH.ravel()], axis=1)
    x = sphere_position(pos, radius)
    _, _, area = surface_frame(m.metric, x, x, _sphere_tangents(pos, radius))
    w = (wth[:, None] * np.full(2 * k, np.pi / k)[None, :]).ravel()
    return float(np.sum(area * w))


@dataclass
class BoundaryGrid:
    """Quadrature grid on Gamma_- or Gamma_+ of a sphere.

    ``weight`` already includes d(mu) density and the parameter weights,
    so ``sum(weight * f)`` approximates the d(mu) integral of f.
    """

    pos: np.ndarray
    dirs: np.ndarray
    x: np.ndarray
    v: np.ndarray
    weight: np.ndarray
    incoming: bool
    radius: float
    pos_spacing: float
    dir_spacing: float
    shape: tuple = field(default=())

    def __len__(self):
        return len(self.x)


def _gauss(k, a, b):
    z, w = np.polynomial.legendre.leggauss(k)
    return 0.5 * (b - a) * z + 0.5 * (a + b), 0.5 * (b - a) * w


def make_boundary_grid(m, npos=128, ndir=32, incoming=True, radius=None):
    """Product grid on Gamma_-/+ with d(mu) quadrature weights.

    2D: ``npos`` periodic angles and ``ndir`` Gauss-Legendre nodes in eta.
    3D: ``npos = (nTheta, nPhi)``, ``ndir = (neta, nzeta)``; Theta and eta
    use Gauss-Legendre nodes, Phi and zeta periodic nodes.
    """
    radius = m.outer_radius if radius is None else radius
    if m.dim == 2:
        th = np.linspace(0, 2 * np.pi, npos, endpoint=False) + np.pi / npos
        wth = np.full(npos, 2 * np.pi / npos)
        eta, weta = _gauss(ndir, -np.pi / 2, np.pi / 2)
        TH, ET = np.meshgrid(th, eta, indexing="ij")
        pos = TH.reshape(-1, 1)
        dirs = ET.reshape(-1, 1)
        pw = np.outer(wth, weta).ravel()
        shape = (npos, ndir)
        pos_sp, dir_sp = 2 * np.pi / npos, np.pi / ndir
    else:
        nth, nph = npos
        neta, nze = ndir
        th, wth = _gauss(nth, 0.0, np.pi)
        ph = np.linspace(0, 2 * np.pi, nph, endpoint=False)
        eta, weta = _gauss(neta, 0.0, np.pi / 2)
        ze = np.linspace(0, 2 * np.pi, nze, endpoint=False)
        A = np.meshgrid(th, ph, eta, ze, indexing="ij")
        pos = np.stack([A[0].ravel(), A[1].ravel()], axis=1)
        dirs = np.stack([A[2].ravel(), A[3].ravel()], axis=1)
        W = np.meshgrid(wth, np.full(nph, 2 * np.pi / nph), weta,
                        np.full(nze, 2 * np.pi / nze), indexing="ij")
        pw = (W[0] * W[1] * W[2] * W[3]).ravel()
        shape = (nth, nph, neta, nze)
        pos_sp, dir_sp = np.pi / nth, (np.pi / 2) / neta
    x, v = boundary_point(m, pos, dirs, incoming, radius)
    w = pw * boundary_measure_weight(m, pos, dirs, radius)
    return BoundaryGrid(pos, dirs, x, v, w, incoming, radius, pos_sp, dir_sp, shape)


def _line_surface_hit(x, v, surface, radius):
    """First crossing of straight chart lines with a test sphere or plane."""
    if surface[0] == "sphere":
        a = np.einsum("ni,ni->n", v, v)
        b = 2 * np.einsum("ni,ni->n", x, v)
        c = np.einsum("ni,ni->n", x, x) - radius ** 2
        disc = b * b - 4 * a * c
        hit = disc > 0
        t = (-b - np.sqrt(np.where(hit, disc, 0.0))) / (2 * a)
        hit &= t > 0
    else:
        axis, off = surface[1], surface[2]
        vz = v[:, axis]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (off - x[:, axis]) / vz
        hit = (vz > 0) & (t > 0)
        t = np.where(hit, t, 0.0)
    return x + t[:, None] * v, v.copy(), hit


def measure_invariance_check(m, pos, dirs, surface=("sphere", None), h=None):
    """Defect between d(mu) on dM0 and the pull-back of d(mu) on a test surface.

    The incoming boundary point with parameters (pos, dirs) is flowed to
    the first transversal crossing of ``surface``: ``("sphere", r)`` with
    r < R_M0, or ``("plane", axis, offset)`` crossed in the +axis
    direction.  Returns an array of absolute defects, NaN where the
    geodesic misses the surface, starts on its far side, or crosses it
    tangentially.
    """
    n = m.dim
    if h is None:
        # exact crossings allow a small difference step; traced ones do not
        h = 1e-6 if m.metric.is_flat else 1e-4
    pos = np.atleast_2d(np.asarray(pos, dtype=float))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
    p0 = np.concatenate([pos, dirs], axis=1)
    npar = p0.shape[1]
    kind = surface[0]
    if kind == "sphere":
        r = surface[1] if surface[1] is not None else 0.5 * (m.inner_radius + m.outer_radius)
        event = lambda x: r ** 2 - np.einsum("ni,ni->n", x, x)
    elif kind == "plane":
        axis, off = surface[1], surface[2]
        event = lambda x: x[:, axis] - off
    else:
        raise ValueError(f"unknown surface {kind!r}")
    exit_ev = _sphere_event(m.outer_radius * (1 + 1e-9))

    def surf_params(p):
        x, v = boundary_point(m, p[:, : n - 1], p[:, n - 1:], True)
        # step inside so the outer-boundary event does not fire at t = 0
        if m.metric.is_flat:
            xs, vs, hit = _line_surface_hit(x, v, surface, r if kind == "sphere" else None)
            hit &= event(x) <= 0
        else:
            _, xs, vs, which = _march(m, x, v, 1, [event, exit_ev])
            hit = (which == 0) & (event(x) <= 0)
        if kind == "sphere":
            if n == 2:
                q = np.arctan2(xs[:, 1], xs[:, 0])[:, None]
            else:
                rr = np.linalg.norm(xs, axis=1)
                q = np.stack([np.arccos(np.clip(xs[:, 2] / rr, -1, 1)),
                              np.arctan2(xs[:, 1], xs[:, 0])], axis=1)
            tang = _sphere_tangents(q, r)
            cov = -xs  # inward is the crossing direction
        else:
            others = [i for i in range(n) if i != axis]
            q = xs[:, others]
            tang = np.zeros((len(xs), n - 1, n))
            for a, i in enumerate(others):
                tang[:, a, i] = 1.0
            cov = np.zeros_like(xs)
            cov[:, axis] = 1.0
        nu, T, area = surface_frame(m.metric, xs, cov, tang)
        cos_eta = m.metric.inner(xs, vs, nu)
        t1 = m.metric.inner(xs, vs, T[:, 0])
        if n == 2:
            d = np.arctan2(t1, cos_eta)[:, None]
            dens = np.abs(cos_eta) * area
        else:
            t2 = m.metric.inner(xs, vs, T[:, 1])
            d = np.stack([np.arctan2(np.hypot(t1, t2), cos_eta),
                          np.arctan2(t2, t1)], axis=1)
            dens = np.abs(cos_eta) * np.hypot(t1, t2) * area
        return np.concatenate([q, d], axis=1), dens, hit, cos_eta

    q0, dens0, hit0, cos0 = surf_params(p0)
    jac = np.zeros((len(p0), npar, npar))
    for j in range(npar):
        dp = np.zeros_like(p0)
        dp[:, j] = h
        qp, _, hp, _ = surf_params(p0 + dp)
        qm, _, hm, _ = surf_params(p0 - dp)
        diff = qp - qm
        # unwrap periodic angles
        diff = (diff + np.pi) % (2 * np.pi) - np.pi
        jac[:, :, j] = diff / (2 * h)
        hit0 &= hp & hm
    pulled = dens0 * np.abs(np.linalg.det(jac))
    mu = boundary_measure_weight(m, pos, dirs)
    defect = np.abs(pulled - mu)
    bad = ~hit0 | (np.abs(cos0) < 1e-6)
    defect[bad] = np.nan
    return defect


# ---------------------------------------------------------------------------
# Global estimates and simplicity diagnostics
# ---------------------------------------------------------------------------

@dataclass
class GeometryEstimates:
    diam: float
    c0: float
    diam_grid: float
    c0_grid: float
    n_boundary: int
    n_dir: int
    vol_boundary: float

    def as_dict(self):
        return dict(diam=self.diam, c0=self.c0, diam_grid=self.diam_grid,
                    c0_grid=self.c0_grid, n_boundary=self.n_boundary,
                    n_dir=self.n_dir, vol_boundary=self.vol_boundary)


def _sphere_nodes(m, k, radius):
    if m.dim == 2:
        return np.linspace(0, 2 * np.pi, k, endpoint=False)[:, None]
    nth = max(2, k // 2)
    th = np.linspace(0, np.pi, nth + 1)[:-1] + np.pi / (2 * nth)
    ph = np.linspace(0, 2 * np.pi, k, endpoint=False)
    TH, PH = np.meshgrid(th, ph, indexing="ij")
    pos = np.stack([TH.ravel(), PH.ravel()], axis=1)
    return pos


def _inner_fan(m, pts, nd, radius, inward):
    """Phase points on a sphere: grid positions times a fan of directions."""
    n = m.dim
    if n == 2:
        eta = np.linspace(-np.pi / 2, np.pi / 2, nd + 1)
        P, E = np.meshgrid(pts[:, 0], eta, indexing="ij")
        pos, dirs = P.reshape(-1, 1), E.reshape(-1, 1)
    else:
        eta = np.linspace(0, np.pi / 2, max(3, nd // 2) + 1)
        ze = np.linspace(0, 2 * np.pi, nd, endpoint=False)
        A = np.meshgrid(np.arange(len(pts)), eta, ze, indexing="ij")
        pos = pts[A[0].ravel()]
        dirs = np.stack([A[1].ravel(), A[2].ravel()], axis=1)
    return pos, dirs


def estimate_diam_and_c0(m, n_boundary=None, n_dir=None, polish=True):
    """Grid estimates of diam(M) and c0 = min tau over the inner domain.

    Pairs of points of dM are parameterised by the chords joining them,
    so d(x, y) for boundary pairs is the travel time across the inner
    ball; diam is its maximum over a grid of inner-boundary phase points.
    c0 minimises the M0 travel time over inner-boundary points and a fan
    of directions that includes the tangential one.  With ``polish`` both
    are refined by a local optimiser started from the best node.
    """
    n = m.dim
    nb = n_boundary or (48 if n == 2 else 8)
    nd = n_dir or (64 if n == 2 else 8)
    R = m.inner_radius
    pts = _sphere_nodes(m, nb, R)
    pos, dirs = _inner_fan(m, pts, nd, R, True)
    interior = np.abs(dirs[:, 0]) < np.pi / 2 - 1e-9

    def chord_of(pos, dirs):
        x, v = boundary_point(m, pos, dirs, incoming=True, radius=R)
        t, _, _ = exit_state(m, x, v, 1, radius=R)
        return t

    def tau_of(pos, dirs):
        x, v = boundary_point(m, pos, dirs, incoming=False, radius=R)
        tm, tp = travel_times(m, x, v)
        return tm + tp

    chords = chord_of(pos[interior], dirs[interior])
    ibest = int(np.argmax(chords))
    diam_grid = float(chords[ibest])
    tau = tau_of(pos, dirs)
    jbest = int(np.argmin(tau))
    c0_grid = float(tau[jbest])
    diam, c0 = diam_grid, c0_grid
    if polish and not m.metric.is_flat:
        lim = np.pi / 2

        def clip_dirs(z):
            dd = z[n - 1:].copy()
            dd[0] = np.clip(dd[0], -lim if n == 2 else 0.0, lim)
            return dd

        z0 = np.concatenate([pos[interior][ibest], dirs[interior][ibest]])
        res = optimize.minimize(
            lambda z: -float(chord_of(z[None, : n - 1], clip_dirs(z)[None])[0]),
            z0, method="Nelder-Mead",
            options=dict(xatol=1e-7, fatol=1e-10, maxiter=300))
        diam = max(diam_grid, -float(res.fun))
        z0 = np.concatenate([pos[jbest], dirs[jbest]])
        res = optimize.minimize(
            lambda z: float(tau_of(z[None, : n - 1], clip_dirs(z)[None])[0]),
            z0, method="Nelder-Mead",
            options=dict(xatol=1e-7, fatol=1e-10, maxiter=300))
        c0 = min(c0_grid, float(res.fun))
    return GeometryEstimates(diam, c0, diam_grid, c0_grid, len(pts), nd,
                             boundary_volume(m))


@dataclass
class SimplicityReport:
    convex: bool
    min_convexity: float
    no_conjugate_points: bool
    min_jacobi: float
    max_curvature: float
    diam_condition: bool
    warnings: list

    @property
    def ok(self):
        return self.convex and self.no_conjugate_points

    def as_dict(self):
        return dict(convex=self.convex, min_convexity=self.min_convexity,
                    no_conjugate_points=self.no_conjugate_points,
                    min_jacobi=self.min_jacobi, max_curvature=self.max_curvature,
                    diam_condition=self.diam_condition, warnings=list(self.warnings))


def simplicity_diagnostics(m, npos=24, ndir=12, nsamp=64):
    """Sampled checks of strict convexity of dM0 and absence of conjugate points.

    Convexity: geodesics tangent to the boundary must move outward,
    i.e. |v|^2 + x.accel > 0 in chart terms.  Conjugate points: along
    chords from boundary fans, the transverse part of the variation field
    in the launch angle(s) must not vanish.
    """
    n = m.dim
    metric = m.metric
    R0 = m.outer_radius
    pts = _sphere_nodes(m, npos, R0)
    x = sphere_position(pts, R0)
    nu, T, _ = surface_frame(metric, x, x, _sphere_tangents(pts, R0))
    conv = []
    for a in range(n - 1):
        for s in (1.0, -1.0):
            v = s * T[:, a]
            conv.append(np.einsum("ni,ni->n", v, v) + np.einsum("ni,ni->n", x, metric.accel(x, v)))
    min_conv = float(np.min(conv))

    # conjugate points along chords
    if n == 2:
        eta = np.linspace(-1.3, 1.3, ndir)
        P, E = np.meshgrid(pts[:, 0], eta, indexing="ij")
        pos, dirs = P.reshape(-1, 1), E.reshape(-1, 1)
    else:
        eta = np.linspace(0.15, 1.3, max(2, ndir // 3))
        ze = np.linspace(0, 2 * np.pi, ndir, endpoint=False)
        A = np.meshgrid(np.arange(len(pts)), eta, ze, indexing="ij")
        pos = pts[A[0].ravel()]
        dirs = np.stack([A[1].ravel(), A[2].ravel()], axis=1)
    x0, v0 = boundary_point(m, pos, dirs, incoming=True)
    tp, _, _ = exit_state(m, x0, v0)
    hang = 1e-5
    frac = np.linspace(0, 1, nsamp)[1:]
    xs, vs, _ = sample_geodesics(m, x0, v0, 0.0, tp, nsamp)
    fields = []
    for j in range(n - 1):
        dd = dirs.copy()
        dd[:, j] += hang
        xp, vp = boundary_point(m, pos, dd, incoming=True)
        xsp, _, _ = sample_geodesics(m, xp, vp, 0.0, tp, nsamp)
        fields.append((xsp - xs)[:, 1:] / hang)
    vel = vs[:, 1:]
    mats = np.stack([vel] + fields, axis=-1)  # (N, S, n, n)
    dets = np.linalg.det(mats) * np.sign(np.linalg.det(mats[:, :1]))
    scale = frac[None, :] * tp[:, None]
    min_jac = float(np.min(dets / np.maximum(scale, 1e-12) ** (n - 1)))
    warn = []
    kmax = 0.0
    diam_ok = True
    if n == 2:
        g = np.linspace(-m.inner_radius, m.inner_radius, 21)
        G = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
        G = G[np.linalg.norm(G, axis=1) <= m.inner_radius]
        kmax = float(np.max(metric.gaussian_curvature(G)))
        if kmax > 0:
            dm = m.diam
            bound = np.pi / np.sqrt(kmax)
            diam_ok = dm < bound
            if not diam_ok or dm > 0.9 * bound:
                msg = (f"diam(M)={dm:.4g} vs pi/sqrt(kappa)={bound:.4g}: "
                       "2D curvature condition marginal or violated")
                warn.append(msg)
                warnings.warn(msg)
    return SimplicityReport(bool(min_conv > 0), min_conv, bool(min_jac > 0), min_jac, kmax,
                            bool(diam_ok), warn)
