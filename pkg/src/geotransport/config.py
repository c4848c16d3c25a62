"""Run configuration: TOML documents and scalar field expressions.

Field expressions are small arithmetic formulas over x1..xn, v1..vn and
vp1..vpn (the incoming direction of a scattering kernel), with + - * /,
unary minus, exp, sin, cos, sqrt and gaussian(center..., width).
"""

import copy
import math
import os
import re
import sys
from dataclasses import dataclass

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from . import geometry as geo
from . import transport as tr


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists (location, message) pairs."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(f"{loc}: {msg}" for loc, msg in self.errors))


class ExprError(ValueError):
    def __init__(self, message, position):
        self.position = position
        super().__init__(f"{message} at position {position}")


# ---------------------------------------------------------------------------
# Expressions
# ---------------------------------------------------------------------------

FUNCTIONS = {"exp": (1, np.exp), "sin": (1, np.sin), "cos": (1, np.cos), "sqrt": (1, np.sqrt)}
CONSTANTS = {"pi": math.pi}
ROLE_VARS = {"metric": ("x",), "a": ("x", "v"), "k": ("x", "v", "vp"), "field": ("x",)}

_TOKEN = re.compile(r"\s*(?:(\d+\.\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?|\d+(?:[eE][+-]?\d+)?)"
                    r"|([A-Za-z_][A-Za-z_0-9]*)|(.))")


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Unary:
    op: str
    arg: object


@dataclass(frozen=True)
class Binary:
    op: str
    left: object
    right: object


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple


def _tokenize(src):
    toks = []
    pos = 0
    while pos < len(src):
        if src[pos:].strip() == "":
            break
        mt = _TOKEN.match(src, pos)
        start = mt.start(1) if mt.group(1) else mt.start(2) if mt.group(2) else mt.start(3)
        if mt.group(1):
            toks.append(("num", mt.group(1), start))
        elif mt.group(2):
            toks.append(("name", mt.group(2), start))
        else:
            ch = mt.group(3)
            if ch not in "+-*/(),":
                raise ExprError(f"unexpected character {ch!r}", start)
            toks.append(("op", ch, start))
        pos = mt.end()
    toks.append(("end", "", len(src)))
    return toks


class _Parser:
    def __init__(self, src):
        self.toks = _tokenize(src)
        self.i = 0

    def peek(self):
        return self.toks[self.i]

    def take(self, kind=None, value=None):
        t = self.toks[self.i]
        if (kind and t[0] != kind) or (value is not None and t[1] != value):
            want = value or kind
            got = "end of input" if t[0] == "end" else repr(t[1])
            raise ExprError(f"expected {want!r}, found {got}", t[2])
        self.i += 1
        return t

    def parse(self):
        e = self.expr()
        t = self.peek()
        if t[0] != "end":
            raise ExprError(f"unexpected {t[1]!r}", t[2])
        return e

    def expr(self):
        e = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            e = Binary(op, e, self.term())
        return e

    def term(self):
        e = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            e = Binary(op, e, self.unary())
        return e

    def unary(self):
        t = self.peek()
        if t[0] == "op" and t[1] in ("+", "-"):
            self.take()
            arg = self.unary()
            return arg if t[1] == "+" else Unary("-", arg)
        return self.atom()

    def atom(self):
        t = self.peek()
        if t[0] == "num":
            self.take()
            return Num(float(t[1]))
        if t[0] == "name":
            self.take()
            if self.peek()[1] == "(" and self.peek()[0] == "op":
                self.take()
                args = []
                if self.peek()[1] != ")":
                    args.append(self.expr())
                    while self.peek()[1] == ",":
                        self.take()
                        args.append(self.expr())
                self.take("op", ")")
                if t[1] != "gaussian" and t[1] not in FUNCTIONS:
                    raise ExprError(f"unknown function {t[1]!r}", t[2])
                if t[1] in FUNCTIONS and len(args) != FUNCTIONS[t[1]][0]:
                    raise ExprError(f"{t[1]} takes {FUNCTIONS[t[1]][0]} argument(s)", t[2])
                if t[1] == "gaussian" and len(args) < 2:
                    raise ExprError("gaussian takes (center..., width)", t[2])
                return Call(t[1], tuple(args))
            if t[1] in CONSTANTS:
                return Num(CONSTANTS[t[1]])
            return Var(t[1])
        if t[0] == "op" and t[1] == "(":
            self.take()
            e = self.expr()
            self.take("op", ")")
            return e
        got = "end of input" if t[0] == "end" else repr(t[1])
        raise ExprError(f"unexpected {got}", t[2])


_VAR = re.compile(r"^(x|v|vp)([1-9])$")


def _free_vars(node, acc):
    if isinstance(node, Var):
        acc.add(node.name)
    elif isinstance(node, Unary):
        _free_vars(node.arg, acc)
    elif isinstance(node, Binary):
        _free_vars(node.left, acc)
        _free_vars(node.right, acc)
    elif isinstance(node, Call):
        for a in node.args:
            _free_vars(a, acc)
    return acc


def to_text(node):
    """Fully parenthesised text that parses back to the same tree."""
    if isinstance(node, Num):
        return repr(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Unary):
        return f"(-{to_text(node.arg)})"
    if isinstance(node, Binary):
        return f"({to_text(node.left)} {node.op} {to_text(node.right)})"
    return f"{node.name}({', '.join(to_text(a) for a in node.args)})"


class FieldExpr:
    """Parsed scalar expression with role-checked variables."""

    def __init__(self, src, role="a", dim=2):
        if role not in ROLE_VARS:
            raise ValueError(f"unknown role {role!r}")
        self.src = src
        self.role = role
        self.dim = dim
        self.tree = _Parser(src).parse()
        allowed = ROLE_VARS[role]
        for name in sorted(_free_vars(self.tree, set())):
            mt = _VAR.match(name)
            if not mt:
                raise ExprError(f"unknown variable {name!r}", src.find(name))
            if mt.group(1) not in allowed:
                raise ExprError(f"variable {name!r} is not allowed in role {role!r}",
                                src.find(name))
            if int(mt.group(2)) > dim:
                raise ExprError(f"variable {name!r} exceeds dimension {dim}", src.find(name))
        self._check_gaussian(self.tree)

    def _check_gaussian(self, node):
        if isinstance(node, Call):
            if node.name == "gaussian" and len(node.args) not in (2, self.dim + 1):
                raise ExprError(f"gaussian takes 2 or {self.dim + 1} arguments", 0)
            for a in node.args:
                self._check_gaussian(a)
        elif isinstance(node, Unary):
            self._check_gaussian(node.arg)
        elif isinstance(node, Binary):
            self._check_gaussian(node.left)
            self._check_gaussian(node.right)

    def __str__(self):
        return to_text(self.tree)

    def __eq__(self, other):
        return isinstance(other, FieldExpr) and self.tree == other.tree

    def evaluate(self, x, v=None, vp=None):
        x = np.atleast_2d(np.asarray(x, float))
        env = {"x": x, "v": None if v is None else np.atleast_2d(v),
               "vp": None if vp is None else np.atleast_2d(vp)}
        out = self._eval(self.tree, env)
        return np.broadcast_to(out, (len(x),)).astype(float)

    __call__ = evaluate

    def _eval(self, node, env):
        if isinstance(node, Num):
            return node.value
        if isinstance(node, Var):
            mt = _VAR.match(node.name)
            return env[mt.group(1)][:, int(mt.group(2)) - 1]
        if isinstance(node, Unary):
            return -self._eval(node.arg, env)
        if isinstance(node, Binary):
            a, b = self._eval(node.left, env), self._eval(node.right, env)
            return {"+": np.add, "-": np.subtract, "*": np.multiply, "/": np.divide}[node.op](a, b)
        args = [self._eval(a, env) for a in node.args]
        if node.name == "gaussian":
            w = args[-1]
            c = args[:-1]
            x = env["x"]
            c = c * x.shape[1] if len(c) == 1 else c
            r2 = sum((x[:, i] - c[i]) ** 2 for i in range(x.shape[1]))
            return np.exp(-r2 / (w * w))
        return FUNCTIONS[node.name][1](args[0])


def parse_field_expr(src, role="a", dim=2):
    return FieldExpr(src, role, dim)


# ---------------------------------------------------------------------------
# Config schema
# ---------------------------------------------------------------------------

DEFAULTS = {
    "geometry": {"dim": 2, "metric": "euclidean", "R_M": 1.0, "R_M0": 1.2, "step": 0.01},
    "grids": {"boundary": 128, "direction": 32, "spacing": 0.0, "ndir": 0, "path_step": 0.0,
              "nt": 60, "nw": 0, "beam_eps": 0.1},
    "experiment": {"mode": "n2", "deltas": [0.01, 0.02, 0.05], "nsamples": 32,
                   "tolerance": 5e-3, "refine": True, "screen": 4},
    "output": {"dir": "out"},
}

SCHEMA = {
    "geometry": {"dim", "metric", "R_M", "R_M0", "step", "value", "amplitude", "width",
                 "expr"},
    "coefficients": {"a", "k", "Sigma", "rho", "name"},
    "coefficients_tilde": {"a", "k", "Sigma", "rho", "name"},
    "perturbation": {"da", "dk"},
    "gauge": {"type", "strength", "center", "width", "radius"},
    "forward": {"u_minus", "beam_eps", "beam_index"},
    "grids": set(DEFAULTS["grids"]),
    "experiment": {"mode", "deltas", "nsamples", "tolerance", "refine", "screen", "seed"},
    "output": {"dir"},
}
POSITIVE = {("geometry", "R_M"), ("geometry", "R_M0"), ("geometry", "step"),
            ("grids", "boundary"), ("grids", "direction"), ("grids", "nt"),
            ("grids", "beam_eps"), ("experiment", "nsamples"), ("experiment", "tolerance")}
NONNEGATIVE = {("grids", "spacing"), ("grids", "ndir"), ("grids", "path_step"), ("grids", "nw"),
               ("experiment", "screen")}
METRICS = {"euclidean", "constant_conformal", "conformal_bump", "anisotropic_bump",
           "conformal_expr"}


def _locate(text, section, key):
    """'line N' of ``key`` inside ``[section]`` (best effort)."""
    cur = None
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        mt = re.match(r"^\[([^\]]+)\]", s)
        if mt:
            cur = mt.group(1).strip()
            if key is None and cur == section:
                return f"line {i}"
            continue
        if cur == section and re.match(rf"^{re.escape(str(key))}\s*=", s):
            return f"line {i}"
    return "(default)"


@dataclass
class RunConfig:
    """Validated configuration with defaults filled in."""

    data: dict
    text: str = ""
    base_dir: str = ""

    def __getitem__(self, k):
        return self.data[k]

    def get(self, k, default=None):
        return self.data.get(k, default)

    def dumps(self):
        return tomli_w.dumps(self.data)

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.data == other.data

    # builders -------------------------------------------------------------
    @property
    def dim(self):
        return int(self.data["geometry"]["dim"])

    def manifold(self, grid_scale=1.0):
        g = self.data["geometry"]
        metric = metric_from_config(g)
        return geo.Manifold(metric, g["R_M"], g["R_M0"], step=g["step"] / max(grid_scale, 1.0))

    def solver_grid_kw(self, grid_scale=1.0):
        """PhaseGrid keywords; zero entries fall back to the solver defaults."""
        gr = self.data["grids"]
        kw = {}
        if gr["spacing"] > 0:
            kw["spacing"] = gr["spacing"] / grid_scale
        if gr["path_step"] > 0:
            kw["path_step"] = gr["path_step"] / grid_scale
        if gr["ndir"] > 0:
            q = max(2, int(round(gr["ndir"] * grid_scale)))
            kw["ndir"] = q if self.dim == 2 else (max(2, q // 2), q)
        elif grid_scale != 1.0:
            base = 64 if self.dim == 2 else 12
            q = max(4, int(round(base * grid_scale)))
            kw["ndir"] = q if self.dim == 2 else (max(2, q // 2), q)
        if grid_scale != 1.0 and "spacing" not in kw:
            m = self.manifold()
            kw["spacing"] = m.inner_radius / (18 if self.dim == 2 else 6) / grid_scale
        return kw

    def chart_sizes(self, grid_scale=1.0):
        gr = self.data["grids"]
        nt = max(8, int(round(gr["nt"] * grid_scale)))
        nw = None
        if gr["nw"] > 0:
            q = max(4, int(round(gr["nw"] * grid_scale)))
            nw = q if self.dim == 2 else (max(2, q // 2), q)
        return nt, nw

    def out_grid(self, m, grid_scale=1.0):
        gr = self.data["grids"]
        return geo.make_boundary_grid(m, max(4, int(round(gr["boundary"] * grid_scale))),
                                      max(2, int(round(gr["direction"] * grid_scale))),
                                      incoming=False)

    def experiment(self, grid_scale=1.0, seed=None):
        """Resolved stability experiment for the delta sweep."""
        from .stability import ExperimentConfig
        if "perturbation" not in self.data:
            raise ConfigError([("[perturbation]", "the stability sweep needs da and/or dk")])
        m = self.manifold(grid_scale)
        base = self.pair("coefficients", m)
        pt = self.data["perturbation"]
        da = build_attenuation(pt["da"], self.dim, m, self.base_dir) if "da" in pt else None
        dk = build_kernel(pt["dk"], self.dim, self.base_dir) if "dk" in pt else None
        ex = self.data["experiment"]
        co = self.data["coefficients"]
        nt, nw = self.chart_sizes(grid_scale)
        return ExperimentConfig(
            manifold=m, baseline=base, perturbation=(da, dk), deltas=list(ex["deltas"]),
            mode=ex["mode"], Sigma=co.get("Sigma", 0.5), rho=co.get("rho", 0.2),
            nsamples=int(ex["nsamples"]), nt=nt, nw=nw, beam_eps=self.data["grids"]["beam_eps"],
            grid_kw=self.solver_grid_kw(grid_scale), refine=bool(ex["refine"]),
            screen=int(ex["screen"]),
            seed=ex.get("seed") if seed is None else seed, spec=self.data)

    def pair(self, section="coefficients", m=None):
        if section not in self.data:
            raise ConfigError([(f"[{section}]", "section is required")])
        sec = self.data[section]
        m = m or self.manifold()
        a = build_attenuation(sec["a"], self.dim, m, self.base_dir)
        k = build_kernel(sec.get("k", {"family": "zero"}), self.dim, self.base_dir)
        return tr.CoefficientPair(a, k, sec.get("name", section))


def csv_grid_field(path, radius=1.0):
    """Spatial field from a regular-grid CSV with columns x1..xn, value.

    Rows may come in any order; the grid is the product of the distinct
    coordinate values.  Linear interpolation, smoothly cut off at ``radius``.
    """
    from scipy.interpolate import RegularGridInterpolator
    raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    n = raw.shape[1] - 1
    axes = [np.unique(raw[:, i]) for i in range(n)]
    vals = np.full([len(a) for a in axes], np.nan)
    idx = tuple(np.searchsorted(axes[i], raw[:, i]) for i in range(n))
    vals[idx] = raw[:, -1]
    if np.isnan(vals).any():
        raise ValueError(f"{path}: values do not fill a regular grid")
    interp = RegularGridInterpolator(axes, vals, bounds_error=False, fill_value=0.0)
    return tr.FunctionField(lambda x: interp(x) * tr.smooth_cutoff(x, radius), radius,
                            label=f"csv:{os.path.basename(path)}")


def _field(spec, dim, base_dir=""):
    t = spec.get("type", "bump")
    if t == "csv":
        return csv_grid_field(os.path.join(base_dir, spec["path"]), spec.get("radius", 1.0))
    if t == "bump":
        return tr.Bump(spec["amplitude"], spec.get("center"), spec.get("width", 0.4),
                       spec.get("radius", 1.0), dim)
    if t == "plateau":
        return tr.Plateau(spec["value"], spec.get("radius", 1.0))
    if t == "constant":
        return tr.ConstantField(spec["value"], spec.get("radius", np.inf))
    if t == "sum":
        return tr.FieldSum([_field(f, dim, base_dir) for f in spec["fields"]], spec.get("coefs"))
    if t == "expr":
        fe = FieldExpr(spec["expr"], "field", dim)
        R = spec.get("radius", 1.0)
        return tr.FunctionField(lambda x: fe(x) * tr.smooth_cutoff(x, R), R, label=spec["expr"])
    raise ValueError(f"unknown field type {t!r}")


def build_attenuation(spec, dim, m=None, base_dir=""):
    if isinstance(spec, str):
        spec = {"expr": spec}
    if "expr" in spec:
        fe = FieldExpr(spec["expr"], "a", dim)
        R = spec.get("support_radius", 1.0)
        return tr.FunctionAttenuation(lambda x, v: fe(x, tr._unit(v)) * tr.smooth_cutoff(x, R), R,
                                      label=spec["expr"])
    fam = spec.get("family", "isotropic")
    f = _field(spec["field"], dim, base_dir)
    if fam == "isotropic":
        return tr.IsotropicAttenuation(f)
    if fam == "directional":
        return tr.DirectionalAttenuation(f, spec.get("beta", 0.3), spec.get("e", [1.0] + [0.0] * (dim - 1)))
    raise ValueError(f"unknown attenuation family {fam!r}")


def build_kernel(spec, dim, base_dir=""):
    if isinstance(spec, str):
        spec = {"expr": spec}
    if "expr" in spec:
        fe = FieldExpr(spec["expr"], "k", dim)
        R = spec.get("support_radius", 1.0)
        return tr.FunctionKernel(lambda x, vp, v: fe(x, tr._unit(v), tr._unit(vp))
                                 * tr.smooth_cutoff(x, R), R, label=spec["expr"])
    fam = spec.get("family", "isotropic")
    if fam == "zero":
        return tr.ZeroKernel()
    f = _field(spec["field"], dim, base_dir)
    if fam == "isotropic":
        return tr.IsotropicKernel(f, dim)
    if fam in ("hg", "henyey_greenstein"):
        return tr.HenyeyGreensteinKernel(f, spec.get("g", 0.3), dim)
    raise ValueError(f"unknown kernel family {fam!r}")


def metric_from_config(g):
    dim = int(g["dim"])
    kind = g.get("metric", "euclidean")
    if kind == "euclidean":
        return geo.euclidean(dim)
    if kind == "constant_conformal":
        return geo.constant_conformal(g.get("value", 1.0), dim)
    if kind == "conformal_bump":
        return geo.conformal_bump(g.get("amplitude", 0.3), g.get("width", 1.0), dim)
    if kind == "anisotropic_bump":
        return geo.anisotropic_bump(g.get("amplitude", 0.2), g.get("width", 1.0), dim)
    if kind == "conformal_expr":
        fe = FieldExpr(g["expr"], "metric", dim)

        def grad(x, h=1e-6):
            out = np.zeros_like(x)
            for i in range(dim):
                e = np.zeros(dim)
                e[i] = h
                out[:, i] = (fe(x + e) - fe(x - e)) / (2 * h)
            return out
        return geo.Metric(dim, "conformal", c=lambda x: fe(x), grad_c=grad,
                          spec={"kind": "conformal_expr", "expr": g["expr"]})
    raise ValueError(f"unknown metric {kind!r}")


def _validate(data, text):
    errors = []
    for sec, body in data.items():
        if sec not in SCHEMA:
            errors.append((_locate(text, sec, None), f"unknown section [{sec}]"))
            continue
        if not isinstance(body, dict):
            errors.append((_locate(text, sec, None), f"[{sec}] must be a table"))
            continue
        for key in body:
            if key not in SCHEMA[sec]:
                errors.append((_locate(text, sec, key), f"unknown key {sec}.{key}"))
    for sec, key in POSITIVE:
        val = data.get(sec, {}).get(key)
        if val is not None and not (isinstance(val, (int, float)) and val > 0):
            errors.append((_locate(text, sec, key), f"{sec}.{key} must be positive"))
    for sec, key in NONNEGATIVE:
        val = data.get(sec, {}).get(key)
        if val is not None and not (isinstance(val, (int, float)) and val >= 0):
            errors.append((_locate(text, sec, key), f"{sec}.{key} must be nonnegative"))
    g = data.get("geometry", {})
    if g.get("dim") not in (2, 3):
        errors.append((_locate(text, "geometry", "dim"), "geometry.dim must be 2 or 3"))
    if g.get("metric") not in METRICS:
        errors.append((_locate(text, "geometry", "metric"), f"unknown metric {g.get('metric')!r}"))
    if isinstance(g.get("R_M"), (int, float)) and isinstance(g.get("R_M0"), (int, float)):
        if g["R_M0"] <= g["R_M"]:
            errors.append((_locate(text, "geometry", "R_M0"), "geometry.R_M0 must exceed R_M"))
    ex = data.get("experiment", {})
    if ex.get("mode") not in ("n2", "n3"):
        errors.append((_locate(text, "experiment", "mode"), "experiment.mode must be n2 or n3"))
    d = ex.get("deltas", [])
    if not isinstance(d, list) or any(not isinstance(x, (int, float)) or x < 0 for x in d) \
            or list(d) != sorted(d):
        errors.append((_locate(text, "experiment", "deltas"),
                       "experiment.deltas must be a sorted list of nonnegative numbers"))
    dim = g.get("dim", 2) if g.get("dim") in (2, 3) else 2
    for sec in ("coefficients", "coefficients_tilde"):
        if sec in data:
            for key, role in (("a", "a"), ("k", "k")):
                spec = data[sec].get(key)
                src = spec if isinstance(spec, str) else spec.get("expr") if isinstance(spec, dict) else None
                if src is not None:
                    try:
                        FieldExpr(src, role, dim)
                    except ExprError as exc:
                        errors.append((_locate(text, sec, key), f"{sec}.{key}: {exc}"))
    if g.get("metric") == "conformal_expr":
        try:
            FieldExpr(g.get("expr", ""), "metric", dim)
        except ExprError as exc:
            errors.append((_locate(text, "geometry", "expr"), f"geometry.expr: {exc}"))
    if errors:
        raise ConfigError(errors)


def parse_config(text, base_dir=""):
    """Parse and validate a TOML run configuration; defaults are filled in."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([("syntax", str(exc))]) from None
    data = copy.deepcopy(DEFAULTS)
    for sec, body in raw.items():
        if isinstance(body, dict) and isinstance(data.get(sec), dict):
            data[sec].update(body)
        else:
            data[sec] = body
    _validate(data, text)
    return RunConfig(data, text, base_dir)


def load_config(path):
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read(), os.path.dirname(os.path.abspath(path)))
