"""Command line entry point: ``geotransport <subcommand> --config run.toml``.

Every subcommand writes a JSON summary into the output directory and
prints its path.  Failures print a JSON error object on stderr and exit
with a nonzero status (2 for configuration errors, 1 otherwise).
"""

import os

# Worker cap must be set before numpy loads its BLAS.
_threads = os.environ.get("GEOTRANSPORT_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS"):
        os.environ[_var] = _threads

import argparse
import json
import sys
import time

import numpy as np

from . import albedo as al
from . import gauge as ga
from . import geometry as geo
from . import stability as st
from . import transport as tr
from .config import ConfigError, ExprError, FieldExpr, load_config

SUBCOMMANDS = ("geometry-diag", "forward", "albedo-norm", "gauge-check", "stability")


def _u64(text):
    val = int(text, 0)
    if not 0 <= val < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return val


def _positive(text):
    val = float(text)
    if not val > 0:
        raise argparse.ArgumentTypeError("grid scale must be positive")
    return val


def build_parser():
    p = argparse.ArgumentParser(prog="geotransport",
                                description="Transport albedo experiments on simple manifolds")
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="TOML run configuration")
        s.add_argument("--out", help="output directory (default: [output].dir)")
        s.add_argument("--seed", type=_u64, help="seed for random boundary sampling")
        s.add_argument("--grid-scale", type=_positive, default=1.0,
                       help="multiply grid resolutions by this factor")
    return p


def _write(outdir, name, payload):
    os.makedirs(outdir, exist_ok=True)
    path = os.path.join(outdir, name)
    with open(path, "w") as f:
        json.dump(st._jsonable(payload), f, indent=2, sort_keys=True)
    return path


def _rng(seed):
    return np.random.default_rng(seed) if seed is not None else None


def cmd_geometry_diag(rc, args):
    m = rc.manifold(args.grid_scale)
    est = m.estimates()
    simp = geo.simplicity_diagnostics(m)
    rng = _rng(args.seed)
    x, v = al.sample_incoming(m, 32, m.inner_radius, rng)
    pos, dirs, _ = geo.boundary_params(m, x, v)
    defect = geo.measure_invariance_check(m, pos, dirs, ("sphere", m.inner_radius))
    ok = simp.ok
    print(f"diam = {est.diam:.10g}  c0 = {est.c0:.10g}  simple = {ok}")
    return {"estimates": est.as_dict(), "simplicity": simp.as_dict(),
            "invariance_defect_max": float(np.nanmax(defect)),
            "ok": ok}, "geometry.json", ok


def _u_minus(rc, m):
    fw = rc.get("forward", {})
    spec = fw.get("u_minus", "1")
    if spec == "beam":
        x, v = al.sample_incoming(m, max(1, int(fw.get("beam_index", 0)) + 1))
        i = int(fw.get("beam_index", 0))
        return al.beam_source(m, x[i], v[i], fw.get("beam_eps", rc["grids"]["beam_eps"]),
                              profile="smooth")
    fe = FieldExpr(spec, "a", rc.dim)
    return lambda x, v: fe(x, v)


def cmd_forward(rc, args):
    m = rc.manifold(args.grid_scale)
    pair = rc.pair("coefficients", m)
    out = rc.out_grid(m, args.grid_scale)
    solver = tr.make_solver(m, pair, out_grid=out, **rc.solver_grid_kw(args.grid_scale))
    sol = solver.solve(_u_minus(rc, m))
    parts = sol.outgoing()
    w = out.weight
    norms = {k: float(np.sum(np.abs(val[:, 0]) * w)) for k, val in parts.items()}
    res = {"series_terms": sol.series_terms, "converged": bool(sol.converged),
           "term_norms": sol.term_norms, "ratios": sol.ratios,
           "sup_tau_k": float(solver.q), "margin": float(solver.margin),
           "outgoing_L1": norms, "grid": {"nx": solver.grid.nx, "nq": solver.grid.nq}}
    return res, "forward.json", bool(sol.converged)


def _eps(rc, m, a, b, args):
    nt, nw = rc.chart_sizes(args.grid_scale)
    return al.opnorm_L1(m, a, b, nsamples=int(rc["experiment"]["nsamples"]), nt=nt, nw=nw,
                        beam_eps=rc["grids"]["beam_eps"],
                        grid_kw=rc.solver_grid_kw(args.grid_scale), rng=_rng(args.seed))


def cmd_albedo_norm(rc, args):
    m = rc.manifold(args.grid_scale)
    a = rc.pair("coefficients", m)
    b = rc.pair("coefficients_tilde", m)
    r = _eps(rc, m, a, b, args)
    return {"opnorm": r.as_dict()}, "albedo_norm.json", True


def cmd_gauge_check(rc, args):
    m = rc.manifold(args.grid_scale)
    pair = rc.pair("coefficients", m)
    g = rc.get("gauge", {"type": "polynomial", "strength": [0.1, 0.3, 0.6]})
    if g.get("type", "polynomial") != "polynomial":
        raise ConfigError([("[gauge]", "gauge-check supports type = 'polynomial'")])
    strengths = g.get("strength", [0.1, 0.3, 0.6])
    strengths = strengths if isinstance(strengths, list) else [strengths]
    tol = float(rc["experiment"]["tolerance"])
    rows = []
    for s in strengths:
        gauge = ga.make_polynomial_gauge(s, g.get("center"), g.get("width", 0.4),
                                         g.get("radius", m.inner_radius), m.dim)
        image = ga.apply_gauge(m, pair, gauge, name=f"gauge {s:g}")
        r = _eps(rc, m, pair, image, args)
        rows.append({"strength": s, "epsilon": r.epsilon, "pass": bool(r.epsilon <= tol)})
        print(f"strength {s:g}: opnorm = {r.epsilon:.3e} (tolerance {tol:g})")
    ok = all(r["pass"] for r in rows)
    return {"tolerance": tol, "rows": rows, "ok": ok}, "gauge_check.json", ok


def cmd_stability(rc, args, outdir):
    cfg = rc.experiment(args.grid_scale, args.seed)
    report = st.run_stability_experiment(cfg)
    jp, cp = st.write_report(report, outdir)
    print(cp)
    return jp, report.all_pass


def run(argv=None):
    args = build_parser().parse_args(argv)
    rc = load_config(args.config)
    outdir = args.out or rc["output"]["dir"]
    t0 = time.time()
    if args.command == "stability":
        path, ok = cmd_stability(rc, args, outdir)
    else:
        fn = {"geometry-diag": cmd_geometry_diag, "forward": cmd_forward,
              "albedo-norm": cmd_albedo_norm, "gauge-check": cmd_gauge_check}[args.command]
        payload, name, ok = fn(rc, args)
        payload.update(command=args.command, seconds=time.time() - t0, config=rc.data,
                       seed=args.seed, grid_scale=args.grid_scale,
                       schema_version=st.SCHEMA_VERSION)
        path = _write(outdir, name, payload)
    print(path)
    return 0 if ok else 3


def main(argv=None):
    try:
        return run(argv)
    except (ConfigError, ExprError, geo.GeometryError) as exc:
        code, kind = 2, type(exc).__name__
        err = {"error": kind, "message": str(exc)}
        if isinstance(exc, ConfigError):
            err["details"] = [{"location": loc, "message": msg} for loc, msg in exc.errors]
    except OSError as exc:
        code, err = 2, {"error": type(exc).__name__, "message": str(exc)}
    except Exception as exc:  # noqa: BLE001 - reported as JSON
        code, err = 1, {"error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(err), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
