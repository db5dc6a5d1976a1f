"""Command-line entry points.

Subcommands: ``solve`` (one solve + optional VTK), ``study`` (uniform
convergence study to CSV), ``adapt`` (estimator-driven mesh refinement),
``verify`` (the quantitative acceptance suite).  Configuration comes
from flags plus an optional plain ``key = value`` file; flags win.
Outputs are deterministic for fixed inputs.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import adaptive as adp
from . import problems, vtk_io, reconstruct
from .errors import AdaptFVError
from .mesh import generate, read_mesh2d, write_mesh2d


def _load_config_file(path):
    out = {}
    with open(path) as fh:
        for ln in fh:
            ln = ln.split("#", 1)[0].strip()
            if not ln:
                continue
            if "=" not in ln:
                raise ValueError(f"bad config line: {ln!r}")
            key, val = ln.split("=", 1)
            out[key.strip().replace("-", "_")] = val.strip()
    return out


def _build_parser():
    p = argparse.ArgumentParser(prog="adaptfv",
                                description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--problem", default="peak",
                        help="catalog problem (see adaptfv.problems)")
        sp.add_argument("--mesh", default="rect:8",
                        help="generator spec kind:n (tri, rect, lshape-tri, "
                             "lshape-rect) or a mesh2d file path")
        sp.add_argument("--scheme", choices=("tpfa", "hmfe"), default="tpfa")
        sp.add_argument("--linearization", choices=("fixed_point", "newton"),
                        default="newton")
        sp.add_argument("--estimator", default="auto",
                        choices=("auto", "p2", "matrix", "p2sub"))
        sp.add_argument("--collocation", default=None,
                        choices=(None, "circumcenter", "centroid"))
        sp.add_argument("--nl-c", type=float, default=1.0)
        sp.add_argument("--nl-C", type=float, default=10.0)
        sp.add_argument("--ignore-oscillation", action="store_true")
        sp.add_argument("--output", default="out")
        sp.add_argument("--vtk", action="store_true")
        sp.add_argument("--threads", type=int,
                        default=int(os.environ.get("ADAPTFV_THREADS", "1")))
        sp.add_argument("--config", default=None,
                        help="key = value file; flags win")
        sp.add_argument("--gamma-lin", type=float, default=0.1)
        sp.add_argument("--gamma-alg", type=float, default=0.01)
        sp.add_argument("--extra-steps", type=int, default=5)
        sp.add_argument("--delta-ref", type=float, default=0.7)
        sp.add_argument("--delta-deref", type=float, default=0.2)

    ps = sub.add_parser("solve", help="solve once and write results")
    common(ps)
    pt = sub.add_parser("study", help="uniform-refinement convergence study")
    common(pt)
    pt.add_argument("--levels", type=int, default=3)
    pa = sub.add_parser("adapt", help="estimator-driven mesh refinement")
    common(pa)
    pa.add_argument("--levels", type=int, default=6)
    pa.add_argument("--target-estimate", type=float, default=None)
    pv = sub.add_parser("verify", help="run the acceptance suite")
    pv.add_argument("--select", nargs="*", default=None,
                    help="substrings of criterion names to run")
    return p


def _apply_config_file(args):
    if getattr(args, "config", None):
        file_vals = _load_config_file(args.config)
        defaults = _build_parser().parse_args([args.command])
        for key, val in file_vals.items():
            if not hasattr(args, key):
                raise ValueError(f"unknown config key {key!r}")
            cur = getattr(args, key)
            if cur == getattr(defaults, key, None):  # flag not overridden
                typ = type(cur) if cur is not None else str
                setattr(args, key, typ(val) if typ is not bool
                        else val.lower() in ("1", "true", "yes"))
    return args


def _make_mesh(spec):
    if os.path.exists(spec):
        with open(spec) as fh:
            return read_mesh2d(fh.read())
    return generate(spec)


def _make_problem(args):
    name = args.problem
    if name in ("smooth_nonlinear", "lshape_nonlinear"):
        return problems.catalog(name, c=args.nl_c, C=args.nl_C)
    return problems.catalog(name)


def _grid_kind(spec):
    return spec.split(":")[0] if ":" in spec else None


def _level_mesh(spec, level):
    kind, n = spec.split(":")
    return generate(f"{kind}:{int(n) * 2 ** level}")


def cmd_solve(args):
    prob = _make_problem(args)
    mesh = _make_mesh(args.mesh)
    disc = adp.discretize(prob, mesh, args.scheme, collocation=args.collocation,
                          threads=args.threads)
    if prob.is_nonlinear:
        res = adp.solve_nonlinear(disc, linearization=args.linearization)
    else:
        res = adp.solve_linear(disc)
    eta, total = _estimate(disc, res, args)
    _, err = adp.exact_error(disc, res)
    os.makedirs(args.output, exist_ok=True)
    row = adp.StudyRow(0, disc.ndof, mesh.n_cells, err, total)
    with open(os.path.join(args.output, "solve.csv"), "w") as fh:
        fh.write(adp.study_csv([row]))
    with open(os.path.join(args.output, "mesh.m2d"), "w") as fh:
        fh.write(write_mesh2d(mesh))
    if args.vtk:
        _write_vtk(disc, res, eta, os.path.join(args.output, "solution.vtk"))
    print(f"ndof={disc.ndof} error={err:.6e} estimate={total:.6e} "
          f"i_eff={total / err if err > 0 else float('inf'):.4f}")
    return 0


def _estimate(disc, res, args):
    if disc.problem.is_nonlinear:
        from . import scheme as sch
        lin = disc.fv.linearize(res.P, args.linearization)
        snap = sch.exact_algebra_snapshot(disc.fv, lin, 1, res.P)
        bd = adp.estimate_nonlinear_state(
            disc, snap, include_oscillation=not args.ignore_oscillation)
        eta = np.sqrt(bd.eta_sp ** 2 + bd.eta_lin ** 2 + bd.eta_alg ** 2
                      + bd.eta_rem ** 2)
        return eta, bd.total
    osc = None if not args.ignore_oscillation else False
    return adp.estimate_solution(disc, res, args.estimator,
                                 include_oscillation=osc)


def _write_vtk(disc, res, eta, path):
    if hasattr(disc.mesh, "cells"):  # simplicial
        u_h = reconstruct.lift_flux_simplicial(disc.mesh, res.fluxes)
        vtk_io.write_vtk(path, disc.mesh, cell_potential=res.P,
                         flux_fields=u_h, cell_estimator=eta)
    else:
        fields, _ = reconstruct.lift_flux_polytopal(disc.poly, res.fluxes)
        zv = adp.point_values(disc, res.P, res.multipliers)
        vtk_io.write_vtk(path, disc.poly, cell_potential=res.P,
                         flux_fields=fields, point_potential=zv.vertex,
                         cell_estimator=eta)


def cmd_study(args):
    prob = _make_problem(args)
    if _grid_kind(args.mesh) is None:
        raise ValueError("study needs a generator mesh spec like rect:8")
    rows = adp.convergence_study(
        prob, lambda l: _level_mesh(args.mesh, l), args.levels, args.scheme,
        args.estimator, linearization=args.linearization,
        threads=args.threads,
        include_oscillation=False if args.ignore_oscillation else None)
    os.makedirs(args.output, exist_ok=True)
    path = os.path.join(args.output, "study.csv")
    with open(path, "w") as fh:
        fh.write(adp.study_csv(rows))
    print(adp.study_csv(rows), end="")
    return 0


def cmd_adapt(args):
    prob = _make_problem(args)
    mesh = _make_mesh(args.mesh)
    cfg = adp.AdaptiveConfig(gamma_lin=args.gamma_lin, gamma_alg=args.gamma_alg,
                             extra_steps=args.extra_steps,
                             delta_ref=args.delta_ref,
                             delta_deref=args.delta_deref)
    rows, meshes = adp.amr_loop(
        prob, mesh, cfg, args.levels, scheme_name=args.scheme,
        estimator_path=args.estimator if args.estimator != "auto" else "matrix",
        linearization=args.linearization, threads=args.threads,
        include_oscillation=False if args.ignore_oscillation else None,
        target_estimate=args.target_estimate, return_meshes=True)
    os.makedirs(args.output, exist_ok=True)
    with open(os.path.join(args.output, "adapt.csv"), "w") as fh:
        fh.write(adp.study_csv(rows))
    for lvl, m in enumerate(meshes):
        with open(os.path.join(args.output, f"mesh_level{lvl}.m2d"), "w") as fh:
            fh.write(write_mesh2d(m))
    print(adp.study_csv(rows), end="")
    return 0


def cmd_verify(args):
    from . import verify
    failures = verify.run_all(select=args.select)
    return 2 if failures else 0


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        args = _apply_config_file(args)
        handler = {"solve": cmd_solve, "study": cmd_study,
                   "adapt": cmd_adapt, "verify": cmd_verify}[args.command]
        return handler(args)
    except (AdaptFVError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
