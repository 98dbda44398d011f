"""Command-line front end.

Exit status: 0 on success, 2 when the input fails validation, 3 when the
answer is negative (a divergent gap, a failed extension, an order below 0
or a failed positivity certificate).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import cohomology as coh
from .expr import DomainError, ParseError, parse
from .flow import Box, FlowError, RegularityError, trace_leaf
from .foliation import ChartError, rectified_interval
from .hamiltonian import DensityError, derive_pair, positivity_certificate, verify_relations
from .registry import FieldSpec, SpecError, load_spec, registry

EXIT_OK, EXIT_INVALID, EXIT_NEGATIVE = 0, 2, 3

VALIDATION_ERRORS = (ParseError, DomainError, SpecError, ChartError, RegularityError, DensityError,
                     FlowError, ValueError, OSError)


def atomic_write(path: str | Path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.resolve().parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def emit(doc: dict, out: str | None) -> None:
    text = json.dumps(doc, indent=2, default=_jsonable) + "\n"
    if out:
        atomic_write(out, text)
    else:
        sys.stdout.write(text)


def load(args) -> FieldSpec:
    if args.spec:
        return load_spec(args.spec)
    return registry(args.model or "ex51:1")


def _box(args, default: Box) -> Box:
    return Box(*args.box) if args.box else default


def _schedule(args) -> coh.Schedule:
    return coh.Schedule(tol=args.tol) if args.tol else coh.Schedule()


def _g(args) -> str:
    g = args.g if args.g is not None else getattr(args, "g_pos", None)
    if g is None:
        raise ValueError("no right-hand side given; pass --g EXPR")
    return g


def cmd_verify(args) -> int:
    spec = load(args)
    dp = derive_pair(spec.field, spec.hamiltonian())
    rep = verify_relations(dp, samples=args.samples, tol=args.tol or 1e-8, box=_box(args, Box(-2, 2, -3, 3)),
                           seed=args.seed)
    emit(rep, args.out)
    return EXIT_OK if all(rep["passed"].values()) else EXIT_INVALID


def cmd_show(args) -> int:
    spec = load(args)
    doc = spec.to_json()
    if args.chart:
        doc["chart"] = spec.chart(seed=args.seed).to_json()
    emit(doc, args.out)
    return EXIT_OK


def cmd_diagnose(args) -> int:
    spec = load(args)
    chart = spec.chart(seed=args.seed)
    v = coh.diagnose(spec.field, chart, spec.hamiltonian(), parse(_g(args)), args.kmax, _schedule(args),
                     args.operator)
    emit(v, args.out)
    return EXIT_NEGATIVE if v["divergent"] or v["order"] < 0 else EXIT_OK


def cmd_gap(args) -> int:
    spec = load(args)
    chart = spec.chart(seed=args.seed)
    r = coh.gap(spec.field, chart, spec.hamiltonian(), parse(_g(args)), args.pair, args.k, _schedule(args),
                args.operator)
    emit(dict(r.to_json(), schema=1), args.out)
    return EXIT_NEGATIVE if r.outcome == coh.Outcome.DIVERGENT else EXIT_OK


def cmd_solve(args) -> int:
    spec = load(args)
    chart = spec.chart(seed=args.seed)
    nx, ny = args.grid
    try:
        sol = coh.solve(spec.field, chart, spec.hamiltonian(), parse(_g(args)), _box(args, Box(-2, 2, -2, 2)),
                        nx, ny, initial=args.initial, operator=args.operator, schedule=_schedule(args))
    except coh.ExtensionError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NEGATIVE
    out = args.out or "solution.csv"
    sol.to_csv(out)
    summary = {"schema": 1, "csv": out, "points": int(sol.f.size), "unreachable": sol.unreachable,
               "max_residual": sol.max_residual, "stitches": sol.stitches, "operator": sol.operator}
    print(json.dumps(summary, indent=2, default=_jsonable))
    return EXIT_OK


def cmd_order(args) -> int:
    spec = load(args)
    chart = spec.chart(seed=args.seed)
    ham = spec.hamiltonian()
    if not chart.pairs:
        raise ValueError("the chart has no adjacent pairs, hence no separating intervals")
    pr = chart.pairs[args.interval]
    interval = rectified_interval(chart, pr, ham)
    if args.ghat is None:
        raise ValueError("pass the rectified right-hand side with --ghat EXPR (x, y read as x', y')")
    rep = coh.estimate_order(parse(args.ghat), interval, args.rmax, args.eps, _schedule(args))
    emit(dict(rep.to_json(), pair=pr.index), args.out)
    return EXIT_NEGATIVE if rep.order < 0 else EXIT_OK


def cmd_trace(args) -> int:
    spec = load(args)
    chart = spec.chart(seed=args.seed, check_coverage=False)
    poly = trace_leaf(spec.field, tuple(args.point), _box(args, spec.box), length=args.length,
                      spacing=args.spacing, tol=args.tol or 1e-11, transversals=chart.transversals)
    lines = ["t,x,y"] + [f"{t!r},{x!r},{y!r}" for t, x, y in poly.tolist()]
    text = "\n".join(lines) + "\n"
    if args.out:
        atomic_write(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_positivity(args) -> int:
    spec = load(args)
    chart = spec.chart(seed=args.seed)
    rng = np.random.default_rng(args.seed)
    box = _box(args, spec.box)
    pts = np.column_stack([rng.uniform(box.xmin, box.xmax, args.points), rng.uniform(box.ymin, box.ymax, args.points)])
    cert = positivity_certificate(chart, spec.field, depth=args.depth, points=pts)
    ok = cert.covered.sum() > 0 and cert.min_Lf > 0
    emit({"schema": 1, "depth": args.depth, "points": args.points, "covered": int(cert.covered.sum()),
          "min_Lf": cert.min_Lf, "positive": bool(ok), "box": box.as_list(), "seed": args.seed}, args.out)
    return EXIT_OK if ok else EXIT_NEGATIVE


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="planar-cohomology",
                                description="Solvability and solutions of L_xi f = g for regular planar fields.")
    common = argparse.ArgumentParser(add_help=False)
    src = common.add_mutually_exclusive_group()
    src.add_argument("--model", help="built-in model: ex51:n, ex52:n or const (default ex51:1)")
    src.add_argument("--spec", type=Path, help="JSON field specification")
    common.add_argument("--box", type=float, nargs=4, metavar=("XMIN", "XMAX", "YMIN", "YMAX"))
    common.add_argument("--tol", type=float, default=None, help="integration / relation tolerance")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", help="output file (JSON or CSV); stdout when omitted")
    common.add_argument("--operator", choices=("xi", "xi'"), default="xi",
                        help="solve along the field itself (xi) or along xi'_F, for which L G = 1")

    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("verify", parents=[common], help="check the commuting-pair identities")
    s.add_argument("--samples", type=int, default=10000)
    s.set_defaults(run=cmd_verify)

    s = sub.add_parser("show", parents=[common], help="print the field specification")
    s.add_argument("--chart", action="store_true", help="also build and print the foliation chart")
    s.set_defaults(run=cmd_show)

    for name, fn, helptext in (("diagnose", cmd_diagnose, "gap table and solvability verdict"),
                               ("gap", cmd_gap, "a single gap"),
                               ("solve", cmd_solve, "solve on a grid and write x,y,f,residual CSV")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("g_pos", nargs="?", metavar="G", help="right-hand side (same as --g)")
        s.add_argument("--g", help="right-hand side expression in x, y")
        s.set_defaults(run=fn)
        if name == "diagnose":
            s.add_argument("--kmax", type=int, default=4)
        elif name == "gap":
            s.add_argument("--pair", type=int, default=0)
            s.add_argument("--k", type=int, default=0)
        else:
            s.add_argument("--grid", type=int, nargs=2, default=(81, 81), metavar=("NX", "NY"))
            s.add_argument("--initial", help="data on every transversal (default 0)")

    s = sub.add_parser("order", parents=[common], help="germ order ladder at a separating interval")
    s.add_argument("--ghat", help="rectified right-hand side, in x, y standing for x', y'")
    s.add_argument("--interval", type=int, default=0, help="index of the adjacent pair")
    s.add_argument("--rmax", type=int, default=3)
    s.add_argument("--eps", type=float, default=0.5)
    s.set_defaults(run=cmd_order)

    s = sub.add_parser("trace", parents=[common], help="polyline of the leaf through a point")
    s.add_argument("--point", type=float, nargs=2, required=True, metavar=("X", "Y"))
    s.add_argument("--length", type=float, default=50.0)
    s.add_argument("--spacing", type=float, default=0.05)
    s.set_defaults(run=cmd_trace)

    s = sub.add_parser("positivity", parents=[common], help="sample the transversally Hamiltonian certificate")
    s.add_argument("--depth", type=int, default=8)
    s.add_argument("--points", type=int, default=1500)
    s.set_defaults(run=cmd_positivity)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.run(args)
    except VALIDATION_ERRORS as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
