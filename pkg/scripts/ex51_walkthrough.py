#!/usr/bin/env python3
"""Diagnose and solve L f = 2y/(1+y^2) on the first ex51 field, then compare with (1+y^2) e^x."""
import argparse
import time

from planar_cohomology.cohomology import diagnose, kernel_invariant_error, solve
from planar_cohomology.flow import Box
from planar_cohomology.registry import registry


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--grid", type=int, default=81)
    ap.add_argument("--kmax", type=int, default=2)
    ap.add_argument("--out", default="ex51_solution.csv")
    args = ap.parse_args()

    spec = registry("ex51:1")
    field, ham, chart = spec.field, spec.hamiltonian(), spec.chart()
    g = "2*y/(1+y^2)"

    v = diagnose(field, chart, ham, g, kmax=args.kmax, operator="xi'")
    print(f"verdict: {v['verdict']}  ({v['detail']})")
    for k, row in enumerate(v["gaps"]):
        cells = [f"{r['s1']}|{r['s2']} {r['outcome']}" + (f" {r['value']:.3e}" if r["value"] is not None else "")
                 for r in row]
        print(f"  k={k}: " + ", ".join(cells))

    t0 = time.perf_counter()
    sol = solve(field, chart, ham, g, grid=Box(-2, 2, -2, 2), nx=args.grid, ny=args.grid, operator="xi'")
    dt = time.perf_counter() - t0
    sol.to_csv(args.out)
    print(f"solved on {args.grid}x{args.grid} in {dt:.1f} s -> {args.out}")
    print(f"  max residual        {sol.max_residual:.2e}")
    print(f"  error modulo kernel {kernel_invariant_error(sol, '(1+y^2)*exp(x)'):.2e}")


if __name__ == "__main__":
    main()
