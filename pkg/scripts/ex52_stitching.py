#!/usr/bin/env python3
"""Solve on ex52 across the separatrices y = 0 and y = pi and show the stitch constants."""
import math

from planar_cohomology.cohomology import kernel_invariant_error, solve
from planar_cohomology.flow import Box
from planar_cohomology.registry import registry

CASES = {
    "2*x": "2*((x-1)*cos(y) - y*sin(y))*exp(x)",
    "y": "(y*cos(y) + x*sin(y))*exp(x)",
}


def main():
    spec = registry("ex52:1")
    field, ham, chart = spec.field, spec.hamiltonian(), spec.chart()
    grid = Box(-2, 2, -math.pi + 0.2, 2 * math.pi - 0.2)
    for g, f in CASES.items():
        sol = solve(field, chart, ham, g, grid=grid, nx=61, ny=61, operator="xi'")
        print(f"g = {g}")
        for s in sol.stitches:
            print(f"  stitched pair {s['pair']} into {s['into']}: limit {s['limit']:.10f}, constant {s['constant']:.10f}")
        print(f"  error modulo kernel against {f}: {kernel_invariant_error(sol, f):.2e}")
        print(f"  relative residual: {sol.relative_residual:.2e}")


if __name__ == "__main__":
    main()
