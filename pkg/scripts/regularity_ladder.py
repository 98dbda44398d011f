#!/usr/bin/env python3
"""Germ order ladder at the origin for a few rectified right-hand sides, under two eps choices."""
from planar_cohomology.cohomology import estimate_order
from planar_cohomology.expr import parse
from planar_cohomology.foliation import Interval

R = "sqrt(x^2+y^2)"
CASES = [f"y/{R}", f"x/{R}", "1/x^2 + 1/y^2", f"exp(x)*cos(y) + x*y", f"1/{R}"]


def main():
    origin = Interval(0.0, 0.0, 0.0)
    print(f"{'g-hat(x, y)':28} {'eps=0.5':>8} {'eps=1.3':>8}")
    for src in CASES:
        orders = [estimate_order(parse(src), origin, rmax=3, eps=e).order for e in (0.5, 1.3)]
        print(f"{src:28} {orders[0]:>8} {orders[1]:>8}")
    rep = estimate_order(parse(f"x/{R}"), origin, rmax=2)
    print("\nh traces for x/r (x' -> 0-):")
    for p in rep.per_order:
        tail = ", ".join(f"{h:.6g}" for h in p["trace"][-4:])
        print(f"  k={p['k']} {p['outcome']:>10}  ... {tail}")


if __name__ == "__main__":
    main()
