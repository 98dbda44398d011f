"""Separatrix bookkeeping for finite-type planar foliations.

Separatrices are declared, never discovered: each one is the zero set of an
expression (``y - 1`` for the line ``y = 1``) together with a seed point on
it.  A complete set of transversals (CST) assigns one transversal curve to
every separatrix.  ``build_chart`` checks the declared data numerically and
enumerates the adjacent pairs, which drive gap computations and stitching.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .expr import Expr, compile_exprs, const, parse
from .flow import (
    Box,
    FlowError,
    PlanarField,
    Status,
    Transversal,
    UNBOUNDED,
    crossings_many,
    integrate_batch,
    _make_rhs,
)

__all__ = [
    "ChartError",
    "Separatrix",
    "AdjacentPair",
    "Interval",
    "FoliationChart",
    "build_chart",
    "rectified_interval",
    "walk_transversal",
    "parse_curve",
]


class ChartError(ValueError):
    """Declared foliation data failed validation."""


def parse_curve(desc: str) -> Expr:
    """``"y = 1"`` becomes ``y - 1``; a bare expression is taken as ``expr = 0``."""
    if "=" in desc:
        lhs, rhs = desc.split("=", 1)
        return parse(lhs) - parse(rhs)
    return parse(desc)


@dataclass(frozen=True, eq=False)
class Separatrix:
    id: str
    desc: str
    seed: tuple[float, float]
    F_level: float = 0.0
    inseparable: tuple[str, ...] = ()

    @property
    def expr(self) -> Expr:
        return parse_curve(self.desc)

    def to_json(self) -> dict:
        return {"id": self.id, "desc": self.desc, "seed": list(self.seed),
                "F_level": self.F_level, "inseparable_from": list(self.inseparable)}

    @classmethod
    def from_json(cls, d: dict) -> "Separatrix":
        return cls(str(d["id"]), d["desc"], tuple(map(float, d["seed"])),
                   float(d.get("F_level", 0.0)), tuple(d.get("inseparable_from", ())))


@dataclass(frozen=True)
class Interval:
    """The vertical segment ``{a} x [b1, b2]`` in normal-chart coordinates.

    ``flip`` is True when the chart is ``(-F, G)``; then ``a`` is already
    the level of ``-F``.
    """

    a: float
    b1: float
    b2: float
    flip: bool = False

    @property
    def width(self) -> float:
        return self.b2 - self.b1

    def to_json(self) -> dict:
        return {"a": self.a, "b1": self.b1, "b2": self.b2, "flip": self.flip}


@dataclass(frozen=True)
class AdjacentPair:
    """Two adjacent separatrices and how to approach them.

    ``side1`` / ``side2`` are the signs (relative to each transversal's unit
    tangent) of the arc-length offsets that move from ``p1`` / ``p2`` into the
    canonical region whose leaves cross both transversals.
    """

    index: int
    s1: str
    s2: str
    side1: float
    side2: float
    region: tuple[int, ...]
    witness: tuple[float, float]

    def to_json(self) -> dict:
        return {"index": self.index, "s1": self.s1, "s2": self.s2, "side1": self.side1,
                "side2": self.side2, "region": list(self.region), "witness": list(self.witness)}


def walk_transversal(tr: Transversal, p0, offsets) -> np.ndarray:
    """Points of ``tr`` at signed arc lengths ``offsets`` from ``p0``."""
    offsets = np.atleast_1d(np.asarray(offsets, dtype=float))
    tan = tr.tangent_field()
    rhs, _ = _make_rhs(tan, [])
    y0 = np.repeat(np.asarray([p0], dtype=float), len(offsets), axis=0)
    out = y0.copy()
    nz = offsets != 0
    if np.any(nz):
        r = integrate_batch(rhs, y0[nz], offsets[nz], rtol=1e-12, atol=1e-14)
        out[nz] = r.y
    x, y = tr.project(out[:, 0], out[:, 1])
    return np.stack([x, y], axis=1)


def _newton2(fs: Sequence[Expr], p0, iters: int = 50, tol: float = 1e-14):
    jac = [f.diff(v) for f in fs for v in ("x", "y")]
    comp = compile_exprs([*fs, *jac])
    p = np.array(p0, dtype=float)
    for _ in range(iters):
        f1, f2, a, b, c, d = (float(v) for v in comp(p[0], p[1]))
        det = a * d - b * c
        if det == 0 or not np.isfinite(det):
            raise ChartError(f"singular intersection system near {tuple(p)}")
        step = np.array([d * f1 - b * f2, -c * f1 + a * f2]) / det
        p = p - step
        if np.hypot(*step) < tol * max(1.0, np.hypot(*p)):
            break
    return p


@dataclass(eq=False)
class FoliationChart:
    field: PlanarField
    separatrices: list[Separatrix]
    cst: dict[str, Transversal]
    box: Box
    pairs: list[AdjacentPair] = field(default_factory=list)
    anchors: dict[str, tuple[float, float]] = field(default_factory=dict)
    global_transversal: Transversal | None = None
    intervals: dict[int, Interval] = field(default_factory=dict)
    samples: int = 64
    seed: int = 0

    # -- lookups ---------------------------------------------------------
    def sep(self, sid: str) -> Separatrix:
        for s in self.separatrices:
            if s.id == sid:
                return s
        raise KeyError(sid)

    def anchor(self, sid: str) -> tuple[float, float]:
        """``p_s``: the crossing of separatrix ``sid`` with its transversal."""
        return self.anchors[sid]

    @property
    def transversals(self) -> list[Transversal]:
        ts = [self.cst[s.id] for s in self.separatrices]
        if self.global_transversal is not None:
            ts.append(self.global_transversal)
        return ts

    def region_of(self, x, y, eps: float = 0.0):
        """Sign vector of the separatrix functions; 0 marks a point on a separatrix."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if not self.separatrices:
            return np.zeros(np.broadcast(x, y).shape + (0,), dtype=int)
        comp = compile_exprs([s.expr for s in self.separatrices])
        vals = comp(x, y)
        sig = [np.where(np.abs(v) <= eps, 0, np.sign(v)).astype(int) for v in vals]
        return np.stack(sig, axis=-1)

    def to_json(self) -> dict:
        return {
            "schema": 1,
            "field": {"fx": str(self.field.fx), "fy": str(self.field.fy), "name": self.field.name},
            "box": self.box.as_list(),
            "separatrices": [s.to_json() | {"anchor": list(self.anchors.get(s.id, ()))} for s in self.separatrices],
            "transversals": [self.cst[s.id].to_json() | {"separatrix": s.id} for s in self.separatrices],
            "pairs": [p.to_json() | ({"interval": self.intervals[p.index].to_json()} if p.index in self.intervals else {})
                      for p in self.pairs],
        }


def _check_leaf(field: PlanarField, s: Separatrix, box: Box, n: int, tol: float) -> None:
    sig = s.expr
    gx, gy = sig.diff("x"), sig.diff("y")
    comp = compile_exprs([sig, gx, gy, field.fx, field.fy])
    v0 = comp(*s.seed)
    if abs(float(v0[0])) > 1e-8 * max(1.0, float(np.hypot(v0[1], v0[2]))):
        raise ChartError(f"seed {s.seed} of separatrix {s.id!r} is not on {s.desc!r}")
    # sample along the separatrix by following the field from the seed
    unit = field.normalized()
    rhs, _ = _make_rhs(unit, [])
    span = 0.5 * max(box.xmax - box.xmin, box.ymax - box.ymin)
    ts = np.concatenate([-np.linspace(0, span, n // 2 + 1)[1:], np.linspace(0, span, n - n // 2)])
    r = integrate_batch(rhs, np.repeat([s.seed], len(ts), axis=0), ts, rtol=1e-12, atol=1e-14, far_box=box)
    pts = r.y[box.contains(r.y[:, 0], r.y[:, 1])]
    if len(pts) == 0:
        return
    tr = Transversal.level(sig, 0.0)
    px, py = tr.project(pts[:, 0], pts[:, 1])
    sv, sx, sy, u, v = comp(px, py)
    drift = np.abs(comp(pts[:, 0], pts[:, 1])[0]) / np.maximum(1.0, np.hypot(sx, sy))
    tang = np.abs(sx * u + sy * v) / (np.hypot(sx, sy) * np.hypot(u, v))
    k = int(np.argmax(tang))
    if tang[k] > tol:
        raise ChartError(f"separatrix {s.id!r} ({s.desc}) is not a leaf: normalised |L sigma| = "
                         f"{tang[k]:.3g} at ({px[k]:.6g}, {py[k]:.6g})")
    k = int(np.argmax(drift))
    if drift[k] > 1e-7:
        raise ChartError(f"the leaf through the seed of {s.id!r} leaves {s.desc!r} "
                         f"(residual {drift[k]:.3g} at ({pts[k, 0]:.6g}, {pts[k, 1]:.6g}))")


def _check_transversal(field: PlanarField, tr: Transversal, p0, box: Box, n: int, tol: float = 1e-6,
                       sid: str = "") -> np.ndarray:
    """Sample ``n`` points of the transversal around ``p0`` inside the box and check transversality."""
    span = 0.5 * max(box.xmax - box.xmin, box.ymax - box.ymin)
    offs = np.linspace(-span, span, n)
    pts = walk_transversal(tr, p0, offs)
    ok = box.contains(pts[:, 0], pts[:, 1]) & tr.valid(pts[:, 0], pts[:, 1])
    ok &= np.abs(tr.residual(pts[:, 0], pts[:, 1])) < 1e-8
    pts = pts[ok]
    gx, gy = tr.grad
    comp = compile_exprs([gx, gy, field.fx, field.fy])
    a, b, u, v = comp(pts[:, 0], pts[:, 1])
    # tangent is (-b, a); det(tangent, xi) = -(a u + b v) up to sign
    det = np.abs(a * u + b * v) / (np.hypot(a, b) * np.hypot(u, v))
    if len(det):
        k = int(np.argmin(det))
        if det[k] < tol:
            raise ChartError(f"transversal {tr.label or sid!r} is tangent to the field near "
                             f"({pts[k, 0]:.6g}, {pts[k, 1]:.6g}) (|det| = {det[k]:.3g})")
    return pts


def build_chart(field: PlanarField, separatrices: Sequence[Separatrix], cst: dict[str, Transversal],
                box: Box | None = None, samples: int = 64, seed: int = 0, tmax: float = 1e4,
                global_transversal: Transversal | None = None, check_coverage: bool = True,
                leaf_tol: float = 1e-10) -> FoliationChart:
    """Validate declared separatrices and transversals and enumerate adjacent pairs."""
    box = box or Box()
    seps = list(separatrices)
    ids = [s.id for s in seps]
    if len(set(ids)) != len(ids):
        raise ChartError("duplicate separatrix ids")
    missing = [i for i in ids if i not in cst]
    if missing:
        raise ChartError(f"no transversal declared for separatrices {missing}")
    for s in seps:
        for o in s.inseparable:
            if o not in ids:
                raise ChartError(f"separatrix {s.id!r} lists unknown partner {o!r}")
            if o == s.id:
                raise ChartError(f"separatrix {s.id!r} lists itself as inseparable")
            if s.id not in seps[ids.index(o)].inseparable:
                raise ChartError(f"inseparability of {s.id!r} and {o!r} is not symmetric")
    field.check_regular(box)

    chart = FoliationChart(field, seps, dict(cst), box, samples=samples, seed=seed,
                           global_transversal=global_transversal)
    for s in seps:
        _check_leaf(field, s, box, samples, leaf_tol)
        tr = cst[s.id]
        p = _newton2([tr.fn, s.expr], s.seed)
        if not (np.all(np.isfinite(p)) and tr.valid(p[0], p[1])):
            raise ChartError(f"transversal for {s.id!r} does not cut {s.desc!r} inside its bounds")
        if abs(float(tr.residual(*p))) > 1e-10 or abs(float(s.expr(*p))) > 1e-10:
            raise ChartError(f"could not locate the crossing of {s.id!r} with its transversal")
        chart.anchors[s.id] = (float(p[0]), float(p[1]))
        _check_transversal(field, tr, p, box, samples, sid=s.id)
    if global_transversal is not None:
        gp = global_transversal.project(np.array([0.5 * (box.xmin + box.xmax)]),
                                        np.array([0.5 * (box.ymin + box.ymax)]))
        _check_transversal(field, global_transversal, (float(gp[0][0]), float(gp[1][0])), box, samples,
                           sid="global")

    chart.pairs = _enumerate_pairs(chart, tmax)
    if check_coverage and chart.transversals:
        _check_coverage(chart, tmax)
    return chart


def _order_key(chart: FoliationChart, sid: str):
    return float(chart.cst[sid].source(*chart.anchor(sid))) if chart.cst[sid].source is not None else 0.0


def _enumerate_pairs(chart: FoliationChart, tmax: float) -> list[AdjacentPair]:
    """Adjacent pairs among the declared inseparable ones.

    A pair is adjacent when a leaf runs from one transversal to the other
    without meeting the transversal of any third separatrix on the way.
    Within a pair, ``s1`` is the one with the smaller G-value at its anchor.
    """
    cand = []
    seen = set()
    for s in chart.separatrices:
        for o in s.inseparable:
            key = frozenset((s.id, o))
            if key in seen:
                continue
            seen.add(key)
            a, b = sorted((s.id, o), key=lambda i: (_order_key(chart, i), i))
            cand.append((a, b))
    out = []
    for a, b in cand:
        w = _witness(chart, len(out), a, b, tmax)
        if w is not None:
            out.append(w)
    return out


def _witness(chart: FoliationChart, idx: int, a: str, b: str, tmax: float) -> AdjacentPair | None:
    """Find the side of each transversal facing the shared region, via a crossing leaf.

    Returns None when the only connecting leaves also cross a third
    transversal (the pair is inseparable but not adjacent).
    """
    l1, l2 = chart.cst[a], chart.cst[b]
    p1, p2 = chart.anchor(a), chart.anchor(b)
    others = [chart.cst[s.id] for s in chart.separatrices if s.id not in (a, b)]
    targets = [l2, *others]
    blocked = False
    for delta in (1e-2, 1e-3, 1e-4):
        pts = walk_transversal(l1, p1, [delta, -delta])
        for direction in (1.0, -1.0):
            r = crossings_many(chart.field, pts, targets, tmax=tmax, tol=1e-10, far_box=chart.box.expanded(3.0),
                               terminal=(0,), direction=direction)
            for i, side in enumerate((1.0, -1.0)):
                if r.status[i] != Status.CROSSED:
                    continue
                if np.any(r.cross_count[i, 1:] > 0):
                    blocked = True
                    continue
                q = r.y[i, :2]
                reg = tuple(int(v) for v in chart.region_of(pts[i, 0], pts[i, 1]))
                t2 = l2.tangent_field()
                u, v = t2(p2[0], p2[1])
                s2 = 1.0 if (q[0] - p2[0]) * u + (q[1] - p2[1]) * v > 0 else -1.0
                return AdjacentPair(idx, a, b, side, s2, reg, (float(pts[i, 0]), float(pts[i, 1])))
    if blocked:
        return None
    raise ChartError(f"no leaf crosses both transversals of {a!r} and {b!r}: they are not inseparable "
                     "with respect to the declared CST")


def _check_coverage(chart: FoliationChart, tmax: float) -> None:
    rng = np.random.default_rng(chart.seed)
    b = chart.box
    n = chart.samples
    pts = np.stack([rng.uniform(b.xmin, b.xmax, n), rng.uniform(b.ymin, b.ymax, n)], axis=1)
    hit = np.zeros(n, dtype=bool)
    for direction in (1.0, -1.0):
        r = crossings_many(chart.field, pts[~hit], chart.transversals, tmax=tmax, tol=1e-9,
                           far_box=b.expanded(1e6), direction=direction)
        idx = np.flatnonzero(~hit)
        hit[idx[r.status == Status.CROSSED]] = True
    if not np.all(hit):
        k = int(np.flatnonzero(~hit)[0])
        raise ChartError(f"coverage gap: the leaf through ({pts[k, 0]:.6g}, {pts[k, 1]:.6g}) "
                         "reaches no transversal of the CST")


def _sup_along(chart: FoliationChart, sid: str, G: Expr, increasing: bool) -> float:
    """Limit of G along separatrix ``sid`` in the direction where G moves toward the partner.

    The walk follows the unit tangent of the separatrix curve itself, which
    keeps it on the curve even where the separatrix repels nearby leaves.  G
    is monotone there, so the values at the exits of growing boxes converge;
    the last three exits are Aitken-extrapolated.
    """
    s = chart.sep(sid)
    p = chart.anchor(sid)
    curve = Transversal.level(s.expr, 0.0)
    tan = curve.tangent_field()
    (rate,) = compile_exprs([tan.lie(G)])(*p)
    direction = 1.0 if (rate > 0) == increasing else -1.0
    rhs, _ = _make_rhs(tan, [])
    vals = []
    for k in (1.0, 2.0, 4.0):
        far = chart.box.expanded(3.0 * k)
        r = integrate_batch(rhs, np.array([p]), direction * 1e6, far_box=far, rtol=1e-11, atol=1e-13)
        q = curve.project(r.y[:, 0], r.y[:, 1])
        vals.append(float(G(float(q[0][0]), float(q[1][0]))))
    a, b, c = vals
    den = (c - b) - (b - a)
    if abs(c - b) < 1e-14 or den == 0:
        return c
    est = c - (c - b) ** 2 / den
    return est if np.isfinite(est) else c


def rectified_interval(chart: FoliationChart, pair: AdjacentPair, ham) -> Interval:
    """``I = {a} x [b1, b2]`` separating the images of an adjacent pair.

    ``ham`` only needs ``F`` and ``G`` attributes.  The chart flips to
    ``(-F, G)`` when the shared region lies on ``F > a``.
    """
    F, G = ham.F, ham.G
    p1, p2 = chart.anchor(pair.s1), chart.anchor(pair.s2)
    a1, a2 = float(F(*p1)), float(F(*p2))
    if abs(a1 - a2) > 1e-9 * max(1.0, abs(a1)):
        raise ChartError(f"separatrices {pair.s1!r} and {pair.s2!r} sit on different F-levels ({a1}, {a2})")
    a = 0.5 * (a1 + a2)
    flip = float(F(*pair.witness)) > a
    g1, g2 = float(G(*p1)), float(G(*p2))
    lo, hi = (pair.s1, pair.s2) if g1 < g2 else (pair.s2, pair.s1)
    b1 = _sup_along(chart, lo, G, increasing=True)
    b2 = _sup_along(chart, hi, G, increasing=False)
    if not (min(g1, g2) < b1 <= b2 + 1e-9 < max(g1, g2) + 1e-9):
        raise ChartError(f"bisection failure locating I for pair {pair.index}: "
                         f"bracket [{min(g1, g2)}, {max(g1, g2)}], got b1={b1}, b2={b2}")
    b1, b2 = min(b1, b2), max(b1, b2)
    iv = Interval(-a if flip else a, b1, b2, flip)
    chart.intervals[pair.index] = iv
    return iv
