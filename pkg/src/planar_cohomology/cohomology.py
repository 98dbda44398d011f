"""Gaps, solvability diagnosis, the characteristics solver and germ functionals.

Two operators are supported.  ``"xi"`` is the field as declared; ``"xi'"``
is ``xi'_F = xi_F / rho``, the positive multiple of the field along which
``G`` grows at unit rate.  The closed-form solutions of the model families
are solutions for ``xi'``.
"""
from __future__ import annotations

import csv
import enum
import math
import os
import tempfile
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate as sp_integrate

from .expr import ZERO, Expr, call, compile_exprs, parse
from .flow import (
    UNBOUNDED,
    Box,
    PlanarField,
    Status,
    Transversal,
    crossings_many,
    integrate_many,
)
from .foliation import AdjacentPair, FoliationChart, Interval, walk_transversal
from .hamiltonian import DerivedPair, HamiltonianPair, derive_pair

__all__ = [
    "Outcome",
    "Schedule",
    "SequenceVerdict",
    "classify_sequence",
    "GapResult",
    "gap",
    "cst_correction",
    "diagnose",
    "SolutionGrid",
    "ExtensionError",
    "solve",
    "kernel_invariant_error",
    "RectRegion",
    "solve_rectified",
    "QuadratureError",
    "germ_h",
    "RegularityReport",
    "estimate_order",
    "order_integrand",
]


class Outcome(str, enum.Enum):
    FINITE = "finite"
    DIVERGENT = "divergent"
    INCONCLUSIVE = "inconclusive"


@dataclass(frozen=True)
class Schedule:
    """Geometric approach schedule and the limits used to classify it."""

    delta0: float = 0.25
    factor: float = 0.5
    steps: int = 12
    stability: float = 1e-7
    threshold: float = 1e6
    tmax: float = 1e4
    tol: float = 1e-10
    far: float = 3.0

    def deltas(self) -> np.ndarray:
        return self.delta0 * self.factor ** np.arange(self.steps)


# ---------------------------------------------------------------------------
# Limits of sequences

@dataclass
class SequenceVerdict:
    outcome: Outcome
    value: float | None
    rate: float | None
    extrapolants: list[float]
    stable: bool
    note: str = ""


def _aitken(s0, s1, s2):
    den = (s2 - s1) - (s1 - s0)
    if den == 0 or not np.isfinite(den):
        return s2
    return s2 - (s2 - s1) ** 2 / den


def classify_sequence(seq: Sequence[float], stability: float = 1e-7, threshold: float = 1e6,
                      noise: float = 1e-9, scale: float | None = None) -> SequenceVerdict:
    """Decide whether a sequence sampled along a geometric schedule converges.

    ``scale`` sets the size against which noise and stability are measured
    (by default the largest term, at least 1).

    Finite: the last four increments are at the noise floor, or the last three
    increment ratios are at most 0.8 (geometric-type decay); the value is the
    Aitken extrapolant of the last three terms.  Divergent: terms beyond
    ``threshold`` growing monotonically over four steps, or four same-signed
    increments whose ratios stay at or above 0.9 (the increments are not
    shrinking, as for logarithmic growth).  Anything else is inconclusive.
    """
    s = np.asarray(seq, dtype=float)
    if len(s) < 5 or not np.all(np.isfinite(s)):
        bad = not np.all(np.isfinite(s))
        return SequenceVerdict(Outcome.DIVERGENT if bad and len(s) else Outcome.INCONCLUSIVE, None, None, [],
                               False, "non-finite terms" if bad else "too few terms")
    d = np.diff(s)
    scale = max(1.0, float(np.max(np.abs(s))), scale or 0.0)
    ait = [_aitken(*s[i:i + 3]) for i in range(len(s) - 2)]
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.abs(d[1:]) / np.abs(d[:-1])
    rate = float(np.median(q[-3:])) if np.all(np.isfinite(q[-3:])) else None
    last4 = d[-4:]
    if np.all(np.abs(last4) <= noise * scale):
        return SequenceVerdict(Outcome.FINITE, float(s[-1]), rate, ait, True, "increments at noise floor")
    mono = bool(np.all(last4 > 0) or np.all(last4 < 0))
    if mono and abs(s[-1]) > threshold and np.all(np.abs(s[-4:]) > 0) and np.all(np.diff(np.abs(s[-4:])) > 0):
        return SequenceVerdict(Outcome.DIVERGENT, None, rate, ait, False, f"|partial| > {threshold:g}")
    if mono and np.all(q[-3:] >= 0.9):
        return SequenceVerdict(Outcome.DIVERGENT, None, rate, ait, False,
                               f"increments not decaying (ratio ~ {rate:.3g})")
    if np.all(q[-3:] <= 0.8):
        value = float(ait[-1])
        stable = abs(ait[-1] - ait[-2]) < stability * scale
        return SequenceVerdict(Outcome.FINITE, value, rate, ait, stable,
                               "" if stable else "extrapolant still moving")
    return SequenceVerdict(Outcome.INCONCLUSIVE, None, rate, ait, False, "no clear trend in increments")


# ---------------------------------------------------------------------------
# Operators and integrands

def _operator(field: PlanarField, ham: HamiltonianPair, operator: str):
    """The field whose time is used, and mu = L_V G (None when it is identically 1)."""
    if operator == "xi":
        return field, field.lie(ham.G)
    if operator in ("xi'", "xiF", "xi_prime"):
        return derive_pair(field, ham).xiF, None
    raise ValueError(f"unknown operator {operator!r}; use 'xi' or \"xi'\"")


def order_integrand(g: Expr, k: int, field: PlanarField, ham: HamiltonianPair, operator: str = "xi") -> Expr:
    """The integrand whose gap decides order ``k``.

    With ``V = mu xi'_F`` the equation ``V f = g`` is ``xi'_F f = g / mu``; its
    k-th obstruction is ``L^k_{xi'_G}(g / mu)`` integrated in ``xi'_F`` time,
    which in ``V`` time is ``mu L^k_{xi'_G}(g / mu)``.
    """
    if k == 0:
        return g
    _, mu = _operator(field, ham, operator)
    dp = derive_pair(field, ham)
    q = g if mu is None else g / mu
    for _ in range(k):
        q = dp.xiG.lie(q)
    return q if mu is None else mu * q


# ---------------------------------------------------------------------------
# Gaps

@dataclass
class GapResult:
    outcome: Outcome
    value: float | None
    order: int
    pair: int
    s1: str
    s2: str
    partials: list[float]
    times: list[float]
    deltas: list[float]
    rate: float | None
    extrapolants: list[float]
    stable: bool
    note: str = ""
    operator: str = "xi"

    @property
    def finite(self) -> bool:
        return self.outcome == Outcome.FINITE

    def to_json(self) -> dict:
        return {"pair": self.pair, "s1": self.s1, "s2": self.s2, "order": self.order,
                "outcome": self.outcome.value, "value": self.value, "rate": self.rate,
                "stable": self.stable, "note": self.note, "operator": self.operator,
                "partials": self.partials, "times": self.times, "deltas": self.deltas}


def _pair(chart: FoliationChart, pair) -> AdjacentPair:
    if isinstance(pair, AdjacentPair):
        return pair
    return chart.pairs[int(pair)]


def _flow_integrals(V: PlanarField, pts, target: Transversal, integrand: Expr, tmax: float, tol: float,
                    far: Box, total_variation: bool = False):
    """Integral of ``integrand`` from each point to its crossing of ``target`` (either direction).

    With ``total_variation`` the integral of ``|integrand|`` is returned as a fifth array.
    """
    n = len(pts)
    A = np.full(n, np.nan)
    igs = [integrand, call("abs", integrand)] if total_variation else [integrand]
    S = np.full(n, np.nan)
    T = np.full(n, np.nan)
    Q = np.full((n, 2), np.nan)
    status = np.full(n, int(Status.RUNNING))
    pts = np.asarray(pts, dtype=float)
    with np.errstate(all="ignore"):
        on = (np.abs(np.asarray(target.residual(pts[:, 0], pts[:, 1]), dtype=float)) <= 1e-13) \
            & np.asarray(target.valid(pts[:, 0], pts[:, 1]), dtype=bool)
    S[on], T[on], A[on], Q[on] = 0.0, 0.0, 0.0, pts[on]
    status[on] = int(Status.CROSSED)
    # try first the direction in which the target's defining function moves towards 0
    fn = target.fn
    (v, dv), _ = compile_exprs([fn, V.lie(fn)]).masked(pts[:, 0], pts[:, 1])
    prefer = np.where(v * dv > 0, -1.0, 1.0)
    first = {d: np.flatnonzero(~on & (prefer == d)) for d in (1.0, -1.0)}
    for attempt in (0, 1):
        for d0 in (1.0, -1.0):
            direction = d0 if attempt == 0 else -d0
            todo = first[d0][status[first[d0]] != int(Status.CROSSED)]
            if not todo.size:
                continue
            r = crossings_many(V, pts[todo], [target], tmax=tmax, tol=tol, integrands=igs, far_box=far,
                               direction=direction)
            hit = r.status == Status.CROSSED
            S[todo[hit]] = r.y[hit, 2]
            if total_variation:
                A[todo[hit]] = np.abs(r.y[hit, 3])
            T[todo[hit]] = r.t[hit]
            Q[todo[hit]] = r.y[hit, :2]
            status[todo] = np.where(hit, int(Status.CROSSED), np.maximum(status[todo], r.status))
    if total_variation:
        return S, T, Q, status, A
    return S, T, Q, status


def gap(field: PlanarField, chart: FoliationChart, ham: HamiltonianPair, g: Expr | str, pair=0, k: int = 0,
        schedule: Schedule | None = None, operator: str = "xi") -> GapResult:
    """Gap of the order-``k`` integrand between the separatrices of ``pair``.

    Start points approach ``p1`` along the first transversal from the shared
    region; each is flowed to the second transversal while integrating.
    """
    sched = schedule or Schedule()
    g = parse(g) if isinstance(g, str) else g
    pr = _pair(chart, pair)
    deltas = sched.deltas()
    base = dict(order=k, pair=pr.index, s1=pr.s1, s2=pr.s2, deltas=[float(v) for v in deltas], operator=operator)
    if g.is_const and g.value == 0.0:
        return GapResult(Outcome.FINITE, 0.0, partials=[0.0] * len(deltas), times=[], rate=None,
                         extrapolants=[], stable=True, note="zero integrand", **base)
    V, _ = _operator(field, ham, operator)
    e = order_integrand(g, k, field, ham, operator)
    l1, l2 = chart.cst[pr.s1], chart.cst[pr.s2]
    pts = walk_transversal(l1, chart.anchor(pr.s1), pr.side1 * deltas)
    S, T, _, status, A = _flow_integrals(V, pts, l2, e, sched.tmax, sched.tol, chart.box.expanded(sched.far),
                                         total_variation=True)
    crossed = status == Status.CROSSED
    m = len(crossed) if np.all(crossed) else int(np.argmin(crossed))
    partials = [float(v) for v in S[:m]]
    times = [float(v) for v in T[:m]]
    # cancellation in the partial integrals leaves noise proportional to int |e|
    sv = classify_sequence(partials, sched.stability, sched.threshold,
                           scale=float(np.max(A[:m])) if m else None)
    note = sv.note
    outcome = sv.outcome
    if m < len(crossed):
        why = Status(int(status[m])).label
        if m == 0:
            outcome = Outcome.INCONCLUSIVE
            note = f"first start point never reached the partner transversal ({why})"
        elif not (sv.outcome == Outcome.FINITE and sv.stable):
            outcome = Outcome.DIVERGENT
            note = f"divergent by timeout: no crossing from step {m} on ({why}); " + note
    return GapResult(outcome, sv.value if outcome == Outcome.FINITE else None, partials=partials, times=times,
                     rate=sv.rate, extrapolants=[float(a) for a in sv.extrapolants], stable=sv.stable, note=note,
                     **base)


def _cst_correction(V: PlanarField, chart: FoliationChart, other: FoliationChart, g: Expr, pr: AdjacentPair,
                    tol: float) -> float:
    def along(p_start, target):
        S, _, _, status = _flow_integrals(V, np.array([p_start]), target, g, 1e4, tol, UNBOUNDED)
        if status[0] != Status.CROSSED:
            raise RuntimeError("separatrix anchor does not reach the other transversal")
        return float(S[0])

    a1 = along(other.anchor(pr.s1), chart.cst[pr.s1])
    a2 = -along(other.anchor(pr.s2), chart.cst[pr.s2])
    return a1 + a2


def cst_correction(field: PlanarField, ham: HamiltonianPair, chart: FoliationChart, other: FoliationChart,
                   g: Expr | str, pair=0, operator: str = "xi", tol: float = 1e-11) -> float:
    """``A1 + A2``: how the gap changes when the CST of ``chart`` is replaced by that of ``other``.

    ``A1`` integrates along ``s1`` from the other anchor to this one, ``A2``
    along ``s2`` from this anchor to the other one.  Adding it to the gap
    measured with ``chart`` gives the gap measured with ``other``.
    """
    g = parse(g) if isinstance(g, str) else g
    V, _ = _operator(field, ham, operator)
    return _cst_correction(V, chart, other, g, _pair(chart, pair), tol)


# ---------------------------------------------------------------------------
# Diagnosis

def diagnose(field: PlanarField, chart: FoliationChart, ham: HamiltonianPair, g: Expr | str, kmax: int = 4,
             schedule: Schedule | None = None, operator: str = "xi") -> dict:
    """Gaps for every adjacent pair and k = 0..kmax, and the resulting verdict.

    ``order`` is the largest r such that every gap of order <= r is finite
    (-1 when an order-0 gap is not).  A finite kmax only certifies solvability
    up to that order.
    """
    g = parse(g) if isinstance(g, str) else g
    table = []
    order = -1
    inconclusive = []
    divergent = []
    for k in range(kmax + 1):
        row = [gap(field, chart, ham, g, pr, k, schedule, operator) for pr in chart.pairs]
        table.append(row)
        bad_div = [r for r in row if r.outcome == Outcome.DIVERGENT]
        bad_inc = [r for r in row if r.outcome == Outcome.INCONCLUSIVE]
        divergent += [(r.pair, k) for r in bad_div]
        inconclusive += [(r.pair, k) for r in bad_inc]
        if bad_div or bad_inc:
            break
        order = k
    if order == kmax:
        verdict = f"solvable to order {order}"
    elif order >= 0:
        verdict = f"solvable to order {order}"
    else:
        verdict = "no continuous solution" if divergent else "undecided at order 0"
    if divergent:
        p, k = divergent[0]
        detail = f"divergent gap at pair {p}, order {k}"
    elif inconclusive:
        p, k = inconclusive[0]
        detail = f"inconclusive gap at pair {p}, order {k}"
    else:
        detail = f"all gaps finite for k <= {kmax}" if chart.pairs else "no adjacent pairs: every gap condition holds vacuously"
    return {
        "schema": 1,
        "verdict": verdict,
        "order": order,
        "kmax": kmax,
        "detail": detail,
        "divergent": [{"pair": p, "order": k} for p, k in divergent],
        "inconclusive": [{"pair": p, "order": k} for p, k in inconclusive],
        "operator": operator,
        "gaps": [[r.to_json() for r in row] for row in table],
    }


# ---------------------------------------------------------------------------
# Characteristics solver with stitching

class ExtensionError(RuntimeError):
    """The solution built so far has no finite limit at a separatrix."""

    def __init__(self, message: str, pair: int | None = None, detail: dict | None = None):
        super().__init__(message)
        self.pair = pair
        self.detail = detail or {}


@dataclass
class SolutionGrid:
    x: np.ndarray
    y: np.ndarray
    f: np.ndarray
    residual: np.ndarray
    owner: np.ndarray
    q: np.ndarray
    fq: np.ndarray
    stitches: list[dict]
    unreachable: int
    operator: str

    def to_csv(self, path) -> None:
        """Columns x, y, f, residual; written to a temporary file and renamed."""
        path = os.fspath(path)
        d = os.path.dirname(os.path.abspath(path))
        fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
        with os.fdopen(fd, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "f", "residual"])
            for a, b, c, r in zip(self.x.ravel(), self.y.ravel(), self.f.ravel(), self.residual.ravel()):
                w.writerow([repr(float(a)), repr(float(b)), repr(float(c)), repr(float(r))])
        os.replace(tmp, path)

    @property
    def max_residual(self) -> float:
        r = self.residual[np.isfinite(self.residual)]
        return float(r.max()) if r.size else float("nan")

    @property
    def relative_residual(self) -> float:
        """``max residual / max(1, max |f|)``."""
        fin = np.isfinite(self.f)
        scale = max(1.0, float(np.max(np.abs(self.f[fin])))) if fin.any() else 1.0
        return self.max_residual / scale


class _Plan:
    """Which transversal owns which canonical region, and the stitch constants."""

    def __init__(self, chart: FoliationChart):
        self.chart = chart
        self.region_owner: dict[tuple, str] = {}
        self.sep_owner: dict[str, str] = {}
        self.const: dict[str, float] = {}

    def sides(self, sid: str, delta: float = 1e-3) -> list[tuple]:
        tr = self.chart.cst[sid]
        pts = walk_transversal(tr, self.chart.anchor(sid), [delta, -delta])
        return [tuple(int(v) for v in self.chart.region_of(p[0], p[1])) for p in pts]

    def claim(self, sid: str, c: float):
        self.const[sid] = c
        self.sep_owner[sid] = sid
        for reg in self.sides(sid):
            self.region_owner.setdefault(reg, sid)

    def owner_of(self, x, y) -> np.ndarray:
        chart = self.chart
        out = np.full(len(x), "", dtype=object)
        if not chart.separatrices:
            out[:] = "__global__"
            return out
        sig = chart.region_of(x, y)
        ids = [s.id for s in chart.separatrices]
        for i in range(len(x)):
            row = tuple(int(v) for v in sig[i])
            zeros = [j for j, v in enumerate(row) if v == 0]
            if zeros:
                out[i] = self.sep_owner.get(ids[zeros[0]], "")
            else:
                out[i] = self.region_owner.get(row, "")
        return out


def _initial_map(chart: FoliationChart, initial) -> dict[str, Expr]:
    keys = [s.id for s in chart.separatrices] + (["__global__"] if chart.global_transversal is not None else [])
    if initial is None:
        return {k: ZERO for k in keys}
    if isinstance(initial, (Expr, str)):
        e = parse(initial) if isinstance(initial, str) else initial
        return {k: e for k in keys}
    out = {k: ZERO for k in keys}
    for k, v in initial.items():
        out[k] = parse(v) if isinstance(v, str) else v
    return out


def _evaluate(V, chart: FoliationChart, plan: _Plan, g: Expr, init: dict[str, Expr], pts: np.ndarray,
              owners: np.ndarray, tmax: float, tol: float):
    n = len(pts)
    f = np.full(n, np.nan)
    Q = np.full((n, 2), np.nan)
    FQ = np.full(n, np.nan)
    for o in set(owners):
        if not o:
            continue
        idx = np.flatnonzero(owners == o)
        tr = chart.global_transversal if o == "__global__" else chart.cst[o]
        S, T, Qo, status = _flow_integrals(V, pts[idx], tr, g, tmax, tol, UNBOUNDED)
        (h,) = compile_exprs([init[o]]).masked(Qo[:, 0], Qo[:, 1])[0]
        fq = h + plan.const.get(o, 0.0)
        f[idx] = fq - S
        Q[idx] = Qo
        FQ[idx] = fq
    return f, Q, FQ


def solve(field: PlanarField, chart: FoliationChart, ham: HamiltonianPair, g: Expr | str, grid: Box | None = None,
          nx: int = 81, ny: int = 81, initial=None, operator: str = "xi", schedule: Schedule | None = None,
          seed_separatrix: str | None = None, tau: float = 0.05) -> SolutionGrid:
    """Method of characteristics on a grid, extended across adjacent separatrices.

    ``initial`` gives the free data on each transversal (an expression, or a
    mapping from separatrix id to expression; default 0).  The seed
    transversal takes its data as is.  Each further transversal receives its
    data plus the constant that makes the solution continuous at its anchor;
    that limit is extrapolated from the already-built side.  Stitching
    starts from the separatrix anchored nearest the grid centre (unless
    ``seed_separatrix`` is given) and stops once every grid point is covered;
    ExtensionError is raised when a needed limit does not exist.

    The residual column is ``|f(Phi^tau p) - f(p) - int_0^tau g|`` with
    ``f(Phi^tau p)`` recomputed along its own characteristic.
    """
    sched = schedule or Schedule()
    g = parse(g) if isinstance(g, str) else g
    V, _ = _operator(field, ham, operator)
    init = _initial_map(chart, initial)
    box = grid or Box(-2, 2, -2, 2)
    X, Y = box.grid(nx, ny)
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    plan = _Plan(chart)
    stitches = []
    failures: list[ExtensionError] = []
    if chart.separatrices:
        if seed_separatrix is None:
            cx, cy = 0.5 * (box.xmin + box.xmax), 0.5 * (box.ymin + box.ymax)
            seed_separatrix = min(chart.separatrices,
                                  key=lambda s: math.hypot(chart.anchor(s.id)[0] - cx, chart.anchor(s.id)[1] - cy)).id
        plan.claim(seed_separatrix, 0.0)
        # stitch outward from the seed, only as far as the grid needs
        pending = list(chart.pairs)
        while pending and np.any(plan.owner_of(pts[:, 0], pts[:, 1]) == ""):
            ready = [pr for pr in pending if (pr.s1 in plan.const) != (pr.s2 in plan.const)
                     and pr.region in plan.region_owner]
            pending = [pr for pr in pending if not (pr.s1 in plan.const and pr.s2 in plan.const)]
            if not ready:
                break
            uncovered = plan.owner_of(pts[:, 0], pts[:, 1]) == ""
            wanted = {tuple(int(v) for v in r) for r in chart.region_of(pts[uncovered, 0], pts[uncovered, 1])}
            useful = [pr for pr in ready
                      if wanted & set(plan.sides(pr.s2 if pr.s1 in plan.const else pr.s1))]
            pr = (useful or ready)[0]
            pending.remove(pr)
            new, side = (pr.s2, pr.side2) if pr.s1 in plan.const else (pr.s1, pr.side1)
            limit, sv = _limit_at_anchor(V, chart, plan, g, init, new, side, sched)
            if sv.outcome != Outcome.FINITE:
                failures.append(ExtensionError(
                    f"cannot extend the solution across pair {pr.index} ({pr.s1}, {pr.s2}): "
                    f"the limit at the anchor of {new!r} is {sv.outcome.value} ({sv.note})",
                    pr.index, {"values": sv.extrapolants}))
                continue
            c = limit - float(init[new](*chart.anchor(new)))
            plan.claim(new, c)
            stitches.append({"pair": pr.index, "into": new, "limit": limit, "constant": c,
                             "stable": bool(sv.stable)})
    owners = plan.owner_of(pts[:, 0], pts[:, 1])
    if failures and np.any(owners == ""):
        raise failures[0]
    f, Q, FQ = _evaluate(V, chart, plan, g, init, pts, owners, sched.tmax, sched.tol)
    # residual in integral form
    step = integrate_many(V, pts, tau, tol=sched.tol, integrands=[g], far_box=UNBOUNDED)
    p2 = step.y[:, :2]
    f2, _, _ = _evaluate(V, chart, plan, g, init, p2, owners, sched.tmax, sched.tol)
    res = np.abs(f2 - f - step.y[:, 2])
    unreachable = int(np.sum(~np.isfinite(f)))
    return SolutionGrid(X, Y, f.reshape(X.shape), res.reshape(X.shape), owners.reshape(X.shape),
                        Q.reshape(X.shape + (2,)), FQ.reshape(X.shape), stitches, unreachable, operator)


def _limit_at_anchor(V, chart, plan, g, init, sid, side, sched: Schedule):
    tr = chart.cst[sid]
    pts = walk_transversal(tr, chart.anchor(sid), side * sched.deltas())
    owners = plan.owner_of(pts[:, 0], pts[:, 1])
    f, _, _ = _evaluate(V, chart, plan, g, init, pts, owners, sched.tmax, sched.tol)
    sv = classify_sequence(f, sched.stability, sched.threshold)
    return (sv.value if sv.value is not None else float("nan")), sv


def kernel_invariant_error(sol: SolutionGrid, f_exact: Expr | str) -> float:
    """Largest ``|(f(p) - f(q)) - (f*(p) - f*(q))|`` relative to ``max |f*|``.

    ``q`` is the point where the characteristic of ``p`` meets its transversal,
    so the measure ignores whatever function of the leaf was added.
    """
    fe = parse(f_exact) if isinstance(f_exact, str) else f_exact
    comp = compile_exprs([fe])
    (ep,) = comp(sol.x, sol.y)
    (eq,) = comp.masked(sol.q[..., 0], sol.q[..., 1])[0]
    err = np.abs((sol.f - sol.fq) - (ep - eq))
    return float(np.nanmax(err) / np.max(np.abs(ep)))


# ---------------------------------------------------------------------------
# Rectified picture

@dataclass(frozen=True)
class RectRegion:
    """A box in (x', y') minus an optional excluded rectangle ``x' >= a, b1 <= y' <= b2``."""

    x0: float
    x1: float
    y0: float
    y1: float
    excluded: Interval | None = None

    @property
    def baseline(self) -> float:
        return 0.5 * (self.y0 + self.y1)


class QuadratureError(ArithmeticError):
    pass


def _sampler(ghat):
    if isinstance(ghat, Expr):
        comp = compile_exprs([ghat])

        def f(xp, yp):
            (v,), ok = comp.masked(xp, yp)
            return v
        return f
    return ghat


def _quad(fun, lo, hi, points=(), epsabs=1e-12, epsrel=1e-12):
    pts = [p for p in points if lo < p < hi]
    bad = []

    def wrapped(t):
        v = float(fun(t))
        if not np.isfinite(v):
            bad.append(t)
            return 0.0
        return v

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        val, err, *info = sp_integrate.quad(wrapped, lo, hi, points=pts or None, epsabs=epsabs, epsrel=epsrel,
                                            limit=400, full_output=1)
    ier = info[1] if len(info) > 1 and isinstance(info[1], int) else 0
    if bad:
        raise QuadratureError(f"integrand undefined at y' = {bad[0]:.6g}")
    if ier not in (0, 2) or (ier == 2 and err > 1e-6 * max(1.0, abs(val))):
        raise QuadratureError(f"quadrature did not converge (ier={ier}, error estimate {err:.3g}, value {val:.6g})")
    return val


@dataclass
class RectifiedSolution:
    ghat: object
    region: RectRegion
    ham: HamiltonianPair | None
    flip: bool = False

    def __call__(self, xp, yp):
        xp = np.atleast_1d(np.asarray(xp, dtype=float))
        yp = np.atleast_1d(np.asarray(yp, dtype=float))
        xp, yp = np.broadcast_arrays(xp, yp)
        fun = _sampler(self.ghat)
        out = np.empty(xp.shape)
        y0 = self.region.baseline
        ex = self.region.excluded
        for i in np.ndindex(xp.shape):
            a, b = float(xp[i]), float(yp[i])
            lo, hi = sorted((y0, b))
            if ex is not None and a >= ex.a and hi >= ex.b1 and lo <= ex.b2:
                raise QuadratureError(f"the path from y'={y0} to y'={b} at x'={a} crosses the excluded rectangle")
            v = _quad(lambda t: fun(a, t), y0, b) if b != y0 else 0.0
            out[i] = v
        return out

    def pullback(self, x, y):
        F, G = compile_exprs([self.ham.F, self.ham.G])(x, y)
        return self(-F if self.flip else F, G)


def solve_rectified(ham: HamiltonianPair | None, ghat, region: RectRegion, flip: bool = False) -> RectifiedSolution:
    """``fhat(x', y') = int_{y0}^{y'} ghat(x', s) ds`` with ``y0`` the region's mid-height.

    The pullback ``fhat(F, G)`` solves ``xi'_F f = ghat(F, G)``.  Paths that
    would run through the excluded rectangle are refused.
    """
    return RectifiedSolution(ghat, region, ham, flip)


def germ_h(ghat, interval: Interval, eps: float, xp: float, delta: float = math.inf) -> float:
    """``h_I(x') = int_{b1 - eps}^{b2 + eps} ghat(x', y') dy'``."""
    if not (0 < eps < delta):
        raise ValueError(f"eps must lie in (0, {delta})")
    if xp >= interval.a:
        raise ValueError("x' must lie strictly on the approach side, x' < a")
    fun = _sampler(ghat)
    return _quad(lambda t: fun(xp, t), interval.b1 - eps, interval.b2 + eps, points=(interval.b1, interval.b2),
                 epsabs=1e-12, epsrel=1e-12)


@dataclass
class RegularityReport:
    order: int
    rmax: int
    interval: Interval
    eps: float
    per_order: list[dict]

    def to_json(self) -> dict:
        return {"schema": 1, "order": self.order, "rmax": self.rmax, "eps": self.eps,
                "interval": self.interval.to_json(), "per_order": self.per_order}


def _h_derivative(ghat, interval, eps, xp, k, a):
    """k-th x'-derivative of h by nested 5-point stencils (for non-expression samplers)."""
    if k == 0:
        return germ_h(ghat, interval, eps, xp)
    hstep = 1e-3 * abs(xp - a)
    w = ((-2, 1), (-1, -8), (1, 8), (2, -1))
    return sum(c * _h_derivative(ghat, interval, eps, xp + j * hstep, k - 1, a) for j, c in w) / (12 * hstep)


def estimate_order(ghat, interval: Interval, rmax: int = 3, eps: float = 0.5,
                   schedule: Schedule | None = None) -> RegularityReport:
    """Largest r such that the germs of ``d^k ghat / dx'^k``, k <= r, have a finite limit at ``a``.

    ``ghat`` is an expression in x, y (read as x', y') or a callable; for
    callables the x'-derivatives are taken on h itself, which is legitimate
    because differentiation in x' commutes with the integral.  The ladder
    stops at the first order that is not finite.
    """
    sched = schedule or Schedule()
    xs = interval.a - sched.deltas()
    per = []
    order = -1
    cur = ghat
    for k in range(rmax + 1):
        try:
            if isinstance(ghat, Expr):
                hs = [germ_h(cur, interval, eps, x) for x in xs]
            else:
                hs = [_h_derivative(ghat, interval, eps, x, k, interval.a) for x in xs]
        except QuadratureError as e:
            per.append({"k": k, "outcome": Outcome.DIVERGENT.value, "value": None, "trace": [],
                        "note": f"h is not defined near a: {e}"})
            break
        sv = classify_sequence(hs, sched.stability, sched.threshold)
        per.append({"k": k, "outcome": sv.outcome.value, "value": sv.value, "trace": [float(h) for h in hs],
                    "rate": sv.rate, "stable": sv.stable, "note": sv.note})
        if sv.outcome != Outcome.FINITE:
            break
        order = k
        if isinstance(ghat, Expr):
            cur = cur.diff("x")
    return RegularityReport(order, rmax, interval, eps, per)
