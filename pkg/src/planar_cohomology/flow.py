"""Flows of planar fields: adaptive Dormand-Prince 5(4) with dense output,
transversal-crossing events and leaf tracing.

Everything runs on batches of trajectories ("lanes") at once; each lane has
its own step size, so a single call can push thousands of start points
through the flow with vectorised field evaluations.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .expr import Expr, compile_exprs, parse, lie, const

__all__ = [
    "Box",
    "UNBOUNDED",
    "PlanarField",
    "Transversal",
    "Status",
    "FlowResult",
    "RegularityError",
    "FlowError",
    "integrate",
    "integrate_many",
    "flow_to_crossing",
    "crossings_many",
    "trace_leaf",
    "write_polyline_csv",
]


class RegularityError(ValueError):
    """The field vanishes (or nearly) somewhere on the working box."""


class FlowError(RuntimeError):
    """Raised for step underflow and for a missing crossing when one was required."""


@dataclass(frozen=True)
class Box:
    xmin: float = -6.0
    xmax: float = 6.0
    ymin: float = -6.0
    ymax: float = 6.0

    def __post_init__(self):
        for k in ("xmin", "xmax", "ymin", "ymax"):
            object.__setattr__(self, k, float(getattr(self, k)))

    def contains(self, x, y):
        return (x >= self.xmin) & (x <= self.xmax) & (y >= self.ymin) & (y <= self.ymax)

    def expanded(self, factor: float) -> "Box":
        cx, cy = 0.5 * (self.xmin + self.xmax), 0.5 * (self.ymin + self.ymax)
        hx, hy = 0.5 * (self.xmax - self.xmin) * factor, 0.5 * (self.ymax - self.ymin) * factor
        return Box(cx - hx, cx + hx, cy - hy, cy + hy)

    def grid(self, nx: int, ny: int):
        xs = np.linspace(self.xmin, self.xmax, nx)
        ys = np.linspace(self.ymin, self.ymax, ny)
        return np.meshgrid(xs, ys, indexing="xy")

    def as_list(self) -> list[float]:
        return [self.xmin, self.xmax, self.ymin, self.ymax]

    @classmethod
    def from_list(cls, v: Sequence[float]) -> "Box":
        return cls(*map(float, v))


@dataclass(frozen=True, eq=False)
class PlanarField:
    fx: Expr
    fy: Expr
    name: str = "field"

    @classmethod
    def from_strings(cls, fx: str, fy: str, name: str = "field") -> "PlanarField":
        return cls(parse(fx), parse(fy), name)

    @property
    def components(self) -> tuple[Expr, Expr]:
        return (self.fx, self.fy)

    def __call__(self, x, y):
        return compile_exprs([self.fx, self.fy])(x, y)

    def lie(self, f: Expr) -> Expr:
        return lie(self.components, f)

    def scaled(self, factor: Expr, name: str | None = None) -> "PlanarField":
        return PlanarField(self.fx * factor, self.fy * factor, name or self.name)

    def normalized(self) -> "PlanarField":
        """Unit-speed reparametrisation; its flow is complete on regular fields."""
        speed = (self.fx * self.fx + self.fy * self.fy) ** const(0.5)
        return PlanarField(self.fx / speed, self.fy / speed, f"{self.name}/|{self.name}|")

    def check_regular(self, box: Box, n: int = 65, tol: float = 1e-12) -> None:
        gx, gy = box.grid(n, n)
        u, v = self(gx, gy)
        s = u * u + v * v
        if np.any(s <= tol):
            k = int(np.argmin(s))
            raise RegularityError(
                f"field {self.name!r} is not regular on the box: |xi|^2 = {s.flat[k]:.3g} "
                f"at ({gx.flat[k]:.6g}, {gy.flat[k]:.6g})"
            )


@dataclass(frozen=True, eq=False)
class Transversal:
    """A curve ``{fn = 0}`` restricted to ``bounds``; crossings elsewhere are ignored.

    ``kind`` records how it was declared (vertical/horizontal segment or the
    level set of an expression) and ``value`` the level.
    """

    kind: str
    fn: Expr
    bounds: Box
    value: float = 0.0
    source: Expr | None = None
    orientation: int = 1
    label: str = ""

    @classmethod
    def vertical(cls, x0: float, y0: float, y1: float, label: str = "", xpad: float = np.inf) -> "Transversal":
        return cls("vertical", parse("x") - const(x0), Box(-np.inf, np.inf, min(y0, y1), max(y0, y1)),
                   x0, parse("x"), 1, label)

    @classmethod
    def horizontal(cls, y0: float, x0: float, x1: float, label: str = "") -> "Transversal":
        return cls("horizontal", parse("y") - const(y0), Box(min(x0, x1), max(x0, x1), -np.inf, np.inf),
                   y0, parse("y"), 1, label)

    @classmethod
    def level(cls, expr: Expr | str, value: float, bounds: Box | None = None, label: str = "") -> "Transversal":
        e = parse(expr) if isinstance(expr, str) else expr
        return cls("level", e - const(value), bounds or Box(-np.inf, np.inf, -np.inf, np.inf),
                   float(value), e, 1, label)

    @property
    def grad(self) -> tuple[Expr, Expr]:
        return (self.fn.diff("x"), self.fn.diff("y"))

    def residual(self, x, y):
        return self.fn(x, y)

    def valid(self, x, y):
        return self.bounds.contains(x, y)

    def tangent_field(self) -> PlanarField:
        """Unit tangent of the curve (a Hamiltonian field of the defining function)."""
        gx, gy = self.grad
        nrm = (gx * gx + gy * gy) ** const(0.5)
        s = float(self.orientation)
        return PlanarField(const(-s) * gy / nrm, const(s) * gx / nrm, f"tangent[{self.label}]")

    def project(self, x, y, iters: int = 8):
        """Newton projection of points onto the curve along the gradient."""
        f = compile_exprs([self.fn, *self.grad])
        x = np.array(x, dtype=float)
        y = np.array(y, dtype=float)
        for _ in range(iters):
            r, gx, gy = f(x, y)
            g2 = gx * gx + gy * gy
            x = x - r * gx / g2
            y = y - r * gy / g2
        return x, y

    def to_json(self) -> dict:
        d = {"kind": self.kind, "label": self.label, "value": self.value,
             "bounds": [None if not np.isfinite(v) else v for v in self.bounds.as_list()]}
        if self.source is not None:
            d["expr"] = str(self.source)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Transversal":
        b = [(-np.inf if i % 2 == 0 else np.inf) if v is None else float(v) for i, v in enumerate(d.get("bounds") or [None] * 4)]
        box = Box(*b)
        kind = d.get("kind", "level")
        label = d.get("label", "")
        if kind == "vertical":
            return cls("vertical", parse("x") - const(d["value"]), box, float(d["value"]), parse("x"), 1, label)
        if kind == "horizontal":
            return cls("horizontal", parse("y") - const(d["value"]), box, float(d["value"]), parse("y"), 1, label)
        return cls.level(d["expr"], float(d["value"]), box, label)


class Status(enum.IntEnum):
    RUNNING = 0
    REACHED_TIME = 1
    CROSSED = 2
    LEFT_BOX = 3
    STEP_UNDERFLOW = 4
    MAX_STEPS = 5

    @property
    def label(self) -> str:
        return self.name.lower().replace("_", "-")


@dataclass
class FlowResult:
    endpoint: tuple[float, float]
    elapsed: float
    status: Status
    integral: float = 0.0
    integrals: tuple = ()

    @property
    def crossed(self) -> bool:
        return self.status == Status.CROSSED


# ---------------------------------------------------------------------------
# Dormand-Prince 5(4) tableau, with the continuous extension of order 4

_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_E = np.array([-71 / 57600, 0.0, 71 / 16695, -71 / 1920, 17253 / 339200, -22 / 525, 1 / 40])
_P = np.array([
    [1, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0, 0, 0, 0],
    [0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])


class _Events:
    def __init__(self, transversals: Sequence[Transversal]):
        self.items = list(transversals)
        self.fn = compile_exprs([t.fn for t in self.items]) if self.items else None
        self.gr = compile_exprs([g for t in self.items for g in t.grad]) if self.items else None

    def __len__(self):
        return len(self.items)

    def values(self, x, y):
        if not self.items:
            return np.zeros((len(x), 0))
        vals, ok = self.fn.masked(x, y)
        return np.stack(vals, axis=1)

    def valid(self, j: int, x, y):
        return self.items[j].valid(x, y)


def _make_rhs(field: PlanarField, integrands: Sequence[Expr]):
    comp = compile_exprs([field.fx, field.fy, *integrands])

    def rhs(Y):
        outs, ok = comp.masked(Y[:, 0], Y[:, 1])
        return np.stack(outs, axis=1)

    return rhs, comp


@dataclass
class BatchResult:
    t: np.ndarray
    y: np.ndarray
    status: np.ndarray
    cross_t: np.ndarray
    cross_y: np.ndarray
    cross_count: np.ndarray
    steps: np.ndarray
    paths: list | None = None


def integrate_batch(
    rhs: Callable,
    y0: np.ndarray,
    t_end,
    events: _Events | None = None,
    terminal: Sequence[int] = (),
    rtol: float = 1e-10,
    atol: float = 1e-12,
    far_box: Box | None = None,
    max_steps: int = 100000,
    record: bool = False,
    record_ds: float | None = None,
) -> BatchResult:
    """Integrate ``y' = rhs(y)`` for many lanes from t = 0 to ``t_end`` (signed)."""
    y0 = np.atleast_2d(np.asarray(y0, dtype=float))
    n, d = y0.shape
    t_end = np.broadcast_to(np.asarray(t_end, dtype=float), (n,)).copy()
    direction = np.where(t_end < 0, -1.0, 1.0)
    events = events or _Events([])
    ne = len(events)
    is_term = np.zeros(ne, dtype=bool)
    is_term[list(terminal)] = True

    T = np.zeros(n)
    Yc = y0.copy()
    status = np.zeros(n, dtype=int)
    steps = np.zeros(n, dtype=int)
    cross_t = np.full((n, ne), np.nan)
    cross_y = np.full((n, ne, d), np.nan)
    cross_count = np.zeros((n, ne), dtype=int)
    paths = [[(0.0, *y0[i])] for i in range(n)] if record else None

    status[t_end == 0] = Status.REACHED_TIME
    F = rhs(Yc)
    bad0 = ~np.all(np.isfinite(F), axis=1)
    status[bad0 & (status == 0)] = Status.STEP_UNDERFLOW
    ev_prev = events.values(Yc[:, 0], Yc[:, 1])

    # initial step (Hairer & Wanner, II.4)
    sc = atol + rtol * np.abs(Yc)
    with np.errstate(all="ignore"):
        d0 = np.sqrt(np.mean((Yc / sc) ** 2, axis=1))
        d1 = np.sqrt(np.mean((F / sc) ** 2, axis=1))
        h0 = np.where((d0 < 1e-5) | (d1 < 1e-5), 1e-6, 0.01 * d0 / d1)
        h0 = np.minimum(h0, np.abs(t_end))
        Y1 = Yc + (direction * h0)[:, None] * F
        F1 = rhs(Y1)
        d2 = np.sqrt(np.mean(((F1 - F) / sc) ** 2, axis=1)) / np.maximum(h0, 1e-300)
        dm = np.maximum(d1, d2)
        h1 = np.where(dm <= 1e-15, np.maximum(1e-6, h0 * 1e-3), (0.01 / dm) ** 0.2)
        h = np.minimum(100 * h0, h1)
    h = np.where(np.isfinite(h) & (h > 0), h, 1e-6)
    err_prev = np.ones(n)

    act = np.flatnonzero(status == 0)
    while act.size:
        tt = T[act]
        yy = Yc[act]
        hh = np.minimum(h[act], np.abs(t_end[act] - tt))
        dirs = direction[act]
        hs = (hh * dirs)[:, None]
        K = np.empty((act.size, 7, d))
        K[:, 0] = F[act]
        with np.errstate(all="ignore"):
            for s in range(1, 6):
                inc = sum(_A[s][j] * K[:, j] for j in range(s))
                K[:, s] = rhs(yy + hs * inc)
            ynew = yy + hs * np.tensordot(K[:, :6], _B[:6], axes=([1], [0]))
            K[:, 6] = rhs(ynew)
            errv = hs * np.tensordot(K, _E, axes=([1], [0]))
            sc = atol + rtol * np.maximum(np.abs(yy), np.abs(ynew))
            err = np.sqrt(np.mean((errv / sc) ** 2, axis=1))
        finite = np.all(np.isfinite(K), axis=(1, 2)) & np.all(np.isfinite(ynew), axis=1)
        err = np.where(finite & np.isfinite(err), err, np.inf)
        acc = err <= 1.0

        # step-size control (PI on accepted steps)
        with np.errstate(all="ignore"):
            fac_acc = 0.9 * np.maximum(err, 1e-10) ** (-0.7 / 5) * err_prev[act] ** (0.4 / 5)
            fac_rej = np.where(np.isfinite(err), 0.9 * np.maximum(err, 1e-10) ** (-0.2), 0.2)
        fac = np.where(acc, np.clip(fac_acc, 0.2, 5.0), np.clip(fac_rej, 0.1, 0.9))
        h_new = hh * fac

        ia = act[acc]
        if ia.size:
            ka = K[acc]
            ya0 = yy[acc]
            ya1 = ynew[acc]
            ta0 = tt[acc]
            ha = hs[acc]
            ev_new = events.values(ya1[:, 0], ya1[:, 1])
            stop_theta = np.full(ia.size, np.inf)
            if ne:
                e0 = ev_prev[ia]
                sign_change = ((np.sign(e0) * np.sign(ev_new)) < 0) | ((ev_new == 0) & (e0 != 0))
                rows, cols = np.nonzero(sign_change)
                if rows.size:
                    Q = np.einsum("nkd,kp->ndp", ka[rows], _P)
                    thetas = _locate(Q, ya0[rows], ha[rows], events, rows, cols, e0[rows, cols], rhs)
                    ypt = _dense(Q, ya0[rows], ha[rows], thetas)
                    ok = np.array([events.valid(c, ypt[i, 0], ypt[i, 1]) for i, c in enumerate(cols)], dtype=bool)
                    for i in np.flatnonzero(ok):
                        r, c = rows[i], cols[i]
                        if is_term[c]:
                            stop_theta[r] = min(stop_theta[r], thetas[i])
                    for i in np.flatnonzero(ok):
                        r, c = rows[i], cols[i]
                        if thetas[i] > stop_theta[r] + 1e-15:
                            continue
                        lane = ia[r]
                        cross_count[lane, c] += 1
                        if cross_count[lane, c] == 1:
                            cross_t[lane, c] = ta0[r] + ha[r, 0] * thetas[i]
                            cross_y[lane, c] = ypt[i]
            T[ia] = ta0 + ha[:, 0]
            Yc[ia] = ya1
            F[ia] = ka[:, 6]
            ev_prev[ia] = ev_new
            steps[ia] += 1
            err_prev[ia] = np.maximum(err[acc], 1e-4)
            term = np.isfinite(stop_theta)
            if np.any(term):
                lanes = ia[term]
                # rewind the lane to the terminal crossing
                for r, lane in zip(np.flatnonzero(term), lanes):
                    js = [j for j in range(ne) if is_term[j] and cross_count[lane, j] >= 1]
                    jbest = min(js, key=lambda j: cross_t[lane, j] * direction[lane])
                    T[lane] = cross_t[lane, jbest]
                    Yc[lane] = cross_y[lane, jbest]
                status[lanes] = Status.CROSSED
            if record:
                for r, lane in enumerate(ia):
                    if record_ds:
                        seg = np.hypot(*(ya1[r, :2] - ya0[r, :2]))
                        m = int(min(200, np.ceil(seg / record_ds)))
                        if m > 1:
                            Q1 = np.einsum("kd,kp->dp", ka[r], _P)
                            for th in np.arange(1, m) / m:
                                yp = ya0[r] + ha[r, 0] * (Q1 @ (th ** np.arange(1, 5)))
                                paths[lane].append((ta0[r] + ha[r, 0] * th, *yp))
                    paths[lane].append((T[lane], *Yc[lane]))
            done_t = (np.abs(T[ia] - t_end[ia]) <= 1e-14 * np.maximum(1.0, np.abs(t_end[ia]))) & (status[ia] == 0)
            status[ia[done_t]] = Status.REACHED_TIME
            if far_box is not None:
                out = ~far_box.contains(Yc[ia, 0], Yc[ia, 1]) & (status[ia] == 0)
                status[ia[out]] = Status.LEFT_BOX
            over = (steps[ia] >= max_steps) & (status[ia] == 0)
            status[ia[over]] = Status.MAX_STEPS

        h[act] = h_new
        tiny = (h[act] < 1e-14 * np.maximum(1.0, np.abs(T[act]))) & (status[act] == 0)
        status[act[tiny]] = Status.STEP_UNDERFLOW
        act = np.flatnonzero(status == 0)

    if record:
        paths = [np.array(p) for p in paths]
    return BatchResult(T, Yc, status, cross_t, cross_y, cross_count, steps, paths)


def _dense(Q, y0, hs, theta):
    pw = np.stack([theta, theta ** 2, theta ** 3, theta ** 4], axis=1)
    return y0 + hs * np.einsum("ndp,np->nd", Q, pw)


def _locate(Q, y0, hs, events: _Events, rows, cols, e0, rhs):
    """Bisection on the dense output in theta, then one Newton polish in t."""
    lo = np.zeros(len(rows))
    hi = np.ones(len(rows))
    s0 = np.sign(e0)
    for _ in range(48):
        mid = 0.5 * (lo + hi)
        yp = _dense(Q, y0, hs, mid)
        v = _event_vals(events, cols, yp)
        same = np.sign(v) == s0
        lo = np.where(same, mid, lo)
        hi = np.where(same, hi, mid)
    th = 0.5 * (lo + hi)
    yp = _dense(Q, y0, hs, th)
    v = _event_vals(events, cols, yp)
    with np.errstate(all="ignore"):
        gr, _ = events.gr.masked(yp[:, 0], yp[:, 1])
        gx = np.stack(gr[0::2], axis=1)[np.arange(len(cols)), cols]
        gy = np.stack(gr[1::2], axis=1)[np.arange(len(cols)), cols]
        fv = rhs(yp)
        rate = gx * fv[:, 0] + gy * fv[:, 1]
        dth = -v / (rate * hs[:, 0])
    dth = np.where(np.isfinite(dth), dth, 0.0)
    return np.clip(th + dth, 0.0, 1.0)


def _event_vals(events: _Events, cols, yp):
    allv = events.values(yp[:, 0], yp[:, 1])
    return allv[np.arange(len(cols)), cols]


# ---------------------------------------------------------------------------
# Public entry points

DEFAULT_BOX = Box()
UNBOUNDED = Box(-np.inf, np.inf, -np.inf, np.inf)


def _far(box: Box | None, far: Box | None) -> Box:
    if far is not None:
        return far
    return (box or DEFAULT_BOX).expanded(3.0)


def integrate_many(field: PlanarField, points, t, tol: float = 1e-10, box: Box | None = None,
                   integrands: Sequence[Expr] = (), far_box: Box | None = None) -> BatchResult:
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    rhs, _ = _make_rhs(field, integrands)
    y0 = np.hstack([pts, np.zeros((len(pts), len(integrands)))])
    return integrate_batch(rhs, y0, t, rtol=tol, atol=tol * 1e-2, far_box=_far(box, far_box))


def integrate(field: PlanarField, p0, t: float, tol: float = 1e-10, box: Box | None = None,
              integrand: Expr | None = None) -> FlowResult:
    """Approximate the time-``t`` flow map at ``p0`` (``t`` may be negative)."""
    ig = [integrand] if integrand is not None else []
    r = integrate_many(field, [p0], t, tol, box, ig)
    st = Status(int(r.status[0]))
    if st == Status.STEP_UNDERFLOW:
        raise FlowError(f"step underflow at t = {r.t[0]:.6g}, point {tuple(r.y[0, :2])}")
    return FlowResult((float(r.y[0, 0]), float(r.y[0, 1])), float(r.t[0]), st,
                      float(r.y[0, 2]) if ig else 0.0)


def crossings_many(field: PlanarField, points, targets: Sequence[Transversal], tmax: float = 1e4,
                   tol: float = 1e-10, box: Box | None = None, integrands: Sequence[Expr] = (),
                   terminal: Sequence[int] | None = None, far_box: Box | None = None,
                   direction: float = 1.0) -> BatchResult:
    """Flow many points, recording the first crossing of every target curve.

    By default every target is terminal; pass ``terminal=()`` to keep going
    and record all crossings until the lane leaves the far box or times out.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    rhs, _ = _make_rhs(field, integrands)
    y0 = np.hstack([pts, np.zeros((len(pts), len(integrands)))])
    ev = _Events(targets)
    term = range(len(targets)) if terminal is None else terminal
    return integrate_batch(rhs, y0, direction * tmax, ev, term, rtol=tol, atol=tol * 1e-2,
                           far_box=_far(box, far_box))


def flow_to_crossing(field: PlanarField, p0, target: Transversal, tmax: float = 1e4,
                     tol: float = 1e-10, box: Box | None = None, integrand: Expr | None = None,
                     direction: float = 1.0, far_box: Box | None = None) -> FlowResult:
    """Flow from ``p0`` until the trajectory crosses ``target``.

    ``elapsed`` is the signed crossing time T_p.  When no crossing happens
    before ``tmax`` (or before the lane leaves the far box) the status says
    so; callers treat that as the divergence signal.
    """
    ig = [integrand] if integrand is not None else []
    r = crossings_many(field, [p0], [target], tmax, tol, box, ig, far_box=far_box, direction=direction)
    st = Status(int(r.status[0]))
    if st == Status.STEP_UNDERFLOW:
        raise FlowError(f"step underflow at t = {r.t[0]:.6g}, point {tuple(r.y[0, :2])}")
    return FlowResult((float(r.y[0, 0]), float(r.y[0, 1])), float(r.t[0]), st,
                      float(r.y[0, 2]) if ig else 0.0)


def trace_leaf(field: PlanarField, p0, box: Box | None = None, length: float = 50.0,
               spacing: float = 0.05, tol: float = 1e-11,
               transversals: Sequence[Transversal] = ()) -> np.ndarray:
    """Forward and backward arcs of the leaf through ``p0``, as rows ``(t, x, y)``.

    Tracing stops on leaving ``box`` or after ``length`` units of arc length
    each way.  If ``transversals`` are given, each one may be crossed at most
    once along the whole polyline; a second crossing raises FlowError.
    """
    box = box or DEFAULT_BOX
    if not bool(box.contains(np.float64(p0[0]), np.float64(p0[1]))):
        raise ValueError(f"start point {tuple(p0)} lies outside the tracing box {box.as_list()}")
    unit = field.normalized()
    rhs, _ = _make_rhs(unit, [])
    ev = _Events(transversals)
    parts = []
    counts = np.zeros(len(transversals), dtype=int)
    for sgn in (-1.0, 1.0):
        r = integrate_batch(rhs, np.asarray([p0], dtype=float), sgn * length, ev, (), rtol=tol, atol=tol * 1e-2,
                            far_box=box, record=True, record_ds=spacing)
        if Status(int(r.status[0])) == Status.STEP_UNDERFLOW:
            raise FlowError(f"step underflow tracing leaf through {tuple(p0)}")
        counts += r.cross_count[0]
        parts.append(r.paths[0])
    back, fwd = parts
    pts = np.vstack([back[::-1], fwd[1:]])
    pts = pts[box.contains(pts[:, 1], pts[:, 2])]
    if np.any(counts > 1):
        j = int(np.argmax(counts))
        raise FlowError(f"leaf through {tuple(p0)} crosses transversal {transversals[j].label!r} {counts[j]} times")
    # convert arc length to the field's own time: dt = ds / |xi|
    u, v = field(pts[:, 1], pts[:, 2])
    inv = 1.0 / np.hypot(u, v)
    s = pts[:, 0]
    t = np.concatenate([[0.0], np.cumsum(0.5 * (inv[1:] + inv[:-1]) * np.diff(s))])
    i0 = int(np.argmin(np.abs(s)))
    pts[:, 0] = t - t[i0]
    return pts


def write_polyline_csv(path, poly: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "y"])
        for row in poly:
            w.writerow([repr(float(v)) for v in row])
