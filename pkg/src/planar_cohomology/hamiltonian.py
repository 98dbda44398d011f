"""Kernel generator F, transversal Hamiltonian G and the commuting pair they induce.

With the area form ``dx ^ dy`` and the density ``rho = F_x G_y - F_y G_x``
(so that ``dF ^ dG = rho dx ^ dy``)::

    xi_F  = (-F_y, F_x)        xi'_F = xi_F / rho
    xi_G  = ( G_y, -G_x)       xi'_G = xi_G / rho

and ``xi'_F F = 0``, ``xi'_F G = 1``, ``xi'_G F = 1``, ``xi'_G G = 0``.  The
map ``(x, y) -> (F, G)`` straightens ``xi'_F`` into ``d/dy'`` and ``xi'_G``
into ``d/dx'``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .expr import Expr, compile_exprs, const, parse
from .flow import (
    Box,
    PlanarField,
    Status,
    UNBOUNDED,
    crossings_many,
)

__all__ = [
    "HamiltonianPair",
    "DerivedPair",
    "derive_pair",
    "verify_relations",
    "RectifiedMap",
    "bump",
    "PositivityCertificate",
    "positivity_certificate",
    "DensityError",
]


class DensityError(ArithmeticError):
    """The density dF ^ dG vanishes at the evaluation point."""


@dataclass(frozen=True, eq=False)
class HamiltonianPair:
    F: Expr
    G: Expr
    degenerate: tuple[Expr, ...] = ()

    @classmethod
    def from_strings(cls, F: str, G: str, degenerate: Sequence[str] = ()) -> "HamiltonianPair":
        from .foliation import parse_curve
        return cls(parse(F), parse(G), tuple(parse_curve(d) for d in degenerate))

    def check(self, field: PlanarField, box: Box, n: int = 2000, seed: int = 0, collar: float = 0.05) -> dict:
        """Sampled ``L F = 0`` (relative) and ``L G != 0`` away from degenerate loci."""
        rng = np.random.default_rng(seed)
        x = rng.uniform(box.xmin, box.xmax, n)
        y = rng.uniform(box.ymin, box.ymax, n)
        lf, lg, fx, fy, u, v = compile_exprs([field.lie(self.F), field.lie(self.G), self.F.diff("x"),
                                              self.F.diff("y"), field.fx, field.fy])(x, y)
        scale = np.hypot(fx, fy) * np.hypot(u, v)
        keep = _outside_collars(self.degenerate, x, y, collar) & (scale > 0)
        rel = np.abs(lf[keep]) / scale[keep]
        return {"kernel_residual": float(rel.max(initial=0.0)),
                "min_abs_LG": float(np.abs(lg).min()),
                "LG_sign_constant": bool(np.all(lg > 0) or np.all(lg < 0))}


def _outside_collars(loci: Sequence[Expr], x, y, collar: float):
    keep = np.ones(np.shape(x), dtype=bool)
    for d in loci:
        gx, gy = d.diff("x"), d.diff("y")
        v, a, b = compile_exprs([d, gx, gy])(x, y)
        dist = np.abs(v) / np.maximum(np.hypot(a, b), 1e-300)
        keep &= dist >= collar
    return keep


@dataclass(frozen=True, eq=False)
class DerivedPair:
    ham: HamiltonianPair
    rho: Expr
    xi_F: PlanarField
    xi_G: PlanarField
    xiF: PlanarField  # xi'_F
    xiG: PlanarField  # xi'_G

    def evaluate(self, x, y):
        """``(xi'_F, xi'_G)`` as two ``(u, v)`` pairs; DensityError where rho = 0."""
        (r,) = compile_exprs([self.rho])(x, y)
        if np.any(r == 0):
            k = int(np.flatnonzero(np.ravel(r == 0))[0])
            xb, yb = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
            raise DensityError(f"dF ^ dG vanishes at ({np.ravel(xb)[k]:.6g}, {np.ravel(yb)[k]:.6g})")
        return self.xiF(x, y), self.xiG(x, y)


def derive_pair(field: PlanarField | None, ham: HamiltonianPair) -> DerivedPair:
    F, G = ham.F, ham.G
    Fx, Fy, Gx, Gy = F.diff("x"), F.diff("y"), G.diff("x"), G.diff("y")
    rho = Fx * Gy - Fy * Gx
    xi_F = PlanarField(-Fy, Fx, "xi_F")
    xi_G = PlanarField(Gy, -Gx, "xi_G")
    return DerivedPair(ham, rho, xi_F, xi_G, PlanarField(-Fy / rho, Fx / rho, "xi'_F"),
                       PlanarField(Gy / rho, -Gx / rho, "xi'_G"))


# ---------------------------------------------------------------------------
# Relation suite

def _bracket(a: PlanarField, b: PlanarField) -> tuple[Expr, Expr]:
    return (a.lie(b.fx) - b.lie(a.fx), a.lie(b.fy) - b.lie(a.fy))


def verify_relations(dp: DerivedPair, samples: int = 10000, tol: float = 1e-8, box: Box | None = None,
                     seed: int = 0, collar: float = 0.05) -> dict:
    """Sample the commuting-pair identities and report the max residual of each.

    Checked: the four normalisations (3), the bracket ``{F, G} = 1`` (5),
    ``[xi'_F, xi'_G] = 0`` (6), orthonormality for ``dF^2 + dG^2`` (7) and
    ``J xi'_F = xi'_G``, ``J xi'_G = -xi'_F`` (10).  Items 4, 8 and 9 follow
    from these and are listed as implied.
    """
    box = box or Box(-2, 2, -3, 3)
    rng = np.random.default_rng(seed)
    x = rng.uniform(box.xmin, box.xmax, samples)
    y = rng.uniform(box.ymin, box.ymax, samples)
    keep = _outside_collars(dp.ham.degenerate, x, y, collar)
    skipped = int((~keep).sum())
    x, y = x[keep], y[keep]
    F, G = dp.ham.F, dp.ham.G
    a, b = dp.xiF, dp.xiG
    c1, c2 = _bracket(a, b)
    exprs = [a.lie(F), a.lie(G), b.lie(F), b.lie(G), c1, c2,
             F.diff("x"), F.diff("y"), G.diff("x"), G.diff("y"), a.fx, a.fy, b.fx, b.fy, dp.rho]
    (aF, aG, bF, bG, k1, k2, Fx, Fy, Gx, Gy, au, av, bu, bv, rho) = compile_exprs(exprs)(x, y)
    res = {}
    res["3"] = float(np.max(np.abs(np.stack([aF, aG - 1, bF - 1, bG])), initial=0.0))
    omega = rho * (bu * av - bv * au)  # Omega_FG(xi'_G, xi'_F)
    res["5"] = float(np.max(np.abs(np.stack([omega - 1, omega - aG])), initial=0.0))
    res["6"] = float(np.max(np.abs(np.stack([k1, k2])), initial=0.0))
    nF = aF ** 2 + aG ** 2 - 1
    nG = bF ** 2 + bG ** 2 - 1
    cross = aF * bF + aG * bG
    res["7"] = float(np.max(np.abs(np.stack([nF, nG, cross])), initial=0.0))
    # J = DPhi^{-1} J' DPhi with J' d/dy' = d/dx', J' d/dx' = -d/dy'
    inv = np.array([[Gy, -Fy], [-Gx, Fx]]) / rho
    D = np.array([[Fx, Fy], [Gx, Gy]])
    Jp = np.array([[0.0, 1.0], [-1.0, 0.0]])
    J = np.einsum("ijn,jk,kln->iln", inv, Jp, D)
    Ja = np.einsum("ijn,jn->in", J, np.stack([au, av]))
    Jb = np.einsum("ijn,jn->in", J, np.stack([bu, bv]))
    r10 = np.concatenate([Ja - np.stack([bu, bv]), Jb + np.stack([au, av])])
    res["10"] = float(np.max(np.abs(r10), initial=0.0))
    return {
        "schema": 1,
        "relations": res,
        "passed": {k: v <= tol for k, v in res.items()},
        "implied": ["4", "8", "9"],
        "samples": int(keep.sum()),
        "skipped_in_collars": skipped,
        "collar": collar,
        "tol": tol,
        "box": box.as_list(),
    }


# ---------------------------------------------------------------------------
# Rectifying map

@dataclass(frozen=True, eq=False)
class RectifiedMap:
    ham: HamiltonianPair
    flip: bool = False

    def rectify(self, x, y):
        F, G = compile_exprs([self.ham.F, self.ham.G])(x, y)
        return (-F if self.flip else F), G

    def embed(self, x, y):
        xp, yp = self.rectify(x, y)
        return np.stack(np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float), xp, yp), axis=-1)

    def pushforward_residual(self, dp: DerivedPair, x, y) -> float:
        """``DPhi xi'_F = (0, 1)`` and ``DPhi xi'_G = (1, 0)`` (unflipped chart)."""
        F, G = self.ham.F, self.ham.G
        vals = compile_exprs([dp.xiF.lie(F), dp.xiF.lie(G), dp.xiG.lie(F), dp.xiG.lie(G)])(x, y)
        target = (0.0, 1.0, 1.0, 0.0)
        return float(max(np.max(np.abs(v - t)) for v, t in zip(vals, target)))

    def pull_back(self, ghat: Expr) -> Expr:
        """``ghat(x', y') -> ghat(F, G)`` as an expression in x, y."""
        xp = -self.ham.F if self.flip else self.ham.F
        return ghat.subs(x=xp, y=self.ham.G)


# ---------------------------------------------------------------------------
# Positivity certificate

def bump(t):
    """Smooth step: 0 for t <= 0, 1 for t >= 1, strictly increasing in between."""
    t = np.asarray(t, dtype=float)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        a = np.where(t > 0, np.exp(-1.0 / np.where(t > 0, t, 1.0)), 0.0)
        b = np.where(t < 1, np.exp(-1.0 / np.where(t < 1, 1.0 - t, 1.0)), 0.0)
        out = a / (a + b)
    return np.where(t <= 0, 0.0, np.where(t >= 1, 1.0, out))


def _diagonal(n_sep: int, depth: int):
    """Enumerate (separatrix, band) pairs along diagonals of |band| + separatrix."""
    bands = list(range(-2 * depth, 2 * depth + 2))
    keyed = sorted(((abs(b) + s, s, b) for s in range(n_sep) for b in bands))
    return [(s, b) for _, s, b in keyed]


@dataclass
class PositivityCertificate:
    f: np.ndarray
    Lf: np.ndarray
    covered: np.ndarray
    points: np.ndarray

    @property
    def min_Lf(self) -> float:
        return float(self.Lf[self.covered].min()) if np.any(self.covered) else float("nan")


def positivity_certificate(chart, field: PlanarField | None = None, depth: int = 8, points=None,
                           h: float = 1e-4, tol: float = 1e-10) -> PositivityCertificate:
    """Evaluate the truncated sum ``f = sum 2^-n phi(t_s - c)`` and ``L f`` at ``points``.

    ``t_s(p)`` is the unit-speed flow time from the transversal of separatrix
    ``s`` to ``p``.  Bands start at every half-integer ``c`` with
    ``|c| <= depth``, so every flow time lies well inside at least one band.
    ``L f`` is assembled term by term from centred differences along the flow,
    then rescaled by ``|xi|`` to the original field.  A point counts as covered
    when some flow time sits in the middle half of a retained band, where the
    bump's slope is bounded away from zero.
    """
    field = field or chart.field
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    trs = chart.transversals
    unit = field.normalized()
    n = len(pts)
    t = np.full((n, len(trs)), np.nan)
    reach = depth + 2.0
    for direction in (1.0, -1.0):
        r = crossings_many(unit, pts, trs, tmax=reach, tol=tol, terminal=(), far_box=UNBOUNDED,
                           direction=direction)
        hit = np.isfinite(r.cross_t) & np.isnan(t)
        # p = Phi^t(q) with q on the transversal, i.e. q = Phi^{-t}(p)
        t[hit] = -r.cross_t[hit]
    order = _diagonal(len(trs), depth)
    f = np.zeros(n)
    Lf = np.zeros(n)
    covered = np.zeros(n, dtype=bool)
    for k, (s, b) in enumerate(order):
        c = 0.5 * b
        ts = t[:, s]
        ok = np.isfinite(ts)
        w = math.ldexp(1.0, -(k + 1))
        f[ok] += w * bump(ts[ok] - c)
        d = (bump(ts[ok] - c + h) - bump(ts[ok] - c - h)) / (2 * h)
        Lf[ok] += w * d
        # the middle half of each band; half-shifted neighbours tile the line with these
        covered[ok] |= (ts[ok] >= c + 0.25) & (ts[ok] <= c + 0.75)
    u, v = field(pts[:, 0], pts[:, 1])
    Lf = Lf * np.hypot(u, v)
    return PositivityCertificate(f, Lf, covered, pts)
