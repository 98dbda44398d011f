"""Built-in model families and the JSON field-specification format.

``ex51:n`` is the polynomial family ``((1-n) + (1+n) y, 1 - y^2)`` with
separatrices ``y = +-1``; ``ex52:n`` is ``(cos y + (n-1) cos^2(y/2), -sin y)``
with separatrices ``y = k pi``.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

from .flow import Box, PlanarField, Transversal
from .foliation import FoliationChart, Separatrix, build_chart

__all__ = ["FieldSpec", "registry", "load_spec", "SpecError", "MODELS"]


class SpecError(ValueError):
    pass


@dataclass
class FieldSpec:
    fx: str
    fy: str
    F: str
    G: str
    separatrices: list[Separatrix]
    transversals: dict[str, dict]
    box: Box
    degenerate: list[str] = field(default_factory=list)
    global_transversal: dict | None = None
    name: str = "field"
    model: str | None = None

    @property
    def field(self) -> PlanarField:
        return PlanarField.from_strings(self.fx, self.fy, self.name)

    def hamiltonian(self):
        from .hamiltonian import HamiltonianPair
        return HamiltonianPair.from_strings(self.F, self.G, self.degenerate)

    def cst(self) -> dict[str, Transversal]:
        return {sid: Transversal.from_json(d) for sid, d in self.transversals.items()}

    def chart(self, samples: int = 64, seed: int = 0, check_coverage: bool = True) -> FoliationChart:
        gt = Transversal.from_json(self.global_transversal) if self.global_transversal else None
        return build_chart(self.field, self.separatrices, self.cst(), self.box, samples=samples, seed=seed,
                           global_transversal=gt, check_coverage=check_coverage)

    def to_json(self) -> dict:
        d = {
            "schema": 1,
            "name": self.name,
            "field": {"fx": self.fx, "fy": self.fy},
            "hamiltonian": {"F": self.F, "G": self.G, "degenerate": list(self.degenerate)},
            "separatrices": [s.to_json() for s in self.separatrices],
            "transversals": [dict(v, separatrix=k) for k, v in self.transversals.items()],
            "box": self.box.as_list(),
        }
        if self.global_transversal:
            d["global_transversal"] = self.global_transversal
        if self.model:
            d["model"] = self.model
        return d

    @classmethod
    def from_json(cls, d: dict) -> "FieldSpec":
        if d.get("model"):
            return registry(d["model"])
        try:
            seps = [Separatrix.from_json(s) for s in d.get("separatrices", [])]
            trs = {}
            for t in d.get("transversals", []):
                t = dict(t)
                trs[t.pop("separatrix")] = t
            ham = d["hamiltonian"]
            return cls(d["field"]["fx"], d["field"]["fy"], ham["F"], ham["G"], seps, trs,
                       Box.from_list(d.get("box", Box().as_list())), list(ham.get("degenerate", [])),
                       d.get("global_transversal"), d.get("name", "field"))
        except KeyError as e:
            raise SpecError(f"field specification is missing {e}") from None


def _lvl(expr: str, value: float, ymin: float, ymax: float, label: str) -> dict:
    return {"kind": "level", "expr": expr, "value": value, "bounds": [None, None, ymin, ymax], "label": label}


def _ex51(n: int) -> FieldSpec:
    if n >= 6:
        raise SpecError("ex51:n is only transversal to G = 2 y e^x for n <= 5")
    fx = "2*y" if n == 1 else f"({1 - n}) + {1 + n}*y"
    F = "(y^2-1)*exp(x)" if n == 1 else f"(1+y)^{n}*(1-y)*exp(x)"
    G = "2*y*exp(x)"
    seps = [
        Separatrix("s-", "y = -1", (0.0, -1.0), 0.0, ("s+",)),
        Separatrix("s+", "y = 1", (0.0, 1.0), 0.0, ("s-",)),
    ]
    trs = {"s-": _lvl(G, -2.0, None, None, "G=-2"), "s+": _lvl(G, 2.0, None, None, "G=2")}
    trs["s-"]["bounds"] = [None, None, None, 0.0]
    trs["s+"]["bounds"] = [None, None, 0.0, None]
    return FieldSpec(fx, "1-y^2", F, G, seps, trs, Box(-6, 6, -6, 6), [] if n == 1 else ["y+1"],
                     name=f"ex51:{n}", model=f"ex51:{n}")


def _ex52(n: int) -> FieldSpec:
    fx = "cos(y)" if n == 1 else f"cos(y) + {n - 1}*cos(y/2)^2"
    F = "exp(x)*sin(y)" if n == 1 else f"sin(y/2)^{n - 1}*sin(y)*exp(x)"
    G = "exp(x)*cos(y)" if n == 1 else f"exp(x/{n})*cos(y)"
    seps, trs = [], {}
    for k in range(-3, 4):
        sid = f"s{k}"
        nb = tuple(f"s{j}" for j in (k - 1, k + 1) if -3 <= j <= 3)
        seps.append(Separatrix(sid, f"y = {k}*pi", (0.0, k * math.pi), 0.0, nb))
        trs[sid] = _lvl(G, float((-1) ** k), (k - 0.5) * math.pi, (k + 0.5) * math.pi, f"G={(-1) ** k}")
    degenerate = [] if n == 1 else [f"sin(y/2)"]
    return FieldSpec(fx, "-sin(y)", F, G, seps, trs, Box(-6, 6, -3.5 * math.pi, 3.5 * math.pi), degenerate,
                     name=f"ex52:{n}", model=f"ex52:{n}")


def _const() -> FieldSpec:
    gt = {"kind": "vertical", "value": 0.0, "bounds": [None, None, None, None], "label": "x=0"}
    return FieldSpec("1", "0", "y", "x", [], {}, Box(), [], gt, name="const", model="const")


MODELS = {"ex51": _ex51, "ex52": _ex52}


def registry(name: str) -> FieldSpec:
    """Resolve ``ex51:n``, ``ex52:n`` (also written ``ex51(n)``) or ``const``."""
    name = name.strip()
    if name == "const":
        return _const()
    m = re.fullmatch(r"(ex5[12])\s*[:(]\s*(\d+)\s*\)?", name)
    if not m:
        raise SpecError(f"unknown model {name!r}; expected ex51:n, ex52:n or const")
    n = int(m.group(2))
    if n < 1:
        raise SpecError("model index must be >= 1")
    return MODELS[m.group(1)](n)


def load_spec(path: str | Path) -> FieldSpec:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise SpecError(f"{path}: {e}") from None
    return FieldSpec.from_json(d)
