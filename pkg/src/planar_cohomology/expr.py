"""Closed-form scalar expressions in two variables ``x`` and ``y``.

Expressions are parsed from infix strings into an immutable, hash-consed
DAG.  Partial derivatives are exact (symbolic) and memoised per node, and
evaluation is done by compiling one or more expressions into straight-line
numpy code with shared subexpressions.

>>> e = parse("(1-y^2)*exp(x)")
>>> e(0.0, 0.0)
1.0
>>> str(diff(e, "y"))
'(-((2.0 * y) * exp(x)))'
"""
from __future__ import annotations

import math
import re
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Expr",
    "ParseError",
    "DomainError",
    "parse",
    "const",
    "var",
    "X",
    "Y",
    "diff",
    "lie",
    "evaluate",
    "compile_exprs",
    "FUNCTIONS",
]

FUNCTIONS = ("sin", "cos", "tan", "exp", "log", "sqrt", "tanh", "atan", "abs", "sign")
CONSTANTS = {"pi": math.pi}
VARIABLES = ("x", "y")
RESERVED = frozenset(FUNCTIONS) | frozenset(CONSTANTS) | frozenset(VARIABLES)


class ParseError(ValueError):
    """Malformed expression source; ``offset`` is the byte offset of the problem."""

    def __init__(self, message: str, offset: int, src: str = ""):
        self.offset = offset
        self.src = src
        super().__init__(f"{message} at offset {offset}")


class DomainError(ArithmeticError):
    """Evaluation left the domain of some subexpression (log of x <= 0, 1/0, ...)."""

    def __init__(self, message: str, subexpr: "Expr | None" = None, point=None):
        self.subexpr = subexpr
        self.point = point
        where = ""
        if subexpr is not None:
            where += f" in {subexpr}"
        if point is not None:
            where += f" at (x, y) = ({point[0]!r}, {point[1]!r})"
        super().__init__(message + where)


# ---------------------------------------------------------------------------
# Nodes

_INTERN: dict = {}


class Expr:
    """Immutable expression node.  Structurally equal nodes are the same object."""

    __slots__ = ("op", "args", "value", "_d", "__weakref__")

    op: str
    args: tuple
    value: float | str | None

    def __new__(cls, op: str, args: tuple = (), value=None):
        key = (op, value, *map(id, args))
        node = _INTERN.get(key)
        if node is None:
            node = object.__new__(cls)
            object.__setattr__(node, "op", op)
            object.__setattr__(node, "args", args)
            object.__setattr__(node, "value", value)
            object.__setattr__(node, "_d", {})
            _INTERN[key] = node
        return node

    def __setattr__(self, name, value):
        raise AttributeError("Expr is immutable")

    def __reduce__(self):
        return (parse, (str(self),))

    # arithmetic sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __pow__(self, other):
        return power(self, _lift(other))

    def __rpow__(self, other):
        return power(_lift(other), self)

    def __neg__(self):
        return neg(self)

    # evaluation ---------------------------------------------------------------
    def __call__(self, x, y):
        """Evaluate at a single point (floats) or on arrays; raises DomainError."""
        return evaluate(self, x, y)

    def diff(self, var: str) -> "Expr":
        return diff(self, var)

    def subs(self, x: "Expr | None" = None, y: "Expr | None" = None) -> "Expr":
        """Substitute expressions for the variables (used for pullbacks ``g(F, G)``)."""
        mapping = {"x": X if x is None else _lift(x), "y": Y if y is None else _lift(y)}
        memo: dict[int, Expr] = {}

        def walk(e: Expr) -> Expr:
            r = memo.get(id(e))
            if r is not None:
                return r
            if e.op == "var":
                r = mapping[e.value]
            elif e.op == "const":
                r = e
            else:
                r = _rebuild(e.op, tuple(walk(a) for a in e.args))
            memo[id(e)] = r
            return r

        return walk(self)

    @property
    def is_const(self) -> bool:
        return self.op == "const"

    def free_of(self, var: str) -> bool:
        return all(n.op != "var" or n.value != var for n in _topo([self]))

    def size(self) -> int:
        return len(_topo([self]))

    def __str__(self) -> str:
        return to_string(self)

    def __repr__(self) -> str:
        return f"Expr({to_string(self)!r})"


def _lift(v) -> Expr:
    if isinstance(v, Expr):
        return v
    if isinstance(v, (int, float, np.floating, np.integer)):
        return const(float(v))
    if isinstance(v, str):
        return parse(v)
    raise TypeError(f"cannot convert {type(v).__name__} to Expr")


def const(v: float) -> Expr:
    v = float(v)
    if v == 0.0:
        v = 0.0  # fold -0.0
    return Expr("const", (), v)


def var(name: str) -> Expr:
    if name not in VARIABLES:
        raise ValueError(f"unknown variable {name!r}")
    return Expr("var", (), name)


X = var("x")
Y = var("y")
ZERO = const(0.0)
ONE = const(1.0)
TWO = const(2.0)


def _c(e: Expr, v: float) -> bool:
    return e.op == "const" and e.value == v


def add(a: Expr, b: Expr) -> Expr:
    if a.is_const and b.is_const:
        return const(a.value + b.value)
    if _c(a, 0.0):
        return b
    if _c(b, 0.0):
        return a
    if b.op == "neg":
        return sub(a, b.args[0])
    return Expr("add", (a, b))


def sub(a: Expr, b: Expr) -> Expr:
    if a.is_const and b.is_const:
        return const(a.value - b.value)
    if _c(b, 0.0):
        return a
    if _c(a, 0.0):
        return neg(b)
    if a is b:
        return ZERO
    if b.op == "neg":
        return add(a, b.args[0])
    return Expr("sub", (a, b))


def mul(a: Expr, b: Expr) -> Expr:
    if a.is_const and b.is_const:
        return const(a.value * b.value)
    if _c(a, 0.0) or _c(b, 0.0):
        return ZERO
    if _c(a, 1.0):
        return b
    if _c(b, 1.0):
        return a
    if _c(a, -1.0):
        return neg(b)
    if _c(b, -1.0):
        return neg(a)
    if a.op == "neg" and b.op == "neg":
        return mul(a.args[0], b.args[0])
    if a.op == "neg":
        return neg(mul(a.args[0], b))
    if b.op == "neg":
        return neg(mul(a, b.args[0]))
    if b.is_const and not a.is_const:
        a, b = b, a
    return Expr("mul", (a, b))


def div(a: Expr, b: Expr) -> Expr:
    if a.is_const and b.is_const and b.value != 0.0:
        return const(a.value / b.value)
    if _c(b, 1.0):
        return a
    if _c(a, 0.0) and not (b.is_const and b.value == 0.0):
        return ZERO
    if a.op == "neg":
        return neg(div(a.args[0], b))
    if b.op == "neg":
        return neg(div(a, b.args[0]))
    return Expr("div", (a, b))


def power(a: Expr, b: Expr) -> Expr:
    if _c(b, 0.0):
        return ONE
    if _c(b, 1.0):
        return a
    if a.is_const and b.is_const:
        with np.errstate(all="ignore"):
            v = float(np.power(a.value, b.value))
        if math.isfinite(v):
            return const(v)
    return Expr("pow", (a, b))


def neg(a: Expr) -> Expr:
    if a.is_const:
        return const(-a.value)
    if a.op == "neg":
        return a.args[0]
    return Expr("neg", (a,))


def call(fn: str, a: Expr) -> Expr:
    if fn not in FUNCTIONS:
        raise ValueError(f"unknown function {fn!r}")
    if a.is_const:
        with np.errstate(all="ignore"):
            v = float(_NUMPY[fn](a.value))
        if math.isfinite(v):
            return const(v)
    return Expr(fn, (a,))


_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div, "pow": power}


def _rebuild(op: str, args: tuple) -> Expr:
    if op in _BINARY:
        return _BINARY[op](*args)
    if op == "neg":
        return neg(args[0])
    return call(op, args[0])


# ---------------------------------------------------------------------------
# Parsing

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>\*\*|[-+*/^(),]))"
)


def _tokenize(src: str):
    pos = 0
    out = []
    n = len(src)
    while pos < n:
        m = _TOKEN.match(src, pos)
        if m is None or m.end() == pos:
            if src[pos:].strip() == "":
                break
            j = pos
            while j < n and src[j].isspace():
                j += 1
            raise ParseError(f"unexpected character {src[j]!r}", len(src[:j].encode()), src)
        kind = m.lastgroup
        start = m.start(kind)
        text = m.group(kind)
        if kind == "op" and text == "**":
            text = "^"
        out.append((kind, text, len(src[:start].encode())))
        pos = m.end()
    out.append(("end", "", len(src.encode())))
    return out


class _Parser:
    def __init__(self, src: str):
        self.src = src
        self.toks = _tokenize(src)
        self.i = 0

    def peek(self):
        return self.toks[self.i]

    def take(self):
        t = self.toks[self.i]
        self.i += 1
        return t

    def expect(self, text: str):
        t = self.take()
        if t[1] != text or t[0] == "end":
            found = "end of input" if t[0] == "end" else repr(t[1])
            raise ParseError(f"expected {text!r}, found {found}", t[2], self.src)
        return t

    def parse(self) -> Expr:
        e = self.expr()
        t = self.peek()
        if t[0] != "end":
            raise ParseError(f"unexpected token {t[1]!r}", t[2], self.src)
        return e

    def expr(self) -> Expr:
        e = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            r = self.term()
            e = add(e, r) if op == "+" else sub(e, r)
        return e

    def term(self) -> Expr:
        e = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            r = self.unary()
            e = mul(e, r) if op == "*" else div(e, r)
        return e

    def unary(self) -> Expr:
        t = self.peek()
        if t[0] == "op" and t[1] == "-":
            self.take()
            return neg(self.unary())
        if t[0] == "op" and t[1] == "+":
            self.take()
            return self.unary()
        return self.pow()

    def pow(self) -> Expr:
        base = self.atom()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.take()
            return power(base, self.unary())
        return base

    def atom(self) -> Expr:
        t = self.take()
        kind, text, off = t
        if kind == "num":
            return const(float(text))
        if kind == "name":
            if self.peek()[1] == "(" and self.peek()[0] == "op":
                if text not in FUNCTIONS:
                    if text in RESERVED:
                        raise ParseError(f"{text!r} is not a function", off, self.src)
                    raise ParseError(f"unknown function {text!r}", off, self.src)
                self.take()
                args = [self.expr()]
                while self.peek()[1] == ",":
                    self.take()
                    args.append(self.expr())
                self.expect(")")
                if len(args) != 1:
                    raise ParseError(f"{text}() takes 1 argument, got {len(args)}", off, self.src)
                return call(text, args[0])
            if text in VARIABLES:
                return var(text)
            if text in CONSTANTS:
                return const(CONSTANTS[text])
            if text in FUNCTIONS:
                raise ParseError(f"function {text!r} used without argument", off, self.src)
            raise ParseError(f"unknown identifier {text!r}", off, self.src)
        if kind == "op" and text == "(":
            e = self.expr()
            self.expect(")")
            return e
        if kind == "end":
            raise ParseError("unexpected end of input", off, self.src)
        raise ParseError(f"unexpected token {text!r}", off, self.src)


def parse(src: str) -> Expr:
    """Parse an infix expression over ``x``, ``y``, ``pi`` and the unary functions."""
    if not isinstance(src, str):
        raise TypeError("parse() expects a string")
    return _Parser(src).parse()


# ---------------------------------------------------------------------------
# Printing

_SYMBOL = {"add": "+", "sub": "-", "mul": "*", "div": "/", "pow": "^"}


def to_string(e: Expr) -> str:
    memo: dict[int, str] = {}
    for n in _topo([e]):
        if n.op == "const":
            s = repr(n.value)
            if n.value < 0 or s in ("inf", "-inf", "nan"):
                s = f"({s})"
        elif n.op == "var":
            s = n.value
        elif n.op in _SYMBOL:
            s = f"({memo[id(n.args[0])]} {_SYMBOL[n.op]} {memo[id(n.args[1])]})"
        elif n.op == "neg":
            s = f"(-{memo[id(n.args[0])]})"
        else:
            s = f"{n.op}({memo[id(n.args[0])]})"
        memo[id(n)] = s
    return memo[id(e)]


# ---------------------------------------------------------------------------
# Differentiation


def diff(e: Expr, var_: str) -> Expr:
    """Exact partial derivative with respect to ``"x"`` or ``"y"``."""
    if var_ not in VARIABLES:
        raise ValueError(f"can only differentiate with respect to x or y, not {var_!r}")
    for n in _topo([e]):
        if var_ in n._d:
            continue
        n._d[var_] = _diff_node(n, var_)
    return e._d[var_]


def _d(n: Expr, v: str) -> Expr:
    return n._d[v]


def _diff_node(n: Expr, v: str) -> Expr:
    op = n.op
    if op == "const":
        return ZERO
    if op == "var":
        return ONE if n.value == v else ZERO
    a = n.args[0]
    da = _d(a, v)
    if op == "add":
        return add(da, _d(n.args[1], v))
    if op == "sub":
        return sub(da, _d(n.args[1], v))
    if op == "mul":
        b = n.args[1]
        return add(mul(da, b), mul(a, _d(b, v)))
    if op == "div":
        b = n.args[1]
        db = _d(b, v)
        if db is ZERO:
            return div(da, b)
        return div(sub(mul(da, b), mul(a, db)), power(b, TWO))
    if op == "pow":
        b = n.args[1]
        db = _d(b, v)
        if b.is_const:
            if da is ZERO:
                return ZERO
            return mul(mul(b, power(a, const(b.value - 1.0))), da)
        if a.is_const:
            return mul(mul(n, const(math.log(a.value)) if a.value > 0 else call("log", a)), db)
        return mul(n, add(mul(db, call("log", a)), div(mul(b, da), a)))
    if op == "neg":
        return neg(da)
    if da is ZERO:
        return ZERO
    if op == "sin":
        return mul(call("cos", a), da)
    if op == "cos":
        return neg(mul(call("sin", a), da))
    if op == "tan":
        return div(da, power(call("cos", a), TWO))
    if op == "exp":
        return mul(n, da)
    if op == "log":
        return div(da, a)
    if op == "sqrt":
        return div(da, mul(TWO, n))
    if op == "tanh":
        return mul(sub(ONE, power(n, TWO)), da)
    if op == "atan":
        return div(da, add(ONE, power(a, TWO)))
    if op == "abs":
        return mul(call("sign", a), da)
    if op == "sign":
        return ZERO
    raise AssertionError(op)


def lie(field: Sequence[Expr], f: Expr) -> Expr:
    """Lie derivative ``a*df/dx + b*df/dy`` of ``f`` along the field ``(a, b)``."""
    a, b = field
    return add(mul(a, diff(f, "x")), mul(b, diff(f, "y")))


# ---------------------------------------------------------------------------
# Evaluation


def _topo(roots: Iterable[Expr]) -> list[Expr]:
    order: list[Expr] = []
    seen: set[int] = set()
    for r in roots:
        if id(r) in seen:
            continue
        stack = [(r, False)]
        while stack:
            n, done = stack.pop()
            if done:
                order.append(n)
                continue
            if id(n) in seen:
                continue
            seen.add(id(n))
            stack.append((n, True))
            for a in reversed(n.args):
                if id(a) not in seen:
                    stack.append((a, False))
    return order


def _sign(v):
    return np.sign(v)


_NUMPY: dict[str, Callable] = {
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "tanh": np.tanh,
    "atan": np.arctan,
    "abs": np.abs,
    "sign": _sign,
}

# ops whose result can leave the reals for finite inputs
_GUARDED = frozenset({"div", "pow", "log", "sqrt", "exp", "tan"})


def _scalar_check(e: Expr, x: float, y: float) -> None:
    """Walk the tree at one point and raise DomainError at the first bad node."""
    vals: dict[int, float] = {}
    with np.errstate(all="ignore"):
        for n in _topo([e]):
            if n.op == "const":
                v = n.value
            elif n.op == "var":
                v = x if n.value == "x" else y
            else:
                args = [vals[id(a)] for a in n.args]
                if any(not math.isfinite(a) for a in args):
                    v = math.nan
                elif n.op == "log" and args[0] <= 0.0:
                    raise DomainError("log of non-positive value", n, (x, y))
                elif n.op == "sqrt" and args[0] < 0.0:
                    raise DomainError("sqrt of negative value", n, (x, y))
                elif n.op == "div" and args[1] == 0.0:
                    raise DomainError("division by zero", n, (x, y))
                else:
                    v = float(_apply(n.op, *args))
                    if not math.isfinite(v):
                        raise DomainError("non-finite result", n, (x, y))
            vals[id(n)] = v


def _apply(op, *args):
    if op == "add":
        return args[0] + args[1]
    if op == "sub":
        return args[0] - args[1]
    if op == "mul":
        return args[0] * args[1]
    if op == "div":
        return np.divide(args[0], args[1])
    if op == "pow":
        return np.power(args[0], args[1])
    if op == "neg":
        return -args[0]
    return _NUMPY[op](args[0])


class CompiledExprs:
    """Straight-line numpy evaluator for several expressions sharing subtrees."""

    def __init__(self, exprs: Sequence[Expr]):
        self.exprs = tuple(exprs)
        order = _topo(self.exprs)
        index = {id(n): i for i, n in enumerate(order)}
        lines = ["def _f(x, y):", "    x = x + 0.0", "    y = y + 0.0", "    bad = False"]
        names = {}
        consts = {}
        for i, n in enumerate(order):
            nm = f"v{i}"
            if n.op == "const":
                consts[f"c{i}"] = n.value
                names[id(n)] = f"c{i}"
                continue
            if n.op == "var":
                names[id(n)] = n.value
                continue
            a = [names[id(c)] for c in n.args]
            if n.op in _SYMBOL and n.op != "pow":
                expr = f"{a[0]} {_SYMBOL[n.op]} {a[1]}"
            elif n.op == "pow":
                b = n.args[1]
                if b.is_const and b.value == 2.0:
                    expr = f"{a[0]} * {a[0]}"
                else:
                    expr = f"_pow({a[0]}, {a[1]})"
            elif n.op == "neg":
                expr = f"-{a[0]}"
            else:
                expr = f"_{n.op}({a[0]})"
            lines.append(f"    {nm} = {expr}")
            if n.op in _GUARDED:
                lines.append(f"    bad = bad | ~_isfinite({nm})")
            names[id(n)] = nm
        outs = ", ".join(f"_bc({names[id(e)]}, x, y)" for e in self.exprs)
        lines.append(f"    return ({outs},), bad")
        src = "\n".join(lines)
        ns = {f"_{k}": v for k, v in _NUMPY.items()}
        ns.update(consts)
        ns.update({"_pow": np.power, "_isfinite": np.isfinite, "_bc": _broadcast})
        exec(compile(src, "<expr>", "exec"), ns)
        self._f = ns["_f"]
        self.source = src
        del index

    def __call__(self, x, y, strict: bool = True):
        """Return a tuple of arrays.  With ``strict`` a domain violation raises."""
        xa = np.asarray(x, dtype=float)
        ya = np.asarray(y, dtype=float)
        with np.errstate(all="ignore"):
            outs, bad = self._f(xa, ya)
            bad = np.broadcast_to(bad, np.broadcast(xa, ya).shape)
            for o in outs:
                bad = bad | ~np.isfinite(o)
        if np.any(bad):
            if strict:
                xb, yb = np.broadcast_arrays(xa, ya)
                k = int(np.flatnonzero(np.ravel(bad))[0])
                px, py = float(np.ravel(xb)[k]), float(np.ravel(yb)[k])
                for e in self.exprs:
                    _scalar_check(e, px, py)
                raise DomainError("non-finite intermediate value", None, (px, py))
            outs = tuple(np.where(bad, np.nan, o) for o in outs)
        return outs

    def masked(self, x, y):
        """Non-raising variant: values (NaN where invalid) and the validity mask."""
        xa = np.asarray(x, dtype=float)
        ya = np.asarray(y, dtype=float)
        with np.errstate(all="ignore"):
            outs, bad = self._f(xa, ya)
            bad = np.broadcast_to(bad, np.broadcast(xa, ya).shape)
            for o in outs:
                bad = bad | ~np.isfinite(o)
            outs = tuple(np.where(bad, np.nan, o) for o in outs)
        return outs, ~bad


def _broadcast(v, x, y):
    if np.ndim(v) == 0 and (np.ndim(x) or np.ndim(y)):
        return np.full(np.broadcast(x, y).shape, float(v))
    return v


_COMPILED: dict[tuple[int, ...], CompiledExprs] = {}


def compile_exprs(exprs: Sequence[Expr]) -> CompiledExprs:
    key = tuple(id(e) for e in exprs)
    c = _COMPILED.get(key)
    if c is None or c.exprs != tuple(exprs):
        c = CompiledExprs(exprs)
        _COMPILED[key] = c
    return c


def evaluate(e: Expr, x, y):
    """Evaluate ``e`` at ``(x, y)``; scalars in, float out.  Raises DomainError."""
    (v,) = compile_exprs([e])(x, y)
    if np.ndim(v) == 0:
        return float(v)
    return v
