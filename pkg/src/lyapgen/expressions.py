"""Immutable expression trees: evaluation, differentiation, simplification,
parsing/printing and local constant refinement.

Node kinds are constants, 0-based state variables, unary operators
(sin, cos, omc = 1-cos, sq = square, neg) and binary operators
(add, sub, mul, div).  Trees are hashable values; every operation here is
pure, so expressions can be shared freely across threads.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares

UNARY_OPS = ("sin", "cos", "omc", "sq", "neg")
BINARY_OPS = ("add", "sub", "mul", "div")


class ExpressionError(ValueError):
    """Base class for expression-level failures."""


class NonFiniteValueError(ExpressionError):
    """Evaluation produced inf/nan (division by zero, overflow)."""

    def __init__(self, message, point=None):
        super().__init__(message)
        self.point = None if point is None else np.asarray(point, dtype=float)


class ParseError(ExpressionError):
    """Malformed expression text; ``position`` is the byte offset."""

    def __init__(self, message, position):
        super().__init__(f"{message} (at offset {position})")
        self.position = position


class DimensionMismatchError(ExpressionError):
    """Expression references a variable index outside the bound dimension."""


@dataclass(frozen=True)
class Expression:
    """Base node; use :class:`Const`, :class:`Var`, :class:`Unary`, :class:`Binary`."""

    __slots__ = ()


@dataclass(frozen=True)
class Const(Expression):
    value: float

    __slots__ = ("value",)


@dataclass(frozen=True)
class Var(Expression):
    index: int

    __slots__ = ("index",)


@dataclass(frozen=True)
class Unary(Expression):
    op: str
    child: Expression

    __slots__ = ("op", "child")


@dataclass(frozen=True)
class Binary(Expression):
    op: str
    left: Expression
    right: Expression

    __slots__ = ("op", "left", "right")


# Convenience constructors, used heavily by the dynamics registry and tests.
def const(v):
    return Const(float(v))


def var(i):
    return Var(int(i))


def add(a, b):
    return Binary("add", a, b)


def sub(a, b):
    return Binary("sub", a, b)


def mul(a, b):
    return Binary("mul", a, b)


def div(a, b):
    return Binary("div", a, b)


def neg(a):
    return Unary("neg", a)


def sin(a):
    return Unary("sin", a)


def cos(a):
    return Unary("cos", a)


def omc(a):
    return Unary("omc", a)


def sq(a):
    return Unary("sq", a)


ZERO = Const(0.0)
ONE = Const(1.0)


def complexity(e: Expression) -> int:
    """Node count: leaves count 1, unary 1 + child, binary 1 + both sides."""
    if isinstance(e, (Const, Var)):
        return 1
    if isinstance(e, Unary):
        return 1 + complexity(e.child)
    return 1 + complexity(e.left) + complexity(e.right)


def max_var_index(e: Expression) -> int:
    """Largest variable index used, or -1 for variable-free trees."""
    if isinstance(e, Const):
        return -1
    if isinstance(e, Var):
        return e.index
    if isinstance(e, Unary):
        return max_var_index(e.child)
    return max(max_var_index(e.left), max_var_index(e.right))


def iter_nodes(e: Expression):
    """Yield every node in depth-first preorder."""
    stack = [e]
    while stack:
        node = stack.pop()
        yield node
        if isinstance(node, Unary):
            stack.append(node.child)
        elif isinstance(node, Binary):
            stack.append(node.right)
            stack.append(node.left)


_UNARY_FN = {
    "sin": np.sin,
    "cos": np.cos,
    "omc": lambda u: 1.0 - np.cos(u),
    "sq": np.square,
    "neg": np.negative,
}
_BINARY_FN = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.true_divide,
}


def _eval(e, x):
    if isinstance(e, Const):
        return e.value
    if isinstance(e, Var):
        return x[..., e.index]
    if isinstance(e, Unary):
        return _UNARY_FN[e.op](_eval(e.child, x))
    return _BINARY_FN[e.op](_eval(e.left, x), _eval(e.right, x))


def evaluate_many(e: Expression, x: np.ndarray) -> np.ndarray:
    """Evaluate on a batch of points, shape (N, d) -> (N,).

    Non-finite entries (singularities, overflow) are returned as-is; callers
    that need hard errors use :func:`evaluate`.
    """
    x = np.asarray(x, dtype=float)
    idx = max_var_index(e)
    if idx >= x.shape[-1]:
        raise DimensionMismatchError(
            f"expression uses x{idx + 1} but points have {x.shape[-1]} components"
        )
    with np.errstate(all="ignore"):
        out = _eval(e, x)
    return np.broadcast_to(np.asarray(out, dtype=float), x.shape[:-1]).copy()


def evaluate(e: Expression, x) -> float:
    """Evaluate at a single point; raises :class:`NonFiniteValueError` on inf/nan."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    value = float(evaluate_many(e, x[None, :])[0])
    if not np.isfinite(value):
        raise NonFiniteValueError(f"expression is non-finite at {x.tolist()}", point=x)
    return value


def differentiate(e: Expression, i: int) -> Expression:
    """Exact partial derivative with respect to variable ``i``, simplified."""
    return simplify(_diff(e, i))


def _diff(e, i):
    if isinstance(e, Const):
        return ZERO
    if isinstance(e, Var):
        return ONE if e.index == i else ZERO
    if isinstance(e, Unary):
        du = _diff(e.child, i)
        if e.op == "sin":
            return mul(cos(e.child), du)
        if e.op == "cos":
            return mul(neg(sin(e.child)), du)
        if e.op == "omc":
            return mul(sin(e.child), du)
        if e.op == "sq":
            return mul(mul(Const(2.0), e.child), du)
        return neg(du)
    dl, dr = _diff(e.left, i), _diff(e.right, i)
    if e.op == "add":
        return add(dl, dr)
    if e.op == "sub":
        return sub(dl, dr)
    if e.op == "mul":
        return add(mul(dl, e.right), mul(e.left, dr))
    return div(sub(mul(dl, e.right), mul(e.left, dr)), sq(e.right))


def gradient(e: Expression, dim: int) -> tuple[Expression, ...]:
    return tuple(differentiate(e, i) for i in range(dim))


def lie_derivative(v: Expression, f) -> Expression:
    """Directional derivative of ``v`` along a vector field: sum_i dv/dx_i * f_i."""
    f = tuple(f)
    idx = max_var_index(v)
    if idx >= len(f):
        raise DimensionMismatchError(
            f"candidate uses x{idx + 1} but the field has dimension {len(f)}"
        )
    total = ZERO
    for i, fi in enumerate(f):
        total = add(total, mul(differentiate(v, i), fi))
    return simplify(total)


def substitute(e: Expression, mapping: dict[int, Expression]) -> Expression:
    """Replace variables by expressions (used to expand auxiliary features
    and to instantiate shared subsystem/edge formulas on the full state)."""
    if isinstance(e, Const):
        return e
    if isinstance(e, Var):
        return mapping.get(e.index, e)
    if isinstance(e, Unary):
        return Unary(e.op, substitute(e.child, mapping))
    return Binary(e.op, substitute(e.left, mapping), substitute(e.right, mapping))


def _is_const(e, v=None):
    return isinstance(e, Const) and (v is None or e.value == v)


def simplify(e: Expression) -> Expression:
    """Constant folding and 0/1 identities; never increases node count and
    preserves values wherever both sides evaluate finite."""
    if isinstance(e, (Const, Var)):
        return e
    if isinstance(e, Unary):
        c = simplify(e.child)
        if isinstance(c, Const):
            with np.errstate(all="ignore"):
                v = float(_UNARY_FN[e.op](c.value))
            if np.isfinite(v):
                return Const(v)
        if e.op == "neg" and isinstance(c, Unary) and c.op == "neg":
            return c.child
        if e.op == "sq" and isinstance(c, Unary) and c.op == "neg":
            return Unary("sq", c.child)
        return Unary(e.op, c)
    l, r = simplify(e.left), simplify(e.right)
    if isinstance(l, Const) and isinstance(r, Const):
        with np.errstate(all="ignore"):
            v = float(_BINARY_FN[e.op](l.value, r.value))
        if np.isfinite(v):
            return Const(v)
    if e.op == "add":
        if _is_const(l, 0.0):
            return r
        if _is_const(r, 0.0):
            return l
    elif e.op == "sub":
        if _is_const(r, 0.0):
            return l
        if _is_const(l, 0.0):
            return simplify(neg(r))
        if l == r:
            return ZERO
    elif e.op == "mul":
        if _is_const(l, 0.0) or _is_const(r, 0.0):
            return ZERO
        if _is_const(l, 1.0):
            return r
        if _is_const(r, 1.0):
            return l
    elif e.op == "div":
        if _is_const(r, 1.0):
            return l
        if _is_const(l, 0.0):
            return ZERO
        if l == r:
            return ONE
    return Binary(e.op, l, r)


# --- parsing / printing -----------------------------------------------------

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+\.\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?|\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>\^|[-+*/()]))"
)

_FUNCS = {"sin", "cos", "omc", "sq"}


class _Parser:
    def __init__(self, text):
        self.text = text
        self.pos = 0
        self.tokens = []
        while self.pos < len(text):
            if text[self.pos].isspace():
                self.pos += 1
                continue
            m = _TOKEN_RE.match(text, self.pos)
            if m is None or m.end() == self.pos:
                raise ParseError(f"unexpected character {text[self.pos]!r}", self.pos)
            self.tokens.append((m.lastgroup, m.group(m.lastgroup), m.start(m.lastgroup)))
            self.pos = m.end()
        self.tokens.append(("end", "", len(text)))
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect_op(self, symbol):
        kind, value, off = self.take()
        if kind != "op" or value != symbol:
            raise ParseError(f"expected {symbol!r}", off)

    def parse(self):
        e = self.expr()
        kind, value, off = self.peek()
        if kind != "end":
            raise ParseError(f"unexpected token {value!r}", off)
        return e

    def expr(self):
        e = self.term()
        while True:
            kind, value, _ = self.peek()
            if kind == "op" and value in "+-":
                self.take()
                rhs = self.term()
                e = add(e, rhs) if value == "+" else sub(e, rhs)
            else:
                return e

    def term(self):
        e = self.factor()
        while True:
            kind, value, _ = self.peek()
            if kind == "op" and value in "*/":
                self.take()
                rhs = self.factor()
                e = mul(e, rhs) if value == "*" else div(e, rhs)
            else:
                return e

    def factor(self):
        e = self.atom()
        kind, value, _ = self.peek()
        if kind == "op" and value == "^":
            _, _, off = self.take()
            kind, value, off = self.take()
            if kind != "num" or value != "2":
                raise ParseError("only ^2 is supported", off)
            return sq(e)
        return e

    def atom(self):
        kind, value, off = self.take()
        if kind == "num":
            return Const(float(value))
        if kind == "op" and value == "-":
            inner = self.atom()
            # fold a lexically negative literal into the constant
            if isinstance(inner, Const):
                return Const(-inner.value)
            return neg(inner)
        if kind == "op" and value == "(":
            e = self.expr()
            self.expect_op(")")
            return e
        if kind == "name":
            m = re.fullmatch(r"x(\d+)", value)
            if m:
                index = int(m.group(1))
                if index < 1:
                    raise ParseError("variables are numbered from x1", off)
                return Var(index - 1)
            if value in _FUNCS:
                self.expect_op("(")
                e = self.expr()
                self.expect_op(")")
                return Unary(value, e)
            raise ParseError(f"unknown function or variable {value!r}", off)
        raise ParseError(f"unexpected token {value or 'end of input'!r}", off)


def parse(text: str) -> Expression:
    """Parse expression text (grammar: + - * / ^2, sin/cos/omc/sq, x1..xN)."""
    return _Parser(text).parse()


_PREC_ATOM = 4
_PREC = {"add": 1, "sub": 1, "mul": 2, "div": 2}


def _fmt(e, prec):
    if isinstance(e, Const):
        text = repr(e.value)
        if e.value < 0 and prec >= _PREC_ATOM:
            return f"({text})"
        return text
    if isinstance(e, Var):
        return f"x{e.index + 1}"
    if isinstance(e, Unary):
        if e.op == "neg":
            text = "-" + _fmt(e.child, _PREC_ATOM)
            return f"({text})" if prec >= _PREC_ATOM else text
        if e.op == "sq":
            text = _fmt(e.child, _PREC_ATOM) + "^2"
            return f"({text})" if prec >= _PREC_ATOM else text
        return f"{e.op}({_fmt(e.child, 0)})"
    p = _PREC[e.op]
    left = _fmt(e.left, p - 1)
    right = _fmt(e.right, p)
    if e.op == "add":
        text = f"{left} + {right}"
    elif e.op == "sub":
        text = f"{left} - {right}"
    elif e.op == "mul":
        text = f"{left}*{right}"
    else:
        text = f"{left}/{right}"
    return f"({text})" if p <= prec else text


def to_text(e: Expression) -> str:
    """Render with minimal parentheses and round-trip-exact constants."""
    return _fmt(e, 0)


# --- constant refinement ----------------------------------------------------


def _const_paths(e, path=()):
    if isinstance(e, Const):
        yield path
    elif isinstance(e, Unary):
        yield from _const_paths(e.child, path + ("child",))
    elif isinstance(e, Binary):
        yield from _const_paths(e.left, path + ("left",))
        yield from _const_paths(e.right, path + ("right",))


def _get_path(e, path):
    for attr in path:
        e = getattr(e, attr)
    return e


def _set_path(e, path, value):
    if not path:
        return Const(float(value))
    if isinstance(e, Unary):
        return Unary(e.op, _set_path(e.child, path[1:], value))
    if path[0] == "left":
        return Binary(e.op, _set_path(e.left, path[1:], value), e.right)
    return Binary(e.op, e.left, _set_path(e.right, path[1:], value))


def with_constants(e: Expression, values) -> Expression:
    """Rebuild ``e`` with its constant leaves replaced in preorder order."""
    result = e
    for path, v in zip(_const_paths(e), values):
        result = _set_path(result, path, v)
    return result


def constants(e: Expression) -> np.ndarray:
    return np.array([_get_path(e, p).value for p in _const_paths(e)], dtype=float)


def refine_constants(e: Expression, data, max_nfev: int = 60) -> Expression:
    """Locally refit constant leaves by least squares against (x, y) pairs.

    Tree shape is preserved; the input is returned unchanged when there are
    no constants or when refinement fails to reduce the mean squared error.
    """
    if isinstance(data, tuple):
        x, y = data
    else:
        x = np.array([p for p, _ in data], dtype=float)
        y = np.array([t for _, t in data], dtype=float)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float)
    c0 = constants(e)
    if c0.size == 0 or len(y) == 0:
        return e

    def residual(c):
        r = evaluate_many(with_constants(e, c), x) - y
        return np.where(np.isfinite(r), r, 1e12)

    r0 = residual(c0)
    mse0 = float(np.mean(r0**2))
    if not np.isfinite(mse0):
        return e
    try:
        sol = least_squares(residual, c0, max_nfev=max_nfev)
    except Exception:
        return e
    mse1 = float(np.mean(residual(sol.x) ** 2))
    if not np.isfinite(mse1) or mse1 > mse0:
        return e
    return with_constants(e, sol.x)
