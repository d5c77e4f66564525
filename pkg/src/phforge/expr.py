"""Scalar expression DSL: parsing, evaluation and exact symbolic derivatives.

Grammar (whitespace-insensitive)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := ('-' | '+') unary | power
    power  := atom ('^' unary)?          # right-associative
    atom   := NUMBER | VAR | FUNC '(' expr ')' | '(' expr ')'

Variables are ``z1 .. zn`` (state) and ``u1 .. um`` (input). Functions are
``sin cos exp ln sqrt tanh abs``. Parsing applies the same light
simplification as :func:`simplify` (constant folding and 0/1 identities).

Expressions are immutable and hashable; they can be shared freely.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

FUNCTIONS = ("sin", "cos", "exp", "ln", "sqrt", "tanh", "abs")
BINARY_OPS = ("add", "sub", "mul", "div", "pow")


class ExprError(Exception):
    """Base class for expression errors."""


class ParseError(ExprError):
    def __init__(self, message: str, offset: int, text: str = ""):
        self.offset = offset
        self.text = text
        super().__init__(f"{message} (at byte offset {offset})")


class UnknownIdentifierError(ParseError):
    pass


class IndexRangeError(ParseError):
    pass


class DomainError(ExprError, ArithmeticError):
    """Evaluation left the domain of a primitive.

    ``subexpr`` is the offending subexpression.
    """

    def __init__(self, message: str, subexpr: "Expr | None" = None):
        self.subexpr = subexpr
        if subexpr is not None:
            message = f"{message} in '{to_string(subexpr)}'"
        super().__init__(message)


class DifferentiationError(ExprError):
    pass


# --------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Var:
    kind: str  # "z" or "u"
    index: int  # 1-based

    @property
    def name(self) -> str:
        return f"{self.kind}{self.index}"


@dataclass(frozen=True)
class Unary:
    op: str  # "neg" or a function name
    arg: "Expr"


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Expr"
    right: "Expr"


Expr = Union[Const, Var, Unary, Binary]

ZERO = Const(0.0)
ONE = Const(1.0)


def var(name: str) -> Var:
    """Build a variable node from a name such as ``"z3"``."""
    m = re.fullmatch(r"([zu])([1-9][0-9]*)", name)
    if m is None:
        raise ValueError(f"not a variable name: {name!r}")
    return Var(m.group(1), int(m.group(2)))


# --------------------------------------------------------------------------
# Parsing

_TOKEN_RE = re.compile(
    r"\s*(?:"
    r"(?P<num>(?:[0-9]+\.?[0-9]*|\.[0-9]+)(?:[eE][+-]?[0-9]+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),])"
    r")"
)


class _Parser:
    def __init__(self, text: str, n: int, m: int):
        self.text = text
        self.n = n
        self.m = m
        self.tokens: list[tuple[str, str, int]] = []
        self._tokenize()
        self.pos = 0

    def _offset(self, char_index: int) -> int:
        return len(self.text[:char_index].encode("utf-8"))

    def _tokenize(self) -> None:
        i = 0
        text = self.text
        while i < len(text):
            if text[i].isspace():
                i += 1
                continue
            mt = _TOKEN_RE.match(text, i)
            if mt is None or mt.end() == i:
                raise ParseError(f"unexpected character {text[i]!r}", self._offset(i), text)
            kind = mt.lastgroup
            start = mt.start(kind)
            self.tokens.append((kind, mt.group(kind), start))
            i = mt.end()
        self.tokens.append(("end", "", len(text)))

    def peek(self) -> tuple[str, str, int]:
        return self.tokens[self.pos]

    def advance(self) -> tuple[str, str, int]:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def error(self, message: str, tok: tuple[str, str, int], cls=ParseError):
        return cls(message, self._offset(tok[2]), self.text)

    def expect(self, value: str) -> None:
        tok = self.advance()
        if tok[1] != value or tok[0] == "num":
            found = tok[1] or "end of input"
            raise self.error(f"expected {value!r}, found {found!r}", tok)

    def parse(self) -> Expr:
        if self.peek()[0] == "end":
            raise self.error("empty expression", self.peek())
        e = self.expr()
        tok = self.peek()
        if tok[0] != "end":
            raise self.error(f"unexpected token {tok[1]!r}", tok)
        return e

    def expr(self) -> Expr:
        e = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = "add" if self.advance()[1] == "+" else "sub"
            e = Binary(op, e, self.term())
        return e

    def term(self) -> Expr:
        e = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = "mul" if self.advance()[1] == "*" else "div"
            e = Binary(op, e, self.unary())
        return e

    def unary(self) -> Expr:
        tok = self.peek()
        if tok[0] == "op" and tok[1] in ("-", "+"):
            self.advance()
            literal = self.peek()[0] == "num"
            arg = self.unary()
            if tok[1] == "+":
                return arg
            if literal and isinstance(arg, Const):
                return Const(-arg.value)
            return Unary("neg", arg)
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        tok = self.peek()
        if tok[0] == "op" and tok[1] == "^":
            self.advance()
            return Binary("pow", base, self.unary())
        return base

    def atom(self) -> Expr:
        tok = self.advance()
        kind, value, _ = tok
        if kind == "num":
            return Const(float(value))
        if kind == "ident":
            mt = re.fullmatch(r"([zu])([0-9]+)", value)
            if mt is not None:
                k = int(mt.group(2))
                dim = self.n if mt.group(1) == "z" else self.m
                if k < 1 or k > dim or mt.group(2).startswith("0"):
                    raise self.error(
                        f"variable {value} out of declared range 1..{dim}", tok, IndexRangeError
                    )
                return Var(mt.group(1), k)
            if value in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return Unary(value, arg)
            raise self.error(f"unknown identifier {value!r}", tok, UnknownIdentifierError)
        if kind == "op" and value == "(":
            e = self.expr()
            self.expect(")")
            return e
        raise self.error(f"unexpected token {value or 'end of input'!r}", tok)


def parse(text: str, n: int, m: int = 0, *, simplify_result: bool = True) -> Expr:
    """Parse ``text`` into an expression over ``z1..zn`` and ``u1..um``.

    Raises
    ------
    ParseError
        Syntax errors carry ``offset``, the UTF-8 byte offset of the
        offending token. :class:`UnknownIdentifierError` and
        :class:`IndexRangeError` are subclasses.
    """
    e = _Parser(text, n, m).parse()
    return simplify(e) if simplify_result else e


# --------------------------------------------------------------------------
# Printing

_PREC = {"add": 1, "sub": 1, "mul": 2, "div": 2, "neg": 3, "pow": 4}
_SYMBOL = {"add": "+", "sub": "-", "mul": "*", "div": "/", "pow": "^"}


def _fmt_const(x: float) -> str:
    if not math.isfinite(x):
        raise ValueError(f"cannot print non-finite constant {x}")
    x = float(x)
    if x.is_integer() and abs(x) < 1e15 and math.copysign(1.0, x) > 0:
        s = str(int(x))
    else:
        s = repr(x)
    return f"({s})" if s.startswith("-") else s


def to_string(e: Expr) -> str:
    """Render ``e`` so that ``parse(to_string(e), ..., simplify_result=False)``
    reproduces the same tree."""
    if isinstance(e, Const):
        return _fmt_const(e.value)
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Unary):
        if e.op == "neg":
            inner = to_string(e.arg)
            if isinstance(e.arg, Const) or _prec(e.arg) < _PREC["neg"]:
                inner = f"({inner})"
            return f"-{inner}"
        return f"{e.op}({to_string(e.arg)})"
    p = _PREC[e.op]
    left = to_string(e.left)
    right = to_string(e.right)
    if e.op == "pow":
        if _prec(e.left) <= p:
            left = f"({left})"
        if _prec(e.right) < _PREC["neg"]:
            right = f"({right})"
    else:
        if _prec(e.left) < p:
            left = f"({left})"
        if _prec(e.right) <= p:
            right = f"({right})"
    sym = _SYMBOL[e.op]
    return f"{left} {sym} {right}" if p == 1 else f"{left}{sym}{right}"


def _prec(e: Expr) -> int:
    if isinstance(e, Binary):
        return _PREC[e.op]
    if isinstance(e, Unary) and e.op == "neg":
        return _PREC["neg"]
    return 5


# --------------------------------------------------------------------------
# Evaluation


def _apply_unary(op: str, x: float) -> float:
    if op == "neg":
        return -x
    if op == "ln":
        if x <= 0.0:
            raise _Domain("ln of nonpositive argument")
        return math.log(x)
    if op == "sqrt":
        if x <= 0.0:
            raise _Domain("sqrt of nonpositive argument")
        return math.sqrt(x)
    if op == "sin":
        return math.sin(x)
    if op == "cos":
        return math.cos(x)
    if op == "exp":
        return math.exp(x)
    if op == "tanh":
        return math.tanh(x)
    if op == "abs":
        return abs(x)
    raise ValueError(f"unknown unary op {op}")


def _apply_binary(op: str, a: float, b: float) -> float:
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    if op == "div":
        if b == 0.0:
            raise _Domain("division by zero")
        return a / b
    if op == "pow":
        if a == 0.0 and b < 0.0:
            raise _Domain("zero raised to a negative power")
        if a < 0.0 and not float(b).is_integer():
            raise _Domain("negative base with non-integer exponent")
        return math.pow(a, b)
    raise ValueError(f"unknown binary op {op}")


class _Domain(Exception):
    pass


def evaluate(e: Expr, z: Sequence[float], u: Sequence[float] = ()) -> float:
    """Evaluate ``e`` at state ``z`` and input ``u`` in IEEE double precision.

    Raises :class:`DomainError` (carrying the innermost offending node)
    instead of returning NaN or infinity.
    """
    return _eval(e, z, u)


def _eval(e: Expr, z, u) -> float:
    if isinstance(e, Const):
        return e.value
    if isinstance(e, Var):
        vec = z if e.kind == "z" else u
        if e.index > len(vec):
            raise DomainError(f"binding has no value for {e.name}", e)
        return float(vec[e.index - 1])
    try:
        if isinstance(e, Unary):
            r = _apply_unary(e.op, _eval(e.arg, z, u))
        else:
            r = _apply_binary(e.op, _eval(e.left, z, u), _eval(e.right, z, u))
    except _Domain as exc:
        raise DomainError(str(exc), e) from None
    except OverflowError:
        raise DomainError("overflow", e) from None
    if not math.isfinite(r):
        raise DomainError("non-finite result", e)
    return r


# --------------------------------------------------------------------------
# Simplification


def _fold_unary(op: str, c: float) -> Expr | None:
    try:
        r = _apply_unary(op, c)
    except (_Domain, OverflowError):
        return None
    return Const(r) if math.isfinite(r) else None


def _fold_binary(op: str, a: float, b: float) -> Expr | None:
    try:
        r = _apply_binary(op, a, b)
    except (_Domain, OverflowError, ValueError):
        return None
    return Const(r) if math.isfinite(r) else None


def _is(e: Expr, value: float) -> bool:
    return isinstance(e, Const) and e.value == value


def _make_unary(op: str, a: Expr) -> Expr:
    if isinstance(a, Const):
        folded = _fold_unary(op, a.value)
        if folded is not None:
            return folded
    if op == "neg" and isinstance(a, Unary) and a.op == "neg":
        return a.arg
    return Unary(op, a)


def _make_binary(op: str, a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        folded = _fold_binary(op, a.value, b.value)
        if folded is not None:
            return folded
    if op == "add":
        if _is(a, 0.0):
            return b
        if _is(b, 0.0):
            return a
    elif op == "sub":
        if _is(b, 0.0):
            return a
        if _is(a, 0.0):
            return _make_unary("neg", b)
    elif op == "mul":
        if _is(a, 0.0) or _is(b, 0.0):
            return ZERO
        if _is(a, 1.0):
            return b
        if _is(b, 1.0):
            return a
        if _is(a, -1.0):
            return _make_unary("neg", b)
        if _is(b, -1.0):
            return _make_unary("neg", a)
    elif op == "div":
        if _is(b, 1.0):
            return a
        if _is(a, 0.0) and not isinstance(b, Const):
            return ZERO
        # (c*x)/d -> x/(d/c) when d/c is exact; deviates from the raw form by <= 1 ulp
        if (
            isinstance(b, Const)
            and isinstance(a, Binary)
            and a.op == "mul"
            and isinstance(a.left, Const)
            and a.left.value != 0.0
            and b.value != 0.0
        ):
            q = b.value / a.left.value
            if math.isfinite(q) and q * a.left.value == b.value and b.value / q == a.left.value:
                return _make_binary("div", a.right, Const(q))
    elif op == "pow":
        if _is(b, 1.0):
            return a
        if _is(b, 0.0):
            return ONE
        if _is(a, 1.0):
            return ONE
    return Binary(op, a, b)


def simplify(e: Expr) -> Expr:
    """Bottom-up constant folding plus 0/1 identities.

    Never reassociates, so the result evaluates bit-for-bit like the input
    except for the ``(c*x)/d`` rewrite (at most 1 ulp) and for annihilated
    factors (``0*x``), which no longer raise domain errors.
    """
    if isinstance(e, (Const, Var)):
        return e
    if isinstance(e, Unary):
        return _make_unary(e.op, simplify(e.arg))
    return _make_binary(e.op, simplify(e.left), simplify(e.right))


# --------------------------------------------------------------------------
# Differentiation


def variables(e: Expr) -> frozenset[Var]:
    if isinstance(e, Var):
        return frozenset([e])
    if isinstance(e, Const):
        return frozenset()
    if isinstance(e, Unary):
        return variables(e.arg)
    return variables(e.left) | variables(e.right)


def differentiate(e: Expr, wrt: Var | str) -> Expr:
    """Exact symbolic derivative of ``e`` with respect to ``wrt``.

    ``abs`` is rejected with :class:`DifferentiationError`.
    """
    if isinstance(wrt, str):
        wrt = var(wrt)
    return _d(e, wrt)


def _d(e: Expr, x: Var) -> Expr:
    if isinstance(e, Const):
        return ZERO
    if isinstance(e, Var):
        return ONE if e == x else ZERO
    mk, mu = _make_binary, _make_unary
    if isinstance(e, Unary):
        a = e.arg
        if e.op == "abs":
            raise DifferentiationError(f"abs is not differentiable: '{to_string(e)}'")
        da = _d(a, x)
        if e.op == "neg":
            return mu("neg", da)
        if _is(da, 0.0):
            return ZERO
        if e.op == "sin":
            outer = Unary("cos", a)
        elif e.op == "cos":
            outer = mu("neg", Unary("sin", a))
        elif e.op == "exp":
            outer = e
        elif e.op == "ln":
            return mk("div", da, a)
        elif e.op == "sqrt":
            return mk("div", da, mk("mul", Const(2.0), e))
        elif e.op == "tanh":
            outer = mk("sub", ONE, mk("pow", e, Const(2.0)))
        else:
            raise DifferentiationError(f"unknown function {e.op}")
        return mk("mul", outer, da)
    a, b = e.left, e.right
    if e.op in ("add", "sub"):
        return mk(e.op, _d(a, x), _d(b, x))
    if e.op == "mul":
        return mk("add", mk("mul", _d(a, x), b), mk("mul", a, _d(b, x)))
    if e.op == "div":
        da, db = _d(a, x), _d(b, x)
        if _is(db, 0.0):
            return mk("div", da, b)
        num = mk("sub", mk("mul", da, b), mk("mul", a, db))
        return mk("div", num, mk("pow", b, Const(2.0)))
    # pow
    da, db = _d(a, x), _d(b, x)
    if _is(db, 0.0):
        if _is(da, 0.0):
            return ZERO
        if isinstance(b, Const):
            lowered = mk("pow", a, Const(b.value - 1.0))
        else:
            lowered = mk("pow", a, mk("sub", b, ONE))
        return mk("mul", mk("mul", b, lowered), da)
    # d(a^b) = a^b * (b' ln a + b a'/a)
    term = mk("mul", db, Unary("ln", a))
    if not _is(da, 0.0):
        term = mk("add", term, mk("div", mk("mul", b, da), a))
    return mk("mul", e, term)


def gradient(e: Expr, n: int) -> list[Expr]:
    return [differentiate(e, Var("z", k)) for k in range(1, n + 1)]


def jacobian(es: Sequence[Expr], n: int) -> list[list[Expr]]:
    return [[differentiate(e, Var("z", k)) for k in range(1, n + 1)] for e in es]


# --------------------------------------------------------------------------
# Vectorised evaluation
#
# Generated Python source over numpy ufuncs. Arrays may carry a trailing batch
# axis: z has shape (n,) or (n, k). Domain checks mirror `evaluate`; on any
# violation the offending point is re-evaluated with `evaluate` to produce a
# precise DomainError.

_NP_UNARY = {
    "sin": "_np.sin",
    "cos": "_np.cos",
    "exp": "_np.exp",
    "tanh": "_np.tanh",
    "abs": "_np.abs",
    "ln": "_ln",
    "sqrt": "_sqrt",
}


def _ln(x):
    if np.any(x <= 0.0):
        raise _Domain("ln")
    return np.log(x)


def _sqrt(x):
    if np.any(x <= 0.0):
        raise _Domain("sqrt")
    return np.sqrt(x)


def _div(a, b):
    if np.any(b == 0.0):
        raise _Domain("div")
    return a / b


def _pow_int(a, k):
    if k < 0 and np.any(a == 0.0):
        raise _Domain("pow")
    return np.power(a, k)


def _pow(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if np.any((a == 0.0) & (b < 0.0)) or np.any((a < 0.0) & (b != np.round(b))):
        raise _Domain("pow")
    return np.power(a, b)


def _codegen(e: Expr) -> str:
    if isinstance(e, Const):
        return repr(e.value)
    if isinstance(e, Var):
        return f"{e.kind}[{e.index - 1}]"
    if isinstance(e, Unary):
        if e.op == "neg":
            return f"(-{_codegen(e.arg)})"
        return f"{_NP_UNARY[e.op]}({_codegen(e.arg)})"
    a, b = _codegen(e.left), _codegen(e.right)
    if e.op == "add":
        return f"({a} + {b})"
    if e.op == "sub":
        return f"({a} - {b})"
    if e.op == "mul":
        return f"({a} * {b})"
    if e.op == "div":
        return f"_div({a}, {b})"
    if isinstance(e.right, Const) and e.right.value.is_integer() and abs(e.right.value) < 2**31:
        k = int(e.right.value)
        if k == 2:
            return f"({a} * {a})" if isinstance(e.left, Var) else f"_np.square({a})"
        return f"_pow_int({a}, {k}.0)"
    return f"_pow({a}, {b})"


_MATH_UNARY = {
    "sin": "_m.sin",
    "cos": "_m.cos",
    "exp": "_m.exp",
    "tanh": "_m.tanh",
    "abs": "abs",
}


def _scodegen(e: Expr) -> str:
    """Same as `_codegen` but over Python floats; used for single points."""
    if isinstance(e, Const):
        return repr(e.value)
    if isinstance(e, Var):
        return f"{e.kind}[{e.index - 1}]"
    if isinstance(e, Unary):
        if e.op == "neg":
            return f"(-{_scodegen(e.arg)})"
        if e.op in _MATH_UNARY:
            return f"{_MATH_UNARY[e.op]}({_scodegen(e.arg)})"
        return f"_un({e.op!r}, {_scodegen(e.arg)})"
    a, b = _scodegen(e.left), _scodegen(e.right)
    if e.op == "add":
        return f"({a} + {b})"
    if e.op == "sub":
        return f"({a} - {b})"
    if e.op == "mul":
        return f"({a} * {b})"
    if e.op == "pow" and isinstance(e.left, Var) and _is(e.right, 2.0):
        return f"({a} * {a})"
    return f"_bin({e.op!r}, {a}, {b})"


class Compiled:
    """Vectorised evaluator for an array of expressions.

    Calling ``c(z, u)`` returns an array of shape ``batch + shape`` where
    ``batch`` is ``z.shape[1:]`` (empty for a single point). Structurally
    zero entries are never evaluated.
    """

    def __init__(self, exprs, shape: tuple[int, ...]):
        flat = list(_flatten(exprs))
        if math.prod(shape) != len(flat):
            raise ValueError("shape does not match number of expressions")
        self.shape = shape
        self.exprs = flat
        lines = ["def _fn(z, u, out):"]
        for i, e in enumerate(flat):
            if _is(e, 0.0):
                continue
            idx = np.unravel_index(i, shape) if shape else ()
            target = "out[" + ", ".join(["..."] + [str(int(j)) for j in idx]) + "]"
            lines.append(f"    {target} = {_codegen(e)}")
        lines.append("    return out")
        namespace = {
            "_np": np,
            "_ln": _ln,
            "_sqrt": _sqrt,
            "_div": _div,
            "_pow": _pow,
            "_pow_int": _pow_int,
        }
        self._nz = [i for i, e in enumerate(flat) if not _is(e, 0.0)]
        lines.append("def _sfn(z, u):")
        lines.append("    return [" + ", ".join(_scodegen(flat[i]) for i in self._nz) + "]")
        namespace.update({"_m": math, "_un": _apply_unary, "_bin": _apply_binary})
        exec(compile("\n".join(lines), "<phforge.expr>", "exec"), namespace)
        self._fn: Callable = namespace["_fn"]
        self._sfn: Callable = namespace["_sfn"]

    def __call__(self, z, u=None) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        u = np.zeros((0,) + z.shape[1:]) if u is None else np.asarray(u, dtype=float)
        if z.ndim == 1:
            return self._scalar(z, u)
        batch = z.shape[1:]
        out = np.zeros(batch + self.shape)
        try:
            with np.errstate(divide="raise", over="raise", invalid="raise", under="ignore"):
                self._fn(z, u, out)
        except (_Domain, FloatingPointError, OverflowError):
            self._locate_error(z, u)
            raise DomainError("vectorised evaluation failed") from None
        if not np.all(np.isfinite(out)):
            self._locate_error(z, u)
            raise DomainError("non-finite result")
        return out

    def _scalar(self, z: np.ndarray, u: np.ndarray) -> np.ndarray:
        out = np.zeros(self.shape)
        try:
            vals = self._sfn(z.tolist(), u.tolist())
        except (_Domain, OverflowError, ValueError, ZeroDivisionError):
            self._locate_error(z, u)
            raise DomainError("evaluation failed") from None
        if not all(map(math.isfinite, vals)):
            self._locate_error(z, u)
            raise DomainError("non-finite result")
        if vals:
            out.flat[self._nz] = vals
        return out

    def _locate_error(self, z: np.ndarray, u: np.ndarray) -> None:
        zs = z.reshape(z.shape[0], -1)
        us = u.reshape(u.shape[0], -1) if u.size else np.zeros((0, zs.shape[1]))
        for col in range(zs.shape[1]):
            for e in self.exprs:
                evaluate(e, zs[:, col], us[:, col] if us.shape[0] else ())


def _flatten(exprs):
    if isinstance(exprs, (Const, Var, Unary, Binary)):
        yield exprs
        return
    for item in exprs:
        yield from _flatten(item)
