"""Minimal SMT-LIB2 support: symbolic real expressions, a writer, and a reader.

Expressions are built with ordinary Python arithmetic, so the plant
definitions in :mod:`roaforge.dynamics` can be evaluated symbolically by
passing :data:`SYM_OPS` (or any :class:`Expr`, which carries it as ``.ops``).

The reader understands the subset the writer emits and evaluates it with
numpy, vectorised over many assignments at once.
"""
from __future__ import annotations

import math
from decimal import Decimal
from typing import Iterable, Mapping

import numpy as np


def fmt_real(v: float) -> str:
    """17-significant-digit literal in plain decimal notation (no exponent)."""
    v = float(v)
    if not math.isfinite(v):
        raise ValueError(f"cannot write non-finite literal {v!r}")
    if v == 0.0:
        return "0.0"
    d = Decimal(format(abs(v), ".17g"))
    text = format(d, "f")
    if "." not in text:
        text += ".0"
    return f"(- {text})" if v < 0 else text


class Expr:
    """Node of a real-valued S-expression.

    ``op`` is ``"sym"`` or ``"num"`` for atoms, otherwise the SMT-LIB function
    symbol applied to ``args``.
    """

    __slots__ = ("op", "args")

    def __init__(self, op: str, args: tuple):
        self.op = op
        self.args = args

    # atoms --------------------------------------------------------------
    @staticmethod
    def sym(name: str) -> "Expr":
        return Expr("sym", (name,))

    @staticmethod
    def num(v: float) -> "Expr":
        return Expr("num", (float(v),))

    @property
    def is_num(self) -> bool:
        return self.op == "num"

    @property
    def value(self) -> float:
        return self.args[0]

    # arithmetic -----------------------------------------------------------
    @staticmethod
    def lift(v) -> "Expr":
        if isinstance(v, Expr):
            return v
        if isinstance(v, (int, float, np.floating, np.integer)):
            return Expr.num(float(v))
        raise TypeError(f"cannot lift {type(v).__name__} into an expression")

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, k):
        if not (isinstance(k, int) and k >= 1):
            raise ValueError("only positive integer powers are supported")
        out = self
        for _ in range(k - 1):
            out = out * self
        return out

    def __repr__(self) -> str:
        return to_sexpr(self)

    ops = None  # set below to SYM_OPS


def add(*terms) -> Expr:
    flat, const = [], 0.0
    for t in terms:
        t = Expr.lift(t)
        if t.is_num:
            const += t.value
        elif t.op == "+":
            flat.extend(t.args)
        else:
            flat.append(t)
    if const != 0.0 or not flat:
        flat.append(Expr.num(const))
    return flat[0] if len(flat) == 1 else Expr("+", tuple(flat))


def mul(a, b) -> Expr:
    a, b = Expr.lift(a), Expr.lift(b)
    if a.is_num and b.is_num:
        return Expr.num(a.value * b.value)
    if a.is_num and a.value == 0.0 or b.is_num and b.value == 0.0:
        return Expr.num(0.0)
    if a.is_num and a.value == 1.0:
        return b
    if b.is_num and b.value == 1.0:
        return a
    return Expr("*", (a, b))


def neg(a) -> Expr:
    a = Expr.lift(a)
    if a.is_num:
        return Expr.num(-a.value)
    return Expr("-", (a,))


def div(a, b) -> Expr:
    a, b = Expr.lift(a), Expr.lift(b)
    if a.is_num and b.is_num:
        return Expr.num(a.value / b.value)
    if b.is_num and b.value == 1.0:
        return a
    return Expr("/", (a, b))


def call(op: str, *args) -> Expr:
    return Expr(op, tuple(Expr.lift(a) for a in args))


class _SymOps:
    """numpy-like namespace for symbolic expressions."""

    @staticmethod
    def sin(x):
        x = Expr.lift(x)
        return Expr.num(math.sin(x.value)) if x.is_num else call("sin", x)

    @staticmethod
    def cos(x):
        x = Expr.lift(x)
        return Expr.num(math.cos(x.value)) if x.is_num else call("cos", x)

    @staticmethod
    def exp(x):
        x = Expr.lift(x)
        return Expr.num(math.exp(x.value)) if x.is_num else call("exp", x)

    @staticmethod
    def tanh(x):
        # written through exp, which every nonlinear solver dialect accepts
        x = Expr.lift(x)
        if x.is_num:
            return Expr.num(math.tanh(x.value))
        e = call("exp", mul(-2.0, x))
        return div(add(1.0, neg(e)), add(1.0, e))

    @staticmethod
    def ite(cond, a, b):
        return call("ite", cond, a, b)


SYM_OPS = _SymOps()
Expr.ops = SYM_OPS


def lt(a, b) -> Expr:
    return call("<", a, b)


def le(a, b) -> Expr:
    return call("<=", a, b)


def gt(a, b) -> Expr:
    return call(">", a, b)


def ge(a, b) -> Expr:
    return call(">=", a, b)


def conj(*xs) -> Expr:
    return call("and", *xs)


def to_sexpr(e: Expr) -> str:
    parts: list[str] = []
    stack: list = [e]
    while stack:
        item = stack.pop()
        if isinstance(item, str):
            parts.append(item)
            continue
        if item.op == "sym":
            parts.append(item.args[0])
        elif item.op == "num":
            parts.append(fmt_real(item.value))
        else:
            parts.append(f"({item.op}")
            stack.append(")")
            for a in reversed(item.args):
                stack.append(a)
                stack.append(" ")
    return "".join(parts)


class Script:
    """Accumulates SMT-LIB2 commands; ``define`` names a subterm and returns its symbol."""

    def __init__(self, logic: str = "QF_NRA"):
        self.header: list[str] = []
        self.commands: list[str] = [f"(set-logic {logic})"]
        self.n_defines = 0
        self.n_declares = 0

    def comment(self, text: str) -> None:
        self.header.extend(f"; {line}" if line else ";" for line in text.splitlines())

    def option(self, key: str, value: str) -> None:
        self.commands.append(f"(set-option :{key} {value})")

    def declare(self, name: str) -> Expr:
        self.commands.append(f"(declare-fun {name} () Real)")
        self.n_declares += 1
        return Expr.sym(name)

    def define(self, name: str, e, sort: str = "Real") -> Expr:
        e = Expr.lift(e)
        if e.op in ("sym", "num"):
            return e
        self.commands.append(f"(define-fun {name} () {sort} {to_sexpr(e)})")
        self.n_defines += 1
        return Expr.sym(name)

    def assert_(self, e: Expr) -> None:
        self.commands.append(f"(assert {to_sexpr(e)})")

    def text(self) -> str:
        return "\n".join(self.header + self.commands + ["(check-sat)", "(exit)"]) + "\n"


# ---------------------------------------------------------------------------
# reader

class SmtParseError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    toks: list[str] = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch == ";":
            j = text.find("\n", i)
            i = n if j < 0 else j + 1
        elif ch in "()":
            toks.append(ch)
            i += 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < n and not text[j].isspace() and text[j] not in "();":
                j += 1
            toks.append(text[i:j])
            i = j
    return toks


def parse(text: str) -> list:
    """Parse a script into a list of nested Python lists of atoms."""
    out: list = []
    stack: list[list] = []
    for tok in tokenize(text):
        if tok == "(":
            stack.append([])
        elif tok == ")":
            if not stack:
                raise SmtParseError("unbalanced ')'")
            done = stack.pop()
            (stack[-1] if stack else out).append(done)
        else:
            if not stack:
                raise SmtParseError(f"bare atom {tok!r} at top level")
            stack[-1].append(tok)
    if stack:
        raise SmtParseError("unbalanced '('")
    return out


_NARY = {
    "+": lambda xs: sum(xs[1:], xs[0]),
    "*": lambda xs: _prod(xs),
    "and": lambda xs: np.logical_and.reduce(np.broadcast_arrays(*xs)),
    "or": lambda xs: np.logical_or.reduce(np.broadcast_arrays(*xs)),
}
_CMP = {"<": np.less, "<=": np.less_equal, ">": np.greater, ">=": np.greater_equal, "=": np.equal}
_UNARY = {"exp": np.exp, "sin": np.sin, "cos": np.cos, "tanh": np.tanh, "not": np.logical_not}


def _prod(xs):
    out = xs[0]
    for x in xs[1:]:
        out = out * x
    return out


class Model:
    """Parsed script: declarations, definitions and assertions, in order."""

    def __init__(self, text: str):
        self.forms = parse(text)
        self.declared: list[str] = []
        self.defined: list[tuple[str, object]] = []
        self.assertions: list = []
        self.options: dict[str, str] = {}
        self.logic: str | None = None
        self.check_sat = False
        for form in self.forms:
            if not isinstance(form, list) or not form:
                raise SmtParseError(f"unexpected form {form!r}")
            head = form[0]
            if head == "set-logic":
                self.logic = form[1]
            elif head == "set-option":
                self.options[form[1].lstrip(":")] = form[2]
            elif head == "declare-fun":
                if form[2] != [] or form[3] != "Real":
                    raise SmtParseError(f"unsupported declaration {form!r}")
                self.declared.append(form[1])
            elif head == "define-fun":
                if form[2] != []:
                    raise SmtParseError("only nullary definitions are supported")
                self.defined.append((form[1], form[4]))
            elif head == "assert":
                self.assertions.append(form[1])
            elif head == "check-sat":
                self.check_sat = True
            elif head == "exit":
                pass
            else:
                raise SmtParseError(f"unsupported command {head!r}")

    def evaluate(self, assignment: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Value of every definition plus ``__formula__`` (conjunction of assertions)."""
        env: dict[str, np.ndarray] = {}
        for name in self.declared:
            if name not in assignment:
                raise KeyError(f"no value for declared variable {name!r}")
            env[name] = np.asarray(assignment[name], dtype=float)
        with np.errstate(all="ignore"):
            for name, body in self.defined:
                env[name] = _eval(body, env)
            truth = np.array(True)
            for a in self.assertions:
                truth = np.logical_and(truth, _eval(a, env))
        env["__formula__"] = truth
        return env


def _eval(form, env):
    if isinstance(form, str):
        if form in env:
            return env[form]
        if form == "true":
            return np.array(True)
        if form == "false":
            return np.array(False)
        try:
            return np.float64(form)
        except ValueError:
            raise SmtParseError(f"unknown symbol {form!r}") from None
    head, *rest = form
    args = [_eval(a, env) for a in rest]
    if head == "-":
        return -args[0] if len(args) == 1 else args[0] - sum(args[1:])
    if head == "/":
        out = args[0]
        for a in args[1:]:
            out = out / a
        return out
    if head in _NARY:
        return _NARY[head](args)
    if head in _CMP:
        return _CMP[head](args[0], args[1])
    if head in _UNARY:
        return _UNARY[head](args[0])
    if head == "ite":
        return np.where(args[0], args[1], args[2])
    raise SmtParseError(f"unsupported function {head!r}")


def read(path) -> Model:
    with open(path) as fh:
        return Model(fh.read())


def sym_vector(names: Iterable[str]) -> list[Expr]:
    return [Expr.sym(n) for n in names]
