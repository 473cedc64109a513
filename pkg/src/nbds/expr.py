"""Expression trees for dynamical-system right-hand sides.

Grammar (whitespace is ignored)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' INT)?
    atom   := NUMBER | SYMBOL | '(' expr ')'

``^`` binds tighter than unary minus, so ``-x^2`` is ``-(x^2)``.  Within a
``*``/``/`` chain every unary minus is pulled out to the front of the chain,
so ``a*-b`` parses to ``-(a*b)``.  Sums and products are n-ary; parentheses
produce nested nodes and are preserved on printing.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Mapping, Sequence

from .errors import DivisionByZero, ExponentError, ParseError, UnboundSymbol

SYMBOL_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
DIV_ZERO_THRESHOLD = 1e-15


class Expr:
    """Base class of all expression nodes."""

    __slots__ = ()

    def __str__(self) -> str:
        return to_text(self)


@dataclass(frozen=True, slots=True)
class Const(Expr):
    value: float

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"non-finite constant {self.value!r}")


@dataclass(frozen=True, slots=True)
class Sym(Expr):
    name: str

    def __post_init__(self):
        if not SYMBOL_RE.fullmatch(self.name or ""):
            raise ValueError(f"invalid symbol name {self.name!r}")


@dataclass(frozen=True, slots=True)
class Neg(Expr):
    child: Expr


@dataclass(frozen=True, slots=True)
class Add(Expr):
    terms: tuple[Expr, ...]

    def __post_init__(self):
        if len(self.terms) < 2:
            raise ValueError("Add needs at least two terms")


@dataclass(frozen=True, slots=True)
class Mul(Expr):
    factors: tuple[Expr, ...]

    def __post_init__(self):
        if len(self.factors) < 2:
            raise ValueError("Mul needs at least two factors")


@dataclass(frozen=True, slots=True)
class Div(Expr):
    num: Expr
    den: Expr

    def __post_init__(self):
        if isinstance(self.den, Const) and self.den.value == 0:
            raise ValueError("division by literal zero")


@dataclass(frozen=True, slots=True)
class Pow(Expr):
    base: Expr
    exp: int

    def __post_init__(self):
        if not isinstance(self.exp, int) or isinstance(self.exp, bool) or self.exp < 1:
            raise ValueError(f"exponent must be a positive integer, got {self.exp!r}")


def children(e: Expr) -> tuple[Expr, ...]:
    if isinstance(e, (Const, Sym)):
        return ()
    if isinstance(e, Neg):
        return (e.child,)
    if isinstance(e, Add):
        return e.terms
    if isinstance(e, Mul):
        return e.factors
    if isinstance(e, Div):
        return (e.num, e.den)
    if isinstance(e, Pow):
        return (e.base,)
    raise TypeError(f"not an expression: {e!r}")


def walk(e: Expr) -> Iterator[Expr]:
    """Pre-order traversal."""
    stack = [e]
    while stack:
        node = stack.pop()
        yield node
        stack.extend(reversed(children(node)))


def symbols(e: Expr) -> set[str]:
    return {n.name for n in walk(e) if isinstance(n, Sym)}


# ---------------------------------------------------------------------------
# Tokenizer and parser
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"\s*(?:"
    r"(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<sym>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op>[-+*/^()])"
    r")"
)
_INT_RE = re.compile(r"\d+")


@dataclass(frozen=True, slots=True)
class _Token:
    kind: str  # "num" | "sym" | "op" | "end"
    text: str
    pos: int


def tokenize(text: str) -> list[_Token]:
    tokens = []
    pos = 0
    n = len(text)
    while True:
        while pos < n and text[pos].isspace():
            pos += 1
        if pos >= n:
            break
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            raise ParseError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        tokens.append(_Token(kind, m.group(kind), m.start(kind)))
        pos = m.end()
    tokens.append(_Token("end", "", n))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = tokenize(text)
        self.i = 0

    @property
    def tok(self) -> _Token:
        return self.tokens[self.i]

    def advance(self) -> _Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def at_op(self, *ops: str) -> bool:
        return self.tok.kind == "op" and self.tok.text in ops

    def parse(self) -> Expr:
        e = self.expr()
        if self.tok.kind != "end":
            raise ParseError(f"unexpected {self.tok.text!r}", self.tok.pos)
        return e

    def expr(self) -> Expr:
        terms = [self.term()]
        while self.at_op("+", "-"):
            op = self.advance().text
            t = self.term()
            terms.append(t if op == "+" else Neg(t))
        return terms[0] if len(terms) == 1 else Add(tuple(terms))

    def term(self) -> Expr:
        first = self.unary()
        chain: list[tuple[str, Expr, int]] = []
        while self.at_op("*", "/"):
            op = self.advance().text
            pos = self.tok.pos
            chain.append((op, self.unary(), pos))
        if not chain:
            return first

        negative = False

        def strip(f: Expr) -> Expr:
            nonlocal negative
            while isinstance(f, Neg):
                negative = not negative
                f = f.child
            return f

        acc = strip(first)
        acc_is_chain_mul = False
        for op, f, pos in chain:
            f = strip(f)
            if op == "*":
                if acc_is_chain_mul:
                    acc = Mul(acc.factors + (f,))
                else:
                    acc = Mul((acc, f))
                acc_is_chain_mul = True
            else:
                if isinstance(f, Const) and f.value == 0:
                    raise ParseError("division by literal zero", pos)
                acc = Div(acc, f)
                acc_is_chain_mul = False
        return Neg(acc) if negative else acc

    def unary(self) -> Expr:
        if self.at_op("-"):
            self.advance()
            return Neg(self.unary())
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self.at_op("^"):
            self.advance()
            tok = self.tok
            if tok.kind != "num" or not _INT_RE.fullmatch(tok.text):
                raise ExponentError("exponent must be a positive integer literal", tok.pos)
            k = int(tok.text)
            if k < 1:
                raise ExponentError("exponent must be a positive integer literal", tok.pos)
            self.advance()
            return Pow(base, k)
        return base

    def atom(self) -> Expr:
        tok = self.tok
        if tok.kind == "num":
            self.advance()
            return Const(float(tok.text))
        if tok.kind == "sym":
            self.advance()
            return Sym(tok.text)
        if self.at_op("("):
            self.advance()
            e = self.expr()
            if not self.at_op(")"):
                raise ParseError("expected ')'", self.tok.pos)
            self.advance()
            return e
        if tok.kind == "end":
            raise ParseError("unexpected end of input", tok.pos)
        raise ParseError(f"unexpected {tok.text!r}", tok.pos)


def parse_expr(text: str) -> Expr:
    """Parse infix ``text`` into an expression tree."""
    return _Parser(text).parse()


# ---------------------------------------------------------------------------
# Printing
# ---------------------------------------------------------------------------

def format_number(v: float) -> str:
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def _wrap(s: str) -> str:
    return f"({s})"


def to_text(e: Expr) -> str:
    """Render ``e`` so that ``parse_expr(to_text(e)) == e`` for parser-produced trees."""
    if isinstance(e, Const):
        return format_number(e.value)
    if isinstance(e, Sym):
        return e.name
    if isinstance(e, Pow):
        b = to_text(e.base)
        if not isinstance(e.base, (Const, Sym)):
            b = _wrap(b)
        return f"{b}^{e.exp}"
    if isinstance(e, Neg):
        c = to_text(e.child)
        if not isinstance(e.child, (Const, Sym, Pow)):
            c = _wrap(c)
        return "-" + c
    if isinstance(e, Add):
        parts = [_sum_term(e.terms[0])]
        for t in e.terms[1:]:
            if isinstance(t, Neg):
                parts.append(" - " + _sum_term(t.child))
            else:
                parts.append(" + " + _sum_term(t))
        return "".join(parts)
    if isinstance(e, Mul):
        out = []
        for i, f in enumerate(e.factors):
            s = to_text(f)
            wrap_kinds = (Add, Neg, Mul) if i == 0 else (Add, Neg, Mul, Div)
            out.append(_wrap(s) if isinstance(f, wrap_kinds) else s)
        return "*".join(out)
    if isinstance(e, Div):
        n = to_text(e.num)
        if isinstance(e.num, (Add, Neg)):
            n = _wrap(n)
        d = to_text(e.den)
        if not isinstance(e.den, (Const, Sym, Pow)):
            d = _wrap(d)
        return f"{n}/{d}"
    raise TypeError(f"not an expression: {e!r}")


def _sum_term(t: Expr) -> str:
    s = to_text(t)
    return _wrap(s) if isinstance(t, Add) else s


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def eval_expr(e: Expr, env: Mapping[str, float]) -> float:
    """Evaluate with plain double arithmetic; sums and products fold left."""
    if isinstance(e, Const):
        return e.value
    if isinstance(e, Sym):
        try:
            return env[e.name]
        except KeyError:
            raise UnboundSymbol(e.name) from None
    if isinstance(e, Neg):
        return -eval_expr(e.child, env)
    if isinstance(e, Add):
        acc = eval_expr(e.terms[0], env)
        for t in e.terms[1:]:
            acc = acc + eval_expr(t, env)
        return acc
    if isinstance(e, Mul):
        acc = eval_expr(e.factors[0], env)
        for f in e.factors[1:]:
            acc = acc * eval_expr(f, env)
        return acc
    if isinstance(e, Div):
        n = eval_expr(e.num, env)
        d = eval_expr(e.den, env)
        if abs(d) < DIV_ZERO_THRESHOLD:
            raise DivisionByZero(f"denominator {to_text(e.den)!r} evaluated to {d!r}")
        return n / d
    if isinstance(e, Pow):
        return eval_expr(e.base, env) ** e.exp
    raise TypeError(f"not an expression: {e!r}")


def _checked_div(n: float, d: float) -> float:
    if abs(d) < DIV_ZERO_THRESHOLD:
        raise DivisionByZero(f"denominator evaluated to {d!r}")
    return n / d


def _py(e: Expr, names: Mapping[str, str]) -> str:
    # Same association order as eval_expr so results are bit-identical.
    if isinstance(e, Const):
        return repr(e.value)
    if isinstance(e, Sym):
        try:
            return names[e.name]
        except KeyError:
            raise UnboundSymbol(e.name) from None
    if isinstance(e, Neg):
        return f"(-{_py(e.child, names)})"
    if isinstance(e, Add):
        return "(" + " + ".join(_py(t, names) for t in e.terms) + ")"
    if isinstance(e, Mul):
        return "(" + " * ".join(_py(f, names) for f in e.factors) + ")"
    if isinstance(e, Div):
        return f"_div({_py(e.num, names)}, {_py(e.den, names)})"
    if isinstance(e, Pow):
        return f"({_py(e.base, names)} ** {e.exp})"
    raise TypeError(f"not an expression: {e!r}")


def compile_exprs(
    exprs: Sequence[Expr],
    argnames: Sequence[str],
    constants: Mapping[str, float] | None = None,
) -> Callable[..., list[float]]:
    """Compile ``exprs`` into ``f(*args) -> [values]``.

    ``constants`` are bound at compile time; every other symbol must appear in
    ``argnames``.  The generated code performs the same operations in the same
    order as :func:`eval_expr`.
    """
    constants = dict(constants or {})
    names = {a: f"a{i}" for i, a in enumerate(argnames)}
    for i, c in enumerate(constants):
        if c not in names:
            names[c] = f"c{i}"
    body = ", ".join(_py(e, names) for e in exprs)
    params = ", ".join(names[a] for a in argnames)
    src = f"def _f({params}):\n    return [{body}]\n"
    ns: dict = {"_div": _checked_div}
    for c, v in constants.items():
        if c not in argnames:
            ns[names[c]] = float(v)
    exec(compile(src, "<nbds-expr>", "exec"), ns)
    return ns["_f"]


# ---------------------------------------------------------------------------
# Sign splitting and vocabulary checks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TermSplit:
    positive_terms: tuple[Expr, ...]
    negative_terms: tuple[Expr, ...]

    def recombine(self) -> Expr:
        def total(ts):
            if not ts:
                return Const(0.0)
            return ts[0] if len(ts) == 1 else Add(tuple(ts))

        return Add((total(self.positive_terms), Neg(total(self.negative_terms))))


def _strip_leading_negative(t: Expr) -> tuple[Expr, bool]:
    if isinstance(t, Const) and t.value < 0:
        return Const(-t.value), True
    if isinstance(t, Mul) and isinstance(t.factors[0], Const) and t.factors[0].value < 0:
        return Mul((Const(-t.factors[0].value),) + t.factors[1:]), True
    return t, False


def split_terms(e: Expr) -> TermSplit:
    """Separate the top-level sum of ``e`` into sign-stripped positive and negative addends."""
    pos: list[Expr] = []
    neg: list[Expr] = []

    def visit(node: Expr, negative: bool) -> None:
        if isinstance(node, Add):
            for t in node.terms:
                visit(t, negative)
        elif isinstance(node, Neg):
            visit(node.child, not negative)
        else:
            node, flipped = _strip_leading_negative(node)
            (neg if negative != flipped else pos).append(node)

    visit(e, False)
    return TermSplit(tuple(pos), tuple(neg))


@dataclass(frozen=True)
class Diagnostic:
    code: str
    message: str
    where: str = ""

    def __str__(self) -> str:
        loc = f" [{self.where}]" if self.where else ""
        return f"{self.code}: {self.message}{loc}"


def is_constant(e: Expr, constants: Iterable[str]) -> bool:
    """True if every symbol in ``e`` names a constant."""
    consts = set(constants)
    return symbols(e) <= consts


def validate_synthesizable(e: Expr, constants: Iterable[str] = ()) -> list[Diagnostic]:
    """Check ``e`` against the MULT / mirror / summing-net vocabulary.

    ``constants`` names the symbols bound to fixed (positive) parameter values;
    any other symbol is treated as a signal.  Divisions must have either a
    constant denominator or a positivity-guarded one: a sum of un-negated
    terms containing at least one positive constant, or products and integer
    powers of such sums.
    """
    consts = frozenset(constants)
    diags: list[Diagnostic] = []

    def check(node: Expr) -> None:
        if isinstance(node, Div):
            check(node.num)
            check_den(node.den)
        else:
            for c in children(node):
                check(c)

    def check_den(d: Expr) -> None:
        if is_constant(d, consts):
            return
        if isinstance(d, (Mul,)):
            for f in d.factors:
                check_den(f)
        elif isinstance(d, Pow):
            check_den(d.base)
        elif isinstance(d, Div):
            check_den(d.num)
            check(d.den)
        elif isinstance(d, Add):
            check_guarded_sum(d)
        elif isinstance(d, Sym):
            diags.append(Diagnostic(
                "UnguardedDenominator",
                f"signal {d.name!r} divides without a positive bias current",
                to_text(d)))
        elif isinstance(d, Neg):
            diags.append(Diagnostic(
                "NegativeDenominator", "negated signal denominator", to_text(d)))
        else:  # pragma: no cover - exhaustive above
            diags.append(Diagnostic("Unsupported", type(d).__name__, to_text(d)))

    def check_guarded_sum(d: Add) -> None:
        has_bias = False
        for t in d.terms:
            if isinstance(t, Neg):
                diags.append(Diagnostic(
                    "NegativeDenominatorTerm",
                    "denominator sums may only add nonnegative signals",
                    to_text(t)))
                continue
            if is_constant(t, consts):
                if isinstance(t, Const) and t.value <= 0:
                    diags.append(Diagnostic(
                        "NegativeDenominatorTerm", "non-positive constant in denominator sum",
                        to_text(t)))
                else:
                    has_bias = True
            else:
                check(t)
        if not has_bias:
            diags.append(Diagnostic(
                "UnguardedDenominator",
                "denominator sum has no positive constant term",
                to_text(d)))

    check(e)
    return diags
