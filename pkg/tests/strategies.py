"""Shared hypothesis strategies and random generators for expression tests."""

from __future__ import annotations

import random

from hypothesis import strategies as st

from nbds.expr import Add, Const, Div, Expr, Mul, Neg, Pow, Sym

SYMBOLS = ("x", "y", "z", "I_ext", "k_1")

consts = st.one_of(
    st.integers(min_value=0, max_value=9).map(lambda v: Const(float(v))),
    st.floats(min_value=0.0, max_value=1e3, allow_nan=False, allow_infinity=False).map(Const),
)
syms = st.sampled_from(SYMBOLS).map(Sym)


def _nonzero_den(d: Expr) -> bool:
    while isinstance(d, Neg):
        d = d.child
    return not (isinstance(d, Const) and d.value == 0)


def _extend(inner):
    return st.one_of(
        inner.map(Neg),
        st.lists(inner, min_size=2, max_size=4).map(lambda ts: Add(tuple(ts))),
        st.lists(inner, min_size=2, max_size=3).map(lambda fs: Mul(tuple(fs))),
        st.tuples(inner, inner.filter(_nonzero_den)).map(lambda nd: Div(*nd)),
        st.tuples(inner, st.integers(min_value=1, max_value=3)).map(lambda be: Pow(*be)),
    )


raw_exprs = st.recursive(st.one_of(consts, syms), _extend, max_leaves=12)


# ---------------------------------------------------------------------------
# Synthesizable expressions for netlist soundness checks
# ---------------------------------------------------------------------------

STATES = ("x", "y")
INPUTS = ("u",)
PARAMS = {"a": 1.3, "b": 0.7, "K": 0.9}


def random_synth_expr(rng: random.Random, depth: int = 0) -> Expr:
    """Draw a random expression from the MULT/mirror/sum vocabulary."""

    def leaf() -> Expr:
        r = rng.random()
        if r < 0.45:
            return Sym(rng.choice(STATES))
        if r < 0.6:
            return Sym(rng.choice(INPUTS))
        if r < 0.8:
            return Sym(rng.choice(sorted(PARAMS)))
        return Const(round(rng.uniform(0.1, 3.0), 3))

    def guarded() -> Expr:
        bias = rng.choice([Sym("K"), Sym("a"), Const(round(rng.uniform(0.5, 2.0), 3))])
        sig = Sym(rng.choice(STATES))
        if rng.random() < 0.3:
            sig = Mul((sig, Sym(rng.choice(STATES))))
        return Add((bias, sig) if rng.random() < 0.5 else (sig, bias))

    def factor(d: int) -> Expr:
        r = rng.random()
        if d >= 2 or r < 0.35:
            return leaf()
        if r < 0.5:
            return Pow(leaf(), rng.randint(2, 3))
        if r < 0.7:
            return Div(factor(d + 1), guarded())
        if r < 0.8:
            return Div(factor(d + 1), rng.choice([Sym("b"), Const(2.0), Mul((Sym("a"), Sym("b")))]))
        return Add(tuple(term(d + 1) for _ in range(2)))

    def term(d: int) -> Expr:
        n = rng.randint(1, 3)
        fs = tuple(factor(d) for _ in range(n))
        t = fs[0] if n == 1 else Mul(fs)
        return Neg(t) if rng.random() < 0.4 else t

    n_terms = rng.randint(1, 4)
    ts = tuple(term(depth) for _ in range(n_terms))
    return ts[0] if n_terms == 1 else Add(ts)


def random_env(rng: random.Random) -> dict[str, float]:
    env = {s: rng.uniform(0.1, 2.0) for s in STATES}
    env.update({u: rng.uniform(-2.0, 2.0) for u in INPUTS})
    env.update(PARAMS)
    return env
