import math
import random

import pytest
from hypothesis import assume, given, settings

from nbds.errors import DivisionByZero, ExponentError, ParseError, UnboundSymbol
from nbds.expr import (
    Add,
    Const,
    Div,
    Mul,
    Neg,
    Pow,
    Sym,
    compile_exprs,
    eval_expr,
    parse_expr,
    split_terms,
    to_text,
    validate_synthesizable,
)

from strategies import raw_exprs, random_env, random_synth_expr

v, w, s, x = Sym("v"), Sym("w"), Sym("s"), Sym("x")
I_ext = Sym("I_ext")


# --- parse_expr -------------------------------------------------------------

def test_parse_synapse_rhs():
    assert parse_expr("-s + I_ext") == Add((Neg(s), I_ext))


def test_parse_fhn_v_rhs():
    expected = Add((v, Neg(Div(Pow(v, 3), Const(3))), Neg(w), I_ext))
    assert parse_expr("v - v^3/3 - w + I_ext") == expected


def test_parse_single_symbol():
    assert parse_expr("x") == x


@pytest.mark.parametrize(
    "text, expected",
    [
        ("a*b*c", Mul((Sym("a"), Sym("b"), Sym("c")))),
        ("a/b/c", Div(Div(Sym("a"), Sym("b")), Sym("c"))),
        ("a*b/c", Div(Mul((Sym("a"), Sym("b"))), Sym("c"))),
        ("a/b*c", Mul((Div(Sym("a"), Sym("b")), Sym("c")))),
        ("a - b - c", Add((Sym("a"), Neg(Sym("b")), Neg(Sym("c"))))),
        ("-x^2", Neg(Pow(x, 2))),
        ("(-x)^3", Pow(Neg(x), 3)),
        ("a*-b", Neg(Mul((Sym("a"), Sym("b"))))),
        ("-a*-b", Mul((Sym("a"), Sym("b")))),
        ("(a + b) + c", Add((Add((Sym("a"), Sym("b"))), Sym("c")))),
        ("2.5e-3*x", Mul((Const(2.5e-3), x))),
    ],
)
def test_parse_precedence_and_associativity(text, expected):
    assert parse_expr(text) == expected


def test_sign_moves_out_of_product_but_coefficient_stays_grouped():
    e = parse_expr("0.18*(v + 0.7 - 0.8*w)")
    assert e == Mul((Const(0.18), Add((v, Const(0.7), Neg(Mul((Const(0.8), w)))))))


@pytest.mark.parametrize("text", ["x^0.5", "x^0", "x^-1", "x^y", "x^(2)"])
def test_exponent_errors(text):
    with pytest.raises(ExponentError):
        parse_expr(text)


@pytest.mark.parametrize("text, pos", [("a +", 3), ("(a + b", 6), ("a $ b", 2), ("a b", 2), ("1/0", 2), ("", 0)])
def test_syntax_errors_carry_position(text, pos):
    with pytest.raises(ParseError) as info:
        parse_expr(text)
    assert not isinstance(info.value, ExponentError)
    assert info.value.position == pos


@given(raw_exprs)
@settings(max_examples=300, deadline=None)
def test_print_parse_round_trip(raw):
    normal = parse_expr(to_text(raw))
    assert parse_expr(to_text(normal)) == normal


@given(raw_exprs)
@settings(max_examples=200, deadline=None)
def test_normalisation_preserves_value(raw):
    rng = random.Random(7)
    env = {name: rng.uniform(-3, 3) for name in ("x", "y", "z", "I_ext", "k_1")}
    try:
        a = eval_expr(raw, env)
    except (DivisionByZero, OverflowError):
        assume(False)
    b = eval_expr(parse_expr(to_text(raw)), env)
    assume(math.isfinite(a))
    assert b == pytest.approx(a, rel=1e-9, abs=1e-9)


# --- eval_expr --------------------------------------------------------------

def test_eval_hand_arithmetic():
    assert eval_expr(parse_expr("v - v^3/3"), {"v": 3.0}) == -6.0


def test_eval_identity():
    assert eval_expr(x, {"x": 7.5}) == 7.5


def test_eval_division_by_zero():
    with pytest.raises(DivisionByZero):
        eval_expr(parse_expr("a/b"), {"a": 1.0, "b": 0.0})


def test_eval_division_threshold_is_absolute():
    with pytest.raises(DivisionByZero):
        eval_expr(parse_expr("a/b"), {"a": 1.0, "b": 9e-16})
    assert eval_expr(parse_expr("a/b"), {"a": 1.0, "b": 2e-15}) == pytest.approx(5e14)


def test_eval_unbound():
    with pytest.raises(UnboundSymbol) as info:
        eval_expr(parse_expr("a + q"), {"a": 1.0})
    assert info.value.name == "q"


@given(raw_exprs)
@settings(max_examples=200, deadline=None)
def test_eval_is_pure_and_matches_compiled(e):
    env = {"x": 0.3, "y": -1.7, "z": 2.2, "I_ext": 0.5, "k_1": 1.1}
    try:
        a = eval_expr(e, env)
    except (DivisionByZero, OverflowError):
        assume(False)
    b = eval_expr(e, env)
    assert repr(a) == repr(b)
    f = compile_exprs([e], list(env))
    c = f(*env.values())[0]
    assert repr(a) == repr(c)


# --- split_terms ------------------------------------------------------------

def test_split_synapse():
    ts = split_terms(parse_expr("-s + I_ext"))
    assert ts.positive_terms == (I_ext,)
    assert ts.negative_terms == (s,)


def test_split_fhn_v():
    ts = split_terms(parse_expr("v - v^3/3 - w + I_ext"))
    assert ts.positive_terms == (v, I_ext)
    assert ts.negative_terms == (Div(Pow(v, 3), Const(3)), w)


def test_split_single_term():
    ts = split_terms(x)
    assert ts.positive_terms == (x,)
    assert ts.negative_terms == ()


def test_split_flattens_nested_and_double_negation():
    ts = split_terms(parse_expr("a - (b - c) - -d"))
    assert ts.positive_terms == (Sym("a"), Sym("c"), Sym("d"))
    assert ts.negative_terms == (Sym("b"),)


def test_split_negative_leading_constant():
    ts = split_terms(Add((Mul((Const(-2.0), x)), Const(-3.0))))
    assert ts.positive_terms == ()
    assert ts.negative_terms == (Mul((Const(2.0), x)), Const(3.0))


def _no_top_neg(ts):
    return not any(isinstance(t, Neg) for t in ts.positive_terms + ts.negative_terms)


@given(raw_exprs)
@settings(max_examples=200, deadline=None)
def test_recombination_invariant(e):
    ts = split_terms(e)
    assert _no_top_neg(ts)
    rng = random.Random(hash(to_text(e)) & 0xFFFF)
    names = ("x", "y", "z", "I_ext", "k_1")
    for _ in range(100):
        env = {n: rng.uniform(-3, 3) for n in names}
        try:
            direct = eval_expr(e, env)
            pos = sum(eval_expr(t, env) for t in ts.positive_terms)
            neg = sum(eval_expr(t, env) for t in ts.negative_terms)
        except (DivisionByZero, OverflowError):
            continue
        if not math.isfinite(direct):
            continue
        scale = max(1.0, abs(direct), *(abs(eval_expr(t, env)) for t in ts.positive_terms + ts.negative_terms))
        assert abs(direct - (pos - neg)) <= 1e-12 * scale


# --- validate_synthesizable -------------------------------------------------

def test_validate_fhn_rhs():
    assert validate_synthesizable(parse_expr("v - v^3/3 - w + I_ext")) == []


def test_validate_hill_term():
    assert validate_synthesizable(parse_expr("X/(K2+X)"), constants={"K2"}) == []


def test_validate_astrocyte_release_term():
    e = parse_expr("V_M3*Y/(K_R + Y)*X/(K_A + X)")
    assert validate_synthesizable(e, constants={"V_M3", "K_R", "K_A"}) == []


@pytest.mark.parametrize(
    "text, code",
    [
        ("a/x", "UnguardedDenominator"),
        ("a/(x + y)", "UnguardedDenominator"),
        ("a/(K - x)", "NegativeDenominatorTerm"),
    ],
)
def test_validate_rejects_unguarded(text, code):
    diags = validate_synthesizable(parse_expr(text), constants={"K", "a"})
    assert [d.code for d in diags] == [code]


def test_validate_negated_denominator_built_directly():
    diags = validate_synthesizable(Div(Sym("a"), Neg(x)), constants={"a"})
    assert [d.code for d in diags] == ["NegativeDenominator"]


def test_validate_one_diagnostic_per_offending_subtree():
    diags = validate_synthesizable(parse_expr("a/x + b/y"), constants={"a", "b"})
    assert len(diags) == 2


def test_validate_constant_denominators_are_fine():
    assert validate_synthesizable(parse_expr("x/(a*b) + y/(a - b)"), constants={"a", "b"}) == []


def test_random_synth_exprs_validate():
    rng = random.Random(3)
    for _ in range(200):
        e = random_synth_expr(rng)
        assert validate_synthesizable(e, constants={"a", "b", "K"}) == [], to_text(e)
        eval_expr(e, random_env(rng))
