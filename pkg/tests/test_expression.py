import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dualhom.expression import (
    BinOp,
    Call,
    Const,
    EvaluationError,
    ExpressionError,
    Name,
    Neg,
    Var,
    evaluate,
    free_variables,
    parse_expression,
    serialize,
)


def test_literal():
    assert parse_expression("1.5") == Const(1.5)


def test_grammar_shape():
    tree = parse_expression("2 + 0.5*sin(2*pi*y1)")
    arg = BinOp("*", BinOp("*", Const(2.0), Name("pi")), Var("y1"))
    assert tree == BinOp("+", Const(2.0), BinOp("*", Const(0.5), Call("sin", (arg,))))


def test_out_of_range_variable():
    with pytest.raises(ExpressionError, match="unknown identifier y3"):
        parse_expression("y3", dim=2)


def test_dimension_limits_variables():
    parse_expression("x2 + y2", dim=2)
    with pytest.raises(ExpressionError, match="unknown identifier x2"):
        parse_expression("x2", dim=1)


@pytest.mark.parametrize(
    "text, value",
    [
        ("1 - 2 - 3", -4.0),
        ("8 / 4 / 2", 1.0),
        ("2 ^ 3 ^ 2", 512.0),
        ("-2 ^ 2", -4.0),
        ("2 * -3", -6.0),
        ("(1 + 2) * 3", 9.0),
        ("1 + 2 * 3", 7.0),
        ("2 ^ -1", 0.5),
        ("abs(-3)", 3.0),
        ("exp(0) + cos(0)", 2.0),
        ("pi", math.pi),
        ("1e-3 * 1E3", 1.0),
    ],
)
def test_precedence_and_associativity(text, value):
    assert float(evaluate(parse_expression(text), {})) == pytest.approx(value, rel=1e-15)


@pytest.mark.parametrize(
    "text, offset",
    [("1 +", 3), ("(1", 2), ("1 $ 2", 2), ("sin 1", 0), ("1 + é", 4), ("é", 0), ("x1 * (2 +", 9)],
)
def test_syntax_error_offsets(text, offset):
    with pytest.raises(ExpressionError) as info:
        parse_expression(text)
    assert info.value.offset == offset


@pytest.mark.parametrize("text", ["sin(1, 2)", "cos()"])
def test_wrong_arity(text):
    with pytest.raises(ExpressionError, match="arity"):
        parse_expression(text)


def test_unknown_function():
    with pytest.raises(ExpressionError, match="unknown"):
        parse_expression("tan(1)")


def test_bytes_input():
    assert parse_expression("x1".encode("utf-8"), dim=1) == Var("x1")


def test_division_by_zero():
    with pytest.raises(EvaluationError):
        evaluate(parse_expression("1 / x1"), {"x1": np.array([1.0, 0.0])})


def test_overflow_is_an_error():
    with pytest.raises(EvaluationError):
        evaluate(parse_expression("exp(1000)"), {})


def test_vectorized_evaluation():
    y = np.linspace(0, 1, 5)
    out = evaluate(parse_expression("sin(2*pi*y1)"), {"y1": y})
    np.testing.assert_allclose(out, np.sin(2 * np.pi * y), atol=1e-15)


def test_free_variables():
    assert free_variables(parse_expression("t*x1 + sin(y2) + pi")) == {"t", "x1", "y2"}


_atoms = st.one_of(
    st.floats(0, 1e6, allow_nan=False).map(repr),
    st.integers(0, 99).map(str),
    st.sampled_from(["t", "x1", "x2", "y1", "y2", "pi"]),
)


def _combine(children):
    binary = st.tuples(children, st.sampled_from(["+", "-", "*", "/", "^"]), children).map(
        lambda p: f"{p[0]} {p[1]} {p[2]}"
    )
    return st.one_of(
        binary,
        children.map(lambda s: f"({s})"),
        children.map(lambda s: f"-({s})"),
        children.map(lambda s: f"2 * -{s}" if not s.startswith("-") else s),
        st.tuples(st.sampled_from(["sin", "cos", "exp", "abs"]), children).map(lambda p: f"{p[0]}({p[1]})"),
    )


expressions = st.recursive(_atoms, _combine, max_leaves=12)


@settings(max_examples=300, deadline=None)
@given(expressions)
def test_round_trip(text):
    tree = parse_expression(text)
    again = parse_expression(serialize(tree))
    assert again == tree
    assert serialize(again) == serialize(tree)


@settings(max_examples=100, deadline=None)
@given(expressions, st.floats(-2, 2), st.floats(0, 1))
def test_round_trip_preserves_value(text, x, y):
    env = {"t": 0.3, "x1": x, "x2": -x, "y1": y, "y2": 1 - y}
    a, b = parse_expression(text), parse_expression(serialize(parse_expression(text)))
    try:
        va = evaluate(a, env)
    except EvaluationError:
        with pytest.raises(EvaluationError):
            evaluate(b, env)
        return
    assert float(evaluate(b, env)) == float(va)


def test_nodes_are_hashable_and_frozen():
    n = Neg(Const(1.0))
    assert hash(n) == hash(Neg(Const(1.0)))
    with pytest.raises(AttributeError):
        n.operand = Const(2.0)
