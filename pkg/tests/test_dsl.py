import numpy as np
import pytest
from hypothesis import given, strategies as st

from measure_steer.errors import DslDivisionByZero, DslSyntaxError, UnknownIdentifier
from measure_steer.fields.dsl import (
    BinOp,
    Call,
    FieldExpr,
    Neg,
    Num,
    Var,
    compile_expr,
    evaluate,
    parse_expr,
    parse_field,
    to_source,
    variables,
)

leaves = st.one_of(
    st.floats(0, 10, allow_nan=False).map(Num),
    st.sampled_from(["a", "b"]).map(Var),
)
trees = st.recursive(
    leaves,
    lambda sub: st.one_of(
        sub.map(Neg),
        st.tuples(st.sampled_from("+-*"), sub, sub).map(lambda t: BinOp(*t)),
        st.tuples(st.sampled_from(["sin", "cos", "abs"]), sub).map(lambda t: Call(*t)),
    ),
    max_leaves=12,
)


def test_paper_fields_parse():
    f2 = parse_field("(a+b, a)")
    assert f2 == FieldExpr((BinOp("+", Var("a"), Var("b")), Var("a")))
    f1 = parse_field("(0, 1)")
    assert f1 == FieldExpr((Num(0.0), Num(1.0)))
    f3 = parse_field("(sin(a), a-b)")
    x = np.array([0.0, 2.0])
    assert [float(evaluate(c, x)) for c in f3.components] == [0.0, -2.0]


def test_precedence_and_associativity():
    assert parse_expr("1 - 2 - 3") == BinOp("-", BinOp("-", Num(1), Num(2)), Num(3))
    assert parse_expr("1 + 2 * 3") == BinOp("+", Num(1), BinOp("*", Num(2), Num(3)))
    assert parse_expr("-a * b") == BinOp("*", Neg(Var("a")), Var("b"))
    assert parse_expr("8 / 4 / 2") == BinOp("/", BinOp("/", Num(8), Num(4)), Num(2))
    assert float(evaluate(parse_expr("2 * (3 + 4)"), np.zeros(2))) == 14.0


def test_syntax_error_offsets():
    with pytest.raises(DslSyntaxError) as exc:
        parse_field("(a + , b)")
    assert exc.value.offset == 5
    with pytest.raises(DslSyntaxError) as exc:
        parse_expr("a b")
    assert exc.value.offset == 2
    with pytest.raises(DslSyntaxError):
        parse_field("(a, b")
    with pytest.raises(DslSyntaxError):
        parse_expr("a $ b")


def test_unknown_identifier():
    with pytest.raises(UnknownIdentifier) as exc:
        parse_expr("a + c")
    assert exc.value.name == "c"
    with pytest.raises(UnknownIdentifier):
        parse_expr("tan(a)")


def test_division_traps():
    with pytest.raises(DslDivisionByZero):
        evaluate(parse_expr("a / b"), np.array([1.0, 0.0]))
    with pytest.raises(DslDivisionByZero):
        compile_expr(parse_expr("1 / (a - a)"))(np.array([[1.0, 2.0]]))


def test_x_aliases_and_variables():
    tree = parse_expr("x1 * b + exp(x3)")
    assert variables(tree) == {"x1", "b", "x3"}
    assert float(evaluate(tree, np.array([2.0, 3.0, 0.0]))) == pytest.approx(7.0)


def test_compiled_broadcasts_constants():
    out = compile_expr(parse_expr("2.5"))(np.zeros((4, 3, 2)))
    assert out.shape == (4, 3)
    assert np.all(out == 2.5)


@given(trees, st.lists(st.tuples(st.floats(-3, 3), st.floats(-3, 3)), min_size=1, max_size=5))
def test_round_trip(tree, pts):
    x = np.array(pts)
    again = parse_expr(to_source(tree))
    assert again == tree
    ref = np.array([evaluate(tree, p) for p in x], dtype=float)
    assert np.allclose(evaluate(again, x), ref, rtol=1e-14, atol=1e-14, equal_nan=True)
    assert np.allclose(compile_expr(tree)(x), ref, rtol=1e-14, atol=1e-14, equal_nan=True)
