"""Tiny expression language for declaring vector fields in scenario files.

Grammar::

    field  := "(" expr { "," expr } ")"
    expr   := term { ("+" | "-") term }
    term   := factor { ("*" | "/") factor }
    factor := [ "-" ] atom
    atom   := number | ident | ident "(" expr ")" | "(" expr ")"

Identifiers are the coordinates ``a``, ``b``, ``x1`` .. ``x9`` (``a`` is
``x1`` and ``b`` is ``x2``) and the functions ``sin``, ``cos``, ``exp``,
``abs``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from ..errors import DslDivisionByZero, DslSyntaxError, UnknownIdentifier

FUNCTIONS = {"sin": np.sin, "cos": np.cos, "exp": np.exp, "abs": np.abs}
VARIABLES = {"a": 0, "b": 1, **{f"x{k}": k - 1 for k in range(1, 10)}}
DIV_EPS = 1e-300


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str

    @property
    def index(self) -> int:
        return VARIABLES[self.name]


@dataclass(frozen=True)
class Neg:
    operand: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str
    lhs: "Node"
    rhs: "Node"


@dataclass(frozen=True)
class Call:
    func: str
    arg: "Node"


Node = Num | Var | Neg | BinOp | Call


@dataclass(frozen=True)
class FieldExpr:
    components: tuple[Node, ...]

    @property
    def dim(self) -> int:
        return len(self.components)

    def __str__(self) -> str:
        return to_source(self)


_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)|(?P<op>[-+*/(),]))"
)


def _tokenize(src: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(src):
        if src[pos:].strip() == "":
            break
        m = _TOKEN.match(src, pos)
        if m is None:
            start = len(src) - len(src[pos:].lstrip())
            raise DslSyntaxError(_byte_offset(src, start), "number, identifier or operator", src)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), _byte_offset(src, start)))
        pos = m.end()
    tokens.append(("end", "", len(src.encode())))
    return tokens


def _byte_offset(src: str, index: int) -> int:
    return len(src[:index].encode())


class _Parser:
    def __init__(self, src: str):
        self.src = src
        self.tokens = _tokenize(src)
        self.i = 0

    @property
    def tok(self):
        return self.tokens[self.i]

    def fail(self, expected: str):
        raise DslSyntaxError(self.tok[2], expected, self.src)

    def accept(self, value: str) -> bool:
        if self.tok[0] == "op" and self.tok[1] == value:
            self.i += 1
            return True
        return False

    def expect(self, value: str):
        if not self.accept(value):
            self.fail(repr(value))

    def field(self) -> FieldExpr:
        self.expect("(")
        comps = [self.expr()]
        while self.accept(","):
            comps.append(self.expr())
        self.expect(")")
        self.finish()
        return FieldExpr(tuple(comps))

    def finish(self):
        if self.tok[0] != "end":
            self.fail("end of input")

    def expr(self) -> Node:
        node = self.term()
        while self.tok[0] == "op" and self.tok[1] in "+-":
            op = self.tok[1]
            self.i += 1
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.factor()
        while self.tok[0] == "op" and self.tok[1] in "*/":
            op = self.tok[1]
            self.i += 1
            node = BinOp(op, node, self.factor())
        return node

    def factor(self) -> Node:
        if self.accept("-"):
            return Neg(self.atom())
        return self.atom()

    def atom(self) -> Node:
        kind, text, offset = self.tok
        if kind == "num":
            self.i += 1
            return Num(float(text))
        if kind == "ident":
            self.i += 1
            if text in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return Call(text, arg)
            if text in VARIABLES:
                return Var(text)
            raise UnknownIdentifier(text, offset)
        if self.accept("("):
            node = self.expr()
            self.expect(")")
            return node
        self.fail("number, identifier or '('")


def parse_field(src: str) -> FieldExpr:
    """Parse ``"(expr, expr, ...)"`` into a :class:`FieldExpr`."""
    if not src or not src.strip():
        raise DslSyntaxError(0, "'('", src)
    return _Parser(src).field()


def parse_expr(src: str) -> Node:
    """Parse a single scalar expression."""
    if not src or not src.strip():
        raise DslSyntaxError(0, "expression", src)
    p = _Parser(src)
    node = p.expr()
    p.finish()
    return node


def to_source(node: Node | FieldExpr) -> str:
    """Print an AST so that parsing the text gives the same AST back."""
    if isinstance(node, FieldExpr):
        return "(" + ", ".join(to_source(c) for c in node.components) + ")"
    match node:
        case Num(value) if value >= 0:
            return repr(float(value))
        case Num(value):
            return f"(-{repr(-float(value))})"
        case Var(name):
            return name
        case Neg(operand):
            inner = to_source(operand)
            if isinstance(operand, (Neg, BinOp)) or (isinstance(operand, Num) and operand.value < 0):
                inner = f"({inner})"
            return f"-{inner}"
        case BinOp(op, lhs, rhs):
            return f"({to_source(lhs)} {op} {to_source(rhs)})"
        case Call(func, arg):
            return f"{func}({to_source(arg)})"
    raise TypeError(f"not an AST node: {node!r}")


def variables(node: Node | FieldExpr) -> set[str]:
    if isinstance(node, FieldExpr):
        return set().union(*(variables(c) for c in node.components))
    match node:
        case Var(name):
            return {name}
        case Neg(operand) | Call(_, operand):
            return variables(operand)
        case BinOp(_, lhs, rhs):
            return variables(lhs) | variables(rhs)
    return set()


def _div(num, den):
    if np.any(np.abs(den) < DIV_EPS):
        raise DslDivisionByZero("division by a value below 1e-300 in field expression")
    return num / den


def evaluate(node: Node, coords) -> np.ndarray | float:
    """Reference tree-walking interpreter; ``coords[..., k]`` is coordinate ``x{k+1}``."""
    match node:
        case Num(value):
            return value
        case Var():
            return coords[..., node.index]
        case Neg(operand):
            return -evaluate(operand, coords)
        case BinOp("+", lhs, rhs):
            return evaluate(lhs, coords) + evaluate(rhs, coords)
        case BinOp("-", lhs, rhs):
            return evaluate(lhs, coords) - evaluate(rhs, coords)
        case BinOp("*", lhs, rhs):
            return evaluate(lhs, coords) * evaluate(rhs, coords)
        case BinOp("/", lhs, rhs):
            return _div(evaluate(lhs, coords), evaluate(rhs, coords))
        case Call(func, arg):
            return FUNCTIONS[func](evaluate(arg, coords))
    raise TypeError(f"not an AST node: {node!r}")


def _python(node: Node) -> str:
    match node:
        case Num(value):
            return f"({float(value)!r})"
        case Var():
            return f"x[..., {node.index}]"
        case Neg(operand):
            return f"(-{_python(operand)})"
        case BinOp("/", lhs, rhs):
            return f"_div({_python(lhs)}, {_python(rhs)})"
        case BinOp(op, lhs, rhs):
            return f"({_python(lhs)} {op} {_python(rhs)})"
        case Call(func, arg):
            return f"_np.{func}({_python(arg)})"
    raise TypeError(f"not an AST node: {node!r}")


def compile_expr(node: Node):
    """Turn an AST into a vectorized function ``coords (..., n) -> values (...)``."""
    fn = eval(f"lambda x: {_python(node)}", {"_np": np, "_div": _div})  # noqa: S307 - source built from our own AST

    constant = not variables(node)

    def run(coords):
        coords = np.asarray(coords, dtype=float)
        if constant:
            return np.full(coords.shape[:-1], float(fn(coords)))
        # any coordinate reference already carries the batch shape
        return fn(coords)

    return run
