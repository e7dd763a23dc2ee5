"""Small arithmetic expression language for coefficient fields.

Grammar (whitespace is insignificant)::

    expr   := term (('+' | '-') term)*
    term   := factor (('*' | '/') factor)*
    factor := unary ('^' factor)?
    unary  := '-'? atom
    atom   := number | ident | ident '(' expr (',' expr)* ')' | '(' expr ')'

Binding follows the usual mathematical reading: ``^`` binds tighter than a
leading minus, so ``-2^2`` is ``-(2^2)``.  ``^`` is right-associative, the
other binary operators are left-associative.

Identifiers are ``t``, ``x1..xd``, ``y1..yd``, the constant ``pi`` and the
functions ``sin``, ``cos``, ``exp`` and ``abs``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np

__all__ = [
    "Const",
    "Name",
    "Var",
    "Neg",
    "BinOp",
    "Call",
    "Node",
    "ExpressionError",
    "EvaluationError",
    "parse_expression",
    "serialize",
    "evaluate",
    "free_variables",
]

FUNCTIONS = {"sin": np.sin, "cos": np.cos, "exp": np.exp, "abs": np.abs}
CONSTANTS = {"pi": math.pi}


class ExpressionError(ValueError):
    """Syntax or name error; ``offset`` is the byte offset into the UTF-8 source."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.message = message
        self.offset = offset


class EvaluationError(ArithmeticError):
    pass


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Name:
    """Named constant such as ``pi``."""

    name: str


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    operand: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple


Node = Union[Const, Name, Var, Neg, BinOp, Call]

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),]))"
)


def _tokenize(source: str):
    tokens = []
    pos = 0
    while pos < len(source):
        if source[pos:].strip() == "":
            break
        m = _TOKEN.match(source, pos)
        if m is None or m.end() == pos:
            start = pos + (len(source[pos:]) - len(source[pos:].lstrip()))
            raise ExpressionError(
                f"unexpected character {source[start]!r}", _byte_offset(source, start)
            )
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    tokens.append(("end", "", len(source)))
    return tokens


def _byte_offset(source: str, index: int) -> int:
    return len(source[:index].encode("utf-8"))


class _Parser:
    def __init__(self, source: str, dim: int):
        self.source = source
        self.tokens = _tokenize(source)
        self.i = 0
        self.variables = {"t"} | {f"x{k}" for k in range(1, dim + 1)} | {
            f"y{k}" for k in range(1, dim + 1)
        }

    def error(self, message, token=None):
        token = token or self.tokens[self.i]
        return ExpressionError(message, _byte_offset(self.source, token[2]))

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        tok = self.take()
        if tok[1] != value or tok[0] != "op":
            got = "end of input" if tok[0] == "end" else repr(tok[1])
            raise self.error(f"expected {value!r}, got {got}", tok)
        return tok

    def parse(self) -> Node:
        node = self.expr()
        if self.peek()[0] != "end":
            raise self.error(f"unexpected token {self.peek()[1]!r}")
        return node

    def expr(self):
        node = self.term()
        while self.peek()[0] == "op" and self.peek()[1] in "+-":
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self):
        node = self.factor()
        while self.peek()[0] == "op" and self.peek()[1] in "*/":
            op = self.take()[1]
            node = BinOp(op, node, self.factor())
        return node

    def factor(self):
        if self.peek() == ("op", "-", self.peek()[2]):
            self.take()
            return Neg(self.power())
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.take()
            return BinOp("^", base, self.factor())
        return base

    def atom(self):
        tok = self.take()
        kind, text, _ = tok
        if kind == "num":
            return Const(float(text))
        if kind == "ident":
            if self.peek()[0] == "op" and self.peek()[1] == "(":
                if text not in FUNCTIONS:
                    raise self.error(f"unknown function {text}", tok)
                self.take()
                if self.peek()[0] == "op" and self.peek()[1] == ")":
                    raise self.error(f"wrong arity: {text} takes 1 argument, got 0", tok)
                args = [self.expr()]
                while self.peek()[0] == "op" and self.peek()[1] == ",":
                    self.take()
                    args.append(self.expr())
                self.expect(")")
                if len(args) != 1:
                    raise self.error(
                        f"wrong arity: {text} takes 1 argument, got {len(args)}", tok
                    )
                return Call(text, tuple(args))
            if text in FUNCTIONS:
                raise self.error(f"function {text} used without arguments", tok)
            if text in CONSTANTS:
                return Name(text)
            if text in self.variables:
                return Var(text)
            raise self.error(f"unknown identifier {text}", tok)
        if kind == "op" and text == "(":
            node = self.expr()
            self.expect(")")
            return node
        if kind == "end":
            raise self.error("unexpected end of input", tok)
        raise self.error(f"unexpected token {text!r}", tok)


def parse_expression(source: str | bytes, dim: int = 2) -> Node:
    """Parse ``source`` into an expression tree for a problem of dimension ``dim``.

    >>> parse_expression("1.5")
    Const(value=1.5)
    """
    if isinstance(source, bytes):
        source = source.decode("utf-8")
    return _Parser(source, dim).parse()


def serialize(node: Node) -> str:
    """Canonical, fully parenthesised text form; ``parse(serialize(n)) == n``."""
    if isinstance(node, Const):
        return repr(float(node.value))
    if isinstance(node, (Name, Var)):
        return node.name
    if isinstance(node, Neg):
        return f"(-{serialize(node.operand)})"
    if isinstance(node, BinOp):
        return f"({serialize(node.left)} {node.op} {serialize(node.right)})"
    if isinstance(node, Call):
        return f"{node.func}({', '.join(serialize(a) for a in node.args)})"
    raise TypeError(f"not an expression node: {node!r}")


def free_variables(node: Node) -> frozenset:
    if isinstance(node, Var):
        return frozenset([node.name])
    if isinstance(node, Neg):
        return free_variables(node.operand)
    if isinstance(node, BinOp):
        return free_variables(node.left) | free_variables(node.right)
    if isinstance(node, Call):
        return frozenset().union(*(free_variables(a) for a in node.args))
    return frozenset()


def _eval(node, env):
    if isinstance(node, Const):
        return node.value
    if isinstance(node, Name):
        return CONSTANTS[node.name]
    if isinstance(node, Var):
        try:
            return env[node.name]
        except KeyError:
            raise EvaluationError(f"no value bound for variable {node.name}") from None
    if isinstance(node, Neg):
        return -_eval(node.operand, env)
    if isinstance(node, BinOp):
        a = _eval(node.left, env)
        b = _eval(node.right, env)
        if node.op == "+":
            return a + b
        if node.op == "-":
            return a - b
        if node.op == "*":
            return a * b
        if node.op == "/":
            if np.any(np.asarray(b) == 0):
                raise EvaluationError("division by zero")
            return a / b
        return np.power(np.asarray(a, dtype=float), b)
    if isinstance(node, Call):
        return FUNCTIONS[node.func](_eval(node.args[0], env))
    raise TypeError(f"not an expression node: {node!r}")


def evaluate(node: Node, env: Mapping[str, object]):
    """Evaluate ``node`` with numpy broadcasting over the arrays bound in ``env``.

    Any non-finite intermediate (overflow, invalid power) raises
    :class:`EvaluationError`.
    """
    try:
        with np.errstate(over="raise", divide="raise", invalid="raise", under="ignore"):
            out = _eval(node, env)
    except FloatingPointError as exc:
        raise EvaluationError(str(exc)) from None
    out = np.asarray(out, dtype=float)
    if not np.all(np.isfinite(out)):
        raise EvaluationError("non-finite value")
    return out
