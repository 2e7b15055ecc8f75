"""Exact arithmetic over the calculator-annotation grammar.

Grammar: integers and decimals, binary + - * /, unary minus, parentheses,
optional whitespace. Evaluation is exact big-rational; decimals parse to
their exact value ("3.50" is 7/2). Used as the oracle deciding whether an
inline arithmetic claim is actually true.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Optional, Union

from .corpus import AnswerKind, CalcAnnotation, normalize_number


class CalcError(Exception):
    pass


class ExprSyntaxError(CalcError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class DivideByZero(CalcError):
    pass


@dataclass(frozen=True)
class Literal:
    value: Fraction


@dataclass(frozen=True)
class Neg:
    operand: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str  # one of + - * /
    left: "Expr"
    right: "Expr"


Expr = Union[Literal, Neg, BinOp]

_NUMBER = re.compile(r"\d+(?:\.\d+)?|\.\d+")


class _Parser:
    """Recursive-descent parser: standard precedence, left associativity."""

    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def _skip_ws(self) -> None:
        while self.pos < len(self.text) and self.text[self.pos] in " \t":
            self.pos += 1

    def _peek(self) -> str:
        self._skip_ws()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def parse(self) -> Expr:
        expr = self._sum()
        self._skip_ws()
        if self.pos != len(self.text):
            raise ExprSyntaxError("unexpected trailing input", self.pos)
        return expr

    def _sum(self) -> Expr:
        node = self._product()
        while self._peek() and self._peek() in "+-":
            op = self.text[self.pos]
            self.pos += 1
            node = BinOp(op, node, self._product())
        return node

    def _product(self) -> Expr:
        node = self._factor()
        while self._peek() and self._peek() in "*/":
            op = self.text[self.pos]
            self.pos += 1
            node = BinOp(op, node, self._factor())
        return node

    def _factor(self) -> Expr:
        ch = self._peek()
        if ch == "-":
            self.pos += 1
            return Neg(self._factor())
        return self._primary()

    def _primary(self) -> Expr:
        ch = self._peek()
        if ch == "(":
            self.pos += 1
            node = self._sum()
            if self._peek() != ")":
                raise ExprSyntaxError("expected ')'", self.pos)
            self.pos += 1
            return node
        m = _NUMBER.match(self.text, self.pos)
        if not m:
            raise ExprSyntaxError("expected a number or '('", self.pos)
        self.pos = m.end()
        return Literal(Fraction(m.group(0)))


def parse_expr(text: str) -> Expr:
    return _Parser(text).parse()


def eval_expr(expr: Expr) -> Fraction:
    if isinstance(expr, Literal):
        return expr.value
    if isinstance(expr, Neg):
        return -eval_expr(expr.operand)
    left = eval_expr(expr.left)
    right = eval_expr(expr.right)
    if expr.op == "+":
        return left + right
    if expr.op == "-":
        return left - right
    if expr.op == "*":
        return left * right
    if right == 0:
        raise DivideByZero(f"division by zero in expression")
    return left / right


def evaluate(text: str) -> Fraction:
    """Parse and evaluate in one call."""
    return eval_expr(parse_expr(text))


class VerifyStatus(Enum):
    CONSISTENT = "consistent"
    INCONSISTENT = "inconsistent"
    UNPARSEABLE = "unparseable"


@dataclass(frozen=True)
class VerifyResult:
    status: VerifyStatus
    expected: Optional[Fraction] = None


def verify_annotation(annotation: CalcAnnotation) -> VerifyResult:
    """Check an inline `<<expr=value>>` claim against exact evaluation.

    Consistent iff the expression evaluates to exactly the normalized claimed
    value. Grammar violations on either side yield Unparseable; a claim whose
    expression divides by zero can never hold and reports Inconsistent.
    """
    try:
        expected = evaluate(annotation.expression)
    except ExprSyntaxError:
        return VerifyResult(VerifyStatus.UNPARSEABLE)
    except DivideByZero:
        return VerifyResult(VerifyStatus.INCONSISTENT)
    claimed = normalize_number(annotation.claimed_value)
    if claimed.kind is not AnswerKind.NUMERIC:
        return VerifyResult(VerifyStatus.UNPARSEABLE)
    if claimed.numeric == expected:
        return VerifyResult(VerifyStatus.CONSISTENT)
    return VerifyResult(VerifyStatus.INCONSISTENT, expected=expected)
