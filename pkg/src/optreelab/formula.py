"""Canonical infix formula strings: emission from trees and a precedence-climbing parser.

Grammar of emitted strings::

    expr    := "(" expr binop expr ")" | func "(" expr ")" | number | variable
             | "(" number ")"       (a negative base of "^" only)
    binop   := " + " | " - " | " * " | " / " | " ^ "

The parser accepts the wider usual grammar (optional parentheses, standard
precedence, left-associative ``+ - * /``, right-associative ``^``, unary minus).
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .errors import MaskedConstError, ParseError
from .tree import CONST, ConstVec, Node, OperationTree
from .vocab import OperatorVocab

BINARY_SYMBOL = {"add": "+", "sub": "-", "mul": "*", "div": "/", "pow": "^"}
SYMBOL_BINARY = {v: k for k, v in BINARY_SYMBOL.items()}

# (precedence, right associative)
_BINDING = {"+": (1, False), "-": (1, False), "*": (2, False), "/": (2, False), "^": (3, True)}

_NUMBER_RE = re.compile(r"(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?")
_NAME_RE = re.compile(r"[A-Za-z_][A-Za-z_0-9]*")


def format_const(value: float) -> str:
    return format(float(value), ".17g")


def tree_to_formula(tree: OperationTree, consts: ConstVec) -> str:
    """Fully parenthesized infix string with the constants substituted."""
    n = tree.n_const
    if consts.true_len < n:
        raise ValueError(f"tree has {n} constant slots, got {consts.true_len} values")
    if not consts.mask[:n].all():
        raise MaskedConstError("formula emission needs every constant visible")

    def emit(node: Node) -> str:
        if node.name == CONST:
            return format_const(consts.values[node.slot])
        if not node.children:
            return node.name
        if len(node.children) == 1:
            return f"{node.name}({emit(node.children[0])})"
        a, b = node.children
        left = emit(a)
        if node.name == "pow" and left.startswith("-"):
            # "-2 ^ x" would read as -(2 ^ x)
            left = f"({left})"
        return f"({left} {BINARY_SYMBOL[node.name]} {emit(b)})"

    return emit(tree.root)


@dataclass(frozen=True)
class _Tok:
    kind: str  # num | name | op | lpar | rpar | end
    text: str
    offset: int


def _lex(s: str) -> list[_Tok]:
    toks: list[_Tok] = []
    i = 0
    while i < len(s):
        ch = s[i]
        if ch.isspace():
            i += 1
            continue
        if ch.isdigit() or (ch == "." and i + 1 < len(s) and s[i + 1].isdigit()):
            m = _NUMBER_RE.match(s, i)
            toks.append(_Tok("num", m.group(), i))
            i = m.end()
        elif ch.isalpha() or ch == "_":
            m = _NAME_RE.match(s, i)
            toks.append(_Tok("name", m.group(), i))
            i = m.end()
        elif ch in "+-*/^":
            if s.startswith("**", i):
                toks.append(_Tok("op", "^", i))
                i += 2
            else:
                toks.append(_Tok("op", ch, i))
                i += 1
        elif ch == "(":
            toks.append(_Tok("lpar", ch, i))
            i += 1
        elif ch == ")":
            toks.append(_Tok("rpar", ch, i))
            i += 1
        else:
            raise ParseError(f"unexpected character {ch!r}", i)
    toks.append(_Tok("end", "", len(s)))
    return toks


class _Parser:
    def __init__(self, s: str, vocab: OperatorVocab):
        self.toks = _lex(s)
        self.pos = 0
        self.vocab = vocab
        self.consts: list[float] = []

    @property
    def cur(self) -> _Tok:
        return self.toks[self.pos]

    def fail(self, what: str, expected: set[str]):
        tok = self.cur
        found = "end of input" if tok.kind == "end" else repr(tok.text)
        raise ParseError(f"{what}, found {found}", tok.offset, expected)

    def _atom_starts(self) -> set[str]:
        return {"(", "-", "<number>", "<variable>", "<function>"}

    def parse(self) -> Node:
        node = self.expr(1)
        if self.cur.kind != "end":
            self.fail("unexpected trailing input", {"<end>", *_BINDING})
        return node

    def expr(self, min_prec: int) -> Node:
        lhs = self.unary()
        while self.cur.kind == "op" and _BINDING[self.cur.text][0] >= min_prec:
            op = self.cur.text
            prec, right = _BINDING[op]
            self.pos += 1
            rhs = self.expr(prec if right else prec + 1)
            lhs = Node(SYMBOL_BINARY[op], (lhs, rhs))
        return lhs

    def unary(self) -> Node:
        tok = self.cur
        if tok.kind == "op" and tok.text == "-":
            nxt = self.toks[self.pos + 1]
            if nxt.kind == "num" and nxt.offset == tok.offset + 1 and not self._binds_after(self.pos + 2):
                # "-1.5" is one negative literal, not neg(1.5)
                self.pos += 2
                return self.constant(-float(nxt.text))
            self.pos += 1
            return Node("neg", (self.unary_operand(),))
        return self.primary()

    def _binds_after(self, idx: int) -> bool:
        tok = self.toks[idx]
        return tok.kind == "op" and tok.text == "^"

    def unary_operand(self) -> Node:
        # operand of a prefix minus: a power-level expression
        base = self.unary()
        if self.cur.kind == "op" and self.cur.text == "^":
            self.pos += 1
            return Node("pow", (base, self.expr(_BINDING["^"][0])))
        return base

    def constant(self, value: float) -> Node:
        self.consts.append(value)
        return Node(CONST, (), len(self.consts) - 1)

    def primary(self) -> Node:
        tok = self.cur
        if tok.kind == "num":
            self.pos += 1
            return self.constant(float(tok.text))
        if tok.kind == "lpar":
            self.pos += 1
            node = self.expr(1)
            if self.cur.kind != "rpar":
                self.fail("unbalanced parenthesis", {")", *_BINDING})
            self.pos += 1
            return node
        if tok.kind == "name":
            name = tok.text
            if name in self.vocab.variables:
                self.pos += 1
                return Node(name)
            if name in self.vocab.unary_ops:
                self.pos += 1
                if self.cur.kind != "lpar":
                    self.fail(f"expected '(' after {name}", {"("})
                self.pos += 1
                arg = self.expr(1)
                if self.cur.kind != "rpar":
                    self.fail("unbalanced parenthesis", {")", *_BINDING})
                self.pos += 1
                return Node(name, (arg,))
            raise ParseError(f"unknown name {name!r}", tok.offset, set(self.vocab.variables) | set(self.vocab.unary_ops))
        self.fail("expected an operand", self._atom_starts())
        raise AssertionError("unreachable")


def parse_formula(s: str, vocab: OperatorVocab) -> tuple[OperationTree, ConstVec]:
    """Parse an infix formula into a tree plus the constants in pre-order slot order."""
    p = _Parser(s, vocab)
    root = p.parse()
    # numbers were collected in reading order; renumber slots in pre-order
    values: list[float] = []

    def renumber(node: Node) -> Node:
        if node.name == CONST:
            values.append(p.consts[node.slot])
            return Node(CONST, (), len(values) - 1)
        return Node(node.name, tuple(renumber(c) for c in node.children))

    root = renumber(root)
    return OperationTree(root, vocab), ConstVec.visible(np.array(values, dtype=np.float64))


def formula_constants(s: str, vocab: OperatorVocab) -> ConstVec:
    """Constants of a formula string, in slot order."""
    return parse_formula(s, vocab)[1]
