"""Operator vocabulary: the token inventory shared by trees, OTS sequences and models."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from functools import cached_property

from .errors import ConfigError

SPECIALS = ("PAD", "BOS", "EOS", "MASK")
BINARY_OPS = ("add", "sub", "mul", "div", "pow")
UNARY_OPS = ("neg", "abs", "sin", "cos", "tanh", "exp", "log", "sqrt")
CONST = "C"

_VAR_RE = re.compile(r"^x([1-9][0-9]*)$")


@dataclass(frozen=True)
class Token:
    kind: str  # binary-op | unary-op | variable | const-placeholder | special
    name: str
    arity: int


class OperatorVocab:
    """Dense 1-based token table.

    Ids are assigned in a fixed order: specials, binary ops, unary ops,
    variables ``x1..xd``, then the single constant placeholder ``C``.
    """

    def __init__(
        self,
        var_count: int = 1,
        binary_ops: tuple[str, ...] = BINARY_OPS,
        unary_ops: tuple[str, ...] = UNARY_OPS,
    ):
        if var_count < 1:
            raise ConfigError("var_count must be >= 1")
        unknown = (set(binary_ops) - set(BINARY_OPS)) | (set(unary_ops) - set(UNARY_OPS))
        if unknown:
            raise ConfigError(f"operators without evaluation semantics: {sorted(unknown)}")
        tokens = [Token("special", s, 0) for s in SPECIALS]
        tokens += [Token("binary-op", b, 2) for b in binary_ops]
        tokens += [Token("unary-op", u, 1) for u in unary_ops]
        tokens += [Token("variable", f"x{i}", 0) for i in range(1, var_count + 1)]
        tokens.append(Token("const-placeholder", CONST, 0))
        self.var_count = var_count
        self.tokens: tuple[Token, ...] = tuple(tokens)
        self._ids = {t.name: i + 1 for i, t in enumerate(self.tokens)}

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, OperatorVocab) and self.tokens == other.tokens

    def __hash__(self) -> int:
        return hash(self.tokens)

    def __repr__(self) -> str:
        return f"OperatorVocab(size={self.size}, var_count={self.var_count})"

    def id(self, name: str) -> int:
        try:
            return self._ids[name]
        except KeyError:
            raise KeyError(f"no token named {name!r}") from None

    def token(self, token_id: int) -> Token:
        if not 1 <= token_id <= self.size:
            raise KeyError(f"token id {token_id} outside 1..{self.size}")
        return self.tokens[token_id - 1]

    def __contains__(self, name: str) -> bool:
        return name in self._ids

    @property
    def PAD(self) -> int:
        return self._ids["PAD"]

    @property
    def BOS(self) -> int:
        return self._ids["BOS"]

    @property
    def EOS(self) -> int:
        return self._ids["EOS"]

    @property
    def MASK(self) -> int:
        return self._ids["MASK"]

    @property
    def const_id(self) -> int:
        return self._ids[CONST]

    @cached_property
    def binary_ops(self) -> tuple[str, ...]:
        return tuple(t.name for t in self.tokens if t.kind == "binary-op")

    @cached_property
    def unary_ops(self) -> tuple[str, ...]:
        return tuple(t.name for t in self.tokens if t.kind == "unary-op")

    @cached_property
    def variables(self) -> tuple[str, ...]:
        return tuple(t.name for t in self.tokens if t.kind == "variable")

    def to_json(self) -> str:
        return json.dumps({t.name: i + 1 for i, t in enumerate(self.tokens)}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "OperatorVocab":
        """Rebuild a vocab from its ``name -> id`` document, checking ids are unchanged."""
        mapping: dict[str, int] = json.loads(text)
        names = [n for n, _ in sorted(mapping.items(), key=lambda kv: kv[1])]
        var_count = sum(1 for n in names if _VAR_RE.match(n))
        vocab = cls(
            var_count=var_count,
            binary_ops=tuple(n for n in names if n in BINARY_OPS),
            unary_ops=tuple(n for n in names if n in UNARY_OPS),
        )
        if {t.name: i + 1 for i, t in enumerate(vocab.tokens)} != mapping:
            raise ConfigError("vocab document does not follow the canonical id layout")
        return vocab
