"""Frozen formula-string feature extractors.

``HashTeacher`` is a deterministic, string-sensitive stand-in for a frozen
language model; ``ImportedTeacher`` serves hidden states computed elsewhere
from an export directory (``index.jsonl`` + ``hidden.f32``).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol

import numpy as np

from .errors import MissingKeyError, ShapeError, TokenizeError

_SYMBOLS = (
    ["neg", "abs", "sin", "cos", "tanh", "exp", "log", "sqrt"]
    + [f"x{i}" for i in range(1, 10)]
    + list("0123456789")
    + [".", "e", "E", "+", "-", "*", "/", "^", "(", ")", " ", ","]
)
SYMBOL_TABLE: tuple[str, ...] = tuple(sorted(set(_SYMBOLS), key=lambda s: (-len(s), s)))
TOKEN_ID = {s: i for i, s in enumerate(sorted(set(_SYMBOLS)))}
ID_TOKEN = {i: s for s, i in TOKEN_ID.items()}


def formula_tokenize(s: str) -> list[int]:
    """Greedy longest-match tokenization over a fixed symbol table."""
    if not s:
        raise TokenizeError("cannot tokenize an empty string")
    out: list[int] = []
    i = 0
    while i < len(s):
        for sym in SYMBOL_TABLE:
            if s.startswith(sym, i):
                out.append(TOKEN_ID[sym])
                i += len(sym)
                break
        else:
            raise TokenizeError(f"character {s[i]!r} at offset {i} is not in the symbol table")
    return out


def formula_detokenize(ids: Iterable[int]) -> str:
    return "".join(ID_TOKEN[i] for i in ids)


@dataclass(frozen=True, eq=False)
class TeacherHidden:
    values: np.ndarray  # float32 [N_m x D]
    teacher_id: str

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 2 or v.shape[0] < 1:
            raise ShapeError("teacher hidden states must be a nonempty matrix")
        if not np.all(np.isfinite(v)):
            raise ValueError("teacher hidden states must be finite")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def token_count(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


class Teacher(Protocol):
    teacher_id: str
    width: int

    def __call__(self, s: str) -> TeacherHidden: ...


def _digest(*parts: int) -> int:
    h = hashlib.blake2b(np.asarray(parts, dtype=np.int64).tobytes(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


class HashTeacher:
    """Per-token rows looked up by a seeded hash of (previous, current, next) token
    in a fixed Gaussian table, then mixed across positions by a fixed orthogonal
    matrix so that every row sees the whole string."""

    def __init__(self, width: int = 64, seed: int = 0, table_size: int = 4096):
        self.width = width
        self.seed = seed
        self.table_size = table_size
        self.teacher_id = f"hash-trigram/w{width}/s{seed}"
        rng = np.random.default_rng(_digest(seed, width, table_size))
        self._table = rng.standard_normal((table_size, width)) / np.sqrt(width)
        self._mixers: dict[int, np.ndarray] = {}

    def _mixer(self, n: int) -> np.ndarray:
        if n not in self._mixers:
            rng = np.random.default_rng(_digest(self.seed, n, 7919))
            q, r = np.linalg.qr(rng.standard_normal((n, n)))
            self._mixers[n] = q * np.sign(np.diag(r))
        return self._mixers[n]

    def __call__(self, s: str) -> TeacherHidden:
        ids = formula_tokenize(s)
        padded = [-1, *ids, -1]
        rows = [
            self._table[_digest(self.seed, padded[k - 1], padded[k], padded[k + 1]) % self.table_size]
            for k in range(1, len(padded) - 1)
        ]
        emb = np.stack(rows)
        return TeacherHidden((self._mixer(len(ids)) @ emb).astype(np.float32), self.teacher_id)


def teacher_extract_hash(s: str, width: int = 64, seed: int = 0) -> TeacherHidden:
    return HashTeacher(width, seed)(s)


class ConstantTeacher:
    """Negative-control stub: the same output for every string."""

    def __init__(self, width: int = 64, n_tokens: int = 4, seed: int = 0):
        self.width = width
        self.teacher_id = f"constant/w{width}"
        rng = np.random.default_rng(seed)
        self._value = (rng.standard_normal((n_tokens, width)) / np.sqrt(width)).astype(np.float32)

    def __call__(self, s: str) -> TeacherHidden:
        return TeacherHidden(self._value, self.teacher_id)


class CachedTeacher:
    """Memoizes a teacher; safe because teachers are pure functions of the string."""

    def __init__(self, inner: Teacher):
        self.inner = inner
        self.width = inner.width
        self.teacher_id = inner.teacher_id
        self._cache: dict[str, TeacherHidden] = {}

    def __call__(self, s: str) -> TeacherHidden:
        hit = self._cache.get(s)
        if hit is None:
            hit = self._cache[s] = self.inner(s)
        return hit


# ---------------------------------------------------------------------------
# export / import


def teacher_export(teacher: Teacher, formulas: Iterable[str], path: str | Path) -> int:
    """Write hidden states for each distinct formula. Returns the number of keys written."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    seen: set[str] = set()
    offset = 0
    with open(path / "hidden.f32", "wb") as blob, open(path / "index.jsonl", "w") as index:
        for s in formulas:
            if s in seen:
                continue
            seen.add(s)
            th = teacher(s)
            data = np.ascontiguousarray(th.values, dtype="<f4").tobytes()
            blob.write(data)
            index.write(json.dumps({"key": s, "rows": th.token_count, "offset": offset,
                                    "width": th.width, "teacher_id": th.teacher_id}) + "\n")
            offset += len(data)
    return len(seen)


class ImportedTeacher:
    def __init__(self, path: str | Path, width: int | None = None):
        self.path = Path(path)
        self._index: dict[str, dict] = {}
        with open(self.path / "index.jsonl") as fh:
            for line in fh:
                if line.strip():
                    entry = json.loads(line)
                    self._index[entry["key"]] = entry
        self._blob = np.memmap(self.path / "hidden.f32", dtype="<f4", mode="r") if self._index else None
        widths = {e["width"] for e in self._index.values()}
        if len(widths) > 1:
            raise ShapeError(f"export mixes teacher widths {sorted(widths)}")
        found = widths.pop() if widths else width
        if width is not None and found != width:
            raise ShapeError(f"exported width {found} != configured {width}")
        self.width = found
        ids = {e.get("teacher_id", "imported") for e in self._index.values()}
        self.teacher_id = ids.pop() if len(ids) == 1 else "imported"

    def keys(self) -> list[str]:
        return list(self._index)

    def __contains__(self, s: str) -> bool:
        return s in self._index

    def __call__(self, s: str) -> TeacherHidden:
        try:
            e = self._index[s]
        except KeyError:
            raise MissingKeyError(s) from None
        start = e["offset"] // 4
        vals = np.array(self._blob[start : start + e["rows"] * e["width"]]).reshape(e["rows"], e["width"])
        return TeacherHidden(vals, self.teacher_id)


def teacher_import(path: str | Path, s: str, width: int | None = None) -> TeacherHidden:
    return ImportedTeacher(path, width)(s)
