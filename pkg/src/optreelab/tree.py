"""Operation trees, their OTS serialization, constant vectors, evaluation and constant gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, LengthError, MaskedConstError, ReconstructionError
from .vocab import CONST, OperatorVocab

DEFAULT_MAX_OTS_LEN = 24
CONST_RANGE = (-2.0, 2.0)


@dataclass(frozen=True)
class Node:
    name: str
    children: tuple["Node", ...] = ()
    slot: int | None = None

    def __repr__(self) -> str:
        if self.name == CONST:
            return f"C{self.slot}"
        if not self.children:
            return self.name
        return f"{self.name}({', '.join(map(repr, self.children))})"


class FlatNode(NamedTuple):
    name: str
    children: tuple[int, ...]
    slot: int | None


@dataclass(frozen=True)
class OperationTree:
    root: Node
    vocab: OperatorVocab = field(compare=False, repr=False)

    def __post_init__(self):
        next_slot = 0
        for node in self.preorder():
            if node.name not in self.vocab:
                raise ValueError(f"node {node.name!r} is not in the vocab")
            tok = self.vocab.token(self.vocab.id(node.name))
            if tok.kind == "special":
                raise ValueError(f"special token {node.name!r} cannot be a tree node")
            if len(node.children) != tok.arity:
                raise ValueError(f"{node.name} expects {tok.arity} children, got {len(node.children)}")
            if node.name == CONST:
                if node.slot != next_slot:
                    raise ValueError("constant slots must be numbered 0..n-1 in pre-order")
                next_slot += 1
            elif node.slot is not None:
                raise ValueError("only constant placeholders carry a slot")

    def preorder(self):
        stack = [self.root]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))

    @cached_property
    def flat(self) -> tuple[FlatNode, ...]:
        """Pre-order node table; children always have larger indices than parents."""
        out: list[FlatNode] = []

        def visit(node: Node) -> int:
            idx = len(out)
            out.append(None)  # type: ignore[arg-type]
            kids = tuple(visit(c) for c in node.children)
            out[idx] = FlatNode(node.name, kids, node.slot)
            return idx

        visit(self.root)
        return tuple(out)

    @property
    def n_nodes(self) -> int:
        return len(self.flat)

    @property
    def n_const(self) -> int:
        return sum(1 for n in self.flat if n.name == CONST)

    @property
    def var_dims_used(self) -> frozenset[int]:
        return frozenset(int(n.name[1:]) for n in self.flat if n.name in self.vocab.variables)

    def __repr__(self) -> str:
        return f"OperationTree({self.root!r})"


def build_tree(spec, vocab: OperatorVocab) -> OperationTree:
    """Build a tree from nested tuples such as ``("add", "x1", "C")``.

    Constant slots are numbered automatically in pre-order.
    """
    counter = iter(range(10**9))

    def make(s) -> Node:
        if isinstance(s, str):
            return Node(s, (), next(counter) if s == CONST else None)
        name, *kids = s
        return Node(name, tuple(make(k) for k in kids))

    return OperationTree(make(spec), vocab)


@dataclass(frozen=True, eq=False)
class Ots:
    """Framed, padded OTS token ids. ``true_len`` counts BOS through EOS."""

    ids: tuple[int, ...]
    true_len: int

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        if not 0 <= self.true_len <= len(self.ids):
            raise ValueError("true_len outside the sequence")

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Ots) and self.ids == other.ids and self.true_len == other.true_len

    def __hash__(self) -> int:
        return hash((self.ids, self.true_len))

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def unpadded(self) -> tuple[int, ...]:
        return self.ids[: self.true_len]

    @classmethod
    def from_sequence(cls, ids: Sequence[int], vocab: OperatorVocab, max_len: int | None = None) -> "Ots":
        """Wrap an arbitrary (e.g. model generated) id sequence.

        ``true_len`` runs through the first EOS, or over the leading non-PAD run
        when no EOS is present.
        """
        ids = [int(i) for i in ids]
        if vocab.EOS in ids:
            true_len = ids.index(vocab.EOS) + 1
        else:
            true_len = next((k for k, i in enumerate(ids) if i == vocab.PAD), len(ids))
        if max_len is not None:
            if len(ids) > max_len:
                raise LengthError(f"sequence of length {len(ids)} exceeds {max_len}")
            ids = ids + [vocab.PAD] * (max_len - len(ids))
        return cls(tuple(ids), true_len)


@dataclass(frozen=True, eq=False)
class ConstVec:
    """Constant values bound to placeholder slots; ``mask`` is True where visible."""

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        mask = np.array(self.mask, dtype=bool).reshape(-1)
        if values.shape != mask.shape:
            raise ValueError("values and mask lengths differ")
        if not np.all(np.isfinite(values)):
            raise ValueError("constant values must be finite")
        values = np.where(mask, values, 0.0)
        values.flags.writeable = False
        mask.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def visible(cls, values: Sequence[float]) -> "ConstVec":
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        return cls(values, np.ones(values.shape, dtype=bool))

    @classmethod
    def empty(cls) -> "ConstVec":
        return cls.visible([])

    @property
    def true_len(self) -> int:
        return int(self.values.shape[0])

    @property
    def fully_visible(self) -> bool:
        return bool(self.mask.all())

    def masked(self) -> "ConstVec":
        """The all-hidden counterpart used by structure-only tasks."""
        return ConstVec(np.zeros_like(self.values), np.zeros_like(self.mask))

    def padded(self, length: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(values, visible, present) arrays padded to ``length``."""
        if self.true_len > length:
            raise LengthError(f"{self.true_len} constants exceed capacity {length}")
        vals = np.zeros(length)
        vis = np.zeros(length, dtype=bool)
        present = np.zeros(length, dtype=bool)
        vals[: self.true_len] = self.values
        vis[: self.true_len] = self.mask
        present[: self.true_len] = True
        return vals, vis, present

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, ConstVec)
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.mask, other.mask)
        )

    def __hash__(self) -> int:
        return hash((self.values.tobytes(), self.mask.tobytes()))

    def __repr__(self) -> str:
        vals = ["?" if not m else repr(float(v)) for v, m in zip(self.values, self.mask)]
        return f"ConstVec([{', '.join(vals)}])"


@dataclass(frozen=True)
class GenConfig:
    node_range: tuple[int, int] = (5, 15)
    var_count: int = 1
    p_const_leaf: float = 0.3
    op_weights: dict[str, float] | None = None
    seed: int = 0
    max_consts: int | None = None
    max_ots_len: int = DEFAULT_MAX_OTS_LEN
    binary_ops: tuple[str, ...] | None = None
    unary_ops: tuple[str, ...] | None = None

    @cached_property
    def vocab(self) -> OperatorVocab:
        kwargs = {}
        if self.binary_ops is not None:
            kwargs["binary_ops"] = tuple(self.binary_ops)
        if self.unary_ops is not None:
            kwargs["unary_ops"] = tuple(self.unary_ops)
        return OperatorVocab(self.var_count, **kwargs)

    def weight(self, op: str) -> float:
        if self.op_weights is None:
            return 1.0
        return float(self.op_weights.get(op, 0.0))

    def validate(self) -> None:
        lo, hi = self.node_range
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad node_range {self.node_range}")
        if hi + 2 > self.max_ots_len:
            raise ConfigError(f"node_range max {hi} does not fit an OTS of length {self.max_ots_len}")
        if not 0.0 <= self.p_const_leaf <= 1.0:
            raise ConfigError("p_const_leaf must lie in [0, 1]")
        if self.op_weights is not None and any(w < 0 for w in self.op_weights.values()):
            raise ConfigError("operator weights must be nonnegative")
        if self.p_const_leaf >= 1.0:
            raise ConfigError("p_const_leaf = 1 can never produce a variable leaf")


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(int(seed) % 2**64)


class _Shapes:
    """Which tree sizes are reachable with the enabled operators."""

    def __init__(self, cfg: GenConfig):
        vocab = cfg.vocab
        self.unary = [u for u in vocab.unary_ops if cfg.weight(u) > 0]
        self.binary = [b for b in vocab.binary_ops if cfg.weight(b) > 0 and b != "pow"]
        # pow only ever gets a constant exponent during generation
        self.pow = "pow" in vocab.binary_ops and cfg.weight("pow") > 0 and cfg.p_const_leaf > 0
        self.cfg = cfg
        hi = cfg.node_range[1]
        ok = [False] * (hi + 1)
        if hi >= 1:
            ok[1] = True
        for n in range(2, hi + 1):
            ok[n] = bool(self.unary) and ok[n - 1]
            if not ok[n] and self.binary:
                ok[n] = any(ok[a] and ok[n - 1 - a] for a in range(1, n - 1))
            if not ok[n] and self.pow and n >= 3:
                ok[n] = ok[n - 2]
        self.ok = ok

    def options(self, n: int) -> list[tuple[str, float]]:
        opts: list[tuple[str, float]] = []
        if n >= 2 and self.ok[n - 1]:
            opts += [(u, self.cfg.weight(u)) for u in self.unary]
        if n >= 3 and any(self.ok[a] and self.ok[n - 1 - a] for a in range(1, n - 1)):
            opts += [(b, self.cfg.weight(b)) for b in self.binary]
        if self.pow and n >= 3 and self.ok[n - 2]:
            opts.append(("pow", self.cfg.weight("pow")))
        return opts


def sample_tree(cfg: GenConfig, seed: int | None = None) -> OperationTree:
    """Draw a random tree with a node count uniform over the feasible part of ``cfg.node_range``."""
    cfg.validate()
    shapes = _Shapes(cfg)
    sizes = [n for n in range(cfg.node_range[0], cfg.node_range[1] + 1) if shapes.ok[n]]
    if not sizes:
        raise ConfigError(f"no tree size in {cfg.node_range} is reachable with the enabled operators")
    rng = _rng(cfg.seed if seed is None else seed)
    vocab = cfg.vocab
    n = int(sizes[rng.integers(len(sizes))])

    def grow(size: int) -> tuple:
        if size == 1:
            if rng.random() < cfg.p_const_leaf:
                return CONST
            return vocab.variables[rng.integers(len(vocab.variables))]
        opts = shapes.options(size)
        weights = np.array([w for _, w in opts])
        op = opts[rng.choice(len(opts), p=weights / weights.sum())][0]
        if op in shapes.unary:
            return (op, grow(size - 1))
        if op == "pow":
            return (op, grow(size - 2), CONST)
        splits = [a for a in range(1, size - 1) if shapes.ok[a] and shapes.ok[size - 1 - a]]
        a = splits[rng.integers(len(splits))]
        return (op, grow(a), grow(size - 1 - a))

    for _ in range(10_000):
        tree = build_tree(grow(n), vocab)
        if not tree.var_dims_used:
            continue
        if cfg.max_consts is not None and tree.n_const > cfg.max_consts:
            continue
        return tree
    raise ConfigError(f"could not draw a valid {n}-node tree; check p_const_leaf / max_consts")


def sample_constants(tree: OperationTree, seed: int, low: float = CONST_RANGE[0], high: float = CONST_RANGE[1]) -> ConstVec:
    rng = _rng(seed)
    return ConstVec.visible(rng.uniform(low, high, size=tree.n_const))


def tree_to_ots(tree: OperationTree, max_len: int = DEFAULT_MAX_OTS_LEN) -> Ots:
    """Pre-order serialization framed as BOS ... EOS and padded with PAD.

    Refuses (rather than clips) trees that do not fit.
    """
    vocab = tree.vocab
    body = [vocab.id(n.name) for n in tree.flat]
    if len(body) + 2 > max_len:
        raise LengthError(f"tree with {len(body)} nodes needs {len(body) + 2} > {max_len} positions")
    ids = [vocab.BOS, *body, vocab.EOS]
    true_len = len(ids)
    ids += [vocab.PAD] * (max_len - true_len)
    return Ots(tuple(ids), true_len)


def ots_to_tree(
    ots: Ots | Sequence[int], consts: ConstVec | None, vocab: OperatorVocab
) -> OperationTree:
    """Rebuild a tree from an arbitrary token sequence.

    Any failure raises ``ReconstructionError``; ``consts=None`` skips the slot
    count check (skeleton-only reconstruction).
    """
    ids = list(ots.ids if isinstance(ots, Ots) else ots)
    if not ids or ids[0] != vocab.BOS:
        raise ReconstructionError("unknown-token", "sequence does not start with BOS")
    body: list[int] = []
    eos_at = None
    for pos in range(1, len(ids)):
        tid = ids[pos]
        if tid == vocab.EOS:
            eos_at = pos
            break
        if not 1 <= tid <= vocab.size or vocab.token(tid).kind == "special":
            raise ReconstructionError("unknown-token", f"id {tid} at position {pos}")
        body.append(tid)
    if eos_at is None:
        raise ReconstructionError("missing-EOS")
    if any(t != vocab.PAD for t in ids[eos_at + 1 :]):
        raise ReconstructionError("trailing-tokens", "non-PAD tokens after EOS")

    pos = 0
    slot = 0

    def read() -> Node:
        nonlocal pos, slot
        if pos >= len(body):
            raise ReconstructionError("dangling-children", "sequence ended inside an operator")
        tok = vocab.token(body[pos])
        pos += 1
        if tok.name == CONST:
            slot += 1
            return Node(CONST, (), slot - 1)
        return Node(tok.name, tuple(read() for _ in range(tok.arity)))

    if not body:
        raise ReconstructionError("dangling-children", "empty body")
    root = read()
    if pos != len(body):
        raise ReconstructionError("trailing-tokens", f"{len(body) - pos} tokens after the root closed")
    if consts is not None and consts.true_len < slot:
        raise ReconstructionError("const-underflow", f"tree has {slot} slots, {consts.true_len} constants given")
    return OperationTree(root, vocab)


# ---------------------------------------------------------------------------
# evaluation

def _finite(v: np.ndarray) -> np.ndarray:
    return np.where(np.isfinite(v), v, np.nan)


UNARY_FN = {
    "neg": np.negative,
    "abs": np.abs,
    "sin": np.sin,
    "cos": np.cos,
    "tanh": np.tanh,
    "exp": np.exp,
    "log": lambda a: np.log(np.where(a > 0, a, np.nan)),
    "sqrt": lambda a: np.sqrt(np.where(a >= 0, a, np.nan)),
}

BINARY_FN = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
    "pow": np.power,
}

# d(op)/d(arg) given (arg values, op value)
UNARY_DERIV = {
    "neg": lambda a, v: -np.ones_like(a),
    "abs": lambda a, v: np.sign(a),
    "sin": lambda a, v: np.cos(a),
    "cos": lambda a, v: -np.sin(a),
    "tanh": lambda a, v: 1.0 - v * v,
    "exp": lambda a, v: v,
    "log": lambda a, v: 1.0 / a,
    "sqrt": lambda a, v: 0.5 / v,
}


def _binary_deriv(name: str, a: np.ndarray, b: np.ndarray, v: np.ndarray):
    if name == "add":
        return np.ones_like(a), np.ones_like(b)
    if name == "sub":
        return np.ones_like(a), -np.ones_like(b)
    if name == "mul":
        return b, a
    if name == "div":
        return 1.0 / b, -a / (b * b)
    # pow
    da = b * np.power(a, b - 1.0)
    db = v * np.log(np.where(a > 0, a, np.nan))
    # a**b with a == 0 has zero derivative w.r.t. b when b > 0
    db = np.where((a == 0) & (b > 0), 0.0, db)
    return da, db


def _check_consts(tree: OperationTree, consts: ConstVec) -> None:
    if consts.true_len < tree.n_const:
        raise ValueError(f"tree has {tree.n_const} constant slots, got {consts.true_len} values")
    if not consts.mask[: tree.n_const].all():
        raise MaskedConstError("cannot evaluate a tree with masked constants")


def _forward(tree: OperationTree, consts: ConstVec, points: np.ndarray) -> list[np.ndarray]:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    m = points.shape[0]
    flat = tree.flat
    vals: list[np.ndarray] = [None] * len(flat)  # type: ignore[list-item]
    with np.errstate(all="ignore"):
        for i in range(len(flat) - 1, -1, -1):
            node = flat[i]
            if node.name == CONST:
                v = np.full(m, consts.values[node.slot])
            elif not node.children:
                dim = int(node.name[1:]) - 1
                if dim >= points.shape[1]:
                    raise ValueError(f"points have {points.shape[1]} columns, tree uses {node.name}")
                v = points[:, dim].copy()
            elif len(node.children) == 1:
                v = UNARY_FN[node.name](vals[node.children[0]])
            else:
                v = BINARY_FN[node.name](vals[node.children[0]], vals[node.children[1]])
            vals[i] = _finite(v)
    return vals


def eval_tree(tree: OperationTree, consts: ConstVec, points: np.ndarray) -> np.ndarray:
    """Evaluate on rows of ``points`` ([m x d]). Every non-finite intermediate becomes NaN."""
    _check_consts(tree, consts)
    return _forward(tree, consts, points)[0]


class ConstGradient(NamedTuple):
    values: np.ndarray  # [m]
    jacobian: np.ndarray  # [m x n_const]
    valid: np.ndarray  # [m] rows with finite value and finite gradient


def grad_consts(tree: OperationTree, consts: ConstVec, points: np.ndarray) -> ConstGradient:
    """Jacobian of the tree output w.r.t. each constant slot, by a reverse sweep over the node table."""
    _check_consts(tree, consts)
    vals = _forward(tree, consts, points)
    flat = tree.flat
    m = vals[0].shape[0]
    adj: list[np.ndarray | None] = [None] * len(flat)
    adj[0] = np.ones(m)
    jac = np.zeros((m, tree.n_const))
    with np.errstate(all="ignore"):
        for i, node in enumerate(flat):
            g = adj[i]
            if g is None:
                continue
            if node.name == CONST:
                jac[:, node.slot] += g
            elif len(node.children) == 1:
                (c,) = node.children
                contrib = g * UNARY_DERIV[node.name](vals[c], vals[i])
                adj[c] = contrib if adj[c] is None else adj[c] + contrib
            elif len(node.children) == 2:
                a, b = node.children
                da, db = _binary_deriv(node.name, vals[a], vals[b], vals[i])
                for c, d in ((a, da), (b, db)):
                    contrib = g * d
                    adj[c] = contrib if adj[c] is None else adj[c] + contrib
    values = vals[0]
    valid = np.isfinite(values) & np.all(np.isfinite(jac), axis=1)
    jac = np.where(valid[:, None], jac, np.nan)
    return ConstGradient(values, jac, valid)
