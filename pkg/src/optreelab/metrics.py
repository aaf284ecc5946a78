"""Generation-quality metrics: sequence regularity and relative Levenshtein similarities."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .errors import LengthMismatchError, ReconstructionError
from .formula import tree_to_formula
from .tree import ConstVec, Ots, ots_to_tree
from .vocab import OperatorVocab


def levenshtein(a: Sequence, b: Sequence) -> int:
    """Unit-cost insert/delete/substitute distance between two sequences (or strings)."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


@dataclass
class SampleRow:
    reconstructs: bool
    token_distance: int
    target_len: int
    formula_distance: int | None
    target_formula_len: int
    failure: str | None = None


@dataclass
class MetricReport:
    acc_r: float
    s_rl: float
    s_rl_tilde: float
    n_samples: int
    rows: list[SampleRow] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"acc_r": self.acc_r, "s_rl": self.s_rl, "s_rl_tilde": self.s_rl_tilde, "n_samples": self.n_samples}


def _unpadded(o: Ots | Sequence[int], vocab: OperatorVocab) -> tuple[int, ...]:
    if isinstance(o, Ots):
        return o.unpadded
    return Ots.from_sequence(o, vocab).unpadded


def metric_suite(
    pred: Sequence[Ots | Sequence[int]],
    target: Sequence[Ots],
    pred_consts: Sequence[ConstVec | None],
    target_consts: Sequence[ConstVec],
    vocab: OperatorVocab,
) -> MetricReport:
    """Regularity rate, token-level relative Levenshtein similarity, and the
    reconstruction-gated character-level similarity of the emitted formulas.

    Token similarities are taken literally and can be negative.
    """
    n = len(pred)
    if not (n == len(target) == len(pred_consts) == len(target_consts)):
        raise LengthMismatchError("pred, target and constant lists differ in length")
    if n == 0:
        raise LengthMismatchError("empty evaluation set")
    rows: list[SampleRow] = []
    acc = s = st = 0.0
    for p, t, pc, tc in zip(pred, target, pred_consts, target_consts):
        p_seq = _unpadded(p, vocab)
        t_seq = t.unpadded
        d_tok = levenshtein(p_seq, t_seq)
        t_tree = ots_to_tree(t, tc, vocab)
        t_str = tree_to_formula(t_tree, tc)
        failure = None
        try:
            if pc is None:
                raise ReconstructionError("const-underflow", "no constants supplied")
            p_tree = ots_to_tree(p if isinstance(p, Ots) else list(p), pc, vocab)
            p_str = tree_to_formula(p_tree, pc)
            ok = True
        except ReconstructionError as err:
            ok, p_str, failure = False, None, err.reason
        d_str = levenshtein(p_str, t_str) if ok else None
        rows.append(SampleRow(ok, d_tok, len(t_seq), d_str, len(t_str), failure))
        acc += ok
        s += (len(t_seq) - d_tok) / len(t_seq)
        if ok:
            st += (len(t_str) - d_str) / len(t_str)
    return MetricReport(acc / n, s / n, st / n, n, rows)
