"""End-to-end inference (image -> OTS -> constants -> formula) and metric evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .errors import NoDescentError, ReconstructionError
from .formula import formula_constants, tree_to_formula
from .funcimg import FuncImage, MeshGrid
from .lbfgs import fit_constants_lbfgs
from .metrics import MetricReport, metric_suite
from .nets import AlignmentModel, image_batch
from .teacher import Teacher
from .train import generate_ots, generate_ots_batch, teacher_tensors
from .tree import ConstVec, Ots, ots_to_tree
from .vocab import OperatorVocab


@dataclass
class Inference:
    ots: Ots
    consts: ConstVec | None
    formula: str | None
    mse: float | None
    failure: str | None = None

    @property
    def ok(self) -> bool:
        return self.failure is None


def _refit(ots: Ots, img: FuncImage, grid: MeshGrid, vocab: OperatorVocab, restarts: int, seed: int) -> Inference:
    try:
        ots_to_tree(ots, None, vocab)
    except ReconstructionError as err:
        return Inference(ots, None, None, None, err.reason)
    try:
        fit = fit_constants_lbfgs(ots, img, grid, vocab, restarts=restarts, seed=seed)
    except NoDescentError:
        return Inference(ots, None, None, None, "no-descent")
    tree = ots_to_tree(ots, fit.consts, vocab)
    return Inference(ots, fit.consts, tree_to_formula(tree, fit.consts), fit.mse)


@torch.no_grad()
def infer_image(img: FuncImage, model: AlignmentModel, grid: MeshGrid, vocab: OperatorVocab | None = None,
                mode: str = "greedy", beam: int = 1, restarts: int = 4, seed: int = 0) -> Inference:
    vocab = vocab or OperatorVocab(model.cfg.dims)
    model.eval()
    vals, mask = image_batch([img])
    hi = model.encode_image(vals, mask)[0]
    ots = generate_ots(hi, model, mode, beam, vocab=vocab)
    return _refit(ots, img, grid, vocab, restarts, seed)


@torch.no_grad()
def evaluate_funcimg_ots(model: AlignmentModel, triples: Sequence, grid: MeshGrid, vocab: OperatorVocab | None = None,
                         restarts: int = 4, seed: int = 0, batch_size: int = 64) -> tuple[MetricReport, list[Inference]]:
    """Greedy decode from each image, refit constants with L-BFGS, score against the stored triple."""
    vocab = vocab or OperatorVocab(model.cfg.dims)
    model.eval()
    preds: list[Ots] = []
    for lo in range(0, len(triples), batch_size):
        chunk = triples[lo : lo + batch_size]
        vals, mask = image_batch([t.image for t in chunk])
        preds += generate_ots_batch(model, model.encode_image(vals, mask), vocab=vocab)
    inf = [_refit(p, t.image, grid, vocab, restarts, seed) for p, t in zip(preds, triples)]
    report = metric_suite(preds, [t.ots for t in triples], [i.consts for i in inf], [t.consts for t in triples], vocab)
    return report, inf


@torch.no_grad()
def evaluate_formula_ots(model: AlignmentModel, triples: Sequence, teacher: Teacher, vocab: OperatorVocab | None = None,
                         batch_size: int = 64) -> tuple[MetricReport, list[Ots]]:
    """Decode from teacher features of each formula; constants are the formula's own literals."""
    vocab = vocab or OperatorVocab(model.cfg.dims)
    model.eval()
    preds: list[Ots] = []
    for lo in range(0, len(triples), batch_size):
        chunk = triples[lo : lo + batch_size]
        th, rows = teacher_tensors(teacher, [t.formula for t in chunk])
        preds += generate_ots_batch(model, model.embed_teacher(th), rows, "formula", vocab)
    consts = [formula_constants(t.formula, vocab) for t in triples]
    report = metric_suite(preds, [t.ots for t in triples], consts, [t.consts for t in triples], vocab)
    return report, preds


def exact_match_rate(preds: Sequence[Ots], targets: Sequence[Ots]) -> float:
    return sum(p.unpadded == t.unpadded for p, t in zip(preds, targets)) / len(targets)
