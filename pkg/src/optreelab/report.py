"""Cross-modal cosine-similarity matrices and their summaries."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .features import pool_first_token
from .nets import AlignmentModel
from .teacher import Teacher
from .train import make_batch, teacher_tensors

PAIRS = (("image", "ots"), ("image", "formula"), ("ots", "formula"))


@torch.no_grad()
def pooled_features(model: AlignmentModel, triples: Sequence, teacher: Teacher, pooling: str = "first") -> dict[str, torch.Tensor]:
    """Unit-norm global features per modality, one row per triple (eval mode)."""
    was_training = model.training
    model.eval()
    b = make_batch(triples, model.cfg.max_consts)
    th, rows = teacher_tensors(teacher, b.formulas)
    out = {
        "image": pool_first_token(model.encode_image(b.values, b.mask), pooling),
        "ots": pool_first_token(model.encode_ots(b.ids, b.cvals, b.cvis, b.cpres), pooling),
        "formula": pool_first_token(model.embed_teacher(th), pooling, rows),
    }
    model.train(was_training)
    return out


@dataclass
class SimSummary:
    name: str
    mean_diag: float
    mean_offdiag: float
    top1: float  # row-wise retrieval accuracy

    @property
    def gap(self) -> float:
        return self.mean_diag - self.mean_offdiag


def summarize(name: str, sim: np.ndarray) -> SimSummary:
    n = sim.shape[0]
    diag = float(np.mean(np.diag(sim)))
    off = float((sim.sum() - np.trace(sim)) / (n * n - n)) if n > 1 else 0.0
    top1 = float(np.mean(np.argmax(sim, axis=1) == np.arange(n)))
    return SimSummary(name, diag, off, top1)


def similarity_matrices(model: AlignmentModel, triples: Sequence, teacher: Teacher,
                        pooling: str = "first") -> dict[str, np.ndarray]:
    f = pooled_features(model, triples, teacher, pooling)
    return {f"{a}_{b}": (f[a] @ f[b].T).double().numpy() for a, b in PAIRS}


def similarity_report(triples: Sequence, model: AlignmentModel, teacher: Teacher, out_dir: str | Path,
                      pooling: str = "first") -> dict[str, SimSummary]:
    """Write ``<a>_<b>.csv`` for each modality pair plus ``summary.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mats = similarity_matrices(model, triples, teacher, pooling)
    summaries = {}
    for name, m in mats.items():
        np.savetxt(out / f"{name}.csv", m, delimiter=",", fmt="%.9g")
        summaries[name] = summarize(name, m)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["matrix", "n", "mean_diag", "mean_offdiag", "gap", "top1"])
        for s in summaries.values():
            w.writerow([s.name, len(triples), f"{s.mean_diag:.9g}", f"{s.mean_offdiag:.9g}", f"{s.gap:.9g}", f"{s.top1:.9g}"])
    return summaries
