"""Pre-training and fine-tuning objectives.

Every function returns a 0-dim tensor and is differentiable in its tensor inputs.
Queue negatives are sampled inside FOC/KD and carry no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import torch
import torch.nn.functional as F

from .errors import ShapeError
from .features import FeatureQueue, Temperatures
from .tree import Ots


def info_nce(
    anchor: torch.Tensor,
    positive: torch.Tensor,
    negatives: torch.Tensor,
    tau: torch.Tensor | float,
    tau_neg: torch.Tensor | float | None = None,
    include_positive: bool = True,
    in_batch: bool = False,
) -> torch.Tensor:
    """Per-row ``-log(exp(s+/tau) / (exp(s+/tau) + sum_k exp(s_k/tau_neg)))``.

    anchor, positive: [N x d]; negatives: [K x d] shared by all rows.
    Returns the [N] vector of terms. With ``include_positive=False`` the
    positive is dropped from the denominator (the literal printed form).
    ``in_batch=True`` also scores each anchor against the other rows'
    positives (with gradient), as extra negatives.
    """
    tau_neg = tau if tau_neg is None else tau_neg
    pos = (anchor * positive).sum(-1) / tau
    neg = anchor @ negatives.detach().to(anchor.dtype).T / tau_neg
    if in_batch and anchor.shape[0] > 1:
        n = anchor.shape[0]
        others = (anchor @ positive.T / tau_neg).masked_fill(torch.eye(n, dtype=torch.bool), float("-inf"))
        neg = torch.cat([neg, others], dim=1)
    if include_positive:
        denom = torch.logsumexp(torch.cat([pos[:, None], neg], dim=1), dim=1)
    else:
        denom = torch.logsumexp(neg, dim=1)
    return denom - pos


def _draw(q: FeatureQueue, n_neg: int, seed: int) -> torch.Tensor:
    return q.sample(n_neg, seed)


def loss_foc(
    gi: torch.Tensor,
    go: torch.Tensor,
    q_img: FeatureQueue,
    q_ots: FeatureQueue,
    temps: Temperatures,
    n_neg: int,
    seed: int,
    include_positive: bool = True,
    in_batch: bool = False,
) -> torch.Tensor:
    """Symmetric image/OTS InfoNCE against queue negatives, averaged over the batch."""
    if gi.shape != go.shape or gi.shape[0] < 1:
        raise ShapeError("gi and go must be equally sized, nonempty batches")
    neg_o = _draw(q_ots, n_neg, seed)
    neg_i = _draw(q_img, n_neg, seed + 1)
    t_io = info_nce(gi, go, neg_o, temps.tau, include_positive=include_positive, in_batch=in_batch)
    t_oi = info_nce(go, gi, neg_i, temps.tau, include_positive=include_positive, in_batch=in_batch)
    return (t_io + t_oi).mean()


@dataclass
class MatchBatch:
    logits: torch.Tensor  # [M x 2]
    labels: torch.Tensor  # [M] bool, True = matching pair

    def __post_init__(self):
        if self.logits.ndim != 2 or self.logits.shape[1] != 2:
            raise ShapeError("match logits must have shape [M, 2]")
        if self.labels.shape != (self.logits.shape[0],):
            raise ShapeError("one label per logit row")

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def n_neg(self) -> int:
        return int((~self.labels).sum())


def loss_fom(batch: MatchBatch) -> torch.Tensor:
    """Matching cross-entropy; positives score logit 0, negatives logit 1."""
    if batch.logits.shape[0] == 0:
        raise ShapeError("empty match batch")
    target = torch.where(batch.labels, 0, 1).long()
    return F.cross_entropy(batch.logits, target)


def _targets(targets: Sequence[Ots] | torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    if isinstance(targets, torch.Tensor):
        raise TypeError("pass Ots objects or use sequence_nll")
    ids = torch.tensor([t.ids for t in targets], dtype=torch.long)
    lens = torch.tensor([t.true_len for t in targets], dtype=torch.long)
    return ids, lens


def sequence_nll(logits: torch.Tensor, ids: torch.Tensor, lens: torch.Tensor) -> torch.Tensor:
    """Teacher-forced next-token loss on padded id tensors.

    logits: [N x (k-1) x N_v]; row k predicts ``ids[:, k+1]``. Token ids are
    1-based, so class index = id - 1. Positions at or past ``lens - 1`` are
    excluded. Summed over positions, averaged over the batch.
    """
    n, k = ids.shape
    if logits.ndim != 3 or logits.shape[0] != n or logits.shape[1] != k - 1:
        raise ShapeError(f"logits shape {tuple(logits.shape)} does not match targets [{n}, {k}]")
    nxt = ids[:, 1:] - 1
    valid = torch.arange(k - 1)[None, :] < (lens[:, None] - 1)
    if ((nxt < 0) | (nxt >= logits.shape[2]))[valid].any():
        raise ShapeError("target ids outside the logits vocabulary")
    logp = torch.log_softmax(logits, dim=-1)
    picked = logp.gather(2, nxt.clamp(0, logits.shape[2] - 1).unsqueeze(-1)).squeeze(-1)
    per_sample = -(picked * valid.to(logp.dtype)).sum(dim=1)
    return per_sample.mean()


def loss_om(logits: torch.Tensor, targets: Sequence[Ots], vocab_size: int | None = None) -> torch.Tensor:
    if vocab_size is not None and logits.shape[-1] != vocab_size:
        raise ShapeError(f"logits over {logits.shape[-1]} classes, vocab has {vocab_size}")
    ids, lens = _targets(targets)
    return sequence_nll(logits, ids, lens)


def loss_som(logits: torch.Tensor, targets: Sequence[Ots], vocab_size: int | None = None) -> torch.Tensor:
    """Same kernel as ``loss_om``; only the decoder's conditioning source differs."""
    return loss_om(logits, targets, vocab_size)


def loss_kd(
    gi: torch.Tensor,
    go: torch.Tensor,
    gs: torch.Tensor,
    q_formula: FeatureQueue,
    temps: Temperatures,
    n_neg: int,
    seed: int,
    include_positive: bool = True,
    in_batch: bool = False,
) -> torch.Tensor:
    """Pull image and OTS features toward the embedded teacher features."""
    if not (gi.shape == go.shape == gs.shape):
        raise ShapeError("gi, go and gs must have identical shapes")
    neg = _draw(q_formula, n_neg, seed)
    t_i = info_nce(gi, gs, neg, temps.tau, temps.tau_prime, include_positive, in_batch)
    t_o = info_nce(go, gs, neg, temps.tau, temps.tau_prime, include_positive, in_batch)
    return (t_i + t_o).mean()


@dataclass(frozen=True)
class LossWeights:
    foc: float = 1.0
    fom: float = 1.0
    om: float = 1.0
    kd: float = 1.0

    def __post_init__(self):
        vals = self.as_tuple()
        if any(w < 0 for w in vals) or not any(w > 0 for w in vals):
            raise ValueError("loss weights must be nonnegative with at least one positive")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.foc, self.fom, self.om, self.kd)


PARTS = ("foc", "fom", "om", "kd")


def loss_total(parts: Mapping[str, torch.Tensor], w: LossWeights) -> torch.Tensor:
    total = None
    for name, weight in zip(PARTS, w.as_tuple()):
        if weight == 0:
            continue
        term = weight * parts[name]
        total = term if total is None else total + term
    return total
