"""Pre-training, the two fine-tuning tasks, the learning-rate schedule, decoding,
and an in-process simulation of the gather/broadcast teacher topology.

Every random choice inside a step (batch order, derangement, queue negatives)
is keyed on ``(cfg.seed, step)``, so a run resumed from a checkpoint replays
exactly what an uninterrupted run would have done.
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .errors import ConfigError, NonFiniteLossError, TopologyError
from .features import MODALITIES, FeatureQueue, pool_first_token
from .formula import formula_constants
from .losses import PARTS, LossWeights, MatchBatch, loss_fom, loss_foc, loss_kd, loss_total, sequence_nll
from .nets import AlignmentModel, const_batch, image_batch, ots_batch, teacher_batch
from .seeding import derive_seed
from .teacher import Teacher
from .tree import ConstVec, Ots
from .vocab import OperatorVocab

# stream tags for derive_seed
_S_EPOCH, _S_FOC, _S_KD, _S_DERANGE, _S_QUEUE = 11, 21, 22, 23, 31


@dataclass(frozen=True)
class TrainConfig:
    w_foc: float = 1.0
    w_fom: float = 1.0
    w_om: float = 1.0
    w_kd: float = 1.0
    batch_size: int = 16
    steps: int = 2000
    steps_per_epoch: int = 0  # 0: derived from the dataset size
    warmup_frac: float = 0.05
    warmup_steps: int | None = None
    lr_start: float = 1e-6
    lr_max: float = 1e-4
    lr_decay: float = 0.9
    decay_every: int = 5  # epochs
    queue_capacity: int = 64
    n_neg: int = 16
    include_positive: bool = True
    in_batch_negatives: bool = False
    pooling: str = "first"
    tau_lr_scale: float = 1.0  # the temperature's rate relative to the schedule
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    train_encoder: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.steps < 0 or self.steps_per_epoch < 0:
            raise ConfigError("batch_size must be positive and step counts nonnegative")
        if not 0 < self.lr_start <= self.lr_max:
            raise ConfigError("need 0 < lr_start <= lr_max")
        if not 0 < self.lr_decay <= 1 or self.decay_every < 1:
            raise ConfigError("lr_decay must be in (0, 1] and decay_every positive")
        if not 0 <= self.warmup_frac <= 1:
            raise ConfigError("warmup_frac must be in [0, 1]")
        if self.n_neg < 1 or self.n_neg > self.queue_capacity:
            raise ConfigError("need 1 <= n_neg <= queue_capacity")
        if self.tau_lr_scale < 0:
            raise ConfigError("tau_lr_scale must be nonnegative")
        if self.pooling not in ("first", "mean"):
            raise ConfigError(f"unknown pooling {self.pooling!r}")
        LossWeights(*self.weights.as_tuple())

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.w_foc, self.w_fom, self.w_om, self.w_kd)

    @property
    def warmup(self) -> int:
        if self.warmup_steps is not None:
            return self.warmup_steps
        return max(1, round(self.warmup_frac * self.steps))

    def for_dataset(self, n: int) -> "TrainConfig":
        """Fill in ``steps_per_epoch`` from a dataset size when it was left at 0."""
        if self.steps_per_epoch:
            return self
        return replace(self, steps_per_epoch=max(1, math.ceil(n / self.batch_size)))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown TrainConfig fields: {sorted(extra)}")
        return cls(**d)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from ``lr_start`` to ``lr_max``, then a step decay by
    ``lr_decay`` every ``decay_every`` epochs counted from the end of warmup."""
    if step < 0:
        raise ValueError("step must be nonnegative")
    w = cfg.warmup
    if step < w:
        return cfg.lr_start + (cfg.lr_max - cfg.lr_start) * step / w
    if cfg.steps_per_epoch < 1:
        raise ConfigError("steps_per_epoch is unset; call cfg.for_dataset(n) first")
    epoch = (step - w) // cfg.steps_per_epoch
    return cfg.lr_max * cfg.lr_decay ** (epoch // cfg.decay_every)


# ---------------------------------------------------------------------------
# data


@dataclass
class Batch:
    values: torch.Tensor
    mask: torch.Tensor
    ids: torch.Tensor
    lens: torch.Tensor
    cvals: torch.Tensor
    cvis: torch.Tensor
    cpres: torch.Tensor
    ots: list[Ots]
    formulas: list[str]

    def __len__(self) -> int:
        return len(self.ots)

    def take(self, idx: Sequence[int] | slice) -> "Batch":
        if isinstance(idx, slice):
            idx = range(len(self))[idx]
        idx = list(idx)
        t = torch.as_tensor(idx, dtype=torch.long)
        return Batch(
            self.values[t], self.mask[t], self.ids[t], self.lens[t],
            self.cvals[t], self.cvis[t], self.cpres[t],
            [self.ots[i] for i in idx], [self.formulas[i] for i in idx],
        )


def make_batch(triples: Sequence, max_consts: int) -> Batch:
    values, mask = image_batch([t.image for t in triples])
    ids, lens = ots_batch([t.ots for t in triples])
    cvals, cvis, cpres = const_batch([t.consts for t in triples], max_consts)
    return Batch(values, mask, ids, lens, cvals, cvis, cpres, [t.ots for t in triples], [t.formula for t in triples])


def batch_indices(step: int, n: int, cfg: TrainConfig) -> np.ndarray:
    """Indices for ``step``: a fresh seeded permutation every epoch, cut into batches."""
    spe = cfg.steps_per_epoch or math.ceil(n / cfg.batch_size)
    epoch, k = divmod(step, spe)
    perm = np.random.default_rng(derive_seed(cfg.seed, _S_EPOCH, epoch)).permutation(n)
    lo = (k * cfg.batch_size) % n
    out = perm[lo : lo + cfg.batch_size]
    return out


def derangement(n: int, seed: int) -> np.ndarray:
    """Uniform permutation without fixed points (rejection sampling); identity for n < 2."""
    if n < 2:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    while True:
        p = rng.permutation(n)
        if not np.any(p == np.arange(n)):
            return p


# ---------------------------------------------------------------------------
# state


@dataclass
class TrainState:
    model: AlignmentModel
    optimizer: torch.optim.Optimizer
    queues: dict[str, FeatureQueue]
    cfg: TrainConfig
    step: int = 0


def make_optimizer(model: AlignmentModel, cfg: TrainConfig) -> torch.optim.Adam:
    tau = model.temps.tau
    rest = [p for p in model.parameters() if p.requires_grad and p is not tau]
    groups = [{"params": rest, "lr_scale": 1.0}]
    if tau.requires_grad:
        groups.append({"params": [tau], "lr_scale": cfg.tau_lr_scale})
    return torch.optim.Adam(groups, lr=cfg.lr_start, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)


def make_queues(model: AlignmentModel, cfg: TrainConfig) -> dict[str, FeatureQueue]:
    return {
        m: FeatureQueue(cfg.queue_capacity, model.cfg.d_f, derive_seed(cfg.seed, _S_QUEUE, i))
        for i, m in enumerate(MODALITIES)
    }


def new_state(model: AlignmentModel, cfg: TrainConfig) -> TrainState:
    return TrainState(model, make_optimizer(model, cfg), make_queues(model, cfg), cfg)


def _apply_update(state: TrainState, total: torch.Tensor, parts: dict) -> float:
    """Backward, one optimizer step at the scheduled rate, temperature clamp.

    Nothing is touched when the loss is not finite.
    """
    if not torch.isfinite(total) or not all(torch.isfinite(v) for v in parts.values()):
        raise NonFiniteLossError({k: float(v.detach()) for k, v in parts.items()})
    lr = lr_schedule(state.step, state.cfg)
    opt = state.optimizer
    opt.zero_grad(set_to_none=True)
    total.backward()
    for g in opt.param_groups:
        g["lr"] = lr * g.get("lr_scale", 1.0)
    opt.step()
    state.model.temps.clamp_()
    return lr


# ---------------------------------------------------------------------------
# pre-training


@dataclass
class StepSeeds:
    foc: int
    kd: int
    derange: int

    @classmethod
    def at(cls, seed: int, step: int) -> "StepSeeds":
        return cls(derive_seed(seed, _S_FOC, step), derive_seed(seed, _S_KD, step), derive_seed(seed, _S_DERANGE, step))


def teacher_tensors(teacher: Teacher, formulas: Sequence[str]) -> tuple[torch.Tensor, torch.Tensor]:
    return teacher_batch([teacher(s).values for s in formulas])


def _pool(h: torch.Tensor, cfg: TrainConfig, key_mask: torch.Tensor | None = None) -> torch.Tensor:
    return pool_first_token(h, cfg.pooling, key_mask)


def pretrain_losses(
    model: AlignmentModel,
    b: Batch,
    th: tuple[torch.Tensor, torch.Tensor],
    queues: dict[str, FeatureQueue],
    cfg: TrainConfig,
    seeds: StepSeeds,
    partner_hi: torch.Tensor,
    partner_ots: Sequence[Ots],
    hi: torch.Tensor | None = None,
) -> tuple[dict[str, torch.Tensor], dict[str, torch.Tensor]]:
    """All four pre-training terms for the rows of ``b``.

    ``partner_hi[j]`` is the image feature matrix paired with row j as a FOM
    negative candidate; ``partner_ots[j]`` decides its label (a partner drawn
    from the same skeleton is a true match because constants are masked).
    Returns (parts, pooled features for the queues).
    """
    if hi is None:
        hi = model.encode_image(b.values, b.mask)
    gi = _pool(hi, cfg)
    ho = model.encode_ots(b.ids, b.cvals, b.cvis, b.cpres)
    go = _pool(ho, cfg)
    hs = model.embed_teacher(th[0])
    gs = _pool(hs, cfg, th[1])

    hidden = torch.zeros_like(b.cvis)
    pos = model.match_logits(model.encode_ots(b.ids, b.cvals, hidden, b.cpres, cond=hi))
    neg = model.match_logits(model.encode_ots(b.ids, b.cvals, hidden, b.cpres, cond=partner_hi))
    same = torch.tensor([p == o for p, o in zip(partner_ots, b.ots)], dtype=torch.bool)
    labels = torch.cat([torch.ones(len(b), dtype=torch.bool), same])
    fom = loss_fom(MatchBatch(torch.cat([pos, neg]), labels))

    logits = model.decode(b.ids[:, :-1], cond=hi)
    om = sequence_nll(logits, b.ids, b.lens)

    temps = model.temps
    foc = loss_foc(gi, go, queues["image"], queues["ots"], temps, cfg.n_neg, seeds.foc, cfg.include_positive,
                   cfg.in_batch_negatives)
    kd = loss_kd(gi, go, gs, queues["formula"], temps, cfg.n_neg, seeds.kd, cfg.include_positive,
                 cfg.in_batch_negatives)
    parts = {"foc": foc, "fom": fom, "om": om, "kd": kd}
    return parts, {"image": gi, "ots": go, "formula": gs}


def monolithic_forward(state: TrainState, b: Batch, teacher: Teacher, step: int | None = None):
    """Forward pass of one pre-training step without any update."""
    step = state.step if step is None else step
    seeds = StepSeeds.at(state.cfg.seed, step)
    th = teacher_tensors(teacher, b.formulas)
    hi = state.model.encode_image(b.values, b.mask)
    perm = derangement(len(b), seeds.derange)
    return pretrain_losses(state.model, b, th, state.queues, state.cfg, seeds, hi[perm], [b.ots[j] for j in perm], hi)


@dataclass
class StepResult:
    step: int
    lr: float
    losses: dict[str, float]

    def row(self) -> dict:
        return {"step": self.step, **self.losses, "lr": self.lr}


def pretrain_step(state: TrainState, b: Batch, teacher: Teacher) -> StepResult:
    """One pre-training update. Queues receive this step's pooled features
    after the optimizer update."""
    parts, feats = monolithic_forward(state, b, teacher)
    total = loss_total(parts, state.cfg.weights)
    lr = _apply_update(state, total, parts)
    for m, q in state.queues.items():
        q.push(feats[m])
    losses = {k: float(v.detach()) for k, v in parts.items()} | {"total": float(total.detach())}
    res = StepResult(state.step, lr, losses)
    state.step += 1
    return res


def _run(state: TrainState, n_data: int, n_steps: int, step_fn: Callable[[Sequence[int]], StepResult],
         on_step: Callable[[StepResult], None] | None) -> list[StepResult]:
    log = []
    for _ in range(n_steps):
        res = step_fn(batch_indices(state.step, n_data, state.cfg))
        log.append(res)
        if on_step is not None:
            on_step(res)
    return log


def pretrain(state: TrainState, triples: Sequence, teacher: Teacher, n_steps: int | None = None,
             on_step: Callable[[StepResult], None] | None = None) -> list[StepResult]:
    state.cfg = state.cfg.for_dataset(len(triples))
    data = make_batch(triples, state.model.cfg.max_consts)
    n_steps = state.cfg.steps - state.step if n_steps is None else n_steps
    state.model.train()
    return _run(state, len(triples), n_steps, lambda idx: pretrain_step(state, data.take(idx), teacher), on_step)


# ---------------------------------------------------------------------------
# fine-tuning


def funcimg_ots_step(state: TrainState, b: Batch) -> StepResult:
    model = state.model
    with torch.set_grad_enabled(state.cfg.train_encoder):
        hi = model.encode_image(b.values, b.mask)
    om = sequence_nll(model.decode(b.ids[:, :-1], cond=hi), b.ids, b.lens)
    lr = _apply_update(state, om, {"om": om})
    res = StepResult(state.step, lr, {"om": float(om.detach()), "total": float(om.detach())})
    state.step += 1
    return res


def formula_ots_step(state: TrainState, b: Batch, teacher: Teacher) -> StepResult:
    model = state.model
    th, rows = teacher_tensors(teacher, b.formulas)
    cond = model.embed_teacher(th)
    som = sequence_nll(model.decode(b.ids[:, :-1], cond=cond, cond_mask=rows, source="formula"), b.ids, b.lens)
    lr = _apply_update(state, som, {"som": som})
    res = StepResult(state.step, lr, {"som": float(som.detach()), "total": float(som.detach())})
    state.step += 1
    return res


def finetune_funcimg_ots(state: TrainState, triples: Sequence, n_steps: int | None = None,
                         on_step: Callable[[StepResult], None] | None = None) -> list[StepResult]:
    """Minimize the image-conditioned OTS modeling loss alone."""
    state.cfg = state.cfg.for_dataset(len(triples))
    data = make_batch(triples, state.model.cfg.max_consts)
    n_steps = state.cfg.steps - state.step if n_steps is None else n_steps
    state.model.train()
    return _run(state, len(triples), n_steps, lambda idx: funcimg_ots_step(state, data.take(idx)), on_step)


def finetune_formula_ots(state: TrainState, triples: Sequence, teacher: Teacher, n_steps: int | None = None,
                         on_step: Callable[[StepResult], None] | None = None) -> list[StepResult]:
    """Minimize the teacher-conditioned OTS modeling loss alone."""
    state.cfg = state.cfg.for_dataset(len(triples))
    data = make_batch(triples, state.model.cfg.max_consts)
    n_steps = state.cfg.steps - state.step if n_steps is None else n_steps
    state.model.train()
    return _run(state, len(triples), n_steps, lambda idx: formula_ots_step(state, data.take(idx), teacher), on_step)


def write_loss_log(log: Iterable[StepResult], path: str | Path) -> None:
    rows = [r.row() for r in log]
    if not rows:
        Path(path).write_text("")
        return
    cols = ["step"] + [k for k in (*PARTS, "som", "total") if k in rows[0]] + ["lr"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)


# ---------------------------------------------------------------------------
# decoding


@torch.no_grad()
def generate_ots_batch(
    model: AlignmentModel,
    cond: torch.Tensor,
    cond_mask: torch.Tensor | None = None,
    source: str = "image",
    vocab: OperatorVocab | None = None,
) -> list[Ots]:
    """Greedy decoding for a batch of conditions [B x n x d_f]."""
    vocab = vocab or OperatorVocab(model.cfg.dims)
    k = model.cfg.max_ots_len
    b = cond.shape[0]
    seq = torch.full((b, 1), vocab.BOS, dtype=torch.long)
    done = torch.zeros(b, dtype=torch.bool)
    while seq.shape[1] < k and not done.all():
        nxt = model.decode(seq, cond, cond_mask, source)[:, -1].argmax(-1) + 1
        nxt = torch.where(done, torch.full_like(nxt, vocab.PAD), nxt)
        seq = torch.cat([seq, nxt[:, None]], dim=1)
        done |= nxt == vocab.EOS
    return [Ots.from_sequence(_trim(row.tolist(), vocab), vocab, k) for row in seq]


def _trim(ids: list[int], vocab: OperatorVocab) -> list[int]:
    return ids[: ids.index(vocab.EOS) + 1] if vocab.EOS in ids else ids


@torch.no_grad()
def generate_ots(
    cond: torch.Tensor,
    model: AlignmentModel,
    mode: str = "greedy",
    beam: int = 1,
    cond_mask: torch.Tensor | None = None,
    source: str = "image",
    vocab: OperatorVocab | None = None,
) -> Ots:
    """Decode one OTS from BOS until EOS or ``max_ots_len`` tokens.

    ``mode="beam"`` keeps ``beam`` hypotheses ranked by summed log-probability;
    finished hypotheses compete with unfinished ones on the same score.
    """
    vocab = vocab or OperatorVocab(model.cfg.dims)
    cond = cond.unsqueeze(0) if cond.ndim == 2 else cond
    mask = None if cond_mask is None else (cond_mask.unsqueeze(0) if cond_mask.ndim == 1 else cond_mask)
    if mode == "greedy":
        return generate_ots_batch(model, cond, mask, source, vocab)[0]
    if mode != "beam" or beam < 1:
        raise ConfigError(f"unknown decoding mode {mode!r} / beam {beam}")
    k = model.cfg.max_ots_len
    hyps: list[tuple[float, list[int], bool]] = [(0.0, [vocab.BOS], False)]
    while any(not d for _, _, d in hyps):
        cand: list[tuple[float, list[int], bool]] = [h for h in hyps if h[2]]
        live = [h for h in hyps if not h[2]]
        ids = torch.tensor([h[1] for h in live], dtype=torch.long)
        logp = torch.log_softmax(model.decode(ids, cond.expand(len(live), -1, -1),
                                              None if mask is None else mask.expand(len(live), -1), source)[:, -1], -1)
        for (score, s, _), row in zip(live, logp.double().numpy()):
            for c in np.argsort(-row, kind="stable")[:beam]:
                t = int(c) + 1
                s2 = s + [t]
                cand.append((score + float(row[c]), s2, t == vocab.EOS or len(s2) >= k))
        order = sorted(range(len(cand)), key=lambda i: -cand[i][0])
        hyps = [cand[i] for i in order[:beam]]
    return Ots.from_sequence(hyps[0][1], vocab, k)


# ---------------------------------------------------------------------------
# distributed simulation


@dataclass
class Message:
    src: int
    dst: int
    tag: str
    payload: object
    nbytes: int


@dataclass
class WorkerTopology:
    """``n_model_workers`` workers with ids 0..K-1 plus one teacher worker.

    Channels are FIFO queues keyed by (src, dst); every send is logged.
    """

    n_model_workers: int
    teacher_worker: int | None = -1
    log: list[Message] = field(default_factory=list)
    _channels: dict[tuple[int, int], deque] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.n_model_workers < 1:
            raise TopologyError("need at least one model worker")

    def validate(self) -> None:
        if self.teacher_worker is None:
            raise TopologyError("no teacher worker in the topology")

    def send(self, src: int, dst: int, tag: str, payload, nbytes: int) -> None:
        msg = Message(src, dst, tag, payload, nbytes)
        self._channels.setdefault((src, dst), deque()).append(msg)
        self.log.append(msg)

    def recv(self, src: int, dst: int, tag: str):
        msg = self._channels[(src, dst)].popleft()
        if msg.tag != tag:
            raise TopologyError(f"expected {tag!r} on channel {src}->{dst}, got {msg.tag!r}")
        return msg.payload

    @property
    def bytes_sent(self) -> int:
        return sum(m.nbytes for m in self.log)


def _shards(n: int, k: int) -> list[range]:
    bounds = np.linspace(0, n, k + 1).round().astype(int)
    return [range(bounds[i], bounds[i + 1]) for i in range(k)]


@torch.no_grad()
def dist_sim_run(topology: WorkerTopology, b: Batch, state: TrainState, teacher: Teacher,
                 step: int | None = None) -> dict:
    """Forward-only replay of one pre-training step across K model workers.

    Phases, each separated by a barrier:
    1. every worker encodes its shard's images and sends its formula strings up;
    2. the teacher worker runs the teacher once over the gathered strings and
       sends each worker the hidden states of its own rows;
    3. image feature matrices are all-gathered (needed for FOM partners);
    4. each worker computes its shard losses; the mean is weighted by shard size.
    Returns the reduced losses and the byte count per message kind.
    """
    topology.validate()
    cfg = state.cfg
    step = state.step if step is None else step
    seeds = StepSeeds.at(cfg.seed, step)
    model = state.model
    t = topology.teacher_worker
    shards = _shards(len(b), topology.n_model_workers)
    local = [b.take(r) for r in shards]

    hi_parts = []
    for w, sb in enumerate(local):
        hi_parts.append(model.encode_image(sb.values, sb.mask))
        enc = [s.encode() for s in sb.formulas]
        topology.send(w, t, "formulas", sb.formulas, sum(len(e) for e in enc))

    gathered = [topology.recv(w, t, "formulas") for w in range(len(local))]
    hidden = [teacher(s).values for s in (x for g in gathered for x in g)]
    off = 0
    for w, g in enumerate(gathered):
        mine = hidden[off : off + len(g)]
        off += len(g)
        topology.send(t, w, "teacher", mine, sum(h.nbytes for h in mine))

    for w, h in enumerate(hi_parts):
        for v in range(len(local)):
            if v != w:
                topology.send(w, v, "image", h, h.numel() * h.element_size())
    views = []
    for v in range(len(local)):
        views.append(torch.cat([hi_parts[v] if w == v else topology.recv(w, v, "image") for w in range(len(local))]))

    perm = derangement(len(b), seeds.derange)
    total = {k: 0.0 for k in PARTS}
    for w, (rows, sb) in enumerate(zip(shards, local)):
        th = teacher_batch(topology.recv(t, w, "teacher"))
        idx = perm[list(rows)]
        parts, _ = pretrain_losses(model, sb, th, state.queues, cfg, seeds, views[w][idx],
                                   [b.ots[j] for j in idx], hi_parts[w])
        frac = len(rows) / len(b)
        for k in PARTS:
            total[k] = total[k] + parts[k] * frac
    total_loss = loss_total(total, cfg.weights)
    by_kind: dict[str, int] = {}
    for m in topology.log:
        by_kind[m.tag] = by_kind.get(m.tag, 0) + m.nbytes
    return {
        "losses": {k: v for k, v in total.items()} | {"total": total_loss},
        "transfer_bytes": sum(by_kind.values()),
        "bytes_by_kind": by_kind,
    }


def formula_ots_inputs(formulas: Sequence[str], vocab: OperatorVocab) -> list[ConstVec]:
    """Constants for the formula-to-OTS task come straight from the input literals."""
    return [formula_constants(s, vocab) for s in formulas]
