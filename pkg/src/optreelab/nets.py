"""Small transformer encoders/decoders, heads, the teacher embedder and a gradient checker."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import CondWidthError, GradCheckFailure, ShapeError
from .features import Temperatures
from .funcimg import FuncImage
from .tree import ConstVec, Ots

COND_SOURCES = {"image": 0, "formula": 1}


@dataclass(frozen=True)
class NetConfig:
    vocab_size: int = 19
    d_f: int = 32
    layers: int = 2
    heads: int = 4
    max_ots_len: int = 24
    max_consts: int = 8
    n_scales: int = 3
    points_per_dim: int = 64
    dims: int = 1
    patch_size: int = 8
    teacher_width: int = 64
    embedder_hidden: int = 64
    mlp_ratio: int = 2
    dropout: float = 0.0
    tau: float = 0.07
    tau_prime: float | None = None
    init_std: float = 0.02
    init_seed: int = 0

    def __post_init__(self):
        ints = (self.vocab_size, self.d_f, self.layers, self.heads, self.max_ots_len, self.max_consts,
                self.n_scales, self.points_per_dim, self.dims, self.patch_size, self.teacher_width,
                self.embedder_hidden, self.mlp_ratio)
        if any(v <= 0 for v in ints):
            raise ValueError("NetConfig sizes must be positive")
        if self.d_f % self.heads:
            raise ValueError(f"d_f={self.d_f} is not divisible by heads={self.heads}")
        if self.n_points % self.patch_size:
            raise ValueError("patch_size must divide the number of grid points")

    @property
    def n_points(self) -> int:
        return self.points_per_dim**self.dims

    @property
    def n_patches(self) -> int:
        return self.n_points // self.patch_size

    @property
    def n_image_tokens(self) -> int:
        return 1 + self.n_patches

    @property
    def n_ots_tokens(self) -> int:
        return self.max_ots_len + self.max_consts

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


class Attention(nn.Module):
    def __init__(self, d: int, heads: int, dropout: float = 0.0):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, ctx=None, key_mask=None, causal=False):
        ctx = x if ctx is None else ctx
        b, n, d = x.shape
        m = ctx.shape[1]
        hd = d // self.heads
        q = self.q(x).view(b, n, self.heads, hd).transpose(1, 2)
        k = self.k(ctx).view(b, m, self.heads, hd).transpose(1, 2)
        v = self.v(ctx).view(b, m, self.heads, hd).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        allowed = torch.ones(b, 1, n, m, dtype=torch.bool, device=x.device)
        if key_mask is not None:
            allowed = allowed & key_mask[:, None, None, :]
        if causal:
            allowed = allowed & torch.ones(n, m, dtype=torch.bool, device=x.device).tril()
        scores = scores.masked_fill(~allowed, float("-inf"))
        att = self.drop(torch.softmax(scores, dim=-1))
        out = (att @ v).transpose(1, 2).reshape(b, n, d)
        return self.o(out)


class Block(nn.Module):
    """Pre-norm transformer block; the cross-attention sublayer runs only when a condition is given."""

    def __init__(self, d: int, heads: int, mlp_ratio: int, dropout: float, cross: bool):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = Attention(d, heads, dropout)
        self.cross = cross
        if cross:
            self.ln_c = nn.LayerNorm(d)
            self.cross_attn = Attention(d, heads, dropout)
        self.ln2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, mlp_ratio * d), nn.GELU(), nn.Linear(mlp_ratio * d, d))
        self.drop = nn.Dropout(dropout)

    def forward(self, x, key_mask=None, causal=False, cond=None, cond_mask=None):
        x = x + self.drop(self.attn(self.ln1(x), key_mask=key_mask, causal=causal))
        if cond is not None:
            if not self.cross:
                raise ShapeError("this block has no cross-attention")
            x = x + self.drop(self.cross_attn(self.ln_c(x), ctx=cond, key_mask=cond_mask))
        return x + self.drop(self.mlp(self.ln2(x)))


class FuncimgEncoder(nn.Module):
    """ViT-style encoder: 1-D patches over the flattened grid, all channels and
    the finite mask stacked into each patch vector, plus a learned class token."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.patch = nn.Linear(2 * cfg.n_scales * cfg.patch_size, cfg.d_f)
        self.cls = nn.Parameter(torch.zeros(cfg.d_f))
        self.pos = nn.Parameter(torch.zeros(cfg.n_image_tokens, cfg.d_f))
        self.blocks = nn.ModuleList(
            Block(cfg.d_f, cfg.heads, cfg.mlp_ratio, cfg.dropout, cross=False) for _ in range(cfg.layers)
        )
        self.ln_f = nn.LayerNorm(cfg.d_f)

    def forward(self, values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        b = values.shape[0]
        if tuple(values.shape[1:]) != (cfg.n_scales, cfg.n_points) or values.shape != mask.shape:
            raise ShapeError(
                f"image batch {tuple(values.shape)} does not match grid ({cfg.n_scales}, {cfg.n_points})"
            )
        values = values.to(self.pos.dtype) * mask.to(self.pos.dtype)
        x = torch.cat([values, mask.to(self.pos.dtype)], dim=1)  # [b, 2 n_s, P]
        x = x.view(b, 2 * cfg.n_scales, cfg.n_patches, cfg.patch_size).permute(0, 2, 1, 3)
        x = self.patch(x.reshape(b, cfg.n_patches, -1))
        x = torch.cat([self.cls.expand(b, 1, -1), x], dim=1) + self.pos
        for blk in self.blocks:
            x = blk(x)
        return self.ln_f(x)


class OtsBackbone(nn.Module):
    """Shared OTS encoder/decoder trunk.

    Encoding is bidirectional over ``max_ots_len`` token positions followed by
    ``max_consts`` constant positions. Decoding reuses the same weights with a
    causal mask over token positions only; masked constants would sit after
    every token position and are therefore invisible to it anyway.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_f
        self.tok = nn.Embedding(cfg.vocab_size + 1, d)
        self.pos = nn.Parameter(torch.zeros(cfg.n_ots_tokens, d))
        self.const_value = nn.Linear(1, d)
        self.const_masked = nn.Parameter(torch.zeros(d))
        self.const_pad = nn.Parameter(torch.zeros(d))
        self.cond_source = nn.Embedding(len(COND_SOURCES), d)
        self.blocks = nn.ModuleList(
            Block(d, cfg.heads, cfg.mlp_ratio, cfg.dropout, cross=True) for _ in range(cfg.layers)
        )
        self.ln_f = nn.LayerNorm(d)

    def _cond(self, cond, source):
        if cond is None:
            return None
        if cond.shape[-1] != self.cfg.d_f:
            raise CondWidthError(f"condition width {cond.shape[-1]} != d_f {self.cfg.d_f}")
        return cond + self.cond_source.weight[COND_SOURCES[source]]

    def encode(self, ids, cvals, cvis, cpresent, cond=None, cond_mask=None, source="image"):
        cfg = self.cfg
        b = ids.shape[0]
        if ids.shape[1] != cfg.max_ots_len or cvals.shape[1] != cfg.max_consts:
            raise ShapeError(
                f"OTS/constant widths {ids.shape[1]}/{cvals.shape[1]} != {cfg.max_ots_len}/{cfg.max_consts}"
            )
        dt = self.pos.dtype
        tok = self.tok(ids)
        vis = cvis.unsqueeze(-1)
        pres = cpresent.unsqueeze(-1)
        c = torch.where(vis, self.const_value(cvals.to(dt).unsqueeze(-1)), self.const_masked.expand(b, cfg.max_consts, -1))
        c = torch.where(pres, c, self.const_pad.expand(b, cfg.max_consts, -1))
        x = torch.cat([tok, c], dim=1) + self.pos
        pad_id = 1
        key_mask = torch.cat([ids != pad_id, cpresent], dim=1)
        cond = self._cond(cond, source)
        for blk in self.blocks:
            x = blk(x, key_mask=key_mask, cond=cond, cond_mask=cond_mask)
        return self.ln_f(x)

    def decode(self, ids, cond, cond_mask=None, source="image"):
        n = ids.shape[1]
        if n > self.cfg.max_ots_len - 1:
            raise ShapeError(f"decoder prefix of {n} exceeds {self.cfg.max_ots_len - 1}")
        if cond is None:
            raise ShapeError("the decoder needs a condition")
        x = self.tok(ids) + self.pos[:n]
        cond = self._cond(cond, source)
        for blk in self.blocks:
            x = blk(x, causal=True, cond=cond, cond_mask=cond_mask)
        return self.ln_f(x)


class TeacherEmbedder(nn.Module):
    """Row-wise two-layer ReLU perceptron from the teacher width to ``d_f``."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, out_dim)

    def forward(self, th: torch.Tensor) -> torch.Tensor:
        if th.shape[-1] != self.fc1.in_features:
            raise ShapeError(f"teacher width {th.shape[-1]} != {self.fc1.in_features}")
        return self.fc2(torch.relu(self.fc1(th.to(self.fc1.weight.dtype))))

    @torch.no_grad()
    def identity_init_(self) -> None:
        """Exact identity map: relu(x) - relu(-x) = x. Needs hidden = 2 * in = 2 * out."""
        d = self.fc1.in_features
        if self.fc1.out_features != 2 * d or self.fc2.out_features != d:
            raise ShapeError("identity init needs a square embedder with hidden width 2 * d")
        eye = torch.eye(d, dtype=self.fc1.weight.dtype)
        self.fc1.weight.copy_(torch.cat([eye, -eye], dim=0))
        self.fc2.weight.copy_(torch.cat([eye, -eye], dim=1))
        self.fc1.bias.zero_()
        self.fc2.bias.zero_()

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())


class AlignmentModel(nn.Module):
    """All trainable parts: image encoder, tied OTS encoder/decoder, both heads,
    the teacher embedder and the contrastive temperature."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.image_encoder = FuncimgEncoder(cfg)
        self.ots = OtsBackbone(cfg)
        self.match_head = nn.Linear(cfg.d_f, 2)
        self.lm_head = nn.Linear(cfg.d_f, cfg.vocab_size)
        self.embedder = TeacherEmbedder(cfg.teacher_width, cfg.embedder_hidden, cfg.d_f)
        self.temps = Temperatures(cfg.tau, cfg.tau_prime)
        init_weights_(self, cfg.init_std, cfg.init_seed)

    # forward pieces used by the training loop
    def encode_image(self, values, mask):
        return self.image_encoder(values, mask)

    def encode_ots(self, ids, cvals, cvis, cpresent, cond=None, cond_mask=None, source="image"):
        return self.ots.encode(ids, cvals, cvis, cpresent, cond, cond_mask, source)

    def decode(self, ids, cond, cond_mask=None, source="image"):
        """Logits [b x n x N_v] for a (possibly partial) prefix of token ids."""
        return self.lm_head(self.ots.decode(ids, cond, cond_mask, source))

    def match_logits(self, h):
        return self.match_head(h[:, 0])

    def embed_teacher(self, th):
        return self.embedder(th)


@torch.no_grad()
def init_weights_(module: nn.Module, std: float = 0.02, seed: int = 0) -> None:
    """Scaled-Gaussian weights, zero biases, unit LayerNorm gains; independent of the global RNG."""
    gen = torch.Generator().manual_seed(int(seed))
    for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
        leaf = name.rsplit(".", 1)[-1]
        parent = module.get_submodule(name.rsplit(".", 1)[0]) if "." in name else module
        if isinstance(parent, nn.LayerNorm):
            p.fill_(1.0 if leaf == "weight" else 0.0)
        elif leaf == "bias" or isinstance(parent, Temperatures):
            if leaf == "bias":
                p.zero_()
        else:
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype) * std)


# ---------------------------------------------------------------------------
# batching helpers: domain objects -> tensors


def image_batch(images: Sequence[FuncImage], dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    vals = torch.as_tensor(np.stack([img.values for img in images]), dtype=dtype)
    mask = torch.as_tensor(np.stack([img.finite_mask for img in images]))
    return vals, mask


def ots_batch(seqs: Sequence[Ots]) -> tuple[torch.Tensor, torch.Tensor]:
    ids = torch.tensor([s.ids for s in seqs], dtype=torch.long)
    lens = torch.tensor([s.true_len for s in seqs], dtype=torch.long)
    return ids, lens


def const_batch(consts: Sequence[ConstVec], capacity: int, dtype=torch.float32):
    vals, vis, pres = zip(*(c.padded(capacity) for c in consts))
    return (
        torch.as_tensor(np.stack(vals), dtype=dtype),
        torch.as_tensor(np.stack(vis)),
        torch.as_tensor(np.stack(pres)),
    )


def teacher_batch(hidden: Sequence[np.ndarray], dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pad variable-length teacher matrices; returns (values, row mask)."""
    n = max(h.shape[0] for h in hidden)
    width = hidden[0].shape[1]
    out = np.zeros((len(hidden), n, width), dtype=np.float32)
    mask = np.zeros((len(hidden), n), dtype=bool)
    for i, h in enumerate(hidden):
        if h.shape[1] != width:
            raise ShapeError("teacher matrices of different widths in one batch")
        out[i, : h.shape[0]] = h
        mask[i, : h.shape[0]] = True
    return torch.as_tensor(out).to(dtype), torch.as_tensor(mask)


# single-item conveniences mirroring the batch forward passes


def encode_funcimg(img: FuncImage, model: AlignmentModel) -> torch.Tensor:
    vals, mask = image_batch([img], model.image_encoder.pos.dtype)
    return model.encode_image(vals, mask)[0]


def encode_ots(o: Ots, c: ConstVec, cond: torch.Tensor | None, model: AlignmentModel, source: str = "image"):
    ids, _ = ots_batch([o])
    cv, vis, pres = const_batch([c], model.cfg.max_consts, model.ots.pos.dtype)
    cond_b = None if cond is None else cond.unsqueeze(0)
    return model.encode_ots(ids, cv, vis, pres, cond_b, None, source)[0]


def decode_ots(o_prefix: Ots, c_masked: ConstVec | None, cond: torch.Tensor, model: AlignmentModel, source: str = "image"):
    """Logits [(k-1) x N_v]; ``c_masked`` is accepted for symmetry and never read."""
    ids = torch.tensor([o_prefix.ids[:-1]], dtype=torch.long)
    return model.decode(ids, cond.unsqueeze(0), None, source)[0]


def match_head(h: torch.Tensor, model: AlignmentModel) -> torch.Tensor:
    return model.match_logits(h.unsqueeze(0))[0]


def teacher_embedder(th: np.ndarray | torch.Tensor, model: AlignmentModel) -> torch.Tensor:
    return model.embed_teacher(torch.as_tensor(np.asarray(th)) if not isinstance(th, torch.Tensor) else th)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_err: dict[str, float] = field(default_factory=dict)
    n_coords: int = 0

    def failing(self) -> dict[str, float]:
        return {k: v for k, v in self.max_rel_err.items() if not v <= self.tolerance}

    @property
    def ok(self) -> bool:
        return not self.failing()

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)


def gradcheck(
    params: Mapping[str, torch.Tensor] | nn.Module,
    loss_closure: Callable[[], torch.Tensor],
    tolerance: float = 1e-4,
    n_coords: int = 200,
    h: float = 1e-6,
    seed: int = 0,
    floor: float = 1e-6,
    analytic: Mapping[str, torch.Tensor] | None = None,
    raise_on_failure: bool = True,
) -> GradCheckReport:
    """Compare autograd (or supplied ``analytic``) gradients against central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if isinstance(params, nn.Module):
        params = {k: p for k, p in params.named_parameters() if p.requires_grad}
    names = sorted(params)
    if analytic is None:
        for p in params.values():
            p.grad = None
        loss_closure().backward()
        analytic = {k: (params[k].grad.detach().clone() if params[k].grad is not None else torch.zeros_like(params[k]))
                    for k in names}
    sizes = np.array([params[k].numel() for k in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)
    total = int(offsets[-1])
    picks = rng.choice(total, size=min(n_coords, total), replace=False)
    report = GradCheckReport(tolerance, n_coords=len(picks))
    with torch.no_grad():
        for flat_idx in sorted(picks):
            t = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
            name = names[t]
            local = int(flat_idx - offsets[t])
            p = params[name].view(-1)
            orig = p[local].item()
            p[local] = orig + h
            up = loss_closure().item()
            p[local] = orig - h
            down = loss_closure().item()
            p[local] = orig
            num = (up - down) / (2 * h)
            a = analytic[name].reshape(-1)[local].item()
            err = abs(a - num) / max(abs(a), abs(num), floor)
            report.max_rel_err[name] = max(report.max_rel_err.get(name, 0.0), err)
    if raise_on_failure and not report.ok:
        raise GradCheckFailure(report)
    return report
