"""Versioned binary checkpoints.

File layout::

    8 bytes   magic  b"OPTRCKPT"
    4 bytes   format version (little-endian uint32)
    8 bytes   header length H (little-endian uint64)
    H bytes   UTF-8 JSON header (sorted keys): configs, config hash, step,
              queue write indices, optimizer hyperparameters, tensor index
    ...       raw little-endian tensor bytes in header order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import VersionError
from .nets import AlignmentModel, NetConfig
from .train import TrainConfig, TrainState, make_optimizer, make_queues

MAGIC = b"OPTRCKPT"
FORMAT_VERSION = 1

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.bool: "|b1",
}
_TORCH = {v: k for k, v in _DTYPES.items()}


def _opt_names(state: TrainState) -> list[str]:
    names = {id(p): n for n, p in state.model.named_parameters()}
    return [names[id(p)] for g in state.optimizer.param_groups for p in g["params"]]


def _collect(state: TrainState) -> tuple[dict, list[tuple[str, torch.Tensor]]]:
    tensors: list[tuple[str, torch.Tensor]] = []
    for name, t in state.model.state_dict().items():
        tensors.append((f"model/{name}", t))
    for m, q in state.queues.items():
        tensors.append((f"queue/{m}", q.buffer))
    opt_sd = state.optimizer.state_dict()
    names = _opt_names(state)
    for idx, st in sorted(opt_sd["state"].items()):
        for key, val in sorted(st.items()):
            tensors.append((f"adam/{names[idx]}/{key}", torch.as_tensor(val)))
    groups = [{k: v for k, v in g.items() if k != "params"} for g in opt_sd["param_groups"]]
    for g in groups:
        if "betas" in g:
            g["betas"] = list(g["betas"])
    header = {
        "format_version": FORMAT_VERSION,
        "net_config": state.model.cfg.to_dict(),
        "config_hash": state.model.cfg.config_hash(),
        "train_config": state.cfg.to_dict(),
        "step": state.step,
        "queues": {m: {"write_index": q.write_index, "capacity": q.capacity} for m, q in state.queues.items()},
        "optimizer": {"groups": groups, "param_names": names},
    }
    return header, tensors


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    header, tensors = _collect(state)
    index, blobs, offset = [], [], 0
    for name, t in tensors:
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise TypeError(f"cannot serialize {name} of dtype {t.dtype}")
        data = np.ascontiguousarray(t.numpy(), dtype=_DTYPES[t.dtype]).tobytes()
        index.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header["tensors"] = index
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise VersionError(f"{path} is not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", buf, 8)
    if version != FORMAT_VERSION:
        raise VersionError(f"checkpoint format {version}, this build reads {FORMAT_VERSION}")
    start = 8 + 12
    header = json.loads(buf[start : start + hlen])
    body = start + hlen
    tensors = {}
    for e in header["tensors"]:
        a = np.frombuffer(buf, dtype=e["dtype"], count=int(np.prod(e["shape"], dtype=np.int64)), offset=body + e["offset"])
        tensors[e["name"]] = torch.from_numpy(a.reshape(e["shape"]).copy()).to(_TORCH[e["dtype"]])
    return header, tensors


def load_checkpoint(path: str | Path, expect: NetConfig | None = None) -> TrainState:
    """Rebuild the full training state. ``expect`` pins the network config:
    a hash mismatch raises VersionError."""
    header, tensors = read_checkpoint(path)
    net = NetConfig(**header["net_config"])
    if net.config_hash() != header["config_hash"]:
        raise VersionError("stored config hash does not match the stored config")
    if expect is not None and expect.config_hash() != header["config_hash"]:
        raise VersionError(f"checkpoint config {header['config_hash']} != expected {expect.config_hash()}")
    cfg = TrainConfig.from_dict(header["train_config"])
    model = AlignmentModel(net)
    model.load_state_dict({k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}, strict=True)
    state = TrainState(model, make_optimizer(model, cfg), make_queues(model, cfg), cfg, header["step"])

    for m, q in state.queues.items():
        q.load_state({"buffer": tensors[f"queue/{m}"], "write_index": header["queues"][m]["write_index"]})

    names = _opt_names(state)
    if names != header["optimizer"]["param_names"]:
        raise VersionError("optimizer parameter layout differs from the checkpoint")
    sd = state.optimizer.state_dict()
    opt_state = {}
    for idx, n in enumerate(names):
        keys = [k for k in tensors if k.startswith(f"adam/{n}/")]
        if keys:
            opt_state[idx] = {k.rsplit("/", 1)[1]: tensors[k] for k in keys}
    groups = []
    for g, stored in zip(sd["param_groups"], header["optimizer"]["groups"]):
        stored = dict(stored)
        if "betas" in stored:
            stored["betas"] = tuple(stored["betas"])
        groups.append({**stored, "params": g["params"]})
    state.optimizer.load_state_dict({"state": opt_state, "param_groups": groups})
    return state


def checkpoint_io(state: TrainState | None, path: str | Path, mode: str, expect: NetConfig | None = None):
    if mode == "save":
        save_checkpoint(state, path)
        return None
    if mode == "load":
        return load_checkpoint(path, expect)
    raise ValueError(f"mode must be 'save' or 'load', not {mode!r}")


def model_only(path: str | Path, expect: NetConfig | None = None) -> AlignmentModel:
    return load_checkpoint(path, expect).model

