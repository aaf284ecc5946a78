"""Command-line entry point: ``optreelab <command> [flags]``.

Flags mirror the fields of GenConfig, NetConfig and TrainConfig (``d_f`` becomes
``--d-f``). ``--config FILE`` reads a JSON object whose keys override flags;
keys may sit at top level or under "gen", "net" and "train" sections.
The environment variable OPTREE_SEED supplies the default seed.
"""

from __future__ import annotations

import argparse
import json
import sys
import types
import typing
from dataclasses import MISSING, fields, replace
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .data import dataset_generate, grid_from_manifest, load_dataset
from .errors import OptreeError
from .funcimg import grid_from_sidecar, load_image
from .nets import AlignmentModel, NetConfig
from .seeding import default_seed
from .teacher import CachedTeacher, ConstantTeacher, HashTeacher, ImportedTeacher, teacher_export
from .train import (TrainConfig, finetune_formula_ots, finetune_funcimg_ots, new_state, pretrain,
                    write_loss_log)
from .tree import GenConfig
from .vocab import OperatorVocab

_SKIP = {"seed", "node_range", "op_weights", "binary_ops", "unary_ops", "vocab_size", "dims", "init_seed"}


def _base_type(tp):
    if isinstance(tp, types.UnionType) or typing.get_origin(tp) is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return args[0] if len(args) == 1 else str
    return tp


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {s!r}")


def _add_fields(p: argparse.ArgumentParser, *classes) -> None:
    seen = set()
    for cls in classes:
        hints = typing.get_type_hints(cls)
        for f in fields(cls):
            if f.name in _SKIP or f.name in seen:
                continue
            seen.add(f.name)
            tp = _base_type(hints[f.name])
            conv = _bool if tp is bool else tp
            default = f.default if f.default is not MISSING else None
            p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=conv, default=None,
                           help=f"{cls.__name__}.{f.name} (default {default})")


def _gen_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--node-min", type=int, default=None)
    p.add_argument("--node-max", type=int, default=None)
    p.add_argument("--binary-ops", default=None, help="comma-separated subset")
    p.add_argument("--unary-ops", default=None, help="comma-separated subset")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="JSON file overriding flags")
    p.add_argument("--seed", type=int, default=None, help="default: $OPTREE_SEED or 0")


def _teacher_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--teacher", default="hash", help="'hash', 'constant' or an export directory")
    p.add_argument("--teacher-seed", type=int, default=0)


def _settings(args) -> dict:
    """Flag values (non-None) overlaid with the config file."""
    out = {k: v for k, v in vars(args).items() if v is not None}
    if args.config is not None:
        doc = json.loads(args.config.read_text())
        for section in ("gen", "net", "train"):
            out.update(doc.pop(section, {}))
        out.update(doc)
    out.setdefault("seed", default_seed(0))
    return out


def _build(cls, s: dict, **fixed):
    names = {f.name for f in fields(cls)}
    kw = {k: v for k, v in s.items() if k in names}
    kw.update(fixed)
    return cls(**kw)


def gen_config(s: dict) -> GenConfig:
    kw = {}
    if "node_min" in s or "node_max" in s:
        lo, hi = GenConfig().node_range
        kw["node_range"] = (int(s.get("node_min", lo)), int(s.get("node_max", hi)))
    if "node_range" in s:
        kw["node_range"] = tuple(s["node_range"])
    for key in ("binary_ops", "unary_ops"):
        v = s.get(key)
        if v is not None:
            kw[key] = tuple(v.split(",")) if isinstance(v, str) else tuple(v)
    if "op_weights" in s:
        kw["op_weights"] = dict(s["op_weights"])
    return _build(GenConfig, s, **kw)


def net_config(s: dict, vocab: OperatorVocab, points_per_dim: int, n_scales: int) -> NetConfig:
    return _build(NetConfig, s, vocab_size=vocab.size, dims=vocab.var_count, points_per_dim=points_per_dim,
                  n_scales=n_scales, init_seed=int(s.get("init_seed", s["seed"])))


def make_teacher(spec: str, width: int, seed: int = 0):
    if spec == "hash":
        return CachedTeacher(HashTeacher(width, seed))
    if spec == "constant":
        return ConstantTeacher(width, seed=seed)
    return ImportedTeacher(spec, width)


def _dataset(path):
    triples, manifest = load_dataset(path)
    vocab = OperatorVocab.from_json(json.dumps(manifest["vocab"]))
    return triples, manifest, vocab, grid_from_manifest(manifest)


def _write_manifest(path: Path, **parts) -> None:
    path.write_text(json.dumps(parts, indent=1, sort_keys=True, default=str))


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    s = _settings(args)
    cfg = gen_config(s)
    from .funcimg import build_meshgrid

    grid = build_meshgrid(tuple(s.get("scales", (1.0, 2.0, 4.0))), cfg.var_count, int(s.get("points_per_dim", 64)))
    manifest = dataset_generate(
        cfg, grid, int(s["n_skeletons"]), int(s["images_per_skeleton"]), s["out"],
        float(s.get("noise_sigma", 0.001)), int(s["seed"]), int(s.get("max_consts") or 8),
    )
    print(json.dumps({k: manifest[k] for k in ("n_records", "n_skeletons", "content_hash")}))
    return 0


def _train_state(s: dict, vocab, grid, init: Path | None, resume: Path | None):
    cfg = _build(TrainConfig, s)
    if resume is not None:
        # the stored run config wins; only the total step count may be extended
        state = load_checkpoint(resume)
        if "steps" in s:
            state.cfg = replace(state.cfg, steps=int(s["steps"]))
        return state
    if init is not None:
        model = load_checkpoint(init).model
    else:
        model = AlignmentModel(net_config(s, vocab, grid.points_per_dim, grid.n_channels))
    return new_state(model, cfg)


def _progress(every: int):
    def show(r):
        if every and r.step % every == 0:
            print(json.dumps(r.row()), file=sys.stderr)
    return show


def cmd_pretrain(args) -> int:
    s = _settings(args)
    triples, manifest, vocab, grid = _dataset(s["data"])
    state = _train_state(s, vocab, grid, s.get("init"), s.get("resume"))
    teacher = make_teacher(s["teacher"], state.model.cfg.teacher_width, s["teacher_seed"])
    log = pretrain(state, triples, teacher, on_step=_progress(s["log_every"]))
    return _finish(state, log, s, manifest, "pretrain")


def cmd_finetune(args) -> int:
    s = _settings(args)
    triples, manifest, vocab, grid = _dataset(s["data"])
    state = _train_state(s, vocab, grid, s.get("init"), s.get("resume"))
    if s["task"] == "funcimg-ots":
        log = finetune_funcimg_ots(state, triples, on_step=_progress(s["log_every"]))
    else:
        teacher = make_teacher(s["teacher"], state.model.cfg.teacher_width, s["teacher_seed"])
        log = finetune_formula_ots(state, triples, teacher, on_step=_progress(s["log_every"]))
    return _finish(state, log, s, manifest, s["task"])


def _finish(state, log, s, manifest, phase) -> int:
    out = Path(s["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(state, out)
    write_loss_log(log, out.with_suffix(".csv"))
    _write_manifest(out.with_suffix(".json"), phase=phase, net_config=state.model.cfg.to_dict(),
                    train_config=state.cfg.to_dict(), step=state.step, dataset=str(s["data"]),
                    dataset_hash=manifest["content_hash"], teacher=s.get("teacher"))
    if log:
        print(json.dumps(log[-1].row()))
    return 0


def cmd_eval(args) -> int:
    from .pipeline import evaluate_formula_ots, evaluate_funcimg_ots, exact_match_rate

    s = _settings(args)
    triples, _, vocab, grid = _dataset(s["data"])
    if s.get("limit"):
        triples = triples[: s["limit"]]
    model = load_checkpoint(s["ckpt"]).model
    if s["task"] == "funcimg-ots":
        report, inf = evaluate_funcimg_ots(model, triples, grid, vocab, seed=s["seed"])
        preds = [i.ots for i in inf]
    else:
        teacher = make_teacher(s["teacher"], model.cfg.teacher_width, s["teacher_seed"])
        report, preds = evaluate_formula_ots(model, triples, teacher, vocab)
    out = report.as_dict() | {"exact_match": exact_match_rate(preds, [t.ots for t in triples])}
    print(json.dumps(out))
    return 0


def cmd_infer(args) -> int:
    from .pipeline import infer_image

    s = _settings(args)
    path = Path(s["image"])
    img = load_image(path)
    grid = grid_from_sidecar(json.loads(path.with_suffix(".json").read_text()))
    model = load_checkpoint(s["ckpt"]).model
    res = infer_image(img, model, grid, OperatorVocab(grid.dims), seed=s["seed"])
    print(json.dumps({"ots": list(res.ots.unpadded), "formula": res.formula, "mse": res.mse, "failure": res.failure}))
    return 0 if res.ok else 1


def cmd_report(args) -> int:
    from .report import similarity_report

    s = _settings(args)
    triples, _, _, _ = _dataset(s["data"])
    model = load_checkpoint(s["ckpt"]).model
    teacher = make_teacher(s["teacher"], model.cfg.teacher_width, s["teacher_seed"])
    summ = similarity_report(triples[: s["n"]], model, teacher, s["out"])
    print(json.dumps({k: {"mean_diag": v.mean_diag, "mean_offdiag": v.mean_offdiag, "top1": v.top1} for k, v in summ.items()}))
    return 0


def cmd_teacher(args) -> int:
    s = _settings(args)
    width = s.get("teacher_width") or NetConfig().teacher_width
    if s.get("export"):
        triples, _, _, _ = _dataset(s["data"])
        n = teacher_export(HashTeacher(width, s["teacher_seed"]), [t.formula for t in triples], s["export"])
        print(json.dumps({"exported": n, "path": str(s["export"])}))
        return 0
    th = ImportedTeacher(s["import_"], s.get("teacher_width"))(s["formula"])
    print(json.dumps({"rows": th.token_count, "width": th.width, "teacher_id": th.teacher_id}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="optreelab", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a dataset directory")
    _common(p)
    _gen_flags(p)
    _add_fields(p, GenConfig)
    p.add_argument("--out", required=True)
    p.add_argument("--n-skeletons", type=int, default=500)
    p.add_argument("--images-per-skeleton", type=int, default=4)
    p.add_argument("--noise-sigma", type=float, default=None)
    p.add_argument("--points-per-dim", type=int, default=None)
    p.set_defaults(fn=cmd_gen)

    for name, fn in (("pretrain", cmd_pretrain), ("finetune", cmd_finetune)):
        p = sub.add_parser(name)
        _common(p)
        _teacher_flags(p)
        _add_fields(p, TrainConfig, NetConfig)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True, help="checkpoint path; .csv log and .json manifest written beside it")
        p.add_argument("--init", type=Path, default=None, help="start from this checkpoint's weights")
        p.add_argument("--resume", type=Path, default=None, help="continue this checkpoint's run exactly")
        p.add_argument("--log-every", type=int, default=100)
        if name == "finetune":
            p.add_argument("--task", choices=("funcimg-ots", "formula-ots"), required=True)
        p.set_defaults(fn=fn)

    p = sub.add_parser("eval")
    _common(p)
    _teacher_flags(p)
    p.add_argument("--metrics", action="store_true", help="report Acc_r, S_RL and the formula similarity")
    p.add_argument("--task", choices=("funcimg-ots", "formula-ots"), default="funcimg-ots")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--limit", type=int, default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer")
    _common(p)
    p.add_argument("--image", required=True, help="image path; <path>.f32 and <path>.json are read")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("report")
    _common(p)
    _teacher_flags(p)
    p.add_argument("--similarity", action="store_true")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("teacher")
    _common(p)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--export", default=None, help="write hash-teacher states for a dataset's formulas here")
    g.add_argument("--import", dest="import_", default=None, help="read states from this export directory")
    p.add_argument("--data", default=None)
    p.add_argument("--formula", default=None)
    p.add_argument("--teacher-width", type=int, default=None)
    p.add_argument("--teacher-seed", type=int, default=0)
    p.set_defaults(fn=cmd_teacher)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "teacher":
        if args.export and not args.data:
            args_err = "teacher --export needs --data"
            print(args_err, file=sys.stderr)
            return 2
        if args.import_ and not args.formula:
            print("teacher --import needs --formula", file=sys.stderr)
            return 2
    try:
        return args.fn(args)
    except OptreeError as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
