"""Funcimg-OTS-formula triples: generation, on-disk layout and re-derivation checks.

Layout of a dataset directory::

    records.jsonl   one record per line (ots ids, constants, formula, seeds, image sidecar + offset)
    images.f32      concatenated row-major float32 image blobs
    manifest.json   generation config, seeds and content hash
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DegenerateImageError
from .formula import tree_to_formula
from .funcimg import FuncImage, MeshGrid, build_meshgrid, image_from_blob, image_sidecar, render_image
from .seeding import derive_seed
from .tree import ConstVec, GenConfig, OperationTree, Ots, ots_to_tree, sample_constants, sample_tree, tree_to_ots

# full-scale counts for reference: 11,028 skeletons / 551,400 pre-training pairs
DESK_SKELETONS = 500
DESK_IMAGES_PER_SKELETON = 4


@dataclass(frozen=True, eq=False)
class Triple:
    tree: OperationTree
    ots: Ots
    consts: ConstVec
    image: FuncImage
    formula: str
    skeleton_seed: int
    const_seed: int

    @property
    def n_nodes(self) -> int:
        return self.tree.n_nodes


def _render(tree, consts, grid, noise_sigma, seed):
    return render_image(tree, consts, grid, noise_sigma, seed)


def make_triples(
    cfg: GenConfig,
    grid: MeshGrid,
    n_skeletons: int,
    images_per_skeleton: int = 1,
    noise_sigma: float = 0.001,
    seed: int = 0,
    max_consts: int = 8,
    max_attempts: int = 1000,
) -> list[Triple]:
    """Distinct skeletons, each with ``images_per_skeleton`` constant draws in [-2, 2].

    A skeleton is redrawn when any of its images fails the finite-coverage gate.
    """
    if n_skeletons < 0 or images_per_skeleton < 1:
        raise ConfigError("need n_skeletons >= 0 and images_per_skeleton >= 1")
    if cfg.max_consts is None or cfg.max_consts > max_consts:
        cfg = replace(cfg, max_consts=max_consts)
    seen: set[tuple[int, ...]] = set()
    out: list[Triple] = []
    for i in range(n_skeletons):
        for attempt in range(max_attempts):
            sk_seed = derive_seed(seed, 1, i, attempt)
            tree = sample_tree(cfg, sk_seed)
            ots = tree_to_ots(tree, cfg.max_ots_len)
            if ots.ids in seen:
                continue
            group = []
            try:
                for j in range(images_per_skeleton):
                    c_seed = derive_seed(seed, 2, i, attempt, j)
                    consts = sample_constants(tree, c_seed)
                    img = _render(tree, consts, grid, noise_sigma, c_seed)
                    group.append(Triple(tree, ots, consts, img, tree_to_formula(tree, consts), sk_seed, c_seed))
            except DegenerateImageError:
                continue
            seen.add(ots.ids)
            out.extend(group)
            break
        else:
            raise ConfigError(f"could not draw skeleton {i} in {max_attempts} attempts")
    return out


def _record(t: Triple, index: int, offset: int, grid: MeshGrid) -> dict:
    return {
        "index": index,
        "ots": list(t.ots.ids),
        "true_len": t.ots.true_len,
        "consts": [float(v) for v in t.consts.values],
        "formula": t.formula,
        "n_nodes": t.n_nodes,
        "skeleton_seed": t.skeleton_seed,
        "const_seed": t.const_seed,
        "image": {"offset": offset, **image_sidecar(t.image, grid)},
    }


def write_dataset(triples: Sequence[Triple], grid: MeshGrid, out_path: str | Path, meta: dict | None = None) -> dict:
    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)
    offset = 0
    with open(out / "records.jsonl", "w") as rec, open(out / "images.f32", "wb") as blob:
        for i, t in enumerate(triples):
            data = np.ascontiguousarray(t.image.values, dtype="<f4").tobytes()
            rec.write(json.dumps(_record(t, i, offset, grid), sort_keys=True) + "\n")
            blob.write(data)
            offset += len(data)
    digest = hashlib.sha256()
    for name in ("records.jsonl", "images.f32"):
        digest.update((out / name).read_bytes())
    manifest = {
        "n_records": len(triples),
        "n_skeletons": len({t.ots.ids for t in triples}),
        "grid": grid.to_dict(),
        "content_hash": digest.hexdigest(),
        **(meta or {}),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def dataset_generate(
    cfg: GenConfig,
    grid: MeshGrid,
    n_skeletons: int = DESK_SKELETONS,
    images_per_skeleton: int = DESK_IMAGES_PER_SKELETON,
    out_path: str | Path = "dataset",
    noise_sigma: float = 0.001,
    seed: int = 0,
    max_consts: int = 8,
) -> dict:
    triples = make_triples(cfg, grid, n_skeletons, images_per_skeleton, noise_sigma, seed, max_consts)
    meta = {
        "gen_config": asdict(cfg),
        "vocab": json.loads(cfg.vocab.to_json()),
        "images_per_skeleton": images_per_skeleton,
        "noise_sigma": noise_sigma,
        "seed": seed,
        "max_consts": max_consts,
    }
    return write_dataset(triples, grid, out_path, meta)


def load_dataset(path: str | Path) -> tuple[list[Triple], dict]:
    from .vocab import OperatorVocab

    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    vocab = OperatorVocab.from_json(json.dumps(manifest["vocab"]))
    blob = np.frombuffer((path / "images.f32").read_bytes(), dtype="<f4")
    triples: list[Triple] = []
    with open(path / "records.jsonl") as fh:
        for line in fh:
            r = json.loads(line)
            ots = Ots(tuple(r["ots"]), r["true_len"])
            consts = ConstVec.visible(r["consts"])
            side = r["image"]
            size = int(np.prod(side["shape"]))
            start = side["offset"] // 4
            img = image_from_blob(blob[start : start + size], side)
            tree = ots_to_tree(ots, consts, vocab)
            triples.append(Triple(tree, ots, consts, img, r["formula"], r["skeleton_seed"], r["const_seed"]))
    return triples, manifest


def grid_from_manifest(manifest: dict) -> MeshGrid:
    g = manifest["grid"]
    return build_meshgrid(g["scales"], g["dims"], g["points_per_dim"])


def verify_triple(t: Triple, grid: MeshGrid, noise_sigma: float, atol: float = 1e-5) -> bool:
    """Re-derive formula and image from (ots, consts, seed) and compare."""
    tree = ots_to_tree(t.ots, t.consts, t.tree.vocab)
    if tree_to_formula(tree, t.consts) != t.formula:
        return False
    img = render_image(tree, t.consts, grid, noise_sigma, t.const_seed)
    if not np.array_equal(img.finite_mask, t.image.finite_mask):
        return False
    return bool(np.allclose(img.values, t.image.values, atol=atol, rtol=1e-6))


def split_by_nodes(triples: Iterable[Triple], n_nodes: int) -> list[Triple]:
    return [t for t in triples if t.n_nodes == n_nodes]
