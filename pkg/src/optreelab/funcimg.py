"""Multi-scale meshgrids and function-image rendering."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DegenerateImageError
from .tree import ConstVec, OperationTree, eval_tree

DEFAULT_SCALES = (1.0, 2.0, 4.0)
DEFAULT_POINTS = 64
DEFAULT_NOISE = 0.001
MIN_FINITE_FRACTION = 0.5


@dataclass(frozen=True, eq=False)
class MeshGrid:
    scales: tuple[float, ...]
    dims: int
    points_per_dim: int
    coordinates: np.ndarray  # [n_s x d x n_delta]

    @property
    def n_channels(self) -> int:
        return len(self.scales)

    @property
    def n_points(self) -> int:
        return self.points_per_dim**self.dims

    def points(self, channel: int) -> np.ndarray:
        """Cartesian product of the channel's axes, shape [n_delta**d x d], row-major."""
        axes = self.coordinates[channel]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=1)

    def to_dict(self) -> dict:
        return {"scales": list(self.scales), "dims": self.dims, "points_per_dim": self.points_per_dim}


def build_meshgrid(
    scales: Sequence[float] = DEFAULT_SCALES, dims: int = 1, points_per_dim: int = DEFAULT_POINTS
) -> MeshGrid:
    scales = tuple(float(s) for s in scales)
    if not scales:
        raise ConfigError("at least one scale is required")
    if any(not np.isfinite(s) or s <= 0 for s in scales):
        raise ConfigError(f"scales must be positive, got {scales}")
    if points_per_dim < 2:
        raise ConfigError("points_per_dim must be >= 2")
    if dims < 1:
        raise ConfigError("dims must be >= 1")
    axis = np.linspace(-1.0, 1.0, points_per_dim)
    coords = np.stack([np.tile(s * axis, (dims, 1)) for s in scales])
    coords.flags.writeable = False
    return MeshGrid(scales, dims, points_per_dim, coords)


@dataclass(frozen=True, eq=False)
class FuncImage:
    """Rendered image. ``values`` are standardized per channel; the raw
    (noisy) evaluation is ``values * channel_std + channel_mean`` on finite
    positions."""

    values: np.ndarray  # [n_s x n_points]
    finite_mask: np.ndarray
    noise_sigma: float
    seed: int
    channel_mean: np.ndarray
    channel_std: np.ndarray

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def raw_values(self) -> np.ndarray:
        raw = self.values * self.channel_std[:, None] + self.channel_mean[:, None]
        return np.where(self.finite_mask, raw, np.nan)

    @property
    def finite_fraction(self) -> float:
        return float(self.finite_mask.mean())


def render_raw(tree: OperationTree, consts: ConstVec, grid: MeshGrid) -> np.ndarray:
    """Noise-free evaluation on every channel, NaN where undefined."""
    return np.stack([eval_tree(tree, consts, grid.points(s)) for s in range(grid.n_channels)])


def render_image(
    tree: OperationTree,
    consts: ConstVec,
    grid: MeshGrid,
    noise_sigma: float = DEFAULT_NOISE,
    seed: int = 0,
    standardize: bool = True,
    min_finite: float = MIN_FINITE_FRACTION,
) -> FuncImage:
    raw = render_raw(tree, consts, grid)
    finite = np.isfinite(raw)
    if finite.mean() < min_finite:
        raise DegenerateImageError(f"only {finite.mean():.1%} of the image is finite")
    if noise_sigma > 0:
        rng = np.random.default_rng(int(seed) % 2**64)
        raw = raw + noise_sigma * rng.standard_normal(raw.shape)
        finite &= np.isfinite(raw)
    raw = np.where(finite, raw, 0.0)
    n_s = grid.n_channels
    mean = np.zeros(n_s)
    std = np.ones(n_s)
    if standardize:
        for s in range(n_s):
            vals = raw[s][finite[s]]
            if vals.size:
                mean[s] = vals.mean()
                sd = vals.std()
                std[s] = sd if sd > 0 and np.isfinite(sd) else 1.0
        values = np.where(finite, (raw - mean[:, None]) / std[:, None], 0.0)
        if not np.all(np.isfinite(values)):
            # overflowed standardization (huge dynamic range); treat as degenerate
            raise DegenerateImageError("standardized image is not finite")
    else:
        values = raw
    for arr in (values, finite, mean, std):
        arr.flags.writeable = False
    return FuncImage(values, finite, float(noise_sigma), int(seed), mean, std)


# ---------------------------------------------------------------------------
# storage: float32 blob + JSON sidecar


def mask_rle(mask: np.ndarray) -> list[int]:
    """Run lengths of the flattened mask, starting with a run of True (possibly 0)."""
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    runs: list[int] = []
    current = True
    count = 0
    for bit in flat:
        if bit == current:
            count += 1
        else:
            runs.append(count)
            current = bit
            count = 1
    runs.append(count)
    return runs


def mask_from_rle(runs: Sequence[int], shape: tuple[int, ...]) -> np.ndarray:
    out = np.zeros(int(np.prod(shape)), dtype=bool)
    pos = 0
    bit = True
    for r in runs:
        out[pos : pos + r] = bit
        pos += r
        bit = not bit
    if pos != out.size:
        raise ValueError("mask run lengths do not cover the image")
    return out.reshape(shape)


def image_sidecar(img: FuncImage, grid: MeshGrid) -> dict:
    return {
        "shape": list(img.shape),
        "scales": list(grid.scales),
        "dims": grid.dims,
        "points_per_dim": grid.points_per_dim,
        "noise_sigma": img.noise_sigma,
        "seed": img.seed,
        "mask_rle": mask_rle(img.finite_mask),
        "channel_mean": img.channel_mean.tolist(),
        "channel_std": img.channel_std.tolist(),
    }


def image_from_blob(blob: np.ndarray, sidecar: dict) -> FuncImage:
    shape = tuple(sidecar["shape"])
    values = np.asarray(blob, dtype=np.float32).reshape(shape).astype(np.float64)
    mask = mask_from_rle(sidecar["mask_rle"], shape)
    return FuncImage(
        values,
        mask,
        float(sidecar["noise_sigma"]),
        int(sidecar["seed"]),
        np.asarray(sidecar["channel_mean"], dtype=np.float64),
        np.asarray(sidecar["channel_std"], dtype=np.float64),
    )


def save_image(img: FuncImage, grid: MeshGrid, path: str | Path) -> None:
    """Write ``<path>.f32`` (row-major float32) and ``<path>.json``."""
    path = Path(path)
    path.with_suffix(".f32").write_bytes(np.ascontiguousarray(img.values, dtype="<f4").tobytes())
    path.with_suffix(".json").write_text(json.dumps(image_sidecar(img, grid), sort_keys=True))


def load_image(path: str | Path) -> FuncImage:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(".json").read_text())
    blob = np.frombuffer(path.with_suffix(".f32").read_bytes(), dtype="<f4")
    return image_from_blob(blob, sidecar)


def grid_from_sidecar(sidecar: dict) -> MeshGrid:
    return build_meshgrid(sidecar["scales"], sidecar["dims"], sidecar["points_per_dim"])
