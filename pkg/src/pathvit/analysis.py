"""Path diagnostics: angle to the ensemble feature, l1 scale, radial spectrum, ablations."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .config import ModelConfig
from .data import EmptyDatasetError
from .ensemble import EnsembleScale, PathMask, PathSet, decompose_paths, ensemble_combine
from .tensor import DimensionError, Tensor, no_grad
from .vit import TransformerWeights, classify, patch_embed, pool_tokens

LOG_FLOOR = math.log(1e-12)


@dataclass
class PathProfile:
    kind: str  # "angle" or "l1"
    values: list[float]
    defined: list[bool]
    metadata: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        return [
            {"path": i, self.kind: (v if ok else ""), "defined": ok}
            for i, (v, ok) in enumerate(zip(self.values, self.defined))
        ]


@dataclass
class SpectrumProfile:
    radii: list[int]
    relative_log_amplitude: list[float]
    metadata: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        return [{"radius": r, "relative_log_amplitude": v} for r, v in zip(self.radii, self.relative_log_amplitude)]


def _vectors(x, config: ModelConfig | None, token_map: bool) -> np.ndarray:
    """Per-sample analysis vectors, shape ``samples x features``."""
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if config is None:
        return np.atleast_2d(arr)
    batch = arr if arr.ndim == 3 else arr[None]
    if token_map:
        return batch.reshape(batch.shape[0], -1)
    return pool_tokens(Tensor(batch), config).data


def angle_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise angle in [0, pi]; NaN where either row has zero norm.

    Uses ``2 atan2(|u - v|, |u + v|)`` on the unit vectors, which stays
    accurate near 0 and pi where arccos of the cosine loses half the digits.
    """
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        u, v = a / na, b / nb
    ang = 2.0 * np.arctan2(np.linalg.norm(u - v, axis=-1), np.linalg.norm(u + v, axis=-1))
    return np.where((na[..., 0] == 0) | (nb[..., 0] == 0), np.nan, ang)


def cosine_profile(paths: PathSet | Sequence, x_hat, config: ModelConfig | None = None, token_map: bool = False) -> PathProfile:
    """Angle between each path and ``x_hat``, averaged over samples.

    With a ``config`` the token maps are first reduced to the classification
    vector; otherwise inputs are taken as ``samples x features`` already.
    Entries whose norm is zero for every sample are marked undefined.
    """
    target = _vectors(x_hat, config, token_map)
    values, defined = [], []
    for p in paths:
        ang = angle_between(_vectors(p, config, token_map), target)
        ok = ~np.isnan(ang)
        defined.append(bool(ok.any()))
        values.append(float(ang[ok].mean()) if ok.any() else float("nan"))
    return PathProfile("angle", values, defined, {"samples": int(target.shape[0])})


def scale_profile(paths: PathSet | Sequence, config: ModelConfig | None = None, token_map: bool = False) -> PathProfile:
    """Sample-mean l1 norm of each path's classification vector."""
    values = [float(np.abs(_vectors(p, config, token_map)).sum(axis=-1).mean()) for p in paths]
    n = int(_vectors(paths[0], config, token_map).shape[0]) if len(paths) else 0
    return PathProfile("l1", values, [True] * len(values), {"samples": n})


def dft_matrix(n: int) -> np.ndarray:
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n)


def dft2(grid: np.ndarray) -> np.ndarray:
    """2-D DFT over the first two axes by the direct sum, as two matrix products."""
    w_h = dft_matrix(grid.shape[0])
    w_w = dft_matrix(grid.shape[1])
    return np.einsum("uh,hw...,vw->uv...", w_h, grid, w_w)


def radial_index(n: int) -> np.ndarray:
    """Integer radius of each frequency on an ``n x n`` grid (signed frequencies, rounded)."""
    f = np.arange(n)
    f = np.where(f <= n // 2, f, f - n)
    return np.rint(np.hypot(f[:, None], f[None, :])).astype(int)


def token_grid(feature, has_class_token: bool) -> np.ndarray:
    arr = feature.data if isinstance(feature, Tensor) else np.asarray(feature)
    if arr.ndim != 2:
        raise DimensionError(f"expected tokens x d, got {arr.shape}")
    if has_class_token:
        arr = arr[1:]
    side = math.isqrt(arr.shape[0])
    if side * side != arr.shape[0]:
        raise DimensionError(f"{arr.shape[0]} tokens do not form a square grid")
    return arr.reshape(side, side, arr.shape[1]).astype(np.float64)


def radial_amplitude(grid: np.ndarray) -> np.ndarray:
    """Channel-mean DFT magnitude averaged within each integer radius 0..n//2."""
    n = grid.shape[0]
    amp = np.abs(dft2(grid)).mean(axis=-1)
    radius = radial_index(n)
    bins = n // 2 + 1
    out = np.empty(bins)
    for r in range(bins):
        out[r] = amp[radius == r].mean()
    return out


def relative_log_amplitude(binned: np.ndarray, floor: float = LOG_FLOOR) -> np.ndarray:
    """log amplitude relative to radius 0; amplitudes that vanish report ``floor``."""
    tiny = math.exp(floor) * max(float(binned.max()), np.finfo(np.float64).tiny)
    la = np.log(np.maximum(binned, tiny))
    rel = la - la[0]
    rel = np.where(binned <= tiny, floor, rel)
    rel[0] = 0.0
    return rel


def fourier_profile(feature, has_class_token: bool = False, floor: float = LOG_FLOOR) -> SpectrumProfile:
    """Relative log amplitude of a token map's spectrum by integer frequency radius.

    ``feature`` is ``tokens x d``; a batch ``B x tokens x d`` is averaged in the
    amplitude domain before taking logs.
    """
    arr = feature.data if isinstance(feature, Tensor) else np.asarray(feature)
    maps = arr if arr.ndim == 3 else arr[None]
    binned = np.mean([radial_amplitude(token_grid(m, has_class_token)) for m in maps], axis=0)
    rel = relative_log_amplitude(binned, floor)
    return SpectrumProfile(list(range(len(rel))), [float(v) for v in rel], {"samples": len(maps)})


@dataclass
class AblationRow:
    mask: PathMask
    accuracy: float
    correct: int
    total: int

    def to_dict(self) -> dict:
        return {"paths": self.mask.describe(), "accuracy": self.accuracy, "correct": self.correct, "total": self.total}


def path_ablation_eval(
    config: ModelConfig,
    weights: TransformerWeights,
    batches: Iterable[tuple[np.ndarray, np.ndarray]],
    combinations: Sequence[PathMask],
    scale: EnsembleScale | None = None,
) -> list[AblationRow]:
    """Top-1 accuracy of the unmodified head on each path combination.

    Paths are computed once per batch and shared across combinations. Ties
    in argmax resolve to the lowest class index.
    """
    correct = [0] * len(combinations)
    total = 0
    with no_grad():
        for images, labels in batches:
            ps = decompose_paths(patch_embed(images, config, weights), config, weights)
            labels = np.asarray(labels)
            total += len(labels)
            for k, mask in enumerate(combinations):
                logits = classify(ensemble_combine(ps, mask, scale), config, weights).data
                correct[k] += int((np.argmax(logits, axis=-1) == labels).sum())
    if total == 0:
        raise EmptyDatasetError("ablation needs at least one sample")
    return [AblationRow(m, c / total, c, total) for m, c in zip(combinations, correct)]
