"""Central finite differences, used as the independent oracle for backward passes."""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .tensor import EvaluationError, Tensor


def _scalar(value) -> float:
    v = value.item() if isinstance(value, Tensor) else float(value)
    if not math.isfinite(v):
        raise EvaluationError(f"loss evaluated to {v}")
    return v


def finite_difference_gradient(
    loss_fn: Callable[[], object],
    params: Sequence[Tensor],
    h: float = 1e-5,
    sample_indices: Sequence[tuple[int, int]] | None = None,
) -> np.ndarray:
    """Estimate dL/dθ at each ``(param_index, flat_index)`` by central differences.

    ``loss_fn`` is re-evaluated with the parameter perturbed in place; the
    original value is restored afterwards.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if sample_indices is None:
        sample_indices = [(pi, fi) for pi, p in enumerate(params) for fi in range(p.data.size)]
    out = np.empty(len(sample_indices), dtype=np.float64)
    for n, (pi, fi) in enumerate(sample_indices):
        flat = params[pi].data.reshape(-1)
        orig = flat[fi]
        flat[fi] = orig + h
        up = _scalar(loss_fn())
        flat[fi] = orig - h
        down = _scalar(loss_fn())
        flat[fi] = orig
        out[n] = (up - down) / (2 * h)
    return out


def sample_parameter_indices(params: Sequence[Tensor], count: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Draw ``count`` distinct (param, flat index) pairs uniformly over all entries."""
    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(count, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    out = []
    for k in np.sort(picks):
        pi = int(np.searchsorted(offsets, k, side="right") - 1)
        out.append((pi, int(k - offsets[pi])))
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise |a-b| / max(|a|, |b|, floor).

    Below ``floor`` the comparison is effectively absolute: central differences
    with h=1e-5 carry ~1e-10 of rounding noise, which would dominate a purely
    relative measure on near-zero gradients.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
