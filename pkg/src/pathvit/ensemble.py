"""Multi-path form of the transformer stack.

``x_N = x_0 + f_1(x_0) + f_2(x_1) + ... + f_N(x_{N-1})`` where
``f_i(x) = mhsa_i(x) + ffn_i(x + mhsa_i(x))``. Each term is a path; path ``i``
is built from ``i - 1`` whole blocks plus the sub-layers of block ``i``.
Paths can then be pruned from, or re-weighted in, the sum fed to the head.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .config import ConfigError, ModelConfig
from .tensor import Tensor, as_tensor, dtype_for, no_grad
from .vit import (
    TransformerWeights,
    cascade_forward,
    classify,
    downsample,
    ffn,
    mhsa,
    patch_embed,
)

DOWNSAMPLE_MODES = ("synchronized", "per_path")
SCALE_START = 1e-5
SCALE_END = 1.0


class UsageError(RuntimeError):
    """An operation was invoked at a point where it is not defined."""


@dataclass
class PathSet:
    """Path outputs for one batch.

    ``members[k]`` lists the original path indices folded into ``paths[k]``:
    a single index for an ordinary path, several after a merge at a stage
    boundary. ``boundaries`` holds the block index after which each merge
    happened.
    """

    paths: list[Tensor]
    members: list[tuple[int, ...]]
    mode: str = "synchronized"
    boundaries: list[int] = field(default_factory=list)
    downsample_calls: int = 0
    blocks_done: int = 0
    # running residual stream x_i, kept so decomposition costs one forward pass
    stream: Tensor | None = None

    def __len__(self) -> int:
        return len(self.paths)

    def __getitem__(self, k: int) -> Tensor:
        return self.paths[k]

    def __iter__(self):
        return iter(self.paths)

    def index_of(self, path_index: int) -> int:
        """Position of the entry that holds original path ``path_index``."""
        for k, m in enumerate(self.members):
            if path_index in m:
                return k
        raise KeyError(f"path {path_index} not present")

    def prefix_sums(self) -> list[Tensor]:
        out, acc = [], None
        for p in self.paths:
            acc = p if acc is None else acc + p
            out.append(acc)
        return out

    def total(self) -> Tensor:
        return self.prefix_sums()[-1]


@dataclass(frozen=True)
class PathMask:
    keep: tuple[bool, ...]

    def __post_init__(self):
        object.__setattr__(self, "keep", tuple(bool(k) for k in self.keep))
        if not any(self.keep):
            raise ConfigError("path mask must keep at least one path")

    def __len__(self) -> int:
        return len(self.keep)

    @classmethod
    def full(cls, n: int) -> "PathMask":
        return cls((True,) * n)

    @classmethod
    def last(cls, n: int, k: int) -> "PathMask":
        """Keep only the ``k`` longest paths."""
        return cls(tuple(i >= n - k for i in range(n)))

    @classmethod
    def from_indices(cls, n: int, indices: Iterable[int]) -> "PathMask":
        idx = set(indices)
        return cls(tuple(i in idx for i in range(n)))

    def indices(self) -> list[int]:
        return [i for i, k in enumerate(self.keep) if k]

    def describe(self) -> str:
        return "p" + ",p".join(str(i) for i in self.indices())

    def for_pathset(self, ps: PathSet) -> "PathMask":
        """Translate a mask over original path indices to ``ps`` entries.

        A merged entry is kept only when all of its members are kept.
        """
        if len(ps) == len(self) and all(m == (i,) for i, m in enumerate(ps.members)):
            return self
        keep = []
        for m in ps.members:
            flags = {self.keep[i] for i in m}
            if len(flags) > 1:
                raise ConfigError(f"mask splits merged paths {m}; use per_path downsampling")
            keep.append(flags.pop())
        return PathMask(tuple(keep))


@dataclass
class EnsembleScale:
    """Per-path, per-channel weights; row ``i`` is the diagonal applied to path ``i``."""

    lam: Tensor

    @property
    def num_paths(self) -> int:
        return self.lam.shape[0]

    @property
    def dim(self) -> int:
        return self.lam.shape[1]

    def row(self, i: int) -> Tensor:
        return self.lam[i]


def scale_schedule(num_paths: int, schedule: str = "geometric") -> np.ndarray:
    """Initial per-path scale from 1e-5 (shortest) to 1.0 (longest)."""
    if num_paths < 2:
        raise ConfigError("num_paths must be at least 2")
    t = np.arange(num_paths) / (num_paths - 1)
    if schedule == "geometric":
        return SCALE_START * (SCALE_END / SCALE_START) ** t
    if schedule == "linear":
        return SCALE_START + (SCALE_END - SCALE_START) * t
    raise ConfigError(f"unknown scale schedule {schedule!r}")


def init_ensemble_scale(num_paths: int, d: int, schedule: str = "geometric", precision: str = "single") -> EnsembleScale:
    g = scale_schedule(num_paths, schedule)
    lam = np.repeat(g[:, None], d, axis=1).astype(dtype_for(precision))
    return EnsembleScale(Tensor(lam, requires_grad=True))


def parallel_block(x_prev: Tensor, bw: Mapping[str, Tensor], num_heads: int, eps: float = 1e-6) -> Tensor:
    """``f_i(x) = mhsa(x) + ffn(x + mhsa(x))``; the attention output is computed once and reused."""
    m = mhsa(x_prev, bw, num_heads, eps)
    return m + ffn(x_prev + m, bw, eps)


def _start(x0: Tensor, mode: str) -> PathSet:
    if mode not in DOWNSAMPLE_MODES:
        raise ConfigError(f"mode must be one of {DOWNSAMPLE_MODES}")
    x0 = as_tensor(x0)
    return PathSet(paths=[x0], members=[(0,)], mode=mode, stream=x0)


def extend_paths(ps: PathSet, upto: int, config: ModelConfig, weights: TransformerWeights, keep: PathMask | None = None) -> PathSet:
    """Compute paths for blocks ``ps.blocks_done + 1 .. upto`` in place, merging at stage boundaries."""
    downs = {hi: k for k, hi in config.boundaries()}
    if ps.blocks_done == 0 and 0 in downs and 0 not in ps.boundaries:
        downsample_stage(ps, config, weights, keep)
    for i in range(ps.blocks_done + 1, upto + 1):
        p = parallel_block(ps.stream, weights.block(i), config.num_heads, config.eps)
        ps.paths.append(p)
        ps.members.append((i,))
        ps.stream = ps.stream + p
        ps.blocks_done = i
        if i in downs:
            downsample_stage(ps, config, weights, keep)
    return ps


def decompose_paths(
    x0: Tensor,
    config: ModelConfig,
    weights: TransformerWeights,
    mode: str = "synchronized",
    keep: PathMask | None = None,
) -> PathSet:
    """Unroll the stack into paths ``p_0 .. p_N`` with one forward pass.

    For hierarchical configs, ``mode`` selects how paths cross downsampling
    layers (see :func:`downsample_stage`); ``keep`` marks the paths that will
    be combined and is only consulted in ``per_path`` mode.
    """
    ps = _start(x0, mode)
    return extend_paths(ps, config.depth, config, weights, keep)


def downsample_stage(ps: PathSet, config: ModelConfig, weights: TransformerWeights, keep: PathMask | None = None) -> PathSet:
    """Carry paths across the downsampling layer that follows block ``ps.blocks_done``.

    synchronized: all paths are summed and downsampled once; the result is the
    new ``p_0`` (equivalent to the cascade form).
    per_path: each kept path is downsampled on its own, with its own
    LayerNorm statistics; paths outside ``keep`` are summed into one group
    first. Not equivalent to the cascade form unless a single group remains.
    """
    downs = {hi: k for k, hi in config.boundaries()}
    at = ps.blocks_done
    if at not in downs or at in ps.boundaries:
        raise UsageError(f"no pending downsampling layer after block {at}")
    index = downs[at]
    grid = config.stage_grid(config.block_stage(at) if at else 0)
    if ps.mode == "synchronized":
        merged = downsample(ps.stream, index, grid, weights, config.eps)
        ps.paths = [merged]
        ps.members = [tuple(m for ms in ps.members for m in ms)]
        ps.stream = merged
        ps.downsample_calls += 1
    else:
        keep_flags = keep.keep if keep is not None else (True,) * config.num_paths
        groups: list[tuple[tuple[int, ...], Tensor]] = []
        dropped: list[int] = []
        dropped_sum: Tensor | None = None
        for members, p in zip(ps.members, ps.paths):
            if all(keep_flags[i] for i in members):
                groups.append((members, p))
            else:
                dropped.extend(members)
                dropped_sum = p if dropped_sum is None else dropped_sum + p
        if dropped_sum is not None:
            groups.append((tuple(dropped), dropped_sum))
        groups.sort(key=lambda g: min(g[0]))
        ps.paths, ps.members = [], []
        stream = None
        for members, p in groups:
            y = downsample(p, index, grid, weights, config.eps)
            ps.paths.append(y)
            ps.members.append(tuple(sorted(members)))
            stream = y if stream is None else stream + y
        ps.stream = stream
        ps.downsample_calls += len(groups)
    ps.boundaries.append(at)
    return ps


def ensemble_combine(ps: PathSet, mask: PathMask | None = None, scale: EnsembleScale | None = None) -> Tensor:
    """``x_hat = sum over kept i of diag(lambda_i) p_i``; unit scale when ``scale`` is None.

    ``scale`` has one row per entry of ``ps`` or one row per original path;
    in the latter case every kept entry must be a single path.
    """
    n = len(ps)
    if mask is None:
        mask = PathMask.full(n)
    elif len(mask) != n:
        mask = mask.for_pathset(ps)
    rows = list(range(n))
    if scale is not None and scale.num_paths != n:
        total = 1 + max(m for ms in ps.members for m in ms)
        if scale.num_paths != total:
            raise ConfigError(f"EnsembleScale has {scale.num_paths} rows for {n} entries ({total} paths)")
        if any(k and len(ms) > 1 for ms, k in zip(ps.members, mask.keep)):
            raise ConfigError("a kept entry merges several paths; per-path scales need per_path downsampling")
        rows = [ms[0] for ms in ps.members]
    out = None
    for p, k, r in zip(ps.paths, mask.keep, rows):
        if not k:
            continue
        term = p * scale.row(r) if scale is not None else p
        out = term if out is None else out + term
    return out


def ensemble_logits(
    images,
    config: ModelConfig,
    weights: TransformerWeights,
    mask: PathMask | None = None,
    scale: EnsembleScale | None = None,
    mode: str = "synchronized",
) -> tuple[Tensor, PathSet]:
    keep = mask if mode == "per_path" else None
    ps = decompose_paths(patch_embed(images, config, weights), config, weights, mode, keep)
    return classify(ensemble_combine(ps, mask, scale), config, weights), ps


def relative_deviation(a, b) -> float:
    """max |a - b| / max |b| (0 when both are zero)."""
    a = a.data if isinstance(a, Tensor) else np.asarray(a)
    b = b.data if isinstance(b, Tensor) else np.asarray(b)
    a, b = a.astype(np.float64), b.astype(np.float64)
    denom = float(np.max(np.abs(b))) if b.size else 0.0
    num = float(np.max(np.abs(a - b))) if a.size else 0.0
    if denom == 0.0:
        return 0.0 if num == 0.0 else float("inf")
    return num / denom


@dataclass
class EquivalenceReport:
    trials: int
    tolerance: float
    max_logit_deviation: float
    max_prefix_deviation: float
    per_trial: list[dict]
    precision: str
    hierarchical: bool

    @property
    def max_deviation(self) -> float:
        return max(self.max_logit_deviation, self.max_prefix_deviation)

    @property
    def passed(self) -> bool:
        return self.max_deviation <= self.tolerance

    def to_dict(self) -> dict:
        return {
            "trials": self.trials,
            "tolerance": self.tolerance,
            "precision": self.precision,
            "hierarchical": self.hierarchical,
            "max_logit_deviation": self.max_logit_deviation,
            "max_prefix_deviation": self.max_prefix_deviation,
            "max_deviation": self.max_deviation,
            "passed": self.passed,
            "per_trial": self.per_trial,
        }


def verify_equivalence(
    config: ModelConfig,
    weights: TransformerWeights,
    trials: int = 10,
    tolerance: float = 1e-10,
    seed: int = 0,
    batch: int = 2,
) -> EquivalenceReport:
    """Compare cascade and path-ensemble evaluations on random images.

    Checks final logits and, for plain ViTs, every prefix sum against the
    matching intermediate ``x_i``. Hierarchical configs use synchronized
    downsampling and compare logits and the final feature.
    """
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    dt = weights.precision
    shape = (batch, config.image_size, config.image_size, config.in_channels)
    rows = []
    with no_grad():
        for t in range(trials):
            images = rng.standard_normal(shape).astype(dtype_for(dt))
            x0 = patch_embed(images, config, weights)
            x_n, inter = cascade_forward(x0, config, weights)
            ref = classify(x_n, config, weights)
            ps = decompose_paths(x0, config, weights, "synchronized")
            x_hat = ensemble_combine(ps)
            got = classify(x_hat, config, weights)
            logit_dev = relative_deviation(got, ref)
            if config.hierarchical:
                prefix_dev = relative_deviation(x_hat, x_n)
            else:
                prefix_dev = max(relative_deviation(s, x) for s, x in zip(ps.prefix_sums(), inter))
            rows.append({"trial": t, "logit_deviation": logit_dev, "prefix_deviation": prefix_dev})
    return EquivalenceReport(
        trials=trials,
        tolerance=tolerance,
        max_logit_deviation=max(r["logit_deviation"] for r in rows),
        max_prefix_deviation=max(r["prefix_deviation"] for r in rows),
        per_trial=rows,
        precision=dt,
        hierarchical=config.hierarchical,
    )


def masks_from_spec(n: int, spec: str) -> PathMask:
    """Parse ``all``, ``last:K``, ``from:S`` or a comma list of indices."""
    spec = spec.strip()
    if spec == "all":
        return PathMask.full(n)
    if spec.startswith("last:"):
        return PathMask.last(n, int(spec[5:]))
    if spec.startswith("from:"):
        s = int(spec[5:])
        return PathMask(tuple(i >= s for i in range(n)))
    return PathMask.from_indices(n, (int(v) for v in spec.split(",") if v.strip()))

