"""Early-exit inference over a path prefix, and analytic FLOPs accounting.

FLOPs convention: one multiply-accumulate counts as 2 FLOPs. Matrix
products are counted exactly; LayerNorm and softmax are charged a fixed
number of FLOPs per element. Residual/path additions, GELU, token pooling and
EnsembleScale multiplies are not counted, so the scale is FLOPs-free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import ConfigError, ModelConfig
from .ensemble import EnsembleScale, PathMask, PathSet, _start, extend_paths, init_ensemble_scale
from .tensor import Tensor, dtype_for, no_grad, softmax
from .vit import TransformerWeights, classify, patch_embed

FLOPS_CONVENTION = "1 MAC = 2 FLOPs; LayerNorm 7 FLOPs/element; softmax 5 FLOPs/element; elementwise adds, GELU, pooling, scaling uncounted"
LAYERNORM_FLOPS_PER_ELEMENT = 7
SOFTMAX_FLOPS_PER_ELEMENT = 5
FLOPS_MODES = ("standard", "ensemble_full", "ensemble_pruned", "dynamic_early", "dynamic_full")


def default_split(depth: int) -> int:
    """Number of prefix paths in the early exit: 7 for 12 blocks, else ceil((N+1)/2)+1 capped at N."""
    if depth == 12:
        return 7
    return max(1, min(math.ceil((depth + 1) / 2) + 1, depth))


@dataclass
class DynamicConfig:
    split: int
    threshold: float = 0.5
    es1: EnsembleScale | None = None
    es2: EnsembleScale | None = None
    exit_weights: tuple[float, float] = (0.5, 0.5)

    def validate(self, depth: int) -> None:
        if not 1 <= self.split <= depth:
            raise ConfigError(f"split must be in [1, {depth}], got {self.split}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError("threshold must lie in [0, 1]")
        if self.es1 is not None and self.es1.num_paths != self.split:
            raise ConfigError(f"ES1 needs {self.split} rows, has {self.es1.num_paths}")
        if self.es2 is not None and self.es2.num_paths != depth + 1:
            raise ConfigError(f"ES2 needs {depth + 1} rows, has {self.es2.num_paths}")

    @classmethod
    def create(cls, config: ModelConfig, split: int | None = None, threshold: float = 0.5, precision: str = "single") -> "DynamicConfig":
        if config.hierarchical:
            raise ConfigError("early exit is defined for plain (non-hierarchical) configs")
        k = default_split(config.depth) if split is None else split
        d = config.embed_dim
        cfg = cls(k, threshold, init_ensemble_scale(k, d, precision=precision) if k >= 2 else _unit_scale(1, d, precision),
                  init_ensemble_scale(config.depth + 1, d, precision=precision))
        cfg.validate(config.depth)
        return cfg


def _unit_scale(rows: int, d: int, precision: str) -> EnsembleScale:
    return EnsembleScale(Tensor(np.ones((rows, d), dtype=dtype_for(precision)), requires_grad=True))


# FLOPs


def layernorm_flops(tokens: int, width: int) -> int:
    return LAYERNORM_FLOPS_PER_ELEMENT * tokens * width


def block_flops(config: ModelConfig, width: int, tokens: int) -> dict[str, int]:
    hidden = config.hidden_dim(width)
    return {
        "layernorm": 2 * layernorm_flops(tokens, width),
        "qkvo": 4 * 2 * tokens * width * width,
        "attention_scores": 2 * tokens * tokens * width,
        "softmax": SOFTMAX_FLOPS_PER_ELEMENT * config.num_heads * tokens * tokens,
        "attention_values": 2 * tokens * tokens * width,
        "ffn": 2 * 2 * tokens * width * hidden,
    }


def patch_embed_flops(config: ModelConfig) -> int:
    return 2 * config.num_patches * config.patch_size**2 * config.in_channels * config.embed_dim


def downsample_flops(config: ModelConfig, index: int) -> int:
    stage = [s for s, (_, f) in enumerate(config.stages) if f][index]
    w = config.stage_dim(stage)
    merged = config.stage_grid(stage) ** 2 // 4
    return layernorm_flops(merged, 4 * w) + 2 * merged * 4 * w * 2 * w


def classifier_flops(config: ModelConfig) -> int:
    df = config.final_dim
    return layernorm_flops(1, df) + 2 * df * config.num_classes


def block_cost(config: ModelConfig, i: int) -> int:
    s = config.block_stage(i)
    g = config.stage_grid(s)
    tokens = g * g + (1 if config.token_mode == "class_token" else 0)
    return sum(block_flops(config, config.stage_dim(s), tokens).values())


def downsample_groups(config: ModelConfig, keep: PathMask | None = None) -> list[int]:
    """Separate downsampling applications per boundary when paths stay separate.

    Each kept path crosses a boundary on its own; pruned paths are summed first
    and cross as one group.
    """
    flags = keep.keep if keep is not None else (True,) * config.num_paths
    if len(flags) != config.num_paths:
        raise ConfigError(f"mask has {len(flags)} entries for {config.num_paths} paths")
    out = []
    for _, hi in config.boundaries():
        alive = flags[: hi + 1]
        out.append(sum(alive) + (1 if not all(alive) else 0))
    return out


@dataclass
class FlopsReport:
    mode: str
    components: dict[str, int]
    per_block: list[int]
    total: int
    convention: str = FLOPS_CONVENTION

    def to_dict(self) -> dict:
        return {"mode": self.mode, "convention": self.convention, "total": self.total, "components": dict(self.components), "per_block": list(self.per_block)}


def flops_count(
    config: ModelConfig,
    mode: str = "standard",
    mask: PathMask | None = None,
    split: int | None = None,
    downsample_mode: str = "per_path",
) -> FlopsReport:
    """Analytic FLOPs of one forward pass for a single image.

    ``ensemble_*`` modes on hierarchical configs add the extra downsampling
    applications needed to keep paths separate (``downsample_mode="per_path"``);
    ``synchronized`` merges all paths at each boundary and costs the same as
    ``standard``.
    """
    if mode not in FLOPS_MODES:
        raise ConfigError(f"mode must be one of {FLOPS_MODES}")
    per_block = [block_cost(config, i) for i in range(1, config.depth + 1)]
    ds = [downsample_flops(config, k) for k, _ in config.boundaries()]
    comp = {
        "patch_embed": patch_embed_flops(config),
        "blocks": sum(per_block),
        "downsample": sum(ds),
        "downsample_surplus": 0,
        "classifier": classifier_flops(config),
        "combine": 0,
    }
    if mode in ("ensemble_full", "ensemble_pruned") and config.hierarchical and downsample_mode == "per_path":
        keep = mask if mode == "ensemble_pruned" else None
        if mode == "ensemble_pruned" and mask is None:
            raise ConfigError("ensemble_pruned needs a mask")
        comp["downsample_surplus"] = sum((g - 1) * c for g, c in zip(downsample_groups(config, keep), ds))
    elif mode in ("dynamic_early", "dynamic_full"):
        if config.hierarchical:
            raise ConfigError("early exit is defined for plain (non-hierarchical) configs")
        k = default_split(config.depth) if split is None else split
        if not 1 <= k <= config.depth:
            raise ConfigError(f"split must be in [1, {config.depth}]")
        if mode == "dynamic_early":
            per_block = per_block[: k - 1]
            comp["blocks"] = sum(per_block)
        else:
            comp["classifier"] = 2 * comp["classifier"]
    comp = {k: int(v) for k, v in comp.items()}
    return FlopsReport(mode, comp, [int(b) for b in per_block], int(sum(comp.values())))


# early-exit forward


@dataclass
class DynamicResult:
    predictions: np.ndarray
    exited_early: np.ndarray
    executed_flops: np.ndarray
    confidence: np.ndarray
    logits: np.ndarray
    early_cost: int = 0
    full_cost: int = 0
    extras: dict = field(default_factory=dict)

    @property
    def mean_flops(self) -> float:
        return float(self.executed_flops.mean())

    @property
    def exit_rate(self) -> float:
        return float(self.exited_early.mean())


def _scaled_sum(paths: list[Tensor], scale: EnsembleScale | None) -> Tensor:
    out = None
    for i, p in enumerate(paths):
        term = p * scale.row(i) if scale is not None else p
        out = term if out is None else out + term
    return out


def early_logits(ps: PathSet, config: ModelConfig, weights: TransformerWeights, dcfg: DynamicConfig) -> Tensor:
    return classify(_scaled_sum(ps.paths[: dcfg.split], dcfg.es1), config, weights)


def full_logits(ps: PathSet, config: ModelConfig, weights: TransformerWeights, dcfg: DynamicConfig) -> Tensor:
    return classify(_scaled_sum(ps.paths, dcfg.es2), config, weights)


def _subset(ps: PathSet, rows: np.ndarray) -> PathSet:
    return PathSet(
        paths=[Tensor(p.data[rows]) for p in ps.paths],
        members=list(ps.members),
        mode=ps.mode,
        blocks_done=ps.blocks_done,
        stream=Tensor(ps.stream.data[rows]),
    )


def dynamic_forward(images, config: ModelConfig, weights: TransformerWeights, dcfg: DynamicConfig) -> DynamicResult:
    """Exit after the first ``split`` paths when max-softmax confidence >= threshold.

    Samples that do not exit continue through the remaining blocks and are
    classified from all paths with the second scale group.
    """
    dcfg.validate(config.depth)
    early = flops_count(config, "dynamic_early", split=dcfg.split).total
    full = flops_count(config, "dynamic_full", split=dcfg.split).total
    with no_grad():
        x0 = patch_embed(images, config, weights)
        if x0.ndim == 2:
            x0 = x0.reshape(1, *x0.shape)
        ps = extend_paths(_start(x0, "synchronized"), dcfg.split - 1, config, weights)
        logits1 = early_logits(ps, config, weights, dcfg).data
        # double-precision confidence so that tau=1 only passes a true certainty
        conf = softmax(Tensor(logits1.astype(np.float64)), axis=-1).data.max(axis=-1)
        exits = conf >= dcfg.threshold
        logits = logits1.copy()
        rest = np.flatnonzero(~exits)
        if rest.size:
            sub = extend_paths(_subset(ps, rest), config.depth, config, weights)
            logits[rest] = full_logits(sub, config, weights, dcfg).data
    flops = np.where(exits, early, full).astype(np.int64)
    return DynamicResult(np.argmax(logits, axis=-1), exits, flops, conf, logits, early, full)


def threshold_sweep(batches, config: ModelConfig, weights: TransformerWeights, dcfg: DynamicConfig, thresholds) -> list[dict]:
    """Accuracy, mean executed FLOPs and exit rate for each threshold."""
    batches = list(batches)
    rows = []
    for tau in thresholds:
        cfg = DynamicConfig(dcfg.split, float(tau), dcfg.es1, dcfg.es2, dcfg.exit_weights)
        correct = total = exited = 0
        flops = 0
        for images, labels in batches:
            r = dynamic_forward(images, config, weights, cfg)
            correct += int((r.predictions == np.asarray(labels)).sum())
            total += len(labels)
            exited += int(r.exited_early.sum())
            flops += int(r.executed_flops.sum())
        if total == 0:
            raise ValueError("threshold sweep needs at least one sample")
        rows.append({"threshold": float(tau), "accuracy": correct / total, "mean_flops": flops / total, "exit_rate": exited / total})
    return rows
