"""Self-distillation from longer paths to shorter ones.

Two KL terms per student/teacher pair ``(p_i, p_{i+delta})``:

* prediction logits: both paths go through the shared head (LayerNorm +
  linear) with the head parameters detached;
* token relations: ``softmax(p p^T / (sqrt(d) T))`` row distributions.

The teacher side is always detached, so a teacher only learns from the main
classification loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence, Union

import numpy as np

from .config import ConfigError, ModelConfig
from .ensemble import PathSet
from .tensor import DimensionError, Tensor, as_tensor, check_finite, kl_from_log_probs, log_softmax
from .vit import TransformerWeights, classify

Weights = Union[float, Sequence[float]]


@dataclass(frozen=True)
class DistillConfig:
    delta: int = 2
    start: int = 5
    temperature: float = 1.0
    alpha: Weights = 1.0
    beta: Weights = 1.0
    include_class_token: bool = True

    def validate(self, depth: int) -> None:
        if self.delta < 1:
            raise ConfigError("delta must be a positive integer")
        if self.start < 0 or self.start + self.delta > depth:
            raise ConfigError(f"need 0 <= start and start + delta <= depth; got start={self.start}, delta={self.delta}, depth={depth}")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")
        for name in ("alpha", "beta"):
            vals = getattr(self, name)
            vals = [vals] if np.isscalar(vals) else list(vals)
            if any(v < 0 for v in vals):
                raise ConfigError(f"{name} weights must be non-negative")
            if len(vals) > 1 and len(vals) < depth + 1:
                raise ConfigError(f"{name} needs one weight per path ({depth + 1}), got {len(vals)}")

    def weight(self, name: str, i: int) -> float:
        vals = getattr(self, name)
        return float(vals) if np.isscalar(vals) else float(vals[i])

    def pairs(self, depth: int) -> list[tuple[int, int]]:
        """(student, teacher) path indices, students ``start .. depth - delta``."""
        self.validate(depth)
        return [(i, i + self.delta) for i in range(self.start, depth - self.delta + 1)]

    @classmethod
    def for_depth(cls, depth: int, **kw) -> "DistillConfig":
        """Defaults with ``start`` clamped so at least one pair exists."""
        delta = kw.pop("delta", 2)
        start = kw.pop("start", min(5, max(depth - delta, 0)))
        return cls(delta=delta, start=start, **kw)


def logit_kl(student_logits: Tensor, teacher_logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Batch-mean KL(softmax(s/T) || softmax(t/T))."""
    log_s = log_softmax(as_tensor(student_logits) * (1.0 / temperature), axis=-1)
    log_t = log_softmax(as_tensor(teacher_logits) * (1.0 / temperature), axis=-1)
    return kl_from_log_probs(log_s, log_t).mean()


def logit_distill_loss(p_s: Tensor, p_t: Tensor, config: ModelConfig, weights: TransformerWeights, temperature: float = 1.0) -> Tensor:
    """Prediction-logit distillation through the frozen shared head."""
    if p_s.shape != p_t.shape:
        raise DimensionError(f"student {p_s.shape} and teacher {p_t.shape} differ")
    s = check_finite(classify(p_s, config, weights, frozen=True), "student logits")
    t = check_finite(classify(as_tensor(p_t).detach(), config, weights, frozen=True), "teacher logits")
    return logit_kl(s, t, temperature)


def _relation_logits(p: Tensor, temperature: float) -> Tensor:
    p = as_tensor(p)
    d = p.shape[-1]
    axes = list(range(p.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return (p @ p.transpose(*axes)) * (1.0 / (math.sqrt(d) * temperature))


def relation_matrix(p: Tensor, temperature: float = 1.0) -> Tensor:
    """Row-stochastic token relation ``softmax(p p^T / (sqrt(d) T))``."""
    return log_softmax(_relation_logits(p, temperature), axis=-1).exp()


def relation_kl(log_r_s: Tensor, log_r_t: Tensor) -> Tensor:
    """Mean over rows (and batch) of KL between relation rows, given log-relations."""
    return kl_from_log_probs(log_r_s, log_r_t).mean()


def hidden_state_loss(p_s: Tensor, p_t: Tensor, temperature: float = 1.0, include_class_token: bool = True) -> Tensor:
    p_s, p_t = as_tensor(p_s), as_tensor(p_t)
    if p_s.shape[-2] != p_t.shape[-2]:
        raise DimensionError(f"token counts differ: {p_s.shape[-2]} vs {p_t.shape[-2]}")
    p_t = p_t.detach()
    if not include_class_token:
        p_s, p_t = p_s[..., 1:, :], p_t[..., 1:, :]
    log_s = log_softmax(_relation_logits(p_s, temperature), axis=-1)
    log_t = log_softmax(_relation_logits(p_t, temperature), axis=-1)
    return relation_kl(log_s, log_t)


def total_kd_loss(
    ps: PathSet,
    config: ModelConfig,
    weights: TransformerWeights,
    cfg: DistillConfig,
    teachers: Mapping[int, Tensor] | None = None,
    head: TransformerWeights | None = None,
) -> Tensor:
    """Weighted sum of both KL terms over all (p_i, p_{i+delta}) pairs, i from ``start``.

    Teachers and the head are stop-gradient inputs. ``teachers`` (path index
    to tensor) and ``head`` pin them to given values instead, which turns the
    loss into the surrogate whose ordinary derivative equals the stop-gradient
    one; finite-difference checks rely on this.
    """
    head = weights if head is None else head
    pairs = cfg.pairs(config.depth)
    dtype = ps.paths[0].dtype
    total = Tensor(np.zeros((), dtype=dtype))
    include_cls = cfg.include_class_token or config.token_mode != "class_token"
    for s, t in pairs:
        try:
            ks, kt = ps.index_of(s), ps.index_of(t)
        except KeyError:
            raise ConfigError(f"pair (p{s}, p{t}) is not available in this path set") from None
        p_s = ps.paths[ks]
        p_t = ps.paths[kt] if teachers is None else as_tensor(teachers[t])
        if len(ps.members[ks]) > 1 or len(ps.members[kt]) > 1 or p_s.shape != p_t.shape:
            raise ConfigError(f"pair (p{s}, p{t}) crosses a stage boundary")
        a, b = cfg.weight("alpha", s), cfg.weight("beta", s)
        if a:
            total = total + logit_distill_loss(p_s, p_t, config, head, cfg.temperature) * a
        if b:
            total = total + hidden_state_loss(p_s, p_t, cfg.temperature, include_cls) * b
    return total
