"""Desk-scale training loop and evaluation."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .checkpoint import Checkpoint
from .config import ConfigError, ModelConfig
from .data import Dataset, EmptyDatasetError
from .distill import DistillConfig, total_kd_loss
from .dynamic import DynamicConfig, early_logits, full_logits
from .ensemble import EnsembleScale, PathMask, decompose_paths, ensemble_combine, init_ensemble_scale
from .tensor import Tensor, cross_entropy, no_grad
from .vit import TransformerWeights, cascade_forward, classify, init_weights, patch_embed

log = logging.getLogger(__name__)

OPTIMIZERS = ("adamw", "sgd_momentum")


class DivergenceError(ArithmeticError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step
        self.value = value


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.05
    optimizer: str = "adamw"
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    warmup_steps: int = 0
    seed: int = 0
    precision: str = "single"
    ce_weight: float = 1.0
    kd_weight: float = 1.0
    distill: DistillConfig | None = None
    mask: PathMask | None = None
    ensemble_scale: bool = False
    scale_schedule: str = "geometric"
    dynamic_split: int | None = None  # enables two-exit training when set
    dynamic_exit_weights: tuple[float, float] = (0.5, 0.5)
    init_std: float = 0.02

    def validate(self, model: ModelConfig) -> None:
        if self.epochs < 0 or self.batch_size <= 0:
            raise ConfigError("epochs must be >= 0 and batch_size > 0")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be non-negative")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.distill is not None:
            self.distill.validate(model.depth)
        if self.mask is not None and len(self.mask) != model.num_paths:
            raise ConfigError(f"mask has {len(self.mask)} entries for {model.num_paths} paths")
        if self.dynamic_split is not None and model.hierarchical:
            raise ConfigError("dynamic training needs a plain config")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["distill"] = asdict(self.distill) if self.distill else None
        d["mask"] = list(self.mask.keep) if self.mask else None
        return d


def _decays(name: str) -> bool:
    return name.startswith("weights.") and name.endswith(".w")


class Optimizer:
    """AdamW (decoupled decay) or SGD with momentum over named parameters."""

    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig, total_steps: int):
        self.params = params
        self.cfg = cfg
        self.total_steps = max(total_steps, 1)
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()} if cfg.optimizer == "adamw" else {}

    def lr_at(self, step: int) -> float:
        base = self.cfg.lr
        if self.cfg.warmup_steps and step < self.cfg.warmup_steps:
            return base * (step + 1) / self.cfg.warmup_steps
        return base * 0.5 * (1.0 + math.cos(math.pi * min(step, self.total_steps) / self.total_steps))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        lr = self.lr_at(self.step_count)
        self.step_count += 1
        cfg = self.cfg
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            dt = p.data.dtype
            if cfg.optimizer == "adamw":
                b1, b2 = cfg.betas
                m, v = self.m[name], self.v[name]
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                mhat = m / (1 - b1**self.step_count)
                vhat = v / (1 - b2**self.step_count)
                if _decays(name):
                    p.data *= dt.type(1.0 - lr * cfg.weight_decay)
                p.data -= (lr * mhat / (np.sqrt(vhat) + 1e-8)).astype(dt)
            else:
                buf = self.m[name]
                if _decays(name):
                    g = g + cfg.weight_decay * p.data
                buf *= cfg.momentum
                buf += g
                p.data -= (lr * buf).astype(dt)

    def state_tensors(self) -> dict[str, Tensor]:
        out = {}
        for k in self.params:
            out[f"opt.m.{k}"] = Tensor(self.m[k])
            if self.v:
                out[f"opt.v.{k}"] = Tensor(self.v[k])
        return out


@dataclass
class Model:
    """Weights plus the optional combination parameters trained alongside them."""

    config: ModelConfig
    weights: TransformerWeights
    scale: EnsembleScale | None = None
    dynamic: DynamicConfig | None = None
    mask: PathMask | None = None

    def named_parameters(self) -> dict[str, Tensor]:
        out = {f"weights.{k}": v for k, v in self.weights.items()}
        if self.scale is not None:
            out["scale.lam"] = self.scale.lam
        if self.dynamic is not None:
            out["dynamic.es1"] = self.dynamic.es1.lam
            out["dynamic.es2"] = self.dynamic.es2.lam
        return out

    def forward(self, images):
        """Return (final logits, early logits or None, path set)."""
        x0 = patch_embed(images, self.config, self.weights)
        mode = "per_path" if self.config.hierarchical and (self.mask is not None or self.scale is not None) else "synchronized"
        ps = decompose_paths(x0, self.config, self.weights, mode, self.mask)
        if self.dynamic is not None:
            return full_logits(ps, self.config, self.weights, self.dynamic), early_logits(ps, self.config, self.weights, self.dynamic), ps
        x_hat = ensemble_combine(ps, self.mask, self.scale)
        return classify(x_hat, self.config, self.weights), None, ps

    def predict(self, images) -> np.ndarray:
        with no_grad():
            return np.argmax(self.forward(images)[0].data, axis=-1)


def build_model(model_cfg: ModelConfig, cfg: TrainConfig) -> Model:
    weights = init_weights(model_cfg, seed=cfg.seed, precision=cfg.precision, std=cfg.init_std).requires_grad_(True)
    scale = None
    if cfg.ensemble_scale:
        scale = init_ensemble_scale(model_cfg.num_paths, model_cfg.final_dim, cfg.scale_schedule, cfg.precision)
    dynamic = None
    if cfg.dynamic_split is not None:
        dynamic = DynamicConfig.create(model_cfg, cfg.dynamic_split, precision=cfg.precision)
        dynamic.exit_weights = cfg.dynamic_exit_weights
    return Model(model_cfg, weights, scale, dynamic, cfg.mask)


def loss_terms(model: Model, images, labels, cfg: TrainConfig) -> tuple[Tensor, Tensor]:
    """Total loss and the logits used for accuracy."""
    logits, early, ps = model.forward(images)
    if early is not None:
        w1, w2 = model.dynamic.exit_weights
        loss = cross_entropy(early, labels) * w1 + cross_entropy(logits, labels) * w2
    else:
        loss = cross_entropy(logits, labels) * cfg.ce_weight
    if cfg.distill is not None and cfg.kd_weight:
        loss = loss + total_kd_loss(ps, model.config, model.weights, cfg.distill) * cfg.kd_weight
    return loss, logits


def train(cfg: TrainConfig, model_cfg: ModelConfig, dataset: Dataset, model: Model | None = None) -> tuple[Checkpoint, list[dict]]:
    """Run the loop; returns the final checkpoint and one metrics row per epoch."""
    cfg.validate(model_cfg)
    if len(dataset) == 0:
        raise EmptyDatasetError("training set is empty")
    model = model or build_model(model_cfg, cfg)
    params = model.named_parameters()
    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    opt = Optimizer(params, cfg, cfg.epochs * steps_per_epoch)
    history: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        total_loss = 0.0
        correct = seen = 0
        for images, labels in dataset.batches(cfg.batch_size, seed=cfg.seed, epoch=epoch, precision=cfg.precision):
            opt.zero_grad()
            loss, logits = loss_terms(model, images, labels, cfg)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(step, value)
            loss.backward()
            opt.step()
            step += 1
            total_loss += value * len(labels)
            correct += int((np.argmax(logits.data, axis=-1) == labels).sum())
            seen += len(labels)
        row = {"epoch": epoch + 1, "loss": total_loss / seen, "accuracy": correct / seen, "lr": opt.lr_at(step - 1)}
        history.append(row)
        log.info("epoch %d loss %.4f acc %.4f", row["epoch"], row["loss"], row["accuracy"])
    return make_checkpoint(model, cfg, opt, history), history


def make_checkpoint(model: Model, cfg: TrainConfig, opt: Optimizer | None, history: list[dict]) -> Checkpoint:
    extra = {}
    if model.dynamic is not None:
        extra["dynamic.es1"] = model.dynamic.es1.lam
        extra["dynamic.es2"] = model.dynamic.es2.lam
    meta = {
        "epoch": len(history),
        "seed": cfg.seed,
        "loss_curve": [r["loss"] for r in history],
        "accuracy_curve": [r["accuracy"] for r in history],
        "train_config": cfg.to_dict(),
    }
    if model.dynamic is not None:
        meta["dynamic"] = {"split": model.dynamic.split, "threshold": model.dynamic.threshold}
    if opt is not None:
        extra.update(opt.state_tensors())
        meta["optimizer"] = {"name": cfg.optimizer, "step": opt.step_count}
    return Checkpoint(model.config, model.weights, model.scale, extra, meta)


def model_from_checkpoint(ckpt: Checkpoint) -> Model:
    dynamic = None
    if "dynamic.es1" in ckpt.extra:
        dmeta = ckpt.metadata.get("dynamic", {})
        dynamic = DynamicConfig(
            int(dmeta.get("split", ckpt.extra["dynamic.es1"].shape[0])),
            float(dmeta.get("threshold", 0.5)),
            EnsembleScale(ckpt.extra["dynamic.es1"]),
            EnsembleScale(ckpt.extra["dynamic.es2"]),
        )
    mask = None
    tc = ckpt.metadata.get("train_config") or {}
    if tc.get("mask"):
        mask = PathMask(tuple(tc["mask"]))
    return Model(ckpt.config, ckpt.weights, ckpt.scale, dynamic, mask)


@dataclass
class EvalReport:
    accuracy: float
    correct: int
    total: int
    per_class: list[dict] = field(default_factory=list)
    predictions: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "correct": self.correct, "total": self.total, "per_class": self.per_class}


def evaluate(
    ckpt_or_model: Checkpoint | Model,
    dataset: Dataset,
    mask: PathMask | None = None,
    scale: EnsembleScale | None | str = "checkpoint",
    form: str = "ensemble",
    batch_size: int = 256,
    workers: int = 1,
) -> EvalReport:
    """Top-1 accuracy plus a per-class breakdown.

    ``form="cascade"`` evaluates the plain stacked form instead of the path
    sum. ``workers > 1`` splits batches across threads; results are identical
    to a single worker.
    """
    if form not in ("ensemble", "cascade"):
        raise ConfigError(f"form must be 'ensemble' or 'cascade', got {form!r}")
    model = model_from_checkpoint(ckpt_or_model) if isinstance(ckpt_or_model, Checkpoint) else ckpt_or_model
    if len(dataset) == 0:
        raise EmptyDatasetError("evaluation set is empty")
    cfg, weights = model.config, model.weights
    if scale == "checkpoint":
        scale = model.scale
    if mask is None:
        mask = model.mask
    precision = weights.precision

    def predict(images):
        x0 = patch_embed(images, cfg, weights)
        if form == "cascade":
            x_n, _ = cascade_forward(x0, cfg, weights)
            logits = classify(x_n, cfg, weights)
        elif model.dynamic is not None and mask is None and scale is None:
            logits = full_logits(decompose_paths(x0, cfg, weights), cfg, weights, model.dynamic)
        else:
            mode = "per_path" if cfg.hierarchical and (mask is not None or scale is not None) else "synchronized"
            ps = decompose_paths(x0, cfg, weights, mode, mask)
            logits = classify(ensemble_combine(ps, mask, scale), cfg, weights)
        return np.argmax(logits.data, axis=-1)

    chunks = (imgs for imgs, _ in dataset.batches(batch_size, precision=precision))
    with no_grad():
        if workers > 1:
            # map() keeps batch order, so the reduction below is worker-count independent
            with ThreadPoolExecutor(workers) as pool:
                preds = list(pool.map(predict, chunks))
        else:
            preds = [predict(imgs) for imgs in chunks]
    pred = np.concatenate(preds)
    labels = dataset.labels
    per_class = []
    for c in range(dataset.num_classes):
        sel = labels == c
        n = int(sel.sum())
        per_class.append({"class": c, "count": n, "accuracy": float((pred[sel] == c).mean()) if n else None})
    correct = int((pred == labels).sum())
    return EvalReport(correct / len(labels), correct, len(labels), per_class, pred)
