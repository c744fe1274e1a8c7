"""Config keys understood by the command line, with defaults and help text.

The table below is the single source for parsing, validation and the
generated reference page (``pathvit.cli --reference``).
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path
from typing import Any

from .config import ConfigError, ModelConfig, coerce, model_config_from_keyvalue, parse_keyvalue, read_keyvalue
from .data import Dataset, load_dataset, synthetic_gratings
from .distill import DistillConfig
from .dynamic import default_split
from .ensemble import masks_from_spec
from .train import TrainConfig

OUTPUT_ENV = "PATHVIT_OUT"


@dataclass(frozen=True)
class Key:
    name: str
    default: Any
    help: str


_MODEL_HELP = {
    "depth": "number of transformer blocks N",
    "embed_dim": "token width d (stage 1 width when hierarchical)",
    "num_heads": "attention heads per block",
    "mlp_ratio": "FFN hidden width as a multiple of the token width",
    "patch_size": "square patch side in pixels",
    "image_size": "square input side in pixels",
    "in_channels": "input channels",
    "num_classes": "classifier outputs",
    "token_mode": "class_token or average_pool",
    "stages": "hierarchical layout such as 2:d,2:d,2 (blocks, ':d' = downsample after); 'none' for a plain ViT",
    "eps": "LayerNorm epsilon",
}

KEYS: list[Key] = [Key(f"model.{f.name}", "none" if f.name == "stages" else f.default, _MODEL_HELP[f.name]) for f in fields(ModelConfig)]
KEYS += [
    Key("train.epochs", 20, "training epochs"),
    Key("train.batch_size", 64, "mini-batch size"),
    Key("train.lr", 1e-3, "peak learning rate (cosine decay to 0)"),
    Key("train.weight_decay", 0.05, "decoupled weight decay on weight matrices"),
    Key("train.optimizer", "adamw", "adamw or sgd_momentum"),
    Key("train.momentum", 0.9, "SGD momentum"),
    Key("train.warmup_steps", 0, "linear warmup steps"),
    Key("train.seed", 0, "seed for initialization and batch order"),
    Key("train.precision", "single", "single or double"),
    Key("train.ce_weight", 1.0, "cross-entropy weight"),
    Key("train.kd_weight", 1.0, "weight of the path distillation loss"),
    Key("train.mask", "all", "paths in the ensemble: all, last:K, from:S or a comma list"),
    Key("train.ensemble_scale", False, "learn per-path, per-channel scales"),
    Key("train.scale_schedule", "geometric", "scale initialization: geometric or linear"),
    Key("train.distill", False, "enable path distillation"),
    Key("distill.delta", 2, "teacher offset"),
    Key("distill.start", 5, "first student path (clamped to depth - delta)"),
    Key("distill.temperature", 1.0, "softmax temperature"),
    Key("distill.alpha", "1.0", "logit distillation weight; a comma list gives one weight per path"),
    Key("distill.beta", "1.0", "token-relation distillation weight; a comma list gives one weight per path"),
    Key("distill.include_class_token", True, "keep the class token in relation matrices"),
    Key("dynamic.enabled", False, "train two exits (prefix and full)"),
    Key("dynamic.split", 0, "paths in the early exit; 0 picks the default for the depth"),
    Key("dynamic.threshold", 0.5, "early-exit confidence threshold"),
    Key("data.source", "synthetic", "'synthetic' or a manifest path"),
    Key("data.samples", 5000, "synthetic sample count"),
    Key("data.seed", 0, "synthetic generator seed"),
    Key("data.noise", 0.3, "synthetic noise level"),
    Key("data.split", "", "manifest split tag; empty for all samples"),
    Key("output.dir", "pathvit-out", f"output directory (overridden by ${OUTPUT_ENV} and --out)"),
]
KEY_INDEX = {k.name: k for k in KEYS}


def shipped_config(name: str) -> Path | None:
    """Path of a config bundled with the package, e.g. ``default.cfg``."""
    ref = resources.files("pathvit") / "configs" / name
    return Path(str(ref)) if ref.is_file() else None


def load_settings(path: str | None, overrides: dict[str, str] | None = None) -> dict[str, Any]:
    """Defaults, then the file, then overrides; values typed like their defaults."""
    raw: dict[str, str] = {}
    if path:
        p = Path(path)
        if not p.is_file():
            p = shipped_config(path) or shipped_config(path + ".cfg") or p
        try:
            raw.update(read_keyvalue(p))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    raw.update(overrides or {})
    out = {k.name: k.default for k in KEYS}
    for key, value in raw.items():
        if key not in KEY_INDEX:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            out[key] = coerce(value, KEY_INDEX[key].default)
        except ValueError:
            raise ConfigError(f"bad value for {key}: {value!r}") from None
    return out


def parse_overrides(items: list[str]) -> dict[str, str]:
    return parse_keyvalue("\n".join(items), "--set")


def model_config(settings: dict[str, Any]) -> ModelConfig:
    return model_config_from_keyvalue({k: str(v) for k, v in settings.items() if k.startswith("model.")})


def _weights(value: Any) -> Any:
    text = str(value)
    return tuple(float(v) for v in text.split(",")) if "," in text else float(text)


def train_config(settings: dict[str, Any], mc: ModelConfig) -> TrainConfig:
    s = settings
    distill = None
    if s["train.distill"]:
        distill = DistillConfig.for_depth(
            mc.depth,
            delta=s["distill.delta"],
            start=min(s["distill.start"], max(mc.depth - s["distill.delta"], 0)),
            temperature=s["distill.temperature"],
            alpha=_weights(s["distill.alpha"]),
            beta=_weights(s["distill.beta"]),
            include_class_token=s["distill.include_class_token"],
        )
    mask = None if s["train.mask"] == "all" else masks_from_spec(mc.num_paths, s["train.mask"])
    split = None
    if s["dynamic.enabled"]:
        split = s["dynamic.split"] or default_split(mc.depth)
    cfg = TrainConfig(
        epochs=s["train.epochs"],
        batch_size=s["train.batch_size"],
        lr=s["train.lr"],
        weight_decay=s["train.weight_decay"],
        optimizer=s["train.optimizer"],
        momentum=s["train.momentum"],
        warmup_steps=s["train.warmup_steps"],
        seed=s["train.seed"],
        precision=s["train.precision"],
        ce_weight=s["train.ce_weight"],
        kd_weight=s["train.kd_weight"],
        distill=distill,
        mask=mask,
        ensemble_scale=s["train.ensemble_scale"],
        scale_schedule=s["train.scale_schedule"],
        dynamic_split=split,
    )
    cfg.validate(mc)
    return cfg


def dataset(settings: dict[str, Any], mc: ModelConfig) -> Dataset:
    src = settings["data.source"]
    if src == "synthetic":
        if mc.num_classes != 2:
            raise ConfigError("the synthetic grating set has 2 classes; set model.num_classes = 2")
        return synthetic_gratings(settings["data.samples"], mc.image_size, mc.in_channels, settings["data.seed"], noise=settings["data.noise"])
    return load_dataset(src, settings["data.split"] or None)


def reference_markdown() -> str:
    """The CLI/config reference page, generated from the key table and parser."""
    from .cli import build_parser

    lines = ["# Command-line and config reference", "", "Generated by `pathvit --reference`; do not edit by hand.", ""]
    lines += ["## Config keys", "", "| key | default | meaning |", "|---|---|---|"]
    for k in KEYS:
        default = str(k.default).lower() if isinstance(k.default, bool) else k.default
        lines.append(f"| `{k.name}` | `{default}` | {k.help} |")
    lines += ["", f"The output directory resolves as `--out`, then `${OUTPUT_ENV}`, then `output.dir`.", ""]
    parser = build_parser()
    lines += ["## Commands", ""]
    for name, sub in parser._subparsers._group_actions[0].choices.items():
        lines += [f"### `{name}`", "", "```", sub.format_help().rstrip(), "```", ""]
    return "\n".join(lines)
