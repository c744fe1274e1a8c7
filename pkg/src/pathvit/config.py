"""Model configuration and the flat ``section.key = value`` config format."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


TOKEN_MODES = ("class_token", "average_pool")


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 4
    embed_dim: int = 32
    num_heads: int = 2
    mlp_ratio: float = 2.0
    patch_size: int = 8
    image_size: int = 32
    in_channels: int = 1
    num_classes: int = 2
    token_mode: str = "class_token"
    # (blocks_per_stage, downsample_after) pairs; empty means a plain ViT
    stages: tuple[tuple[int, bool], ...] = ()
    eps: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple((int(b), bool(f)) for b, f in self.stages))
        self.validate()

    def validate(self) -> None:
        for name in ("embed_dim", "num_heads", "patch_size", "image_size", "in_channels", "num_classes"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.depth < 0:  # 0 is the degenerate empty stack
            raise ConfigError("depth must be non-negative")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.token_mode not in TOKEN_MODES:
            raise ConfigError(f"token_mode must be one of {TOKEN_MODES}")
        if int(self.mlp_ratio * self.embed_dim) != self.mlp_ratio * self.embed_dim:
            raise ConfigError("mlp_ratio * embed_dim must be an integer")
        if self.stages:
            if sum(b for b, _ in self.stages) != self.depth:
                raise ConfigError("stage block counts must sum to depth")
            if any(b < 0 for b, _ in self.stages):
                raise ConfigError("blocks_per_stage must be non-negative")
            if self.stages[-1][1]:
                raise ConfigError("the last stage cannot downsample")
            if self.token_mode != "average_pool":
                raise ConfigError("hierarchical configs require token_mode=average_pool")
            side = self.grid_size
            for _ in range(self.num_downsamples):
                if side % 2:
                    raise ConfigError("token grid must halve evenly at every downsampling layer")
                side //= 2

    @property
    def hierarchical(self) -> bool:
        return bool(self.stages)

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size**2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + (1 if self.token_mode == "class_token" else 0)

    @property
    def num_paths(self) -> int:
        return self.depth + 1

    @property
    def num_downsamples(self) -> int:
        return sum(1 for _, f in self.stages if f)

    def stage_plan(self) -> list[tuple[int, int, bool]]:
        """Return ``(first_block, last_block, downsample_after)`` per stage, 1-based inclusive."""
        stages = self.stages or ((self.depth, False),)
        plan, start = [], 1
        for blocks, flag in stages:
            plan.append((start, start + blocks - 1, flag))
            start += blocks
        return plan

    def block_stage(self, i: int) -> int:
        for s, (lo, hi, _) in enumerate(self.stage_plan()):
            if lo <= i <= hi:
                return s
        raise IndexError(f"block {i} outside 1..{self.depth}")

    def stage_dim(self, stage: int) -> int:
        return self.embed_dim * 2 ** self._downsamples_before(stage)

    def stage_grid(self, stage: int) -> int:
        return self.grid_size // 2 ** self._downsamples_before(stage)

    def _downsamples_before(self, stage: int) -> int:
        return sum(1 for _, f in list(self.stages)[:stage] if f)

    def boundaries(self) -> list[tuple[int, int]]:
        """``(downsample_index, last_block_before)`` for each downsampling layer."""
        out = []
        for lo, hi, flag in self.stage_plan():
            if flag:
                out.append((len(out), hi))
        return out

    @property
    def final_dim(self) -> int:
        return self.embed_dim * 2**self.num_downsamples

    @property
    def final_grid(self) -> int:
        return self.grid_size // 2**self.num_downsamples

    def hidden_dim(self, width: int | None = None) -> int:
        return int(self.mlp_ratio * (width or self.embed_dim))

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["stages"] = [list(s) for s in self.stages]
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        d = dict(d)
        d["stages"] = tuple(tuple(s) for s in d.get("stages", ()))
        return cls(**d)


def config_hash(obj: Any) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# flat key-value files


def parse_keyvalue(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``section.key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def read_keyvalue(path) -> dict[str, str]:
    path = Path(path)
    return parse_keyvalue(path.read_text(), str(path))


def format_keyvalue(values: dict[str, Any]) -> str:
    return "".join(f"{k} = {_format_value(v)}\n" for k, v in values.items())


def _format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(_format_value(x) for x in v)
    return str(v)


def coerce(value: str, like: Any):
    """Convert text to the type of ``like``."""
    if isinstance(like, bool):
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def parse_stages(value: str) -> tuple[tuple[int, bool], ...]:
    """``"2:d,2:d,2"`` -> ((2, True), (2, True), (2, False))."""
    value = value.strip()
    if not value or value.lower() == "none":
        return ()
    out = []
    for part in value.split(","):
        blocks, _, flag = part.strip().partition(":")
        out.append((int(blocks), flag.strip().lower() in ("d", "down", "1", "true")))
    return tuple(out)


def format_stages(stages) -> str:
    return ",".join(f"{b}:d" if f else str(b) for b, f in stages) or "none"


def model_config_from_keyvalue(values: dict[str, str], prefix: str = "model.") -> ModelConfig:
    defaults = ModelConfig()
    kwargs: dict[str, Any] = {}
    known = {f.name for f in fields(ModelConfig)}
    for key, value in values.items():
        if not key.startswith(prefix):
            continue
        name = key[len(prefix) :]
        if name not in known:
            raise ConfigError(f"unknown model key {key!r}")
        if name == "stages":
            kwargs[name] = parse_stages(value)
        else:
            kwargs[name] = coerce(value, getattr(defaults, name))
    return ModelConfig(**kwargs)


def model_config_to_keyvalue(cfg: ModelConfig, prefix: str = "model.") -> dict[str, str]:
    out = {}
    for f in fields(ModelConfig):
        v = getattr(cfg, f.name)
        out[prefix + f.name] = format_stages(v) if f.name == "stages" else _format_value(v)
    return out
