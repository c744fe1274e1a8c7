"""Reference vision transformer in the usual cascade form.

Every sub-layer function (``mhsa``, ``ffn``) carries its own pre-LayerNorm and
excludes the residual, so a block is ``x' = x + mhsa(x); x = x' + ffn(x')``.
Inputs may be a single ``tokens x d`` matrix or a batch ``B x tokens x d``.
"""

from __future__ import annotations

import math
from typing import Iterator, Mapping

import numpy as np

from .config import ConfigError, ModelConfig
from .tensor import DimensionError, Tensor, as_tensor, concat, dtype_for, gelu, layer_norm, softmax


class TransformerWeights(Mapping[str, Tensor]):
    """Flat name -> Tensor table with block-scoped views."""

    def __init__(self, params: dict[str, Tensor]):
        self._params = dict(params)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __setitem__(self, name: str, value: Tensor) -> None:
        self._params[name] = value

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def block(self, i: int) -> "BlockView":
        return BlockView(self, f"blocks.{i}.")

    def parameters(self) -> list[Tensor]:
        return list(self._params.values())

    def copy(self) -> "TransformerWeights":
        return TransformerWeights({k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self._params.items()})

    def astype(self, precision: str) -> "TransformerWeights":
        return TransformerWeights({k: Tensor(v.data.astype(dtype_for(precision)), requires_grad=v.requires_grad) for k, v in self._params.items()})

    def requires_grad_(self, flag: bool = True) -> "TransformerWeights":
        for v in self._params.values():
            v.requires_grad = flag
        return self

    @property
    def precision(self) -> str:
        return next(iter(self._params.values())).precision

    def check_shapes(self, config: ModelConfig) -> None:
        expected = expected_shapes(config)
        missing = sorted(set(expected) - set(self._params))
        extra = sorted(set(self._params) - set(expected))
        if missing or extra:
            raise ConfigError(f"weight table mismatch: missing={missing[:5]} extra={extra[:5]}")
        for name, shape in expected.items():
            if self._params[name].shape != shape:
                raise ConfigError(f"{name}: shape {self._params[name].shape}, expected {shape}")


class BlockView(Mapping[str, Tensor]):
    def __init__(self, weights: TransformerWeights, prefix: str):
        self._w, self._prefix = weights, prefix

    def __getitem__(self, name: str) -> Tensor:
        return self._w[self._prefix + name]

    def __iter__(self):
        return (k[len(self._prefix) :] for k in self._w if k.startswith(self._prefix))

    def __len__(self) -> int:
        return sum(1 for _ in self)


def expected_shapes(config: ModelConfig) -> dict[str, tuple]:
    d = config.embed_dim
    p = config.patch_size
    shapes: dict[str, tuple] = {
        "patch.w": (p * p * config.in_channels, d),
        "patch.b": (d,),
        "pos": (config.num_tokens, d),
    }
    if config.token_mode == "class_token":
        shapes["cls"] = (d,)
    for i in range(1, config.depth + 1):
        w = config.stage_dim(config.block_stage(i))
        hd = config.hidden_dim(w)
        pre = f"blocks.{i}."
        shapes.update({pre + "ln1.g": (w,), pre + "ln1.b": (w,), pre + "ln2.g": (w,), pre + "ln2.b": (w,)})
        for proj in ("q", "k", "v", "o"):
            shapes[pre + f"attn.{proj}.w"] = (w, w)
            shapes[pre + f"attn.{proj}.b"] = (w,)
        shapes.update({pre + "mlp.up.w": (w, hd), pre + "mlp.up.b": (hd,), pre + "mlp.down.w": (hd, w), pre + "mlp.down.b": (w,)})
    for k, (s, _) in enumerate((s, f) for s, f in enumerate(config.stages) if f):
        w = config.stage_dim(s)
        shapes.update({f"down.{k}.ln.g": (4 * w,), f"down.{k}.ln.b": (4 * w,), f"down.{k}.w": (4 * w, 2 * w)})
    df = config.final_dim
    shapes.update({"head.ln.g": (df,), "head.ln.b": (df,), "head.w": (df, config.num_classes), "head.b": (config.num_classes,)})
    return shapes


def trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by redrawing."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_weights(
    config: ModelConfig,
    seed: int = 0,
    precision: str = "single",
    std: float = 0.02,
    random_affine: bool = False,
) -> TransformerWeights:
    """Draw a weight table: truncated-normal projections, zero biases, unit LayerNorm.

    ``random_affine`` also randomizes biases and LayerNorm affines, which the
    equivalence and gradient checks use so no term is trivially zero.
    """
    rng = np.random.default_rng(seed)
    dt = dtype_for(precision)
    params = {}
    for name, shape in expected_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if ".ln" in name and leaf == "g":
            arr = 1.0 + (trunc_normal(rng, shape, 0.2) if random_affine else 0.0)
        elif leaf == "b":
            arr = trunc_normal(rng, shape, std) if random_affine else np.zeros(shape)
        else:
            arr = trunc_normal(rng, shape, std)
        params[name] = Tensor(np.broadcast_to(arr, shape).astype(dt))
    return TransformerWeights(params)


# sub-layer functions


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return x.reshape(1, *x.shape), True
    if x.ndim != 3:
        raise DimensionError(f"expected tokens x d or B x tokens x d, got {x.shape}")
    return x, False


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """``B x H x W x C`` -> ``B x patches x (p*p*C)`` in row-major patch order."""
    b, h, w, c = images.shape
    g_h, g_w = h // patch_size, w // patch_size
    x = images.reshape(b, g_h, patch_size, g_w, patch_size, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g_h * g_w, patch_size * patch_size * c)


def patch_embed(image, config: ModelConfig, weights: TransformerWeights) -> Tensor:
    """Split into patches, project, prepend the class token, add positions."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != config.image_size or arr.shape[2] != config.image_size or arr.shape[3] != config.in_channels:
        raise DimensionError(
            f"image shape {arr.shape[1:] if arr.ndim == 4 else arr.shape} does not match "
            f"{config.image_size}x{config.image_size}x{config.in_channels}"
        )
    dt = weights["patch.w"].dtype
    patches = Tensor(patchify(arr.astype(dt, copy=False), config.patch_size))
    x = patches @ weights["patch.w"] + weights["patch.b"]
    if config.token_mode == "class_token":
        cls = weights["cls"].reshape(1, 1, config.embed_dim) * Tensor(np.ones((arr.shape[0], 1, 1), dtype=dt))
        x = concat([cls, x], axis=1)
    x = x + weights["pos"]
    return x[0] if single else x


def mhsa(x: Tensor, bw: Mapping[str, Tensor], num_heads: int, eps: float = 1e-6) -> Tensor:
    """Pre-norm multi-head self-attention without the residual."""
    x = as_tensor(x)
    xb, squeeze = _batched(x)
    b, t, d = xb.shape
    hd = d // num_heads
    h = layer_norm(xb, bw["ln1.g"], bw["ln1.b"], eps)

    def heads(proj: str) -> Tensor:
        y = h @ bw[f"attn.{proj}.w"] + bw[f"attn.{proj}.b"]
        return y.reshape(b, t, num_heads, hd).transpose(0, 2, 1, 3)

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(hd))
    att = softmax(scores, axis=-1)
    ctx = (att @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
    out = ctx @ bw["attn.o.w"] + bw["attn.o.b"]
    return out[0] if squeeze else out


def ffn(x: Tensor, bw: Mapping[str, Tensor], eps: float = 1e-6) -> Tensor:
    """Pre-norm two-layer GELU MLP without the residual."""
    h = layer_norm(as_tensor(x), bw["ln2.g"], bw["ln2.b"], eps)
    return gelu(h @ bw["mlp.up.w"] + bw["mlp.up.b"]) @ bw["mlp.down.w"] + bw["mlp.down.b"]


def merge_patches(x: Tensor, grid: int) -> Tensor:
    """Concatenate each 2x2 token neighbourhood: ``B x g^2 x d`` -> ``B x (g/2)^2 x 4d``."""
    xb, squeeze = _batched(as_tensor(x))
    b, t, d = xb.shape
    if t != grid * grid or grid % 2:
        raise DimensionError(f"cannot 2x2-merge {t} tokens on a {grid}x{grid} grid")
    half = grid // 2
    y = xb.reshape(b, half, 2, half, 2, d).transpose(0, 1, 3, 4, 2, 5).reshape(b, half * half, 4 * d)
    return y[0] if squeeze else y


def downsample(x: Tensor, index: int, grid: int, weights: TransformerWeights, eps: float = 1e-6) -> Tensor:
    """Patch merging: 2x2 concat, LayerNorm over 4d, linear map to 2d."""
    m = merge_patches(x, grid)
    return layer_norm(m, weights[f"down.{index}.ln.g"], weights[f"down.{index}.ln.b"], eps) @ weights[f"down.{index}.w"]


def block_forward(x: Tensor, bw: Mapping[str, Tensor], num_heads: int, eps: float) -> Tensor:
    x_mid = x + mhsa(x, bw, num_heads, eps)
    return x_mid + ffn(x_mid, bw, eps)


def cascade_forward(x0: Tensor, config: ModelConfig, weights: TransformerWeights) -> tuple[Tensor, list[Tensor]]:
    """Run the blocks sequentially; returns ``x_N`` and ``[x_0, ..., x_N]``.

    In hierarchical configs the listed ``x_i`` are block outputs before any
    downsampling layer that follows them.
    """
    x = as_tensor(x0)
    inter = [x]
    downs = {hi: k for k, hi in config.boundaries()}
    if 0 in downs:
        x = downsample(x, downs[0], config.stage_grid(0), weights, config.eps)
    for i in range(1, config.depth + 1):
        x = block_forward(x, weights.block(i), config.num_heads, config.eps)
        inter.append(x)
        if i in downs:
            x = downsample(x, downs[i], config.stage_grid(config.block_stage(i)), weights, config.eps)
    return x, inter


def pool_tokens(x: Tensor, config: ModelConfig) -> Tensor:
    """Class token or mean token, per ``config.token_mode``."""
    x = as_tensor(x)
    if config.token_mode == "class_token":
        return x[..., 0, :]
    return x.mean(axis=-2)


def classify(x_hat: Tensor, config: ModelConfig, weights: TransformerWeights, frozen: bool = False) -> Tensor:
    """Token pooling, final LayerNorm, linear head. ``frozen`` detaches the head parameters."""
    names = ("head.ln.g", "head.ln.b", "head.w", "head.b")
    g, b, w, bias = (weights[n].detach() if frozen else weights[n] for n in names)
    v = layer_norm(pool_tokens(x_hat, config), g, b, config.eps)
    # one row per product keeps each sample's logits independent of batch size
    # (a plain 2-D GEMM may change rounding with the row count)
    rows = v.reshape(*v.shape[:-1], 1, v.shape[-1])
    out = rows @ w
    return out.reshape(*v.shape[:-1], w.shape[-1]) + bias


def forward_logits(images, config: ModelConfig, weights: TransformerWeights) -> Tensor:
    x_n, _ = cascade_forward(patch_embed(images, config, weights), config, weights)
    return classify(x_n, config, weights)
