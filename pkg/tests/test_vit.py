import math

import numpy as np
import pytest

from pathvit.config import ModelConfig
from pathvit.tensor import DimensionError, Tensor
from pathvit.vit import (
    block_forward,
    cascade_forward,
    classify,
    expected_shapes,
    ffn,
    init_weights,
    merge_patches,
    mhsa,
    patch_embed,
)

from conftest import random_images, random_weights


def _ln(x, g, b, eps):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def _np(bw):
    return {k: v.data for k, v in bw.items()}


def attention_loop(x, w, heads, eps):
    """Per-head, per-token loop oracle for pre-norm attention."""
    t, d = x.shape
    hd = d // heads
    h = _ln(x, w["ln1.g"], w["ln1.b"], eps)
    q = h @ w["attn.q.w"] + w["attn.q.b"]
    k = h @ w["attn.k.w"] + w["attn.k.b"]
    v = h @ w["attn.v.w"] + w["attn.v.b"]
    ctx = np.zeros((t, d))
    for head in range(heads):
        sl = slice(head * hd, (head + 1) * hd)
        for i in range(t):
            scores = [sum(q[i, sl][c] * k[j, sl][c] for c in range(hd)) / math.sqrt(hd) for j in range(t)]
            m = max(scores)
            e = [math.exp(s - m) for s in scores]
            z = sum(e)
            for j in range(t):
                ctx[i, sl] += e[j] / z * v[j, sl]
    return ctx @ w["attn.o.w"] + w["attn.o.b"]


def test_token_counts():
    c1 = ModelConfig(patch_size=16, image_size=16, depth=1)
    assert patch_embed(np.zeros((16, 16, 1)), c1, init_weights(c1)).shape == (2, 32)
    c2 = ModelConfig(patch_size=8, image_size=32, token_mode="average_pool", depth=1)
    assert patch_embed(np.zeros((32, 32, 1)), c2, init_weights(c2)).shape == (16, 32)


def test_zero_image_gives_positions(tiny_config, rng):
    w = init_weights(tiny_config, seed=3, precision="double")
    w["patch.b"].data[:] = 0.0
    x0 = patch_embed(np.zeros((32, 32, 1)), tiny_config, w).data
    assert np.array_equal(x0[1:], w["pos"].data[1:])
    assert np.array_equal(x0[0], w["pos"].data[0] + w["cls"].data)


def test_patch_embed_size_mismatch(tiny_config):
    with pytest.raises(DimensionError):
        patch_embed(np.zeros((16, 16, 1)), tiny_config, init_weights(tiny_config))


def test_patch_order_row_major():
    c = ModelConfig(patch_size=2, image_size=4, embed_dim=4, num_heads=1, token_mode="average_pool", depth=1)
    w = init_weights(c, precision="double")
    w["patch.w"].data[:] = 0.0
    w["patch.w"].data[0, 0] = 1.0  # picks the top-left pixel of each patch
    w["pos"].data[:] = 0.0
    img = np.arange(16.0).reshape(4, 4, 1)
    assert patch_embed(img, c, w).data[:, 0].tolist() == [0.0, 2.0, 8.0, 10.0]


def test_mhsa_single_token(rng):
    c = ModelConfig(embed_dim=4, num_heads=2, depth=1)
    bw = _np(random_weights(c).block(1))
    x = rng.standard_normal((1, 4))
    h = _ln(x, bw["ln1.g"], bw["ln1.b"], c.eps)
    ref = (h @ bw["attn.v.w"] + bw["attn.v.b"]) @ bw["attn.o.w"] + bw["attn.o.b"]
    got = mhsa(Tensor(x), random_weights(c).block(1), 2, c.eps).data
    assert np.abs(got - ref).max() <= 1e-12


def test_mhsa_identical_tokens_identical_rows(rng):
    c = ModelConfig(embed_dim=8, num_heads=2, depth=1)
    row = rng.standard_normal(8)
    out = mhsa(Tensor(np.stack([row, row])), random_weights(c).block(1), 2, c.eps).data
    assert np.array_equal(out[0], out[1])


def test_mhsa_matches_loop_oracle(rng):
    c = ModelConfig(embed_dim=4, num_heads=2, depth=1)
    w = random_weights(c, seed=5)
    x = rng.standard_normal((3, 4))
    got = mhsa(Tensor(x), w.block(1), 2, c.eps).data
    ref = attention_loop(x, _np(w.block(1)), 2, c.eps)
    assert np.abs(got - ref).max() / np.abs(ref).max() <= 1e-10


def test_ffn_zero_up_projection(rng):
    c = ModelConfig(embed_dim=8, num_heads=2, depth=1)
    w = random_weights(c)
    w["blocks.1.mlp.up.w"].data[:] = 0.0
    w["blocks.1.mlp.up.b"].data[:] = 0.0
    out = ffn(Tensor(rng.standard_normal((5, 8))), w.block(1), c.eps).data
    assert np.array_equal(out, np.broadcast_to(w["blocks.1.mlp.down.b"].data, (5, 8)))


def test_ffn_tokenwise_and_composition(rng):
    c = ModelConfig(embed_dim=8, num_heads=2, depth=1)
    w = random_weights(c)
    bw = _np(w.block(1))
    x = rng.standard_normal((4, 8))
    x[2] = x[0]
    out = ffn(Tensor(x), w.block(1), c.eps).data
    assert np.array_equal(out[0], out[2])
    ref = _gelu(_ln(x, bw["ln2.g"], bw["ln2.b"], c.eps) @ bw["mlp.up.w"] + bw["mlp.up.b"]) @ bw["mlp.down.w"] + bw["mlp.down.b"]
    assert np.abs(out - ref).max() <= 1e-12


def test_cascade_degenerate_depth_zero(rng):
    c = ModelConfig(depth=0)
    x0 = Tensor(rng.standard_normal((17, 32)))
    x_n, inter = cascade_forward(x0, c, init_weights(c, precision="double"))
    assert np.array_equal(x_n.data, x0.data) and len(inter) == 1


def test_cascade_one_block_expansion(rng):
    c = ModelConfig(depth=1, embed_dim=8, num_heads=2)
    w = random_weights(c)
    x0 = Tensor(rng.standard_normal((2, 17, 8)))
    x1, _ = cascade_forward(x0, c, w)
    m = mhsa(x0, w.block(1), 2, c.eps)
    ref = x0 + m + ffn(x0 + m, w.block(1), c.eps)
    assert np.array_equal(x1.data, ref.data)


def test_cascade_zeroed_sublayers_is_identity(tiny_config, rng):
    w = random_weights(tiny_config)
    for name, t in w.items():
        if name.startswith("blocks."):
            t.data[:] = 0.0
    x0 = Tensor(rng.standard_normal((2, 17, 16)))
    x_n, _ = cascade_forward(x0, tiny_config, w)
    assert np.array_equal(x_n.data, x0.data)


def test_per_block_increment_identity(tiny_config, rng):
    w = random_weights(tiny_config)
    x0 = Tensor(rng.standard_normal((2, 17, 16)))
    _, inter = cascade_forward(x0, tiny_config, w)
    for i in range(1, tiny_config.depth + 1):
        prev = inter[i - 1]
        m = mhsa(prev, w.block(i), 2, tiny_config.eps)
        f = m + ffn(prev + m, w.block(i), tiny_config.eps)
        assert np.abs((inter[i] - prev).data - f.data).max() <= 1e-12


def test_classify_zero_weight_gives_bias(tiny_config, rng):
    w = random_weights(tiny_config)
    w["head.w"].data[:] = 0.0
    logits = classify(Tensor(rng.standard_normal((3, 17, 16))), tiny_config, w).data
    assert np.array_equal(logits, np.broadcast_to(w["head.b"].data, (3, 2)))


def test_classify_antisymmetric_head(tiny_config, rng):
    w = random_weights(tiny_config)
    col = rng.standard_normal(16)
    w["head.w"].data[:] = np.stack([col, -col], axis=1)
    logits = classify(Tensor(rng.standard_normal((3, 17, 16))), tiny_config, w).data - w["head.b"].data
    assert np.abs(logits[:, 0] + logits[:, 1]).max() <= 1e-12


def test_classify_composition_and_class_token_only(tiny_config, rng):
    w = random_weights(tiny_config)
    x = rng.standard_normal((2, 17, 16))
    got = classify(Tensor(x), tiny_config, w).data
    ref = _ln(x[:, 0], w["head.ln.g"].data, w["head.ln.b"].data, tiny_config.eps) @ w["head.w"].data + w["head.b"].data
    assert np.abs(got - ref).max() <= 1e-12
    x[:, 1:] = rng.standard_normal((2, 16, 16))
    assert np.array_equal(classify(Tensor(x), tiny_config, w).data, got)


def test_merge_patches_layout():
    x = np.arange(16.0).reshape(1, 16, 1)  # 4x4 grid, value = token index
    out = merge_patches(Tensor(x), 4).data[0, :, :]
    # first merged token gathers the top-left 2x2 neighbourhood
    assert sorted(out[0].tolist()) == [0.0, 1.0, 4.0, 5.0]
    assert sorted(out[3].tolist()) == [10.0, 11.0, 14.0, 15.0]


def test_weight_shapes_match_config(hier_config):
    w = init_weights(hier_config)
    w.check_shapes(hier_config)
    assert set(w) == set(expected_shapes(hier_config))
    assert w["down.0.w"].shape == (64, 32) and w["down.1.w"].shape == (128, 64)
    assert w["head.w"].shape == (64, 2)


def test_init_conventions(tiny_config):
    w = init_weights(tiny_config, seed=0)
    assert np.all(w["blocks.1.ln1.g"].data == 1) and np.all(w["blocks.1.ln1.b"].data == 0)
    assert np.all(w["blocks.1.attn.q.b"].data == 0)
    q = w["blocks.1.attn.q.w"].data
    assert np.abs(q).max() <= 0.04 + 1e-7 and 0.01 < q.std() < 0.03


def test_init_deterministic(tiny_config):
    a, b = init_weights(tiny_config, seed=7), init_weights(tiny_config, seed=7)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)


def test_hierarchical_cascade_shapes(hier_config):
    w = random_weights(hier_config)
    x_n, inter = cascade_forward(patch_embed(random_images(hier_config), hier_config, w), hier_config, w)
    assert x_n.shape == (2, 4, 64)
    assert [t.shape[1] for t in inter] == [64, 64, 64, 16, 16, 4, 4]
