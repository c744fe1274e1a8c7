import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pathvit.config import ConfigError, ModelConfig
from pathvit.dynamic import (
    DynamicConfig,
    default_split,
    downsample_flops,
    downsample_groups,
    dynamic_forward,
    early_logits,
    flops_count,
    full_logits,
    threshold_sweep,
)
from pathvit.ensemble import PathMask, decompose_paths
from pathvit.vit import patch_embed

from conftest import random_images, random_weights


def _setup(config, threshold=0.5, split=None, batch=8):
    w = random_weights(config, seed=2)
    dcfg = DynamicConfig.create(config, split, threshold, precision="double")
    # break the symmetric init so ES1 and ES2 differ per channel
    r = np.random.default_rng(3)
    dcfg.es1.lam.data[:] = r.uniform(0.5, 1.5, dcfg.es1.lam.shape)
    dcfg.es2.lam.data[:] = r.uniform(0.5, 1.5, dcfg.es2.lam.shape)
    return w, dcfg, random_images(config, batch, seed=4)


def _reference(config, w, dcfg, images):
    ps = decompose_paths(patch_embed(images, config, w), config, w)
    return early_logits(ps, config, w, dcfg).data, full_logits(ps, config, w, dcfg).data


def test_default_split():
    assert default_split(12) == 7
    assert default_split(4) == 4
    assert default_split(1) == 1


def test_threshold_zero_always_exits(tiny_config):
    w, dcfg, images = _setup(tiny_config, 0.0)
    r = dynamic_forward(images, tiny_config, w, dcfg)
    assert r.exited_early.all()
    assert np.all(r.executed_flops == r.early_cost)
    assert r.early_cost == flops_count(tiny_config, "dynamic_early", split=dcfg.split).total


def test_threshold_one_matches_full(tiny_config):
    w, dcfg, images = _setup(tiny_config, 1.0, split=3)
    r = dynamic_forward(images, tiny_config, w, dcfg)
    _, full = _reference(tiny_config, w, dcfg, images)
    assert not r.exited_early.any()
    assert np.array_equal(r.logits, full)
    assert np.array_equal(r.predictions, np.argmax(full, -1))


def test_mixed_exits_are_bitwise_per_sample(tiny_config):
    w, dcfg, images = _setup(tiny_config, 0.0, split=3, batch=16)
    early, full = _reference(tiny_config, w, dcfg, images)
    conf = np.exp(early - early.max(-1, keepdims=True))
    conf = (conf / conf.sum(-1, keepdims=True)).max(-1)
    dcfg.threshold = float(np.median(conf))
    r = dynamic_forward(images, tiny_config, w, dcfg)
    assert 0 < r.exit_rate < 1
    e = r.exited_early
    assert np.array_equal(r.logits[e], early[e])
    assert np.array_equal(r.logits[~e], full[~e])


def test_sweep_monotone(tiny_config):
    w, dcfg, images = _setup(tiny_config, split=3, batch=16)
    labels = np.arange(16) % 2
    rows = threshold_sweep([(images, labels)], tiny_config, w, dcfg, np.linspace(0, 1, 11))
    rates = [r["exit_rate"] for r in rows]
    flops = [r["mean_flops"] for r in rows]
    assert rates[0] == 1.0 and rates[-1] == 0.0
    assert all(a >= b for a, b in zip(rates, rates[1:]))
    assert all(a <= b for a, b in zip(flops, flops[1:]))


@pytest.mark.parametrize("kw", [dict(split=0), dict(split=5), dict(threshold=1.5), dict(threshold=-0.1)])
def test_invalid_dynamic_config(tiny_config, kw):
    with pytest.raises(ConfigError):
        DynamicConfig.create(tiny_config, **{"split": 2, "threshold": 0.5, **kw})


def test_hierarchical_rejected(hier_config):
    with pytest.raises(ConfigError):
        DynamicConfig.create(hier_config)
    with pytest.raises(ConfigError):
        flops_count(hier_config, "dynamic_early")


# FLOPs


def test_standard_flops_hand_count():
    c = ModelConfig(depth=4, embed_dim=32, num_heads=4, patch_size=8, image_size=32, mlp_ratio=4)
    assert (c.num_patches, c.num_tokens, c.hidden_dim(32), c.num_classes, c.in_channels) == (16, 17, 128, 2, 1)
    t, d, h = 17, 32, 128
    block = (
        2 * 7 * t * d  # two LayerNorms
        + 4 * 2 * t * d * d  # q, k, v, o projections
        + 2 * 2 * t * t * d  # scores and weighted values
        + 5 * 4 * t * t  # softmax over 4 heads
        + 2 * 2 * t * d * h  # up and down projections
    )
    assert block == 468180
    total = 4 * block + 2 * 16 * 64 * 32 + 7 * 32 + 2 * 32 * 2
    rep = flops_count(c)
    assert rep.total == total == 1938608
    assert rep.per_block == [block] * 4


def test_ensemble_full_equals_standard_plain(tiny_config):
    assert flops_count(tiny_config, "ensemble_full").total == flops_count(tiny_config).total
    pruned = flops_count(tiny_config, "ensemble_pruned", mask=PathMask.last(5, 2))
    assert pruned.total == flops_count(tiny_config).total


def test_early_cheaper_than_full(tiny_config):
    early = flops_count(tiny_config, "dynamic_early", split=2).total
    full = flops_count(tiny_config, "dynamic_full", split=2).total
    assert early < flops_count(tiny_config).total < full


def test_downsample_cost_closed_form(hier_config):
    # merge 2x2 neighbourhoods: LN on 4w channels then a 4w -> 2w projection
    assert downsample_flops(hier_config, 0) == 7 * 16 * 64 + 2 * 16 * 64 * 32 == 72704
    assert downsample_flops(hier_config, 1) == 7 * 4 * 128 + 2 * 4 * 128 * 64 == 69120


def test_hierarchical_surplus_closed_form(hier_config):
    ds0, ds1 = 72704, 69120
    full = flops_count(hier_config, "ensemble_full")
    # boundaries after blocks 2 and 4 see 3 and 5 separate paths
    assert full.components["downsample_surplus"] == 2 * ds0 + 4 * ds1
    assert full.total - flops_count(hier_config).total == 2 * ds0 + 4 * ds1
    assert flops_count(hier_config, "ensemble_full", downsample_mode="synchronized").total == flops_count(hier_config).total


def test_surplus_matches_executed_downsample_calls(hier_config):
    w = random_weights(hier_config)
    x0 = patch_embed(random_images(hier_config), hier_config, w)
    for keep in [PathMask.full(7), PathMask.last(7, 4), PathMask.from_indices(7, [1, 3, 6])]:
        ps = decompose_paths(x0, hier_config, w, "per_path", keep)
        assert ps.downsample_calls == sum(downsample_groups(hier_config, keep))


def test_pruning_to_last_stage_removes_surplus(hier_config):
    rep = flops_count(hier_config, "ensemble_pruned", mask=PathMask.last(7, 2))
    assert rep.components["downsample_surplus"] == 0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.booleans(), min_size=7, max_size=7), st.lists(st.booleans(), min_size=7, max_size=7))
def test_pruning_never_adds_cost(a, b):
    hier = ModelConfig(depth=6, embed_dim=16, num_heads=2, patch_size=4, image_size=32, token_mode="average_pool", stages=((2, True), (2, True), (2, False)))
    big = [x or y for x, y in zip(a, b)]
    small = [x and y for x, y in zip(a, b)]
    if not any(small):
        return
    cost = lambda m: flops_count(hier, "ensemble_pruned", mask=PathMask(tuple(m))).total
    assert cost(small) <= cost(big)
