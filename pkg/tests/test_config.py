import pytest
from hypothesis import given, strategies as st

from pathvit.config import (
    ConfigError,
    ModelConfig,
    config_hash,
    format_keyvalue,
    format_stages,
    model_config_from_keyvalue,
    model_config_to_keyvalue,
    parse_keyvalue,
    parse_stages,
)


def test_defaults_are_desk_model():
    c = ModelConfig()
    assert (c.depth, c.embed_dim, c.num_paths, c.num_tokens) == (4, 32, 5, 17)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(embed_dim=30, num_heads=4),
        dict(image_size=30),
        dict(token_mode="max"),
        dict(depth=-1),
        dict(mlp_ratio=0),
        dict(eps=0),
        dict(depth=4, stages=((2, True), (1, False))),
        dict(depth=4, stages=((2, True), (2, True)), token_mode="average_pool"),
        dict(depth=4, stages=((2, True), (2, False))),  # class token with merging
        # a 4x4 grid cannot be halved three times
        dict(depth=7, stages=((2, True), (2, True), (2, True), (1, False)), token_mode="average_pool"),
    ],
)
def test_invalid_configs(kwargs):
    with pytest.raises(ConfigError):
        ModelConfig(**kwargs)


def test_stage_geometry(hier_config):
    c = hier_config
    assert c.stage_plan() == [(1, 2, True), (3, 4, True), (5, 6, False)]
    assert [c.block_stage(i) for i in range(1, 7)] == [0, 0, 1, 1, 2, 2]
    assert [c.stage_dim(s) for s in range(3)] == [16, 32, 64]
    assert [c.stage_grid(s) for s in range(3)] == [8, 4, 2]
    assert c.boundaries() == [(0, 2), (1, 4)]
    assert c.final_dim == 64 and c.num_downsamples == 2


def test_stage_strings_roundtrip():
    assert parse_stages("2:d, 2:d,2") == ((2, True), (2, True), (2, False))
    assert parse_stages("none") == ()
    assert format_stages(((2, True), (3, False))) == "2:d,3"


def test_keyvalue_parsing():
    text = "# comment\nmodel.depth = 6   # trailing\n\nmodel.stages = 2:d,2:d,2\n"
    assert parse_keyvalue(text) == {"model.depth": "6", "model.stages": "2:d,2:d,2"}
    with pytest.raises(ConfigError, match=":2"):
        parse_keyvalue("a = 1\nbroken line")


def test_model_keyvalue_roundtrip(hier_config):
    kv = model_config_to_keyvalue(hier_config)
    assert model_config_from_keyvalue(parse_keyvalue(format_keyvalue(kv))) == hier_config


def test_unknown_model_key():
    with pytest.raises(ConfigError):
        model_config_from_keyvalue({"model.width": "3"})


def test_dict_roundtrip(hier_config):
    assert ModelConfig.from_dict(hier_config.to_dict()) == hier_config


@given(st.dictionaries(st.text(min_size=1, max_size=5), st.integers(), max_size=5))
def test_hash_ignores_key_order(d):
    assert config_hash(d) == config_hash(dict(reversed(list(d.items()))))
    assert len(config_hash(d)) == 16


def test_hash_changes_with_content():
    assert config_hash(ModelConfig().to_dict()) != config_hash(ModelConfig(depth=5).to_dict())
