"""Flat config parsing, overrides, and snapshot round trips."""

import pytest

from slotgcd.config import (PipelineConfig, apply_overrides, from_flat_dict,
                            load_config, to_flat_dict)
from slotgcd.errors import ConfigurationError


CONFIG_TEXT = """
# desk-scale run
seed=3
out_dir=runs/demo
backbone.kind=synthetic
backbone.feat_dim=16
clusterer.k_max=12    # inline comment
clusterer.d_slot=24
loss.lambda_u=0.5
data.scene_noise=false
optim.epochs=4
"""


def test_defaults_match_reference_settings():
    cfg = PipelineConfig()
    assert cfg.clusterer.k_max == 50
    assert cfg.clusterer.d_slot == 64
    assert cfg.decoder.layers == 4
    assert cfg.decoder.hidden == 128
    assert (cfg.loss.lambda_u, cfg.loss.lambda_s, cfg.loss.lambda_rec) == (0.6, 0.3, 0.1)
    assert cfg.data.labeled_fraction == 0.5
    cfg.validate()


def test_load_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(CONFIG_TEXT)
    cfg = load_config(path)
    assert cfg.seed == 3
    assert cfg.out_dir == "runs/demo"
    assert cfg.clusterer.k_max == 12
    assert cfg.clusterer.d_slot == 24
    assert cfg.loss.lambda_u == 0.5
    assert cfg.data.scene_noise is False
    assert cfg.optim.epochs == 4


def test_cli_overrides_win(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(CONFIG_TEXT)
    cfg = load_config(path, overrides=["clusterer.k_max=5", "seed=9"])
    assert cfg.clusterer.k_max == 5
    assert cfg.seed == 9


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("clusterer.bogus=1\n")
    with pytest.raises(ConfigurationError):
        load_config(path)
    path.write_text("nosection=1\n")
    with pytest.raises(ConfigurationError):
        load_config(path)


def test_bad_value_rejected(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("clusterer.k_max=five\n")
    with pytest.raises(ConfigurationError):
        load_config(path)


def test_validation_catches_bad_combinations():
    cfg = PipelineConfig()
    cfg.clusterer.gumbel_temperature = 0.0
    with pytest.raises(ConfigurationError):
        cfg.validate()
    cfg = PipelineConfig()
    cfg.optim.batch_size = 1
    with pytest.raises(ConfigurationError):
        cfg.validate()
    cfg = PipelineConfig()
    cfg.backbone.kind = "pretrained-vit"
    cfg.backbone.input_size = 225
    with pytest.raises(ConfigurationError):
        cfg.validate()


def test_apply_overrides_copies():
    cfg = PipelineConfig()
    clone = apply_overrides(cfg, ["clusterer.k_max=7"])
    assert clone.clusterer.k_max == 7
    assert cfg.clusterer.k_max == 50
    with pytest.raises(ConfigurationError):
        apply_overrides(cfg, ["no.such_key=1"])


def test_flat_roundtrip():
    cfg = PipelineConfig()
    cfg.seed = 42
    cfg.clusterer.k_max = 9
    cfg.data.known = "ids:0,1"
    rebuilt = from_flat_dict(to_flat_dict(cfg))
    assert rebuilt == cfg


def test_known_spec_parsing():
    cfg = PipelineConfig()
    cfg.data.known = "0.8"
    assert cfg.data.known_spec() == 0.8
    cfg.data.known = "ids:3,1,2"
    assert cfg.data.known_spec() == [3, 1, 2]
    cfg.data.known = "ids:"
    with pytest.raises(ConfigurationError):
        cfg.data.known_spec()
    cfg.data.known = "banana"
    with pytest.raises(ConfigurationError):
        cfg.data.known_spec()
