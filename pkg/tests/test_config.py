from importlib import resources

import pytest

from hdnet.config import ConfigError, default_config, load_config
from hdnet.skeleton import default_skeleton


def _write(tmp_path, text):
    p = tmp_path / "exp.toml"
    p.write_text(text)
    return p


def test_default_config_loads():
    cfg = default_config()
    assert cfg.model.input_size == 64 and cfg.model.heatmap_size == 16
    assert cfg.optim.steps == 5000 and cfg.optim.batch_size == 16
    assert cfg.optim.decay_factor == 0.8 and cfg.optim.decay_interval == 500
    assert len(cfg.ablate.seeds) >= 3
    assert cfg.hash() == default_config().hash()


def test_unknown_key_names_path(tmp_path):
    with pytest.raises(ConfigError, match=r"model\.foo"):
        load_config(_write(tmp_path, "[model]\nfoo = 1\n"))
    with pytest.raises(ConfigError, match=r"model\.bin_config\.gamma"):
        load_config(_write(tmp_path, "[model.bin_config]\ngamma = 1\n"))
    with pytest.raises(ConfigError, match="unknown config key 'extra'"):
        load_config(_write(tmp_path, "extra = 3\n"))


def test_invalid_values_name_section(tmp_path):
    with pytest.raises(ConfigError, match="optim"):
        load_config(_write(tmp_path, "[optim]\ndecay_factor = 1.5\n"))
    with pytest.raises(ConfigError, match="optim"):
        load_config(_write(tmp_path, "[optim]\nsteps = 0\n"))
    with pytest.raises(ConfigError, match="model"):
        load_config(_write(tmp_path, "[model]\nvariant = 'tiny'\n"))
    with pytest.raises(ConfigError, match="gen.depth_range"):
        load_config(_write(tmp_path, "[gen]\ndepth_range = [500.0, 11000.0]\n"))
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, "[optim\n"))
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.toml")


def test_skeleton_path_relative_to_config(tmp_path):
    skel = default_skeleton()
    (tmp_path / "skel.toml").write_text(resources.files("hdnet.data").joinpath("skeleton16.toml").read_text())
    cfg = load_config(_write(tmp_path, "[gen]\nskeleton = 'skel.toml'\n"))
    assert cfg.gen.skeleton == skel
    with pytest.raises(ConfigError, match="gen.skeleton"):
        load_config(_write(tmp_path, "[gen]\nskeleton = 'nope.toml'\n"))


def test_file_overlays_desk_defaults(tmp_path):
    cfg = load_config(_write(tmp_path, "seed = 4\n[optim]\nsteps = 10\n"))
    desk = default_config()
    assert cfg.seed == 4 and cfg.optim.steps == 10
    assert cfg.optim.lr == desk.optim.lr and cfg.model == desk.model


def test_overrides_and_hash_change():
    cfg = default_config()
    other = cfg.with_overrides(seed=7)
    assert other.seed == 7 and other.hash() != cfg.hash()
    assert '"seed": 7' in other.dumps()
