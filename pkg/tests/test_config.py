"""Strict config parsing: defaults, errors with key names, echo round-trip."""

import pytest

from enecg.config import ENV_SEED, echo_config, load_config
from enecg.errors import ConfigError


def write(tmp_path, text):
    path = tmp_path / "exp.cfg"
    path.write_text(text)
    return path


def test_minimal_config_fills_defaults(tmp_path):
    cfg, saliency = load_config(write(tmp_path, "[experiment]\nseed = 7\n"))
    assert cfg.seed == 7
    assert cfg.epochs == 30 and cfg.batch_size == 32
    assert cfg.split == (0.7, 0.2, 0.1)
    assert len(cfg.experts) == 3
    assert saliency == {}


def test_bad_split_sum_is_named(tmp_path):
    path = write(tmp_path, "[experiment]\nseed = 1\nsplit = 0.7,0.2,0.2\n")
    with pytest.raises(ConfigError, match="sum to 1"):
        load_config(path)


def test_unknown_key_is_error_with_name(tmp_path):
    path = write(tmp_path, "[experiment]\nseed = 1\nepochz = 3\n")
    with pytest.raises(ConfigError, match="epochz"):
        load_config(path)


def test_unknown_section_is_error(tmp_path):
    path = write(tmp_path, "[experimant]\nseed = 1\n")
    with pytest.raises(ConfigError, match="experimant"):
        load_config(path)


def test_type_mismatch_names_key_and_line(tmp_path):
    path = write(tmp_path, "[experiment]\nseed = 1\nepochs = many\n")
    with pytest.raises(ConfigError, match=r":3.*experiment\.epochs"):
        load_config(path)


def test_duplicate_key_rejected(tmp_path):
    path = write(tmp_path, "[experiment]\nseed = 1\nseed = 2\n")
    with pytest.raises(ConfigError, match="duplicate"):
        load_config(path)


def test_missing_seed_is_config_error(tmp_path, monkeypatch):
    monkeypatch.delenv(ENV_SEED, raising=False)
    path = write(tmp_path, "[experiment]\nepochs = 2\n")
    with pytest.raises(ConfigError, match="seed"):
        load_config(path)


def test_env_seed_is_lowest_priority(tmp_path, monkeypatch):
    monkeypatch.setenv(ENV_SEED, "99")
    cfg, _ = load_config(write(tmp_path, "[experiment]\nepochs = 2\n"))
    assert cfg.seed == 99
    cfg, _ = load_config(write(tmp_path, "[experiment]\nseed = 5\n"))
    assert cfg.seed == 5
    cfg, _ = load_config(write(tmp_path, "[experiment]\nseed = 5\n"), seed_override=3)
    assert cfg.seed == 3


def test_ensemble_selector(tmp_path):
    cfg, _ = load_config(write(tmp_path, "[experiment]\nseed = 1\nensemble = moe\n"))
    assert cfg.ensemble == "moe"
    path = write(tmp_path, "[experiment]\nseed = 1\nensemble = voting\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_roster_parsing(tmp_path):
    text = ("[experiment]\nseed = 1\n[experts]\n"
            "roster = a:spectral:4:-:32; b:statistical:5:128:16\n")
    cfg, _ = load_config(write(tmp_path, text))
    assert [s.name for s in cfg.experts] == ["a", "b"]
    assert cfg.experts[0].input_len is None
    assert cfg.experts[1].input_len == 128


def test_echo_roundtrip(tmp_path):
    text = ("[experiment]\nseed = 3\nepochs = 7\ntasks = rr,sex\n"
            "[heads]\nrank = 2\n[gating]\nleads = 0,2\n"
            "[data]\nnoise_amplitude = 0.01\n[saliency]\nsteps = 32\n")
    cfg, sal = load_config(write(tmp_path, text))
    echoed = write(tmp_path, echo_config(cfg, sal))
    cfg2, sal2 = load_config(echoed)
    assert cfg == cfg2
    assert sal2 == {"steps": 32}
