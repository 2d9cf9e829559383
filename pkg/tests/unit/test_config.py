"""Tests for training configuration loading."""

import pytest

from egm.config import NetConfig, PathConfig, Settings, TrainConfig, load_config
from egm.core.exceptions import ConfigError
from egm.core.types import IsingSpec


def test_shipped_configs_load(config_dir):
    paths = sorted(config_dir.glob("*.toml"))
    assert len(paths) >= 10
    for path in paths:
        config = load_config(path)
        assert config.outer_iterations >= 1


def test_gbrbm_config(config_dir):
    config = load_config(config_dir / "gbrbm_bs.toml")
    assert config.bootstrap
    assert config.epsilon == 0.01
    assert config.clip_norms == (20.0, 100.0)
    assert (config.net.hidden_dim, config.net.num_layers, config.net.residual) == (128, 6, True)
    assert config.task.W == [[10.0, 0.0, 10.0], [0.0, 10.0, 0.0]]


def test_plain_and_bootstrap_ising(config_dir):
    plain = load_config(config_dir / "ising5_b02.toml")
    assert not plain.bootstrap
    assert plain.inner_steps == 100
    boot = load_config(config_dir / "ising5_b04_bs.toml")
    assert boot.bootstrap and boot.forward_looking
    assert boot.inner_steps == 1000
    assert boot.task == IsingSpec(L=5, beta=0.4)


def test_jointmog_uses_ve(config_dir):
    config = load_config(config_dir / "jointmog_bs.toml")
    assert config.path.continuous == "ve"
    assert (config.path.sigma_min, config.path.sigma_max) == (0.01, 2.0)
    assert config.task.d == 10


def test_defaults():
    config = TrainConfig(task=IsingSpec())
    assert (config.lambda_disc, config.lambda_cont) == (5.0, 1.0)
    assert config.clip_norms == (100.0, 1000.0)
    assert config.inner_steps == 100
    assert config.total_inner_steps == 100 * 100
    assert config.model_copy(update={"epsilon": 0.05}).inner_steps == 1000


def test_overrides(config_dir):
    config = load_config(
        config_dir / "ising5_b02.toml", seed=7, outer_iterations=3, epsilon=0.1, inner_iterations=None
    )
    assert (config.seed, config.outer_iterations, config.epsilon) == (7, 3, 0.1)
    assert config.inner_steps == 100


def test_unknown_key(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text('learning_rate = 0.1\n[task]\ntask = "ising"\n')
    with pytest.raises(ConfigError, match="learning_rate"):
        load_config(path)


def test_malformed_toml(tmp_path):
    path = tmp_path / "broken.toml"
    path.write_text('seed = \n[task\ntask = "ising"\n')
    with pytest.raises(ConfigError, match="line"):
        load_config(path)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.toml")


def test_invalid_values(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text('epsilon = -1.0\n[task]\ntask = "ising"\n')
    with pytest.raises(ConfigError, match="epsilon"):
        load_config(path)
    with pytest.raises(ValueError):
        PathConfig(continuous="ve", sigma_min=2.0, sigma_max=1.0)
    with pytest.raises(ValueError):
        NetConfig(time_embed_dim=7)


def test_settings_from_environment(monkeypatch):
    monkeypatch.setenv("EGM_RUNS_DIR", "/tmp/egm-runs")
    monkeypatch.setenv("EGM_REFERENCE_MODE", "false")
    settings = Settings()
    assert settings.runs_dir == "/tmp/egm-runs"
    assert settings.reference_mode is False
