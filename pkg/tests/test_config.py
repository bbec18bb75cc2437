"""Config parsing, overrides, and echo behavior."""

import pytest

from fedgraphssl.config import RunConfig, apply_overrides, load_config
from fedgraphssl.errors import ConfigError


def test_defaults_echo_every_field():
    echo = RunConfig().echo()
    assert echo["rounds"] == 10
    assert echo["local_epochs"] == 3
    assert echo["tau0"] == 0.90
    assert echo["eta_pl"] == 0.8
    assert echo["seeds"] == [42, 137, 255, 512, 1024]
    # every dataclass field is present in the echo
    assert len(echo) == len(RunConfig.__dataclass_fields__)


def test_load_config_with_sections(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text(
        "# experiment\n"
        "[data]\n"
        "dataset = early_stage\n"
        "scarcity = 0.5\n"
        "[training]\n"
        "learning_rate = 0.005\n"
        "rounds = 4\n"
        "use_agr = false\n"
        "seeds = 1, 2, 3, 4, 5\n"
    )
    cfg = load_config(p)
    assert cfg.dataset == "early_stage"
    assert cfg.scarcity == 0.5
    assert cfg.learning_rate == 0.005
    assert cfg.rounds == 4
    assert cfg.use_agr is False
    assert cfg.seeds == (1, 2, 3, 4, 5)


def test_unknown_key_rejected(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("learning_rte = 0.01\n")
    with pytest.raises(ConfigError, match="unknown key"):
        load_config(p)


def test_malformed_line_rejected(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("just some words\n")
    with pytest.raises(ConfigError, match="key=value"):
        load_config(p)


def test_overrides_win_over_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("scarcity = 0.3\nrounds = 7\n")
    cfg = load_config(p, overrides={"scarcity": "0.7"})
    assert cfg.scarcity == 0.7
    assert cfg.rounds == 7


def test_override_unknown_key():
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), {"nonsense": 1})


def test_validation_catches_bad_values():
    with pytest.raises(ConfigError):
        RunConfig(rounds=0).validate()
    with pytest.raises(ConfigError):
        RunConfig(scarcity=1.0).validate()
    with pytest.raises(ConfigError):
        RunConfig(static_weights="fancy").validate()


def test_derived_views():
    cfg = RunConfig(hidden_dim=16, tau0=0.8, eta_pl=0.5)
    enc = cfg.encoder_config(in_dim=4)
    assert enc.hidden_dim == 16 and enc.in_dim == 4
    assert cfg.schedule().tau0 == 0.8
    assert cfg.loss_weights().eta == 0.5
