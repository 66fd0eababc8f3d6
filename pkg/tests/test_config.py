import dataclasses

import pytest

from opusvfl.config import ConfigError, ExperimentConfig, parse_config, serialize, write_config


def test_defaults_validate():
    ExperimentConfig().validate(strict=False, warn=False)


def test_round_trip_through_file(tmp_path):
    config = ExperimentConfig(
        mode="vanilla",
        seed=99,
        epsilon_init=2.5,
        resource_fraction=(1.0, 0.5, 0.25),
        cost_per_round=(1.5,),
        n_clients=3,
        head_hidden=(32, 16),
        explicit_columns=((0, 1), (2, 3), (4, 5)),
        partition_scheme="explicit",
        synth_informative=(0, 1, 2),
        attack_enabled=True,
        poison_fraction=0.25,
        trigger_columns=(0,),
    )
    path = tmp_path / "config.ini"
    write_config(config, path)
    assert parse_config(path) == config


def test_serialized_text_uses_the_documented_grammar():
    text = serialize(ExperimentConfig())
    assert "[run]" in text and "[privacy]" in text
    assert "mode = opus" in text
    assert "epsilon_init = 1.0" in text


def test_comments_and_missing_attack_section(tmp_path):
    path = tmp_path / "config.ini"
    path.write_text(
        """
# experiment setup
[run]
mode = opus  # inline comment
seed = 3

[data]
dataset = synthetic
n_clients = 4
""",
        encoding="utf-8",
    )
    config = parse_config(path)
    assert config.mode == "opus"
    assert config.seed == 3
    assert config.attack_enabled is False  # attacks disabled by default


def test_unknown_key_is_an_error(tmp_path):
    path = tmp_path / "config.ini"
    path.write_text("[run]\nmod = opus\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="unknown key 'mod'"):
        parse_config(path)


def test_unknown_section_is_an_error(tmp_path):
    path = tmp_path / "config.ini"
    path.write_text("[runs]\nmode = opus\n", encoding="utf-8")
    with pytest.raises(ConfigError, match=r"unknown section \[runs\]"):
        parse_config(path)


def test_duplicate_key_reports_line_number(tmp_path):
    path = tmp_path / "config.ini"
    path.write_text("[run]\nseed = 1\nseed = 2\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="duplicate key 'seed' at line 3"):
        parse_config(path)


def test_type_mismatch_is_an_error(tmp_path):
    path = tmp_path / "config.ini"
    path.write_text("[run]\nseed = abc\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="bad value for seed"):
        parse_config(path)


def test_strict_mode_rejects_out_of_bound_epsilon(tmp_path):
    path = tmp_path / "config.ini"
    path.write_text(
        "[privacy]\nepsilon_init = 0.3\nepsilon_lower = 0.3\n", encoding="utf-8"
    )
    with pytest.raises(ConfigError, match=r"epsilon.*0.3.*bound \[0.5, 5\]"):
        parse_config(path, strict=True)
    # non-strict only warns
    config = parse_config(path, strict=False)
    assert config.epsilon_init == 0.3


def test_out_of_bound_values_warn_when_not_strict(tmp_path, caplog):
    path = tmp_path / "config.ini"
    path.write_text("[privacy]\nsensitivity = 0.001\n", encoding="utf-8")
    with caplog.at_level("WARNING"):
        parse_config(path, strict=False)
    assert "sensitivity" in caplog.text


def test_alpha_beta_only_warn_even_in_strict_mode(tmp_path):
    path = tmp_path / "config.ini"
    path.write_text("[economics]\nalpha = 1.0\nbeta = 10.0\n", encoding="utf-8")
    config = parse_config(path, strict=True)  # beta=10 outside [0.1, 1] but allowed
    assert config.beta == 10.0


def test_warmup_must_precede_end(tmp_path):
    path = tmp_path / "config.ini"
    path.write_text("[run]\ntotal_rounds = 10\nwarmup_rounds = 10\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="warmup"):
        parse_config(path)


def test_missing_file_is_an_error(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        parse_config(tmp_path / "nope.ini")


def test_per_client_broadcast_and_validation():
    config = ExperimentConfig(n_clients=4, resource_fraction=(0.5,))
    assert config.per_client(config.resource_fraction) == [0.5] * 4
    bad = ExperimentConfig(n_clients=4, resource_fraction=(0.5, 0.5))
    with pytest.raises(ConfigError, match="per-client"):
        bad.per_client(bad.resource_fraction)


def test_replace_keeps_equality_semantics():
    base = ExperimentConfig()
    other = dataclasses.replace(base, seed=5)
    assert other != base and dataclasses.replace(other, seed=0) == base
