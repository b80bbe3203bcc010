import dataclasses

import pytest

from ovnav.config import (
    DESK_CATEGORIES,
    ExperimentConfig,
    config_echo,
    load_config,
    parse_config,
    save_config,
)
from ovnav.errors import ConfigurationError, DataError


def test_defaults_are_valid():
    cfg = ExperimentConfig()
    assert cfg.scene_size == 192 and cfg.crop == 160 and cfg.patch == 16
    assert len(DESK_CATEGORIES) == 16 and DESK_CATEGORIES[-1] == "other"


def test_echo_roundtrip():
    for cfg in (ExperimentConfig(),
                ExperimentConfig(policy="fbe", sigma=0.0, crop=96,
                                 scene_size=128, holdout="plant,desk",
                                 eval_episodes=7)):
        assert parse_config(config_echo(cfg)) == cfg


def test_parse_ignores_comments_and_blanks():
    cfg = parse_config("# comment\n\n  policy = fbe  \n\ncrop=96\nscene_size=128\n")
    assert cfg.policy == "fbe" and cfg.crop == 96


def test_parse_rejects_malformed():
    with pytest.raises(DataError):
        parse_config("policy fbe\n")
    with pytest.raises(DataError):
        parse_config("no_such_knob=3\n")
    with pytest.raises(DataError):
        parse_config("crop=96\ncrop=128\nscene_size=128\n")
    with pytest.raises(DataError):
        parse_config("crop=ninety\n")


def test_range_validation():
    with pytest.raises(ConfigurationError):
        ExperimentConfig(policy="slam")
    with pytest.raises(ConfigurationError):
        ExperimentConfig(crop=256)  # exceeds scene_size
    with pytest.raises(ConfigurationError):
        ExperimentConfig(sigma=1.5)
    with pytest.raises(ConfigurationError):
        ExperimentConfig(embodiment="drone")
    with pytest.raises(ConfigurationError):
        ExperimentConfig(holdout="bed,unicorn")
    with pytest.raises(ConfigurationError):
        ExperimentConfig(holdout="other")
    with pytest.raises(ConfigurationError):
        ExperimentConfig(crop=150)  # not divisible by patch
    with pytest.raises(ConfigurationError):
        ExperimentConfig(dtype="float16")
    with pytest.raises(ConfigurationError):
        ExperimentConfig(eval_episodes=0)


def test_holdout_flows_into_training_pool():
    cfg = ExperimentConfig(holdout="plant,desk,bed,toilet")
    tc = cfg.train_config()
    banned = {DESK_CATEGORIES.index(n) for n in ("plant", "desk", "bed", "toilet")}
    assert set(tc.allowed) == set(range(16)) - banned
    assert ExperimentConfig().train_config().allowed is None


def test_subconfig_views():
    cfg = ExperimentConfig(scene_size=128, crop=96, policy="fbe", tau=3.0)
    assert cfg.scene_config().size == 128
    assert cfg.agent_config().mode == "fbe"
    assert cfg.agent_config(mode="ovexp").mode == "ovexp"
    assert cfg.agent_config(map_type="vision").map_type == "vision"
    assert cfg.agent_config().tau == 3.0
    assert cfg.collect_config().steps == cfg.collect_steps
    assert cfg.policy_config().map_size == 96
    assert cfg.policy_config(patch=32).patch == 32
    with pytest.raises(ConfigurationError):
        cfg.policy_config(patch=28)  # 96 % 28 != 0
    assert len(cfg.vocabulary()) == 16


def test_file_roundtrip(tmp_path):
    cfg = ExperimentConfig(eval_seed=42, lr=3e-4)
    path = tmp_path / "exp.txt"
    save_config(path, cfg)
    assert load_config(path) == cfg
    with pytest.raises(DataError):
        load_config(tmp_path / "missing.txt")


def test_echo_is_canonical_field_order():
    lines = config_echo(ExperimentConfig()).splitlines()
    names = [f.name for f in dataclasses.fields(ExperimentConfig)]
    assert [ln.split("=")[0] for ln in lines] == names
