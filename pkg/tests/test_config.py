from pathlib import Path

import pytest

from blocksel.config import (
    RunConfig,
    config_hash,
    config_preimage,
    dump_config,
    load_config,
    parse_config,
)
from blocksel.errors import ConfigurationError

CONFIG_DIR = Path(__file__).resolve().parents[1] / "config"


def build_mango_dict():
    return {
        "dataset": {
            "name": "mangoleafbd",
            "kind": "folder",
            "source": "data/MangoLeafBD",
            "num_classes": 8,
        },
        "baseline": "mangoleafbd",
        "output_dir": "runs/mango",
    }


def test_defaults_follow_reference_setup():
    config = parse_config(build_mango_dict())

    assert config.ga.population_size == 7
    assert config.ga.mutation_rate == 0.01
    assert config.train.learning_rate == 1e-4
    assert config.train.batch_size == 32
    assert config.model.name == "efficientnet_b0"


def test_learning_rate_is_written_plainly_in_hash_preimage():
    config = parse_config(build_mango_dict())

    assert '"learning_rate": 0.0001' in config_preimage(config)


def test_dump_and_load_give_the_same_config(tmp_path):
    config = RunConfig.toy(output_dir=tmp_path / "toy")

    loaded = load_config(dump_config(config, tmp_path / "config.yml"))

    assert loaded == config
    assert config_hash(loaded) == config_hash(config)


def test_hash_ignores_output_dir_and_machine_settings():
    config = parse_config(build_mango_dict())
    moved = config.with_output_dir("/scratch/elsewhere")
    on_gpu = config.model_copy(
        update={"train": config.train.model_copy(update={"device": "cuda", "num_workers": 8})}
    )

    assert config_hash(moved) == config_hash(config)
    assert config_hash(on_gpu) == config_hash(config)
    assert len(config_hash(config)) == 12


def test_hash_changes_with_seed():
    config = RunConfig.toy()

    assert config_hash(config.with_seed(1)) != config_hash(config)
    assert config.with_seed(1).source_dataset.seed == 1001


def test_unknown_keys_are_rejected():
    data = build_mango_dict()
    data["ga"] = {"populaton_size": 9}

    with pytest.raises(ConfigurationError, match="populaton_size"):
        parse_config(data)


def test_top_level_must_be_a_mapping():
    with pytest.raises(ConfigurationError, match="mapping"):
        parse_config(["dataset"])


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigurationError, match="not found"):
        load_config(tmp_path / "absent.yml")


def test_malformed_yaml(tmp_path):
    path = tmp_path / "bad.yml"
    path.write_text("dataset: [unclosed\n", encoding="utf-8")

    with pytest.raises(ConfigurationError, match="bad.yml"):
        load_config(path)


def test_baseline_constants_come_from_published_results():
    config = parse_config(build_mango_dict())

    constants = config.baseline_constants()

    assert set(constants) == {"accuracy", "block_importance"}
    assert parse_config({**build_mango_dict(), "baseline": None}).baseline_constants() == {}


def test_shipped_configs_parse():
    configs = sorted(CONFIG_DIR.glob("*.yml"))

    assert {p.stem for p in configs} == {"cifar100", "food101", "mangoleafbd", "toy"}
    for path in configs:
        config = load_config(path)
        assert config.output_dir == f"runs/{path.stem}"


def test_shipped_toy_config_matches_toy_flag():
    assert load_config(CONFIG_DIR / "toy.yml") == RunConfig.toy()
