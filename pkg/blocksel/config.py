from __future__ import annotations

from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, ValidationError

from blocksel.baselines import PUBLISHED_ACCURACY, PUBLISHED_BLOCK_IMPORTANCE, BaselineKey
from blocksel.data import DatasetSpec
from blocksel.errors import ConfigurationError
from blocksel.ga import GAConfig
from blocksel.otdd import OTDDConfig
from blocksel.provenance import canonical_json, stable_hash
from blocksel.trainer import MACHINE_FIELDS, TrainConfig


class ModelSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    name: Literal["efficientnet_b0", "toy"] = "efficientnet_b0"
    pretrained: bool = True


class RunConfig(BaseModel):
    """
    One experiment: target dataset, optional source dataset for block
    importance, network, and the GA / training / OTDD settings.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    dataset: DatasetSpec
    source_dataset: DatasetSpec | None = None
    model: ModelSpec = ModelSpec()
    ga: GAConfig = GAConfig()
    train: TrainConfig = TrainConfig()
    otdd: OTDDConfig = OTDDConfig()
    output_dir: str = "runs/default"
    baseline: BaselineKey | None = None
    conventional_baseline: bool = True

    def baseline_constants(self) -> dict[str, Any]:
        if self.baseline is None:
            return {}

        return {
            "accuracy": PUBLISHED_ACCURACY[self.baseline],
            "block_importance": PUBLISHED_BLOCK_IMPORTANCE[self.baseline],
        }

    def with_seed(self, seed: int) -> RunConfig:
        """
        Copy with every component re-seeded from one value.
        """

        update: dict[str, Any] = {
            "ga": self.ga.model_copy(update={"seed": seed}),
            "train": self.train.model_copy(update={"seed": seed}),
            "otdd": self.otdd.model_copy(update={"seed": seed}),
            "dataset": self.dataset.model_copy(update={"seed": seed}),
        }
        if self.source_dataset is not None:
            update["source_dataset"] = self.source_dataset.model_copy(
                update={"seed": seed + 1000}
            )

        return self.model_copy(update=update)

    def with_output_dir(self, output_dir: str | Path) -> RunConfig:
        return self.model_copy(update={"output_dir": str(output_dir)})

    @classmethod
    def toy(cls, output_dir: str | Path = "runs/toy", seed: int = 0) -> RunConfig:
        """
        Desk-scale run: toy 3-block CNN on 3-class synthetic patterns.
        """

        def synthetic(name: str, data_seed: int) -> DatasetSpec:
            return DatasetSpec(
                name=name,
                kind="synthetic",
                num_classes=3,
                image_size=(32, 32),
                samples_per_class=100,
                seed=data_seed,
            )

        return cls(
            dataset=synthetic("synthetic", seed),
            source_dataset=synthetic("synthetic-source", seed + 1000),
            model=ModelSpec(name="toy", pretrained=False),
            ga=GAConfig(generations=10, seed=seed),
            train=TrainConfig(
                learning_rate=5e-3,
                batch_size=16,
                epochs=10,
                block_accuracy_epochs=5,
                seed=seed,
            ),
            otdd=OTDDConfig(solver="exact", subsample=60, seed=seed),
            output_dir=str(output_dir),
        )


def _hashable_view(config: RunConfig) -> dict[str, Any]:
    return config.model_dump(
        mode="json",
        exclude={"output_dir": True, "train": set(MACHINE_FIELDS)},
    )


def config_preimage(config: RunConfig) -> str:
    return canonical_json(_hashable_view(config))


def config_hash(config: RunConfig) -> str:
    """
    12 hex characters identifying everything that affects results.
    """

    return stable_hash(_hashable_view(config))


def parse_config(data: Any, origin: str = "<config>") -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigurationError(f"{origin}: expected a mapping at top level")

    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigurationError(f"{origin}: {exc}") from exc


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)

    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")

    with path.open("r", encoding="utf-8") as f:
        try:
            data = yaml.safe_load(f)
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"{path}: {exc}") from exc

    return parse_config(data, str(path))


def dump_config(config: RunConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    with path.open("w", encoding="utf-8") as f:
        yaml.safe_dump(config.model_dump(mode="json"), f, sort_keys=False)

    return path
