from __future__ import annotations

import csv
import math
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Literal

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field
from torch import nn
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

from blocksel.errors import DatasetError, TrainingDivergedError
from blocksel.ga import Genotype
from blocksel.model_adapter import (
    BlockedModel,
    apply_genotype,
    set_train_mode,
    trainable_parameters,
)
from blocksel.provenance import stable_hash
from blocksel.telemetry import emit, get_logger

log = get_logger(__name__)

METRICS_COLUMNS = ("epoch", "train_acc", "val_acc", "elapsed_s")

# Fields that describe the machine rather than the experiment.
MACHINE_FIELDS = {"device", "num_workers", "show_progress"}

ModelFactory = Callable[[], BlockedModel]


class TrainConfig(BaseModel):
    """
    Fine-tuning hyperparameters. Defaults: Adam at 1e-4, batch size 32.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    optimizer: Literal["adam"] = "adam"
    learning_rate: float = Field(default=1e-4, gt=0.0)
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = Field(default=32, ge=1)
    epochs: int = Field(default=100, ge=1)
    block_accuracy_epochs: int = Field(default=20, ge=1)
    early_stopping_patience: int | None = Field(default=None, ge=1)
    fitness_split: Literal["val", "test"] = "val"
    seed: int = Field(default=0, ge=0, lt=2**63)

    device: str = "cpu"
    num_workers: int = Field(default=0, ge=0)
    show_progress: bool = False


def train_config_hash(config: TrainConfig) -> str:
    return stable_hash(config.model_dump(mode="json", exclude=MACHINE_FIELDS))


def resolve_device(name: str) -> torch.device:
    if name == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")

    return torch.device(name)


def epoch_generator(seed: int, epoch: int) -> torch.Generator:
    state = np.random.SeedSequence([seed, epoch]).generate_state(1, dtype=np.uint64)[0]
    generator = torch.Generator()
    generator.manual_seed(int(state))

    return generator


@dataclass
class ExperimentRecord:
    """
    Metrics of one fine-tuned model. evaluation_time is milliseconds per
    batch; the other times are seconds.
    """

    selection_runtime: float
    training_time: float
    evaluation_time: float
    accuracy: float
    trainable_params: int
    genotype: Genotype
    config_hash: str
    seed: int
    dataset_id: str = ""
    hardware: str = ""
    epochs: int = 0

    def __post_init__(self) -> None:
        for name in ("selection_runtime", "training_time", "evaluation_time"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError("accuracy must be in [0, 1]")

        if self.trainable_params < 0:
            raise ValueError("trainable_params must be non-negative")

    def to_dict(self) -> dict[str, Any]:
        return {
            "selection_runtime": self.selection_runtime,
            "training_time": self.training_time,
            "evaluation_time": self.evaluation_time,
            "accuracy": self.accuracy,
            "trainable_params": self.trainable_params,
            "genotype": self.genotype.to_string(),
            "config_hash": self.config_hash,
            "seed": self.seed,
            "dataset_id": self.dataset_id,
            "hardware": self.hardware,
            "epochs": self.epochs,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ExperimentRecord:
        return cls(
            selection_runtime=float(data["selection_runtime"]),
            training_time=float(data["training_time"]),
            evaluation_time=float(data["evaluation_time"]),
            accuracy=float(data["accuracy"]),
            trainable_params=int(data["trainable_params"]),
            genotype=Genotype.from_string(str(data["genotype"])),
            config_hash=str(data["config_hash"]),
            seed=int(data["seed"]),
            dataset_id=str(data.get("dataset_id", "")),
            hardware=str(data.get("hardware", "")),
            epochs=int(data.get("epochs", 0)),
        )


@dataclass
class FineTuneResult:
    model: BlockedModel
    train_curve: list[float] = field(default_factory=list)
    val_curve: list[float] = field(default_factory=list)
    training_time: float = 0.0
    optimizer_steps: int = 0

    @property
    def epochs_run(self) -> int:
        return len(self.train_curve)


class MetricsRecorder:
    """
    Per-epoch metrics CSV. Safe to call from several threads.
    """

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

        with self.path.open("w", encoding="utf-8", newline="") as f:
            csv.writer(f, lineterminator="\n").writerow(METRICS_COLUMNS)

    def record(self, epoch: int, train_acc: float, val_acc: float | None, elapsed_s: float) -> None:
        row = [epoch, repr(train_acc), "" if val_acc is None else repr(val_acc), f"{elapsed_s:.3f}"]

        with self._lock, self.path.open("a", encoding="utf-8", newline="") as f:
            csv.writer(f, lineterminator="\n").writerow(row)


def _device_of(network: nn.Module) -> torch.device:
    try:
        return next(network.parameters()).device
    except StopIteration:
        return torch.device("cpu")


def evaluate(
    model: BlockedModel | nn.Module,
    split: Dataset,
    batch_size: int = 32,
) -> tuple[float, float]:
    """
    Accuracy over the whole split and mean wall-clock milliseconds per batch.
    """

    if len(split) == 0:
        raise DatasetError("cannot evaluate on an empty split")

    network = model.network if isinstance(model, BlockedModel) else model
    device = _device_of(network)
    network.eval()

    correct = 0
    total = 0
    batch_times: list[float] = []

    with torch.inference_mode():
        for images, labels in DataLoader(split, batch_size=batch_size, shuffle=False):
            start = time.perf_counter()
            predictions = network(images.to(device)).argmax(dim=1).cpu()
            batch_times.append(time.perf_counter() - start)

            correct += int((predictions == labels).sum().item())
            total += int(labels.numel())

    return correct / total, 1000.0 * float(np.mean(batch_times))


def fine_tune(
    model: BlockedModel,
    train: Dataset,
    val: Dataset | None,
    config: TrainConfig,
    *,
    epochs: int | None = None,
    metrics_path: str | Path | None = None,
    events_path: str | Path | None = None,
    desc: str = "fine-tune",
) -> FineTuneResult:
    """
    Train the trainable part of a genotype-configured model.

    Frozen blocks and the stem stay bit-identical. With val given, the
    validation accuracy is recorded after every epoch.
    """

    if len(train) == 0:
        raise DatasetError("cannot train on an empty split")

    epochs = config.epochs if epochs is None else epochs
    device = resolve_device(config.device)
    torch.manual_seed(config.seed)

    network = model.network.to(device)
    optimizer = torch.optim.Adam(
        trainable_parameters(model),
        lr=config.learning_rate,
        betas=config.betas,
    )
    criterion = nn.CrossEntropyLoss()
    recorder = MetricsRecorder(metrics_path) if metrics_path is not None else None
    result = FineTuneResult(model=model)

    best_val = -math.inf
    stale = 0
    start = time.perf_counter()

    for epoch in tqdm(range(epochs), desc=desc, disable=not config.show_progress, leave=False):
        loader = DataLoader(
            train,
            batch_size=config.batch_size,
            shuffle=True,
            generator=epoch_generator(config.seed, epoch),
            num_workers=config.num_workers,
        )
        set_train_mode(model)
        correct = 0
        total = 0

        for images, labels in loader:
            images = images.to(device)
            labels = labels.to(device)

            optimizer.zero_grad(set_to_none=True)
            logits = network(images)
            loss = criterion(logits, labels)

            if not torch.isfinite(loss):
                diagnostics = {
                    "epoch": epoch,
                    "step": result.optimizer_steps,
                    "loss": float(loss.item()),
                    "learning_rate": config.learning_rate,
                }
                emit("run.failed", {"stage": "train", **diagnostics}, events_path=events_path)
                raise TrainingDivergedError(
                    f"loss became non-finite at epoch {epoch}",
                    diagnostics,
                )

            loss.backward()
            optimizer.step()
            result.optimizer_steps += 1

            correct += int((logits.argmax(dim=1) == labels).sum().item())
            total += int(labels.numel())

        train_acc = correct / total
        val_acc = None
        if val is not None:
            val_acc, _ = evaluate(model, val, config.batch_size)
            result.val_curve.append(val_acc)
        result.train_curve.append(train_acc)

        elapsed = time.perf_counter() - start
        if recorder is not None:
            recorder.record(epoch + 1, train_acc, val_acc, elapsed)

        emit(
            "train.epoch.completed",
            {"epoch": epoch + 1, "train_acc": train_acc, "val_acc": val_acc, "elapsed_s": elapsed},
            events_path=events_path,
        )

        patience = config.early_stopping_patience
        if patience is not None and val_acc is not None:
            if val_acc > best_val:
                best_val, stale = val_acc, 0
            else:
                stale += 1
                if stale >= patience:
                    log.info("early stop after epoch %d", epoch + 1)
                    break

    network.eval()
    result.training_time = time.perf_counter() - start

    emit(
        "train.completed",
        {
            "epochs": result.epochs_run,
            "optimizer_steps": result.optimizer_steps,
            "training_time": result.training_time,
        },
        events_path=events_path,
    )

    return result


def ga_fitness(
    genotype: Genotype,
    model_factory: ModelFactory,
    train: Dataset,
    val: Dataset,
    config: TrainConfig,
    *,
    cache: dict[tuple[Genotype, str], float] | None = None,
    config_hash: str | None = None,
) -> float:
    """
    Accuracy on val after one epoch of training with the genotype applied.
    """

    key = (genotype, config_hash or train_config_hash(config))
    if cache is not None and key in cache:
        return cache[key]

    model = apply_genotype(model_factory(), genotype)
    fine_tune(model, train, None, config, epochs=1, desc=f"fitness {genotype}")
    accuracy, _ = evaluate(model, val, config.batch_size)

    if cache is not None:
        cache[key] = accuracy

    return accuracy


class FitnessEvaluator:
    """
    Callable fitness for the GA with a (genotype, config_hash) cache.
    """

    def __init__(
        self,
        model_factory: ModelFactory,
        train: Dataset,
        val: Dataset,
        config: TrainConfig,
        *,
        config_hash: str | None = None,
    ) -> None:
        self.model_factory = model_factory
        self.train = train
        self.val = val
        self.config = config
        self.config_hash = config_hash or train_config_hash(config)
        self.cache: dict[tuple[Genotype, str], float] = {}
        self.trainings = 0

    def __call__(self, genotype: Genotype) -> float:
        key = (genotype, self.config_hash)
        if key in self.cache:
            return self.cache[key]

        self.trainings += 1

        return ga_fitness(
            genotype,
            self.model_factory,
            self.train,
            self.val,
            self.config,
            cache=self.cache,
            config_hash=self.config_hash,
        )


def block_accuracy(
    block_id: int,
    model_factory: ModelFactory,
    train: Dataset,
    test: Dataset,
    config: TrainConfig,
    *,
    val: Dataset | None = None,
    epochs: int | None = None,
) -> tuple[float, float]:
    """
    Train and test accuracy with only block_id (and the head) trainable.

    Train accuracy is the final epoch's; test accuracy is measured on the
    final model.
    """

    model = model_factory()
    apply_genotype(model, Genotype.one_hot(model.num_blocks, block_id))

    result = fine_tune(
        model,
        train,
        val if config.early_stopping_patience is not None else None,
        config,
        epochs=epochs or config.block_accuracy_epochs,
        desc=f"block {block_id}",
    )
    test_accuracy, _ = evaluate(model, test, config.batch_size)

    return result.train_curve[-1], test_accuracy
