from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Literal, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError
from pydantic import BaseModel, ConfigDict, Field, model_validator
from torch.utils.data import DataLoader, Dataset
from torchvision import datasets, transforms

from blocksel.errors import ConfigurationError, DatasetError, StratificationError
from blocksel.provenance import write_json
from blocksel.telemetry import get_logger

log = get_logger(__name__)

# Preprocessing the ImageNet-pretrained torchvision weights expect.
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png", ".bmp", ".gif", ".tif", ".tiff", ".webp"}

SYNTHETIC_BASE_SIZE = 32

Split = Literal["train", "val", "test"]


class DatasetSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str = Field(min_length=1)
    kind: Literal["folder", "cifar100", "food101", "synthetic"]
    source: str | None = None
    num_classes: int = Field(ge=1)
    image_size: tuple[int, int] = (224, 224)
    val_fraction: float = Field(default=0.1, gt=0.0, lt=0.5)
    # Only used where the source has no test split of its own.
    test_fraction: float = Field(default=0.1, gt=0.0, lt=0.5)
    augment_flip: bool = False
    download: bool = False
    samples_per_class: int = Field(default=60, ge=2)
    seed: int = Field(default=0, ge=0, lt=2**63)

    @model_validator(mode="after")
    def _check_source(self) -> DatasetSpec:
        if self.kind != "synthetic" and not self.source:
            raise ValueError(f"{self.kind} datasets need a source path")

        return self


class SyntheticPatternDataset(Dataset):
    """
    Class-dependent stripes and checkerboards with a per-class color tint.

    Images are rendered on demand from (seed, index), so the dataset is
    fully determined by its arguments.
    """

    def __init__(
        self,
        num_classes: int,
        samples_per_class: int,
        image_size: tuple[int, int] = (SYNTHETIC_BASE_SIZE, SYNTHETIC_BASE_SIZE),
        seed: int = 0,
        noise: float = 0.3,
    ) -> None:
        if num_classes < 1 or samples_per_class < 1:
            raise ConfigurationError("synthetic dataset needs classes and samples")

        self.num_classes = num_classes
        self.samples_per_class = samples_per_class
        self.image_size = tuple(image_size)
        self.seed = seed
        self.noise = noise
        self.targets = [i % num_classes for i in range(num_classes * samples_per_class)]
        self.ids = [f"synthetic/{seed}/{i}" for i in range(len(self.targets))]

        grid = np.arange(SYNTHETIC_BASE_SIZE, dtype=np.float32)
        self._yy, self._xx = np.meshgrid(grid, grid, indexing="ij")

    def __len__(self) -> int:
        return len(self.targets)

    def _pattern(self, label: int, phase: float) -> np.ndarray:
        freq = 2 + label // 4
        w = 2.0 * np.pi * freq / SYNTHETIC_BASE_SIZE
        kind = label % 4

        if kind == 0:
            return np.sin(w * self._yy + phase)
        if kind == 1:
            return np.sin(w * self._xx + phase)
        if kind == 2:
            return np.sign(np.sin(w * self._yy + phase) * np.sin(w * self._xx + phase))

        return np.sin(w * (self._xx + self._yy) / np.sqrt(2.0) + phase)

    def __getitem__(self, index: int) -> tuple[torch.Tensor, int]:
        label = self.targets[index]
        rng = np.random.default_rng([self.seed, index])

        pattern = self._pattern(label, float(rng.uniform(0.0, 2.0 * np.pi)))
        image = np.repeat(0.5 * pattern[None], 3, axis=0)
        image[label % 3] += 1.0
        image += rng.normal(0.0, self.noise, size=image.shape)

        tensor = torch.from_numpy(image.astype(np.float32))
        if self.image_size != (SYNTHETIC_BASE_SIZE, SYNTHETIC_BASE_SIZE):
            tensor = F.interpolate(
                tensor[None],
                size=self.image_size,
                mode="bilinear",
                align_corners=False,
            )[0]

        return tensor, label


class LabeledSubset(Dataset):
    """
    Index view of a dataset that keeps labels and item ids addressable.
    """

    def __init__(self, dataset: Dataset, indices: Sequence[int]) -> None:
        self.dataset = dataset
        self.indices = [int(i) for i in indices]

        labels = labels_of(dataset)
        ids = ids_of(dataset)
        self.targets = [int(labels[i]) for i in self.indices]
        self.ids = [ids[i] for i in self.indices]

    def __len__(self) -> int:
        return len(self.indices)

    def __getitem__(self, index: int) -> Any:
        return self.dataset[self.indices[index]]


@dataclass(frozen=True)
class DatasetSplits:
    train: Dataset
    val: Dataset
    test: Dataset
    num_classes: int
    skipped_files: int = 0

    def get(self, split: Split) -> Dataset:
        if split not in ("train", "val", "test"):
            raise ConfigurationError(f"unknown split: {split!r}")

        return getattr(self, split)


def labels_of(dataset: Any) -> np.ndarray:
    if isinstance(dataset, np.ndarray):
        return dataset.astype(np.int64)

    for attr in ("targets", "_labels"):
        if hasattr(dataset, attr):
            return np.asarray(getattr(dataset, attr), dtype=np.int64)

    return np.asarray([int(dataset[i][1]) for i in range(len(dataset))], dtype=np.int64)


def ids_of(dataset: Any) -> list[str]:
    if hasattr(dataset, "ids"):
        return list(dataset.ids)

    if hasattr(dataset, "samples"):
        return [str(path) for path, _ in dataset.samples]

    if hasattr(dataset, "_image_files"):
        return [str(p) for p in dataset._image_files]

    prefix = type(dataset).__name__.lower()
    split = "train" if getattr(dataset, "train", True) else "test"

    return [f"{prefix}/{split}/{i}" for i in range(len(dataset))]


def _largest_remainder(counts: np.ndarray, n: int) -> np.ndarray:
    exact = n * counts / counts.sum()
    quotas = np.floor(exact).astype(np.int64)
    remainder = n - int(quotas.sum())

    # Stable sort keeps ties in class order.
    order = np.argsort(-(exact - quotas), kind="stable")
    quotas[order[:remainder]] += 1

    return quotas


def stratified_subsample(
    dataset: Any,
    n: int,
    seed: int,
    *,
    index_seed: int = 0,
) -> np.ndarray:
    """
    Sorted indices of a class-stratified subset of size n.

    Each class is shuffled once under index_seed and cut into windows of
    its quota; seed picks the window. Neighbouring seeds therefore draw
    disjoint subsets as long as two windows fit in every class.
    """

    labels = labels_of(dataset)
    total = len(labels)
    classes, counts = np.unique(labels, return_counts=True)

    if n < len(classes):
        raise StratificationError(
            f"cannot stratify {n} samples over {len(classes)} classes"
        )

    if n > total:
        raise StratificationError(f"requested {n} samples from {total}")

    if n == total:
        return np.arange(total)

    quotas = _largest_remainder(counts, n)
    picked: list[np.ndarray] = []

    for label, count, quota in zip(classes, counts, quotas):
        if quota == 0:
            continue

        members = np.flatnonzero(labels == label)
        order = np.random.default_rng([index_seed, int(label)]).permutation(members)
        start = (seed % int(count)) * int(quota)
        window = (start + np.arange(quota)) % int(count)
        picked.append(order[window])

    return np.sort(np.concatenate(picked))


def make_validation_split(
    dataset: Any,
    fraction: float,
    seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Stratified (train', val) index split; each class gives
    round(count * fraction) items to val.
    """

    if not 0.0 < fraction < 0.5:
        raise ConfigurationError(f"fraction must be in (0, 0.5), got {fraction}")

    labels = labels_of(dataset)
    rng = np.random.default_rng(seed)
    train: list[np.ndarray] = []
    val: list[np.ndarray] = []

    for label in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == label))
        k = int(np.floor(len(members) * fraction + 0.5))
        val.append(members[:k])
        train.append(members[k:])

    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


def _image_transform(spec: DatasetSpec, train: bool) -> transforms.Compose:
    steps: list[Any] = [
        transforms.Resize(
            spec.image_size,
            interpolation=transforms.InterpolationMode.BILINEAR,
        )
    ]

    if train and spec.augment_flip:
        steps.append(transforms.RandomHorizontalFlip())

    steps += [transforms.ToTensor(), transforms.Normalize(IMAGENET_MEAN, IMAGENET_STD)]

    return transforms.Compose(steps)


def scan_image_folder(root: str | Path) -> tuple[set[str], int]:
    """
    Return the readable image paths under root/<class>/ and the number of
    corrupt files skipped.
    """

    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset folder not found: {root}")

    valid: set[str] = set()
    skipped = 0

    for path in sorted(root.glob("*/*")):
        if path.suffix.lower() not in IMAGE_SUFFIXES:
            continue

        try:
            with Image.open(path) as image:
                image.verify()
        except (OSError, SyntaxError, UnidentifiedImageError):
            skipped += 1
            log.warning("skipping unreadable image %s", path)
            continue

        valid.add(os.path.normpath(path))

    return valid, skipped


def _folder_dataset(spec: DatasetSpec, train: bool, valid: set[str]) -> Dataset:
    try:
        return datasets.ImageFolder(
            spec.source,
            transform=_image_transform(spec, train),
            is_valid_file=lambda p: os.path.normpath(p) in valid,
        )
    except FileNotFoundError as exc:
        raise DatasetError(f"{spec.name}: {exc}") from exc


def _registry_dataset(spec: DatasetSpec, split: Literal["train", "test"], train_transform: bool) -> Dataset:
    transform = _image_transform(spec, train_transform)

    try:
        if spec.kind == "cifar100":
            return datasets.CIFAR100(
                spec.source,
                train=split == "train",
                download=spec.download,
                transform=transform,
            )

        return datasets.Food101(
            spec.source,
            split=split,
            download=spec.download,
            transform=transform,
        )
    except RuntimeError as exc:
        raise DatasetError(f"{spec.name}: {exc}") from exc


def _three_way(dataset: Dataset, spec: DatasetSpec, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rest, test = make_validation_split(dataset, spec.test_fraction, seed)
    labels = labels_of(dataset)
    inner_fraction = spec.val_fraction / (1.0 - spec.test_fraction)
    train, val = make_validation_split(labels[rest], inner_fraction, seed + 1)

    return rest[train], rest[val], test


def _check_classes(dataset: Dataset, spec: DatasetSpec) -> None:
    found = len(np.unique(labels_of(dataset)))

    if found != spec.num_classes:
        raise DatasetError(
            f"{spec.name}: expected {spec.num_classes} classes, found {found}"
        )


def build_splits(spec: DatasetSpec, seed: int | None = None) -> DatasetSplits:
    """
    Materialize disjoint train / val / test views for a dataset spec.
    """

    seed = spec.seed if seed is None else seed
    skipped = 0

    if spec.kind == "synthetic":
        full = SyntheticPatternDataset(
            spec.num_classes,
            spec.samples_per_class,
            spec.image_size,
            seed=spec.seed,
        )
        _check_classes(full, spec)
        train_idx, val_idx, test_idx = _three_way(full, spec, seed)
        splits = DatasetSplits(
            train=LabeledSubset(full, train_idx),
            val=LabeledSubset(full, val_idx),
            test=LabeledSubset(full, test_idx),
            num_classes=spec.num_classes,
        )

    elif spec.kind == "folder":
        valid, skipped = scan_image_folder(spec.source)
        if not valid:
            raise DatasetError(f"{spec.name}: no readable images under {spec.source}")

        plain = _folder_dataset(spec, False, valid)
        _check_classes(plain, spec)
        augmented = _folder_dataset(spec, True, valid) if spec.augment_flip else plain
        train_idx, val_idx, test_idx = _three_way(plain, spec, seed)
        splits = DatasetSplits(
            train=LabeledSubset(augmented, train_idx),
            val=LabeledSubset(plain, val_idx),
            test=LabeledSubset(plain, test_idx),
            num_classes=spec.num_classes,
            skipped_files=skipped,
        )

    else:
        train_full = _registry_dataset(spec, "train", spec.augment_flip)
        plain_train = _registry_dataset(spec, "train", False) if spec.augment_flip else train_full
        test_full = _registry_dataset(spec, "test", False)
        _check_classes(train_full, spec)
        train_idx, val_idx = make_validation_split(train_full, spec.val_fraction, seed)
        splits = DatasetSplits(
            train=LabeledSubset(train_full, train_idx),
            val=LabeledSubset(plain_train, val_idx),
            test=LabeledSubset(test_full, np.arange(len(test_full))),
            num_classes=spec.num_classes,
        )

    assert_disjoint(splits)

    missing = set(range(spec.num_classes)) - set(labels_of(splits.train).tolist())
    if missing:
        raise DatasetError(f"{spec.name}: classes {sorted(missing)} absent from train")

    log.info(
        "%s: train %d, val %d, test %d (%d corrupt files skipped)",
        spec.name,
        len(splits.train),
        len(splits.val),
        len(splits.test),
        skipped,
    )

    return splits


def assert_disjoint(splits: DatasetSplits) -> None:
    seen: dict[str, str] = {}

    for name in ("train", "val", "test"):
        for item in ids_of(splits.get(name)):
            if item in seen:
                raise DatasetError(f"{item} appears in both {seen[item]} and {name}")
            seen[item] = name


def load_dataset(
    spec: DatasetSpec,
    split: Split,
    seed: int,
    batch_size: int = 32,
    num_workers: int = 0,
    splits: DatasetSplits | None = None,
) -> DataLoader:
    """
    Shuffled, batched loader over one split; batch order depends only on seed.
    """

    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")

    splits = splits or build_splits(spec)
    generator = torch.Generator()
    generator.manual_seed(seed)

    return DataLoader(
        splits.get(split),
        batch_size=batch_size,
        shuffle=True,
        generator=generator,
        num_workers=num_workers,
    )


def write_manifest(splits: DatasetSplits, path: str | Path, **stamp: Any) -> Path:
    manifest = {
        name: [
            {"id": item, "label": int(label)}
            for item, label in zip(ids_of(splits.get(name)), labels_of(splits.get(name)))
        ]
        for name in ("train", "val", "test")
    }

    return write_json(path, {"splits": manifest, "skipped_files": splits.skipped_files, **stamp})
