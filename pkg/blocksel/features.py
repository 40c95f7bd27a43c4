from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from blocksel.errors import NumericalDomainError

MAGIC = b"BSFS"
FORMAT_VERSION = 1

# magic, version, n_samples, feature_dim, block_id, seed, dataset_id byte length
_HEADER = struct.Struct("<4sHQQiQH")


@dataclass(frozen=True)
class LabeledFeatureSet:
    """
    Activation vectors captured at one block, paired with their labels.

    block_id, dataset_id and seed are provenance only; they take no part
    in distance computations.
    """

    features: np.ndarray
    labels: np.ndarray
    block_id: int = 0
    dataset_id: str = ""
    seed: int = 0

    def __post_init__(self) -> None:
        features = np.asarray(self.features)
        labels = np.asarray(self.labels)

        if features.ndim != 2:
            raise ValueError("features must be an n x d matrix")

        if labels.ndim != 1 or labels.shape[0] != features.shape[0]:
            raise ValueError("labels must hold one entry per feature row")

        if features.shape[0] and not np.issubdtype(labels.dtype, np.integer):
            raise TypeError("labels must be integers")

        if labels.size and labels.min() < 0:
            raise ValueError("labels must be non-negative")

        if not np.all(np.isfinite(features)):
            raise NumericalDomainError("features contain non-finite entries")

        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels.astype(np.int64, copy=False))

    @property
    def n_samples(self) -> int:
        return int(self.features.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    def scaled(self, factor: float) -> LabeledFeatureSet:
        return LabeledFeatureSet(
            features=self.features * factor,
            labels=self.labels,
            block_id=self.block_id,
            dataset_id=self.dataset_id,
            seed=self.seed,
        )


def save_feature_set(fs: LabeledFeatureSet, path: str | Path) -> Path:
    """
    Write the binary dump: header, row-major float32 features, int64 labels.
    """

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    dataset_id = fs.dataset_id.encode("utf-8")
    header = _HEADER.pack(
        MAGIC,
        FORMAT_VERSION,
        fs.n_samples,
        fs.feature_dim,
        fs.block_id,
        fs.seed,
        len(dataset_id),
    )

    with path.open("wb") as f:
        f.write(header)
        f.write(dataset_id)
        f.write(np.ascontiguousarray(fs.features, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(fs.labels, dtype="<i8").tobytes())

    return path


def load_feature_set(path: str | Path) -> LabeledFeatureSet:
    data = Path(path).read_bytes()

    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated feature-set header")

    magic, version, n, d, block_id, seed, id_len = _HEADER.unpack_from(data)

    if magic != MAGIC:
        raise ValueError(f"{path}: not a feature-set dump")

    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported dump version {version}")

    offset = _HEADER.size
    dataset_id = data[offset : offset + id_len].decode("utf-8")
    offset += id_len

    n_features = n * d
    expected = offset + 4 * n_features + 8 * n
    if len(data) != expected:
        raise ValueError(
            f"{path}: expected {expected} bytes, found {len(data)}"
        )

    features = np.frombuffer(data, dtype="<f4", count=n_features, offset=offset)
    offset += 4 * n_features
    labels = np.frombuffer(data, dtype="<i8", count=n, offset=offset)

    return LabeledFeatureSet(
        features=features.reshape(n, d).astype(np.float32),
        labels=labels.astype(np.int64),
        block_id=block_id,
        dataset_id=dataset_id,
        seed=seed,
    )
