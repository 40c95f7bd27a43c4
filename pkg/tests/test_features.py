import numpy as np
import pytest

from blocksel.errors import NumericalDomainError
from blocksel.features import LabeledFeatureSet, load_feature_set, save_feature_set


def build_feature_set():
    rng = np.random.default_rng(0)
    return LabeledFeatureSet(
        features=rng.normal(size=(6, 4)).astype(np.float32),
        labels=np.array([0, 1, 2, 0, 1, 2]),
        block_id=5,
        dataset_id="mangoleafbd/train",
        seed=11,
    )


def test_dump_restores_features_labels_and_provenance(tmp_path):
    fs = build_feature_set()

    loaded = load_feature_set(save_feature_set(fs, tmp_path / "block5.bsfs"))

    assert np.array_equal(loaded.features, fs.features)
    assert np.array_equal(loaded.labels, fs.labels)
    assert (loaded.block_id, loaded.dataset_id, loaded.seed) == (5, "mangoleafbd/train", 11)


def test_dump_size_matches_layout(tmp_path):
    path = save_feature_set(build_feature_set(), tmp_path / "fs.bsfs")

    header = 4 + 2 + 8 + 8 + 4 + 8 + 2
    assert path.stat().st_size == header + len("mangoleafbd/train") + 6 * 4 * 4 + 6 * 8


def test_truncated_dump_is_rejected(tmp_path):
    path = save_feature_set(build_feature_set(), tmp_path / "fs.bsfs")
    path.write_bytes(path.read_bytes()[:-3])

    with pytest.raises(ValueError, match="expected"):
        load_feature_set(path)


def test_foreign_file_is_rejected(tmp_path):
    path = tmp_path / "fs.bsfs"
    path.write_bytes(b"PK\x03\x04" + bytes(60))

    with pytest.raises(ValueError, match="not a feature-set dump"):
        load_feature_set(path)


def test_feature_set_validation():
    with pytest.raises(ValueError, match="n x d"):
        LabeledFeatureSet(features=np.zeros(3), labels=np.zeros(3, dtype=int))

    with pytest.raises(ValueError, match="one entry per feature row"):
        LabeledFeatureSet(features=np.zeros((3, 2)), labels=np.zeros(2, dtype=int))

    with pytest.raises(TypeError, match="integers"):
        LabeledFeatureSet(features=np.zeros((2, 2)), labels=np.array([0.5, 1.0]))

    with pytest.raises(NumericalDomainError, match="non-finite"):
        LabeledFeatureSet(features=np.array([[np.nan, 0.0]]), labels=np.array([0]))


def test_scaled_keeps_labels():
    fs = build_feature_set()

    doubled = fs.scaled(2.0)

    assert np.allclose(doubled.features, 2.0 * fs.features)
    assert np.array_equal(doubled.labels, fs.labels)
    assert doubled.block_id == 5
