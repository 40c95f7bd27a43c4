"""
Published reference numbers for EfficientNet-B0 transfer on three
datasets. Times are converted to seconds, evaluation time stays in
milliseconds per batch. The layer-level selection baseline is not
re-implemented; its numbers only serve as comparison constants.
"""

from __future__ import annotations

from typing import Literal

from scipy.stats import spearmanr

BaselineKey = Literal["food101", "cifar100", "mangoleafbd"]

CITATION = (
    "Block-wise transfer learning with genetic block selection and "
    "OTDD block importance, EfficientNet-B0, single consumer GPU"
)

METHODS = ("layerselect", "blockselect", "conventional")

# method -> selection_runtime (s, None if not applicable), training_time (s),
# evaluation_time (ms/batch), accuracy, trainable_params
PUBLISHED_ACCURACY: dict[str, dict[str, dict[str, float | int | None]]] = {
    "food101": {
        "layerselect": {
            "selection_runtime": 180 * 60,
            "training_time": 31 * 60,
            "evaluation_time": 42,
            "accuracy": 0.77,
            "trainable_params": 579_813,
        },
        "blockselect": {
            "selection_runtime": 43 * 60,
            "training_time": 21 * 60,
            "evaluation_time": 32,
            "accuracy": 0.79,
            "trainable_params": 3_113_413,
        },
        "conventional": {
            "selection_runtime": None,
            "training_time": 23 * 60,
            "evaluation_time": 49,
            "accuracy": 0.79,
            "trainable_params": 4_136_929,
        },
    },
    "cifar100": {
        "layerselect": {
            "selection_runtime": 94 * 60,
            "training_time": 28 * 60,
            "evaluation_time": 31,
            "accuracy": 0.81,
            "trainable_params": 256_500,
        },
        "blockselect": {
            "selection_runtime": 39 * 60,
            "training_time": 19 * 60,
            "evaluation_time": 31,
            "accuracy": 0.82,
            "trainable_params": 830_758,
        },
        "conventional": {
            "selection_runtime": None,
            "training_time": 12 * 60,
            "evaluation_time": 32,
            "accuracy": 0.83,
            "trainable_params": 4_135_648,
        },
    },
    "mangoleafbd": {
        "layerselect": {
            "selection_runtime": 739,
            "training_time": 19 * 60,
            "evaluation_time": 58,
            "accuracy": 1.0,
            "trainable_params": 361_896,
        },
        "blockselect": {
            "selection_runtime": 162,
            "training_time": 18 * 60,
            "evaluation_time": 99,
            "accuracy": 0.997,
            "trainable_params": 424_784,
        },
        "conventional": {
            "selection_runtime": None,
            "training_time": 7 * 60,
            "evaluation_time": 117,
            "accuracy": 0.998,
            "trainable_params": 4_017_796,
        },
    },
}

# (block, BI, train_BA, test_BA) for blocks 1..7
PUBLISHED_BLOCK_IMPORTANCE: dict[str, list[tuple[int, float, float, float]]] = {
    "food101": [
        (1, 1.420, 0.84, 0.72),
        (2, 1.484, 0.83, 0.72),
        (3, 1.073, 0.83, 0.72),
        (4, 1.072, 0.82, 0.72),
        (5, 1.011, 0.84, 0.72),
        (6, 0.959, 0.84, 0.72),
        (7, 1.132, 0.82, 0.72),
    ],
    "cifar100": [
        (1, 1.952, 0.88, 0.72),
        (2, 1.471, 0.89, 0.72),
        (3, 1.152, 0.89, 0.72),
        (4, 0.964, 0.90, 0.71),
        (5, 1.021, 0.89, 0.72),
        (6, 1.000, 0.90, 0.71),
        (7, 0.965, 0.89, 0.72),
    ],
    "mangoleafbd": [
        (1, 1.491, 1.0, 0.993),
        (2, 1.459, 1.0, 0.995),
        (3, 1.259, 1.0, 0.995),
        (4, 1.078, 1.0, 0.995),
        (5, 0.029, 1.0, 0.995),
        (6, 0.815, 1.0, 0.995),
        (7, 0.022, 1.0, 0.995),
    ],
}


def published_bi(key: BaselineKey) -> list[float]:
    return [row[1] for row in PUBLISHED_BLOCK_IMPORTANCE[key]]


def bi_rank_correlation(measured: list[float], key: BaselineKey) -> float:
    """
    Spearman correlation between measured and published per-block BI.
    """

    published = published_bi(key)

    if len(measured) != len(published):
        raise ValueError(
            f"expected {len(published)} BI values, got {len(measured)}"
        )

    rho, _ = spearmanr(measured, published)
    return float(rho)


def percent_delta(measured: float, published: float | None) -> float | None:
    if published is None or published == 0:
        return None

    return 100.0 * (measured - published) / published
