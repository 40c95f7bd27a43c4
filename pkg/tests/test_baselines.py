import pytest

from blocksel.baselines import (
    METHODS,
    PUBLISHED_ACCURACY,
    PUBLISHED_BLOCK_IMPORTANCE,
    bi_rank_correlation,
    percent_delta,
    published_bi,
)


def test_every_dataset_has_every_method():
    for key, methods in PUBLISHED_ACCURACY.items():
        assert set(methods) == set(METHODS), key


def test_published_accuracies():
    assert PUBLISHED_ACCURACY["food101"]["blockselect"]["accuracy"] == 0.79
    assert PUBLISHED_ACCURACY["cifar100"]["blockselect"]["accuracy"] == 0.82
    assert PUBLISHED_ACCURACY["mangoleafbd"]["blockselect"]["accuracy"] == 0.997


def test_published_bi_has_seven_blocks():
    for key in PUBLISHED_BLOCK_IMPORTANCE:
        assert len(published_bi(key)) == 7


def test_rank_correlation_of_published_values_is_one():
    assert bi_rank_correlation(published_bi("cifar100"), "cifar100") == pytest.approx(1.0)


def test_rank_correlation_of_reversed_order_is_minus_one():
    reversed_ranks = [-v for v in published_bi("food101")]

    assert bi_rank_correlation(reversed_ranks, "food101") == pytest.approx(-1.0)


def test_rank_correlation_needs_seven_values():
    with pytest.raises(ValueError, match="expected 7"):
        bi_rank_correlation([1.0, 2.0, 3.0], "food101")


def test_percent_delta():
    assert percent_delta(0.81, 0.79) == pytest.approx(100 * 0.02 / 0.79)
    assert percent_delta(1.0, None) is None
    assert percent_delta(1.0, 0) is None
