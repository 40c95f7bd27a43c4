import csv
import itertools
import math

import numpy as np
import ot
import pytest

from blocksel.errors import (
    DimensionMismatchError,
    MomentError,
    NumericalDomainError,
    SinkhornConvergenceWarning,
    SolverCapacityError,
)
from blocksel.features import LabeledFeatureSet
from blocksel.otdd import (
    BlockImportanceReport,
    OTDDConfig,
    annealing_schedule,
    block_importance,
    class_moments,
    gaussian_w2,
    layer_importance,
    otdd,
    pairwise_cost,
    round_to_marginals,
    solve_exact,
    solve_sinkhorn,
)

EXACT = OTDDConfig(solver="exact")


def build_feature_set(seed, per_class=10, num_classes=2, dim=3, shift=0.0):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(num_classes), per_class)
    centers = 3.0 * np.eye(num_classes, dim)
    features = centers[labels] + rng.normal(size=(len(labels), dim)) + shift

    return LabeledFeatureSet(features=features, labels=labels, seed=seed)


def brute_force_assignment(cost):
    n = cost.shape[0]
    return min(
        sum(cost[i, p[i]] for i in range(n)) / n
        for p in itertools.permutations(range(n))
    )


def test_exact_solver_matches_permutation_brute_force():
    rng = np.random.default_rng(0)

    for _ in range(50):
        cost = rng.uniform(0.0, 1.0, size=(6, 6))
        result = solve_exact(cost)
        expected = brute_force_assignment(cost)

        assert result.total_cost == pytest.approx(expected, rel=1e-9)
        assert np.allclose(result.plan.sum(axis=1), 1 / 6)


def test_exact_solver_refuses_instances_over_cap():
    with pytest.raises(SolverCapacityError, match="sinkhorn"):
        solve_exact(np.zeros((65, 65)))


def test_sinkhorn_is_close_to_exact_at_small_regularization():
    rng = np.random.default_rng(1)

    for _ in range(20):
        cost = ot.dist(rng.normal(size=(10, 2)), rng.normal(size=(10, 2)))

        exact = solve_exact(cost)
        entropic = solve_sinkhorn(cost, reg=0.01, max_iter=20_000)

        assert entropic.total_cost == pytest.approx(exact.total_cost, rel=0.01)
        assert entropic.residual <= 1e-6
        assert np.allclose(entropic.plan.sum(axis=0), 0.1, atol=1e-6)


def test_sinkhorn_on_uniform_random_costs_stays_within_entropic_gap():
    rng = np.random.default_rng(3)
    reg = 0.01

    for _ in range(20):
        cost = rng.uniform(size=(10, 10))

        exact = solve_exact(cost)
        entropic = solve_sinkhorn(cost, reg=reg, max_iter=20_000)

        assert entropic.residual <= 1e-6
        assert entropic.total_cost >= exact.total_cost - 1e-9
        assert entropic.total_cost - exact.total_cost <= reg * math.log(10) + 1e-3


def test_annealing_schedule_ends_at_target():
    schedule = annealing_schedule(np.array([[0.0, 8.0]]), 0.01)

    assert schedule[0] == 8.0
    assert schedule[-1] == 0.01
    assert all(later < earlier for earlier, later in zip(schedule, schedule[1:]))
    assert annealing_schedule(np.zeros((2, 2)), 0.1) == [0.1]


def test_round_to_marginals_restores_exact_marginals():
    a = np.full(3, 1 / 3)
    b = np.full(4, 1 / 4)
    plan = np.outer(a, b) * (1 + np.array([[0.01], [-0.02], [0.0]]))

    rounded = round_to_marginals(plan, a, b)

    assert np.allclose(rounded.sum(axis=1), a, atol=1e-12)
    assert np.allclose(rounded.sum(axis=0), b, atol=1e-12)
    assert rounded.min() >= 0.0


def test_sinkhorn_on_zero_cost_is_free():
    result = solve_sinkhorn(np.zeros((4, 5)), reg=0.1)

    assert result.total_cost == 0.0
    assert result.residual <= 1e-9


def test_sinkhorn_warns_when_iteration_budget_is_exhausted():
    rng = np.random.default_rng(2)
    cost = ot.dist(rng.normal(size=(8, 2)), rng.normal(size=(8, 2)))

    with pytest.warns(SinkhornConvergenceWarning):
        result = solve_sinkhorn(cost, reg=0.01, max_iter=1, tol=1e-12)

    assert not result.converged
    assert result.plan.shape == (8, 8)


def test_gaussian_w2_one_dimensional_closed_form():
    cases = [(0.0, 1.0, 1.0, 2.0), (-2.0, 0.5, 3.0, 0.5), (1.5, 3.0, 1.5, 1.0)]

    for m1, s1, m2, s2 in cases:
        value = gaussian_w2([m1], [[s1**2]], [m2], [[s2**2]])
        assert value == pytest.approx(math.sqrt((m1 - m2) ** 2 + (s1 - s2) ** 2), abs=1e-9)


def test_gaussian_w2_commuting_covariances():
    value = gaussian_w2([0.0, 0.0], np.diag([1.0, 4.0]), [0.0, 0.0], np.diag([4.0, 1.0]))

    assert value == pytest.approx(math.sqrt(2.0), abs=1e-9)


def test_gaussian_w2_of_identical_gaussians_is_zero():
    cov = np.array([[2.0, 0.3], [0.3, 1.0]])

    assert gaussian_w2([1.0, 2.0], cov, [1.0, 2.0], cov) == 0.0


def test_gaussian_w2_matches_monte_carlo_quantile_coupling():
    rng = np.random.default_rng(3)
    x = np.sort(rng.normal(0.0, 1.0, 100_000))
    y = np.sort(rng.normal(1.0, 2.0, 100_000))
    empirical = math.sqrt(np.mean((x - y) ** 2))

    assert gaussian_w2([0.0], [[1.0]], [1.0], [[4.0]]) == pytest.approx(empirical, rel=0.02)


def test_gaussian_w2_rejects_invalid_covariances():
    with pytest.raises(NumericalDomainError, match="symmetric"):
        gaussian_w2([0, 0], [[1.0, 0.5], [0.0, 1.0]], [0, 0], np.eye(2))

    with pytest.raises(NumericalDomainError, match="positive semi-definite"):
        gaussian_w2([0, 0], [[1.0, 0.0], [0.0, -1.0]], [0, 0], np.eye(2))

    with pytest.raises(DimensionMismatchError):
        gaussian_w2([0.0], [[1.0]], [0.0, 0.0], np.eye(2))


def test_class_moments_rejects_singleton_class():
    fs = LabeledFeatureSet(features=np.ones((3, 2)), labels=np.array([0, 0, 1]))

    with pytest.raises(MomentError, match="class 1") as info:
        class_moments(fs, 1e-6)

    assert info.value.label == 1


def test_class_moments_of_repeated_points_is_regularizer():
    fs = LabeledFeatureSet(features=np.ones((4, 3)), labels=np.array([0, 0, 1, 1]))

    moments = class_moments(fs, 0.5)

    assert np.array_equal(moments.covariances[0], 0.5 * np.eye(3))
    assert np.array_equal(moments.covariances[1], 0.5 * np.eye(3))


def test_pairwise_cost_rejects_dimension_mismatch():
    a = build_feature_set(0, dim=3)
    b = build_feature_set(1, dim=4)

    with pytest.raises(DimensionMismatchError):
        pairwise_cost(a, b, class_moments(a, 1e-6), class_moments(b, 1e-6))


def test_otdd_identity_and_symmetry():
    a = build_feature_set(4)
    b = build_feature_set(5, shift=0.5)

    assert otdd(a, a, EXACT) <= 1e-9
    assert abs(otdd(a, b, EXACT) - otdd(b, a, EXACT)) <= 1e-6


def test_otdd_grows_with_translation():
    a = build_feature_set(6)
    distances = [
        otdd(a, LabeledFeatureSet(a.features + np.array([t, 0.0, 0.0]), a.labels), EXACT)
        for t in (0.0, 0.5, 1.0, 2.0, 4.0)
    ]

    assert distances == sorted(distances)
    assert len(set(distances)) == len(distances)


def test_otdd_scales_linearly_with_features():
    a = build_feature_set(7)
    b = build_feature_set(8, shift=1.0)

    base = otdd(a, b, EXACT)

    assert otdd(a.scaled(3.0), b.scaled(3.0), EXACT) == pytest.approx(3.0 * base, rel=1e-6)


def test_otdd_is_invariant_to_row_order():
    a = build_feature_set(9)
    b = build_feature_set(10, shift=1.0)
    order = np.random.default_rng(0).permutation(a.n_samples)
    shuffled = LabeledFeatureSet(a.features[order], a.labels[order])

    assert otdd(shuffled, b, EXACT) == pytest.approx(otdd(a, b, EXACT), rel=1e-9)


def test_otdd_sinkhorn_handles_larger_sets():
    a = build_feature_set(11, per_class=50)
    b = build_feature_set(12, per_class=50, shift=1.0)

    value = otdd(a, b, OTDDConfig(solver="sinkhorn"))

    assert value > 0.0
    assert math.isfinite(value)


def test_block_importance_is_ratio_with_eps():
    src = build_feature_set(13)
    src_prime = build_feature_set(14)
    tgt = build_feature_set(15, shift=2.0)

    result = block_importance(src, src_prime, tgt, EXACT, block_id=3)

    assert result.block_id == 3
    assert result.value == pytest.approx(result.numerator / (result.denominator + EXACT.eps))
    assert result.numerator > result.denominator
    assert not result.degenerate


def test_block_importance_flags_zero_denominator():
    src = build_feature_set(16)
    tgt = build_feature_set(17, shift=1.0)

    result = block_importance(src, src, tgt, EXACT)

    assert result.degenerate
    assert result.value == pytest.approx(result.numerator / EXACT.eps)


def test_layer_importance_matches_block_importance_on_same_features():
    src, src_prime, tgt = (build_feature_set(s) for s in (18, 19, 20))

    layer = layer_importance(src, src_prime, tgt, EXACT, layer_id="features.3")
    block = block_importance(src, src_prime, tgt, EXACT, block_id=3)

    assert layer.value == block.value
    assert layer.layer_id == "features.3"


def test_report_csv_has_one_row_per_block(tmp_path):
    report = BlockImportanceReport()
    for b in (1, 2):
        src, src_prime, tgt = (build_feature_set(10 * b + s) for s in range(3))
        report.entries.append(block_importance(src, src_prime, tgt, EXACT, block_id=b))

    report.write_csv(tmp_path / "bi.csv")

    with (tmp_path / "bi.csv").open() as f:
        rows = list(csv.DictReader(f))

    assert [int(r["block"]) for r in rows] == [1, 2]
    assert [float(r["BI"]) for r in rows] == report.values()


def test_default_sinkhorn_importance_agrees_with_exact_solver():
    src = build_feature_set(21, num_classes=3, dim=8)
    src_prime = build_feature_set(22, num_classes=3, dim=8)
    tgt = build_feature_set(23, num_classes=3, dim=8, shift=2.0)

    entropic = block_importance(src, src_prime, tgt, OTDDConfig())
    exact = block_importance(src, src_prime, tgt, EXACT)

    assert OTDDConfig().sinkhorn_reg == 0.1
    assert entropic.value == pytest.approx(exact.value, rel=0.02)
    assert otdd(src, src, OTDDConfig()) < 0.05
