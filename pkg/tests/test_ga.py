import numpy as np
import pytest
from pydantic import ValidationError
from scipy.stats import chisquare

from blocksel.errors import (
    ConfigurationError,
    ContractViolation,
    FitnessEvaluationError,
    ProtocolError,
)
from blocksel.ga import (
    GAConfig,
    GAState,
    Genotype,
    Individual,
    Population,
    crossover,
    evaluate_population,
    generation_rng,
    init_population,
    mutate,
    read_history_csv,
    roulette_select,
    run_ga,
    step_generation,
    write_history_csv,
)


def bit_matching_fitness(target):
    """
    Hidden-target landscape: fraction of bits that match the target.
    """

    def fitness(genotype):
        matches = sum(int(a == b) for a, b in zip(genotype.bits, target))
        return matches / len(target)

    return fitness


def hidden_target(seed, length):
    return tuple(int(b) for b in np.random.default_rng(10_000 + seed).integers(0, 2, length))


def build_population(fitnesses, length=4):
    return Population(
        members=tuple(
            Individual(Genotype.from_string(format(i, f"0{length}b")), f)
            for i, f in enumerate(fitnesses)
        )
    )


def test_genotype_rejects_non_binary_bits():
    with pytest.raises(ValueError, match="0 or 1"):
        Genotype((0, 2, 1))

    with pytest.raises(ValueError, match="0 or 1"):
        Genotype((0, True, 1))


def test_genotype_rejects_empty_bits():
    with pytest.raises(ContractViolation, match="at least one bit"):
        Genotype(())


def test_genotype_string_and_block_helpers():
    g = Genotype.from_string("0101000")

    assert g.to_string() == "0101000"
    assert g.selected_blocks() == (2, 4)
    assert g.complement().to_string() == "1010111"
    assert Genotype.one_hot(7, 4).to_string() == "0001000"
    assert len(Genotype.ones(3)) == 3


def test_one_hot_rejects_out_of_range_block():
    with pytest.raises(ContractViolation, match="block_id"):
        Genotype.one_hot(3, 4)


def test_ga_config_rejects_elite_not_below_population():
    with pytest.raises(ValidationError, match="elite_count"):
        GAConfig(population_size=3, elite_count=3)


def test_ga_config_rejects_mutation_rate_outside_unit_interval():
    with pytest.raises(ValidationError):
        GAConfig(mutation_rate=1.5)


def test_ga_config_rejects_unknown_keys():
    with pytest.raises(ValidationError):
        GAConfig(populaton_size=7)


def test_run_ga_rejects_zero_blocks():
    with pytest.raises(ConfigurationError, match="blocks"):
        run_ga(GAConfig(), 0, lambda g: 0.5)


def test_init_population_shape_and_determinism():
    config = GAConfig(population_size=7)

    a = init_population(config, 12, generation_rng(3, 0))
    b = init_population(config, 12, generation_rng(3, 0))

    assert len(a) == 7
    assert all(len(m.genotype) == 12 for m in a.members)
    assert a == b


def test_roulette_requires_evaluated_population():
    population = Population(members=(Individual(Genotype.zeros(3)),))

    with pytest.raises(ProtocolError, match="evaluated"):
        roulette_select(population, np.random.default_rng(0))


def test_roulette_never_picks_zero_fitness_member_when_others_positive():
    population = build_population([0.0, 0.0, 1.0])
    rng = np.random.default_rng(0)

    picks = {id(roulette_select(population, rng)) for _ in range(200)}

    assert picks == {id(population.members[2])}


def test_roulette_is_fitness_proportional():
    population = build_population([1.0, 3.0])
    rng = np.random.default_rng(1)

    second = sum(roulette_select(population, rng) is population.members[1] for _ in range(20_000))

    assert second / 20_000 == pytest.approx(0.75, abs=0.02)


def test_roulette_frequencies_over_many_draws():
    population = build_population([0.6, 0.3, 0.1])
    position = {id(m): i for i, m in enumerate(population.members)}
    rng = np.random.default_rng(6)
    draws = 100_000

    counts = np.zeros(3)
    for _ in range(draws):
        counts[position[id(roulette_select(population, rng))]] += 1

    assert np.all(np.abs(counts / draws - [0.6, 0.3, 0.1]) <= 0.01)
    assert chisquare(counts, f_exp=[0.6 * draws, 0.3 * draws, 0.1 * draws]).pvalue > 0.01


def test_roulette_all_zero_fitness_is_uniform():
    population = build_population([0.0, 0.0, 0.0, 0.0])
    rng = np.random.default_rng(2)

    counts = np.zeros(4)
    for _ in range(8_000):
        counts[population.members.index(roulette_select(population, rng))] += 1

    assert np.all(np.abs(counts / 8_000 - 0.25) < 0.03)


def test_crossover_rejects_unequal_parents():
    with pytest.raises(ContractViolation, match="length"):
        crossover(Genotype.zeros(3), Genotype.ones(4), "uniform", np.random.default_rng(0))


def test_uniform_crossover_takes_each_bit_from_either_parent_half_the_time():
    p1 = Genotype.zeros(8)
    p2 = Genotype.ones(8)
    rng = np.random.default_rng(4)

    children = np.array([crossover(p1, p2, "uniform", rng).bits for _ in range(100_000)])

    assert children.shape == (100_000, 8)
    assert np.all(np.abs(children.mean(axis=0) - 0.5) <= 0.01)


def test_one_point_crossover_is_prefix_plus_suffix():
    p1 = Genotype.from_string("000000")
    p2 = Genotype.from_string("111111")
    rng = np.random.default_rng(5)

    for _ in range(30):
        child = crossover(p1, p2, "one_point", rng).to_string()
        cut = child.index("1")
        assert 1 <= cut <= 5
        assert child == "0" * cut + "1" * (6 - cut)


def test_one_point_crossover_single_bit_returns_first_parent():
    child = crossover(Genotype((1,)), Genotype((0,)), "one_point", np.random.default_rng(0))

    assert child == Genotype((1,))


def test_mutation_rate_extremes():
    g = Genotype.from_string("0110")
    rng = np.random.default_rng(0)

    assert mutate(g, 0.0, rng) == g
    assert mutate(g, 1.0, rng) == g.complement()


def test_mutation_flips_rate_times_length_bits_on_average():
    g = Genotype.zeros(100)
    rng = np.random.default_rng(8)

    flips = [sum(mutate(g, 0.01, rng).bits) for _ in range(10_000)]

    assert np.mean(flips) == pytest.approx(1.0, abs=0.05)


def test_step_generation_carries_elite_unchanged():
    config = GAConfig(population_size=5, elite_count=2, seed=0)
    fitness = bit_matching_fitness((1, 0, 1, 1, 0, 1))
    population = evaluate_population(
        init_population(config, 6, generation_rng(0, 0)),
        fitness,
    )
    ranked = population.ranked_indices()

    nxt = step_generation(population, config, fitness, generation_rng(0, 1))

    assert nxt.generation == 1
    assert len(nxt) == 5
    assert nxt.members[0] == population.members[ranked[0]]
    assert nxt.members[1] == population.members[ranked[1]]
    assert nxt.best().fitness >= population.best().fitness


def test_fitness_failure_carries_genotype():
    def broken(genotype):
        raise RuntimeError("out of memory")

    with pytest.raises(FitnessEvaluationError, match="out of memory") as info:
        run_ga(GAConfig(generations=2), 3, broken)

    assert isinstance(info.value.genotype, Genotype)


def test_fitness_outside_unit_interval_is_rejected():
    with pytest.raises(FitnessEvaluationError, match=r"\[0, 1\]"):
        run_ga(GAConfig(generations=2), 3, lambda g: 1.5)


def test_history_has_one_row_per_generation_starting_at_zero():
    config = GAConfig(generations=15, early_stop=False, seed=1)

    result = run_ga(config, 10, bit_matching_fitness(hidden_target(1, 10)))

    assert [h.generation for h in result.history] == list(range(15))
    best = [h.best_fitness for h in result.history]
    assert best == sorted(best)


def test_fitness_is_cached_per_genotype():
    calls = []

    def counting(genotype):
        calls.append(genotype)
        return 0.5

    result = run_ga(GAConfig(generations=20, early_stop=False), 2, counting)

    assert len(calls) == len(set(calls)) <= 4
    assert result.evaluations == len(calls)


def test_early_stop_on_perfect_fitness():
    result = run_ga(GAConfig(generations=50), 2, lambda g: 1.0)

    assert len(result.history) == 1
    assert result.best.fitness == 1.0


def test_single_block_search_finds_the_only_useful_bit():
    for seed in range(3):
        result = run_ga(
            GAConfig(generations=100, seed=seed),
            1,
            lambda g: float(g.bits[0]),
        )
        assert result.best.genotype == Genotype((1,))


def test_ga_reaches_hidden_optimum_on_most_seeds():
    config = GAConfig(
        population_size=7,
        elite_count=1,
        mutation_rate=0.01,
        crossover_kind="uniform",
        generations=100,
    )
    solved = 0

    for seed in range(100):
        target = hidden_target(seed, 12)
        result = run_ga(
            config.model_copy(update={"seed": seed}),
            12,
            bit_matching_fitness(target),
        )
        solved += result.best.genotype.bits == target

    assert solved >= 95


def test_identical_seeds_give_identical_history_files(tmp_path):
    config = GAConfig(generations=30, early_stop=False, seed=42)
    fitness = bit_matching_fitness(hidden_target(42, 12))

    a = run_ga(config, 12, fitness)
    b = run_ga(config, 12, fitness)

    write_history_csv(a.history, tmp_path / "a.csv")
    write_history_csv(b.history, tmp_path / "b.csv")

    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert read_history_csv(tmp_path / "a.csv") == list(a.history)


def test_resume_from_checkpoint_replays_uninterrupted_run():
    config = GAConfig(generations=25, early_stop=False, seed=7)
    fitness = bit_matching_fitness(hidden_target(7, 12))
    uninterrupted = run_ga(config, 12, fitness)

    saved = {}

    class Killed(Exception):
        pass

    def kill_after_ten(state):
        saved["state"] = state.to_dict()
        if state.population.generation == 10:
            raise Killed()

    with pytest.raises(Killed):
        run_ga(config, 12, fitness, on_generation=kill_after_ten)

    resumed = run_ga(config, 12, fitness, state=GAState.from_dict(saved["state"]))

    assert resumed.history == uninterrupted.history
    assert resumed.best == uninterrupted.best


def test_resume_rejects_checkpoint_of_other_length():
    config = GAConfig(generations=3, seed=0)
    state = GAState(
        population=evaluate_population(
            init_population(config, 4, generation_rng(0, 0)),
            lambda g: 0.5,
        )
    )

    with pytest.raises(ContractViolation, match="length"):
        run_ga(config, 5, lambda g: 0.5, state=state)


def test_parallel_evaluation_matches_sequential_for_stateless_fitness():
    fitness = bit_matching_fitness(hidden_target(3, 10))
    sequential = run_ga(GAConfig(generations=20, early_stop=False, seed=3), 10, fitness)
    parallel = run_ga(
        GAConfig(generations=20, early_stop=False, seed=3, workers=4, stateless_fitness=True),
        10,
        fitness,
    )

    assert parallel.history == sequential.history
