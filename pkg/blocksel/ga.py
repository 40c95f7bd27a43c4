from __future__ import annotations

import csv
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from blocksel.errors import (
    BlockselError,
    ConfigurationError,
    ContractViolation,
    FitnessEvaluationError,
    ProtocolError,
)
from blocksel.telemetry import get_logger

log = get_logger(__name__)

HISTORY_COLUMNS = ("generation", "best_fitness", "mean_fitness", "best_genotype")

FitnessFn = Callable[["Genotype"], float]


class GAConfig(BaseModel):
    """
    Search hyperparameters. Defaults follow the published protocol:
    population 7, one elite plus roulette, 1% per-bit mutation.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    population_size: int = Field(default=7, ge=1)
    mutation_rate: float = Field(default=0.01, ge=0.0, le=1.0)
    elite_count: int = Field(default=1, ge=1)
    generations: int = Field(default=100, ge=1)
    seed: int = Field(default=0, ge=0, lt=2**64)
    crossover_kind: Literal["uniform", "one_point"] = "uniform"
    early_stop: bool = True

    # Concurrent evaluation is only honoured for fitness functions the
    # caller declares stateless.
    workers: int = Field(default=1, ge=1)
    stateless_fitness: bool = False

    @model_validator(mode="after")
    def _check_elite_count(self) -> GAConfig:
        if not self.elite_count < self.population_size:
            raise ValueError(
                "elite_count must be smaller than population_size"
            )

        return self


@dataclass(frozen=True, slots=True)
class Genotype:
    """
    Fixed-length binary vector over the selectable blocks.

    Bit i (0-based) set to 1 marks block i + 1 trainable.
    """

    bits: tuple[int, ...]

    def __post_init__(self) -> None:
        if not isinstance(self.bits, tuple):
            raise TypeError("bits must be a tuple")

        if len(self.bits) < 1:
            raise ContractViolation("genotype must have at least one bit")

        for bit in self.bits:
            if type(bit) is not int or bit not in (0, 1):
                raise ValueError("every bit must be exactly 0 or 1")

    @classmethod
    def of(cls, bits: Iterable[Any]) -> Genotype:
        return cls(tuple(int(b) for b in bits))

    @classmethod
    def from_string(cls, text: str) -> Genotype:
        if not text or set(text) - {"0", "1"}:
            raise ValueError(f"not a 0/1 genotype string: {text!r}")

        return cls(tuple(int(c) for c in text))

    @classmethod
    def zeros(cls, length: int) -> Genotype:
        return cls((0,) * length)

    @classmethod
    def ones(cls, length: int) -> Genotype:
        return cls((1,) * length)

    @classmethod
    def one_hot(cls, length: int, block_id: int) -> Genotype:
        if not 1 <= block_id <= length:
            raise ContractViolation(
                f"block_id must be in 1..{length}, got {block_id}"
            )

        return cls(tuple(int(i == block_id - 1) for i in range(length)))

    def __len__(self) -> int:
        return len(self.bits)

    def to_string(self) -> str:
        return "".join(str(b) for b in self.bits)

    def to_array(self) -> np.ndarray:
        return np.asarray(self.bits, dtype=np.int8)

    def complement(self) -> Genotype:
        return Genotype(tuple(1 - b for b in self.bits))

    def selected_blocks(self) -> tuple[int, ...]:
        return tuple(i + 1 for i, b in enumerate(self.bits) if b == 1)

    def __str__(self) -> str:
        return self.to_string()


@dataclass(frozen=True, slots=True)
class Individual:
    genotype: Genotype
    fitness: float | None = None

    @property
    def evaluated(self) -> bool:
        return self.fitness is not None

    def with_fitness(self, fitness: float) -> Individual:
        if self.evaluated:
            raise ProtocolError(
                f"fitness of {self.genotype} is already set"
            )

        return replace(self, fitness=float(fitness))


@dataclass(frozen=True, slots=True)
class Population:
    members: tuple[Individual, ...]
    generation: int = 0

    def __post_init__(self) -> None:
        if self.generation < 0:
            raise ValueError("generation must be non-negative")

    def __len__(self) -> int:
        return len(self.members)

    @property
    def evaluated(self) -> bool:
        return all(m.evaluated for m in self.members)

    def fitnesses(self) -> np.ndarray:
        if not self.evaluated:
            raise ProtocolError("population has unevaluated members")

        return np.asarray([m.fitness for m in self.members], dtype=float)

    def ranked_indices(self) -> list[int]:
        """
        Member indices by descending fitness, ties to the lower index.
        """

        fitness = self.fitnesses()
        return sorted(range(len(self.members)), key=lambda i: (-fitness[i], i))

    def best(self) -> Individual:
        return self.members[self.ranked_indices()[0]]


@dataclass(frozen=True, slots=True)
class GenerationStats:
    generation: int
    best_fitness: float
    mean_fitness: float
    best_genotype: Genotype

    def to_row(self) -> list[str]:
        return [
            str(self.generation),
            repr(self.best_fitness),
            repr(self.mean_fitness),
            self.best_genotype.to_string(),
        ]

    def to_dict(self) -> dict[str, Any]:
        return {
            "generation": self.generation,
            "best_fitness": self.best_fitness,
            "mean_fitness": self.mean_fitness,
            "best_genotype": self.best_genotype.to_string(),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> GenerationStats:
        return cls(
            generation=int(data["generation"]),
            best_fitness=float(data["best_fitness"]),
            mean_fitness=float(data["mean_fitness"]),
            best_genotype=Genotype.from_string(str(data["best_genotype"])),
        )


@dataclass(frozen=True, slots=True)
class GAResult:
    best: Individual
    history: tuple[GenerationStats, ...]
    evaluations: int


@dataclass(slots=True)
class GAState:
    """
    Everything needed to continue a run after generation k.

    Random streams are derived from (seed, generation), so the state
    holds no generator state of its own.
    """

    population: Population
    history: list[GenerationStats] = field(default_factory=list)
    best: Individual | None = None
    cache: dict[Genotype, float] = field(default_factory=dict)
    elapsed_s: float = 0.0

    @property
    def length(self) -> int:
        return len(self.population.members[0].genotype)

    def to_dict(self) -> dict[str, Any]:
        return {
            "generation": self.population.generation,
            "population": [
                {"genotype": m.genotype.to_string(), "fitness": m.fitness}
                for m in self.population.members
            ],
            "history": [h.to_dict() for h in self.history],
            "best": None if self.best is None else {
                "genotype": self.best.genotype.to_string(),
                "fitness": self.best.fitness,
            },
            "cache": [
                [g.to_string(), f] for g, f in self.cache.items()
            ],
            "elapsed_s": self.elapsed_s,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> GAState:
        population = Population(
            members=tuple(
                Individual(Genotype.from_string(m["genotype"]), m["fitness"])
                for m in data["population"]
            ),
            generation=int(data["generation"]),
        )
        best = data.get("best")

        return cls(
            population=population,
            history=[GenerationStats.from_dict(h) for h in data["history"]],
            best=None if best is None else Individual(
                Genotype.from_string(best["genotype"]),
                float(best["fitness"]),
            ),
            cache={
                Genotype.from_string(g): float(f) for g, f in data["cache"]
            },
            elapsed_s=float(data.get("elapsed_s", 0.0)),
        )


def generation_rng(seed: int, generation: int) -> np.random.Generator:
    return np.random.default_rng([seed, generation])


def _check_dimensions(config: GAConfig, length: int) -> None:
    if length < 1:
        raise ConfigurationError(
            f"number of selectable blocks must be >= 1, got {length}"
        )

    if config.population_size < 2:
        raise ConfigurationError(
            "population_size must be >= 2, got "
            f"{config.population_size}"
        )


def init_population(
    config: GAConfig,
    length: int,
    rng: np.random.Generator,
) -> Population:
    _check_dimensions(config, length)

    bits = rng.integers(0, 2, size=(config.population_size, length))

    return Population(
        members=tuple(Individual(Genotype.of(row)) for row in bits),
        generation=0,
    )


def roulette_select(
    population: Population,
    rng: np.random.Generator,
) -> Individual:
    """
    Fitness-proportional pick; uniform when every fitness is zero.
    """

    members = population.members

    if not all(m.evaluated for m in members):
        raise ProtocolError(
            "roulette selection requires every member to be evaluated"
        )

    cumulative = np.cumsum([m.fitness for m in members], dtype=float)
    total = cumulative[-1]

    if total <= 0.0:
        return members[int(rng.integers(len(members)))]

    pick = rng.random() * total
    index = int(np.searchsorted(cumulative, pick, side="right"))

    return members[min(index, len(members) - 1)]


def crossover(
    p1: Genotype,
    p2: Genotype,
    kind: Literal["uniform", "one_point"],
    rng: np.random.Generator,
) -> Genotype:
    if len(p1) != len(p2):
        raise ContractViolation(
            f"parents differ in length: {len(p1)} != {len(p2)}"
        )

    a = p1.to_array()
    b = p2.to_array()

    if kind == "uniform":
        take_first = rng.random(len(a)) < 0.5
        return Genotype.of(np.where(take_first, a, b))

    if kind == "one_point":
        if len(a) == 1:
            return p1

        cut = int(rng.integers(1, len(a)))
        return Genotype.of(np.concatenate([a[:cut], b[cut:]]))

    raise ConfigurationError(f"unknown crossover kind: {kind!r}")


def mutate(
    genotype: Genotype,
    rate: float,
    rng: np.random.Generator,
) -> Genotype:
    if not 0.0 <= rate <= 1.0:
        raise ConfigurationError(f"mutation rate must be in [0, 1], got {rate}")

    bits = genotype.to_array()
    flips = rng.random(len(bits)) < rate

    return Genotype.of(np.where(flips, 1 - bits, bits))


def _checked_fitness(fitness_fn: FitnessFn, genotype: Genotype) -> float:
    try:
        value = float(fitness_fn(genotype))
    except FitnessEvaluationError:
        raise
    except Exception as exc:
        raise FitnessEvaluationError(
            f"fitness evaluation failed: {exc}",
            genotype,
        ) from exc

    if not math.isfinite(value) or not 0.0 <= value <= 1.0:
        raise FitnessEvaluationError(
            f"fitness must be in [0, 1], got {value}",
            genotype,
        )

    return value


def evaluate_genotypes(
    genotypes: Sequence[Genotype],
    fitness_fn: FitnessFn,
    workers: int = 1,
) -> list[float]:
    """
    Evaluate in member order. With workers > 1 the calls overlap but
    results are still returned in input order.
    """

    if workers <= 1 or len(genotypes) <= 1:
        return [_checked_fitness(fitness_fn, g) for g in genotypes]

    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_checked_fitness, fitness_fn, g) for g in genotypes]
        return [f.result() for f in futures]


def evaluate_population(
    population: Population,
    fitness_fn: FitnessFn,
    workers: int = 1,
) -> Population:
    pending = [i for i, m in enumerate(population.members) if not m.evaluated]
    values = evaluate_genotypes(
        [population.members[i].genotype for i in pending],
        fitness_fn,
        workers,
    )

    members = list(population.members)
    for i, value in zip(pending, values):
        members[i] = members[i].with_fitness(value)

    return replace(population, members=tuple(members))


class CachedFitness:
    """
    Memoizes a fitness function per genotype for the lifetime of a run.
    """

    def __init__(
        self,
        fitness_fn: FitnessFn,
        cache: dict[Genotype, float] | None = None,
    ) -> None:
        self.fitness_fn = fitness_fn
        self.cache: dict[Genotype, float] = cache if cache is not None else {}
        self.calls = 0
        self._lock = threading.Lock()

    def __call__(self, genotype: Genotype) -> float:
        with self._lock:
            if genotype in self.cache:
                return self.cache[genotype]

        value = _checked_fitness(self.fitness_fn, genotype)

        with self._lock:
            self.calls += 1
            self.cache.setdefault(genotype, value)
            return self.cache[genotype]


def _effective_workers(config: GAConfig) -> int:
    if config.workers > 1 and not config.stateless_fitness:
        log.warning(
            "workers=%d ignored: fitness function not declared stateless",
            config.workers,
        )
        return 1

    return config.workers


def step_generation(
    population: Population,
    config: GAConfig,
    fitness_fn: FitnessFn,
    rng: np.random.Generator,
) -> Population:
    """
    Produce generation t + 1 from an evaluated generation t.

    The elite_count best members carry over unchanged. Every other slot
    is a roulette-selected parent pair, crossed over and mutated. All
    random draws happen before any evaluation, so the trajectory only
    depends on the seed.
    """

    if len(population) != config.population_size:
        raise ProtocolError(
            f"population has {len(population)} members, "
            f"expected {config.population_size}"
        )

    ranked = population.ranked_indices()
    elites = [population.members[i] for i in ranked[: config.elite_count]]

    children: list[Genotype] = []
    for _ in range(config.population_size - config.elite_count):
        p1 = roulette_select(population, rng)
        p2 = roulette_select(population, rng)
        child = crossover(p1.genotype, p2.genotype, config.crossover_kind, rng)
        children.append(mutate(child, config.mutation_rate, rng))

    values = evaluate_genotypes(children, fitness_fn, _effective_workers(config))

    return Population(
        members=tuple(elites)
        + tuple(Individual(g, v) for g, v in zip(children, values)),
        generation=population.generation + 1,
    )


def _record(state: GAState) -> GenerationStats:
    population = state.population
    fitness = population.fitnesses()
    best = population.best()

    if state.best is None or best.fitness > state.best.fitness:
        state.best = best

    stats = GenerationStats(
        generation=population.generation,
        best_fitness=float(best.fitness),
        mean_fitness=float(fitness.mean()),
        best_genotype=best.genotype,
    )
    state.history.append(stats)

    return stats


def _finished(state: GAState, config: GAConfig) -> bool:
    if len(state.history) >= config.generations:
        return True

    return config.early_stop and state.best is not None and state.best.fitness >= 1.0


def run_ga(
    config: GAConfig,
    length: int,
    fitness_fn: FitnessFn,
    *,
    state: GAState | None = None,
    on_generation: Callable[[GAState], None] | None = None,
) -> GAResult:
    """
    Run the search and return the best-ever individual with its history.

    Pass a GAState from a checkpoint to continue an interrupted run;
    the continuation replays exactly what an uninterrupted run does.
    """

    _check_dimensions(config, length)
    workers = _effective_workers(config)

    if state is None:
        evaluator = CachedFitness(fitness_fn)
        population = init_population(config, length, generation_rng(config.seed, 0))
        state = GAState(
            population=evaluate_population(population, evaluator, workers),
            cache=evaluator.cache,
        )
        stats = _record(state)
        log.info(
            "generation %d: best %.4f mean %.4f (%s)",
            stats.generation,
            stats.best_fitness,
            stats.mean_fitness,
            stats.best_genotype,
        )
        if on_generation is not None:
            on_generation(state)
    else:
        if state.length != length:
            raise ContractViolation(
                f"checkpoint genotypes have length {state.length}, "
                f"expected {length}"
            )
        evaluator = CachedFitness(fitness_fn, cache=state.cache)

    while not _finished(state, config):
        t = state.population.generation + 1
        try:
            state.population = step_generation(
                state.population,
                config,
                evaluator,
                generation_rng(config.seed, t),
            )
        except BlockselError:
            log.error("generation %d aborted", t)
            raise

        stats = _record(state)
        log.info(
            "generation %d: best %.4f mean %.4f (%s)",
            stats.generation,
            stats.best_fitness,
            stats.mean_fitness,
            stats.best_genotype,
        )
        if on_generation is not None:
            on_generation(state)

    assert state.best is not None

    return GAResult(
        best=state.best,
        history=tuple(state.history),
        evaluations=evaluator.calls,
    )


def write_history_csv(
    history: Iterable[GenerationStats],
    path: str | Path,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for stats in history:
            writer.writerow(stats.to_row())

    return path


def read_history_csv(path: str | Path) -> list[GenerationStats]:
    with Path(path).open(encoding="utf-8", newline="") as f:
        return [GenerationStats.from_dict(row) for row in csv.DictReader(f)]
