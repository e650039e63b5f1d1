"""Generational tree GP with a (complexity, training MSE) Pareto archive.

Selection is by tournament on training MSE; ties fall back to lower
complexity and then to the earlier creation index, which keeps runs fully
deterministic for a given seed. Every offspring slot draws from its own RNG
stream derived from (seed, generation, slot), so fitness evaluation can be
spread over threads without changing any result.
"""

from __future__ import annotations

import logging
import math
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .expr import (
    FunctionSet,
    MutationRates,
    Node,
    TerminalSet,
    crossover,
    evaluate_columns,
    fold_constants,
    mutate,
    parse,
    random_tree,
    to_text,
)
from .metrics import r_squared
from .weather_data import FeatureVector, columns, targets

log = logging.getLogger(__name__)

WORST = math.inf


@dataclass(frozen=True)
class GPConfig:
    population_size: int = 500
    generations: int = 5000
    tournament_size: int = 5
    crossover_prob: float = 0.8
    mutation_prob: float = 0.15
    reproduction_prob: float = 0.05
    depth_max: int = 8
    elitism_count: int = 1
    split_fraction: float = 0.9
    seed: int = 0
    init_depth: tuple[int, int] = (2, 6)
    mutation: MutationRates = MutationRates(sigma_decades=3.0)
    terminals: TerminalSet = TerminalSet()
    # stop once the best training MSE reaches this value
    stop_mse: float | None = None
    # collapse all-constant subtrees in offspring
    fold_offspring: bool = False
    # chance that a parent is drawn uniformly from the archive instead of by tournament
    archive_parent_prob: float = 0.1
    n_jobs: int = 1

    def __post_init__(self):
        total = self.crossover_prob + self.mutation_prob + self.reproduction_prob
        if abs(total - 1.0) > 1e-9 or min(self.crossover_prob, self.mutation_prob, self.reproduction_prob) < 0:
            raise ValueError("crossover, mutation and reproduction probabilities must be >= 0 and sum to 1")
        if not 0 < self.split_fraction < 1:
            raise ValueError("split_fraction must be in (0, 1)")
        if self.population_size < 1 or self.generations < 1 or self.tournament_size < 1:
            raise ValueError("population_size, generations and tournament_size must be positive")
        if not 0 <= self.elitism_count <= self.population_size:
            raise ValueError("elitism_count must be within the population size")
        if not 0 <= self.archive_parent_prob <= 1:
            raise ValueError("archive_parent_prob must be in [0, 1]")
        lo, hi = self.init_depth
        if not 1 <= lo <= hi <= self.depth_max:
            raise ValueError("need 1 <= init_depth[0] <= init_depth[1] <= depth_max")

    def describe(self) -> dict:
        d = asdict(self)
        d["init_depth"] = list(self.init_depth)
        d["terminals"]["variables"] = list(self.terminals.variables)
        return d


@dataclass(frozen=True)
class Individual:
    tree: Node
    mse: float
    index: int = 0

    @property
    def complexity(self) -> int:
        return self.tree.complexity

    @property
    def rank_key(self) -> tuple[float, int, int]:
        return (self.mse, self.tree.complexity, self.index)


class ParetoArchive:
    """Non-dominated set over (complexity, training MSE), sorted by complexity.

    Along the sorted list complexity strictly increases and MSE strictly
    decreases. A candidate equal to a member in both objectives is rejected.
    """

    def __init__(self, members: Iterable[Individual] = ()):
        self.members: list[Individual] = []
        for m in members:
            self.update(m)

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def update(self, ind: Individual) -> bool:
        if not math.isfinite(ind.mse):
            return False
        c = ind.complexity
        for m in self.members:
            if m.complexity <= c and m.mse <= ind.mse:
                return False
        self.members = [m for m in self.members if not (m.complexity >= c and m.mse >= ind.mse)]
        self.members.append(ind)
        self.members.sort(key=lambda m: m.complexity)
        return True

    def best(self) -> Individual:
        return min(self.members, key=lambda m: m.rank_key)

    def by_complexity(self, c: int) -> Individual:
        for m in self.members:
            if m.complexity == c:
                return m
        raise KeyError(f"no archive member with complexity {c}")

    def is_valid(self) -> bool:
        pairs = [(m.complexity, m.mse) for m in self.members]
        return all(a[0] < b[0] and a[1] > b[1] for a, b in zip(pairs, pairs[1:]))


# -- fitness -------------------------------------------------------------------------


def _mse(tree: Node, cols: dict[str, np.ndarray], y: np.ndarray) -> float:
    pred = evaluate_columns(tree, cols, len(y))
    if not np.all(np.isfinite(pred)):
        return WORST
    with np.errstate(over="ignore"):
        value = float(np.mean(np.square(pred - y)))
    return value if math.isfinite(value) else WORST


def fitness(tree: Node, rows: Sequence[FeatureVector]) -> float:
    """Training MSE of ``tree``; ``inf`` if any row evaluates non-finite."""
    if not rows:
        raise ValueError("fitness needs at least one row")
    return _mse(tree, columns(rows), targets(rows))


def split_train_validation(rows: Sequence[FeatureVector], fraction: float = 0.9, seed: int = 0):
    """Random partition into ceil(fraction * n) training rows and the rest."""
    n = len(rows)
    if n < 2:
        raise ValueError("need at least two rows to split")
    if not 0 < fraction < 1:
        raise ValueError("fraction must be in (0, 1)")
    n_train = min(n - 1, max(1, math.ceil(fraction * n - 1e-9)))
    perm = np.random.default_rng(seed).permutation(n)
    train_idx, valid_idx = np.sort(perm[:n_train]), np.sort(perm[n_train:])
    return [rows[i] for i in train_idx], [rows[i] for i in valid_idx]


# -- evolution -----------------------------------------------------------------------


def _slot_rng(seed: int, generation: int, slot: int) -> random.Random:
    return random.Random((seed * 1_000_003 + generation) * 1_000_003 + slot)


def _tournament(pop: list[Individual], size: int, rng: random.Random) -> Individual:
    n = len(pop)
    best = pop[rng.randrange(n)]
    for _ in range(size - 1):
        c = pop[rng.randrange(n)]
        if c.rank_key < best.rank_key:
            best = c
    return best


def _select(pop, front, config: GPConfig, rng: random.Random) -> Individual:
    if front and config.archive_parent_prob > 0 and rng.random() < config.archive_parent_prob:
        return front[rng.randrange(len(front))]
    return _tournament(pop, config.tournament_size, rng)


ProgressSink = Callable[[int, float, int], None]


def evolve(
    config: GPConfig,
    train: Sequence[FeatureVector],
    fs: FunctionSet | None = None,
    progress: ProgressSink | None = None,
    initial: Sequence[Node] = (),
    stop_when: Callable[[ParetoArchive], bool] | None = None,
) -> ParetoArchive:
    """Run the generational loop and return the Pareto archive.

    ``config.generations`` counts evaluated populations, the initial one
    included. ``initial`` trees seed the first population; the remainder is
    filled with ramped half-and-half trees. ``progress`` receives
    ``(generation, best_mse, archive_size)`` after every generation; the run
    ends early when ``config.stop_mse`` is reached or ``stop_when(archive)``
    returns True.
    """
    if not train:
        raise ValueError("evolve needs training rows")
    fs = fs or FunctionSet.standard()
    cols = columns(train)
    y = targets(train)
    archive = ParetoArchive()
    cache: dict[Node, float] = {}
    counter = 0
    pool = ThreadPoolExecutor(config.n_jobs) if config.n_jobs > 1 else None

    def score(trees: list[Node]) -> list[float]:
        todo = list(dict.fromkeys(t for t in trees if t not in cache))
        if pool is not None and len(todo) > 1:
            values = list(pool.map(lambda t: _mse(t, cols, y), todo))
        else:
            values = [_mse(t, cols, y) for t in todo]
        cache.update(zip(todo, values))
        return [cache[t] for t in trees]

    def births(trees: list[Node]) -> list[Individual]:
        nonlocal counter
        out = []
        for t, m in zip(trees, score(trees)):
            out.append(Individual(t, m, counter))
            counter += 1
        return out

    try:
        lo, hi = config.init_depth
        trees = list(initial)[: config.population_size]
        for slot in range(len(trees), config.population_size):
            rng = _slot_rng(config.seed, 0, slot)
            method = "full" if slot % 2 == 0 else "grow"
            trees.append(random_tree(fs, lo, hi, rng, config.terminals, method))
        pop = births(trees)

        for generation in range(config.generations):
            if generation > 0:
                pop = _breed(pop, generation, config, fs, births, archive.members)
                # keep the cache to the live population
                live = {ind.tree for ind in pop}
                cache = {t: v for t, v in cache.items() if t in live}
            for ind in pop:
                archive.update(ind)
            best = min(ind.mse for ind in pop)
            if progress is not None:
                progress(generation, best, len(archive))
            if config.stop_mse is not None and best <= config.stop_mse:
                log.info("stopping at generation %d: best mse %.6g", generation, best)
                break
            if stop_when is not None and stop_when(archive):
                log.info("stop condition met at generation %d", generation)
                break
    finally:
        if pool is not None:
            pool.shutdown()
    return archive


def _breed(pop, generation, config: GPConfig, fs, births, front=()) -> list[Individual]:
    ranked = sorted(pop, key=lambda ind: ind.rank_key)
    elites = ranked[: config.elitism_count]
    trees = []
    cx = config.crossover_prob
    mx = cx + config.mutation_prob
    for slot in range(len(elites), config.population_size):
        rng = _slot_rng(config.seed, generation, slot)
        u = rng.random()
        parent = _select(pop, front, config, rng)
        if u < cx:
            other = _select(pop, front, config, rng)
            child = crossover(parent.tree, other.tree, rng, config.depth_max)
        elif u < mx:
            child = mutate(parent.tree, fs, rng, config.terminals, config.depth_max, config.mutation)
        else:
            trees.append(parent.tree)
            continue
        trees.append(fold_constants(child) if config.fold_offspring else child)
    children = births(trees)
    return elites + children


# -- reporting -----------------------------------------------------------------------


@dataclass(frozen=True)
class SolutionReport:
    complexity: int
    train_mse: float
    validation_mse: float
    r2: float
    formula: str
    tree: Node = field(repr=False, compare=False)


def evaluate_archive(archive: ParetoArchive, validation: Sequence[FeatureVector]) -> list[SolutionReport]:
    """Validation MSE and R^2 for every archive member, in archive order."""
    if not validation:
        raise ValueError("validation rows are empty")
    cols = columns(validation)
    y = targets(validation)
    out = []
    for m in archive:
        pred = evaluate_columns(m.tree, cols, len(y))
        if np.all(np.isfinite(pred)):
            vmse = float(np.mean(np.square(pred - y)))
            try:
                r2 = r_squared(pred, y)
            except ValueError:
                r2 = math.nan
        else:
            vmse, r2 = math.inf, math.nan
        out.append(SolutionReport(m.complexity, m.mse, vmse, r2, to_text(m.tree), m.tree))
    return out


def archive_tsv(reports: Sequence[SolutionReport], header_lines: Sequence[str] = ()) -> str:
    lines = [f"# {h}" for h in header_lines]
    for r in reports:
        lines.append(f"{r.complexity}\t{r.train_mse!r}\t{r.validation_mse!r}\t{r.r2!r}\t{r.formula}")
    return "\n".join(lines) + "\n"


def parse_archive_tsv(text: str) -> list[SolutionReport]:
    out = []
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        c, tm, vm, r2, formula = line.split("\t")
        tree = parse(formula)
        out.append(SolutionReport(int(c), float(tm), float(vm), float(r2), formula, tree))
    return out
