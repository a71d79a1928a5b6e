"""Multi-objective evolutionary search driver.

Elitist non-dominated sorting with crowding distance, adapted for
architecture search: every generation produces exactly N mutated offspring
from the elite pool, candidates above the step-time cap are archived but
never become parents, and the full evaluation history is retained so runs
replay bit-for-bit from (config, seed).
"""

from __future__ import annotations

import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .encoding import (
    DEFAULT_BLOCK_LIMITS,
    DEFAULT_MACRO_LIMITS,
    ArchitectureSpec,
    BlockSpec,
    MacroLimits,
    MacroSpec,
    SpaceLimits,
    mutate_block,
    mutate_macro,
    parse_architecture,
    sample_block,
    sample_macro,
)
from .reference import RESNET50_FIRST_CHANNEL, RESNET50_MACRO

INFINITY = float("inf")


@dataclass(frozen=True)
class Objectives:
    accuracy: float  # higher is better
    step_time_ms: float  # lower is better


def dominates(a: Objectives, b: Objectives) -> bool:
    """True iff ``a`` is no worse in both objectives and better in one."""
    if a.accuracy < b.accuracy or a.step_time_ms > b.step_time_ms:
        return False
    return a.accuracy > b.accuracy or a.step_time_ms < b.step_time_ms


@dataclass
class Individual:
    spec: ArchitectureSpec
    objectives: Objectives | None
    generation: int
    feasible: bool = True
    error: str | None = None
    rank: int | None = None
    crowding: float = 0.0

    @property
    def encoding(self) -> str:
        return self.spec.encode()


def non_dominated_sort(pop: Sequence[Individual]) -> list[list[Individual]]:
    """Partition into fronts; front k+1 is the non-dominated set once fronts
    1..k are removed.  Assigns ``rank`` (1-based) on every individual."""
    n = len(pop)
    dominated_by: list[list[int]] = [[] for _ in range(n)]
    counts = [0] * n
    for i in range(n):
        oi = pop[i].objectives
        for j in range(i + 1, n):
            oj = pop[j].objectives
            if dominates(oi, oj):
                dominated_by[i].append(j)
                counts[j] += 1
            elif dominates(oj, oi):
                dominated_by[j].append(i)
                counts[i] += 1
    fronts: list[list[Individual]] = []
    current = [i for i in range(n) if counts[i] == 0]
    rank = 1
    while current:
        for i in current:
            pop[i].rank = rank
        fronts.append([pop[i] for i in current])
        nxt = []
        for i in current:
            for j in dominated_by[i]:
                counts[j] -= 1
                if counts[j] == 0:
                    nxt.append(j)
        current = nxt
        rank += 1
    return fronts


def crowding_distance(front: Sequence[Individual]) -> list[float]:
    """Per-individual diversity measure within one front.

    Points sitting on a front boundary (min or max of either objective) get
    +inf; interior points accumulate normalized neighbour gaps; an objective
    with zero range contributes nothing.
    """
    m = len(front)
    if m <= 2:
        for ind in front:
            ind.crowding = INFINITY
        return [INFINITY] * m
    dist = [0.0] * m
    for key in (lambda o: o.accuracy, lambda o: o.step_time_ms):
        values = [key(ind.objectives) for ind in front]
        lo, hi = min(values), max(values)
        if hi == lo:
            continue
        order = sorted(range(m), key=lambda i: values[i])
        for pos, i in enumerate(order):
            if values[i] == lo or values[i] == hi:
                dist[i] = INFINITY
            elif not math.isinf(dist[i]):
                prev_v = values[order[pos - 1]]
                next_v = values[order[pos + 1]]
                dist[i] += (next_v - prev_v) / (hi - lo)
    for ind, d in zip(front, dist):
        ind.crowding = d
    return dist


@dataclass(frozen=True)
class SearchConfig:
    nodes: int = 24  # offspring per generation
    max_step_time_ms: float = INFINITY
    generations: int = 20
    seed: int = 0
    phase: str = "block"  # block | macro
    elite_pool: int | None = None  # defaults to nodes
    duplicate_retries: int = 10
    workers: int = 1

    def __post_init__(self):
        if self.nodes < 1:
            raise ValueError("nodes must be >= 1")
        if self.max_step_time_ms <= 0:
            raise ValueError("max step time must be positive")


@dataclass(frozen=True)
class SearchSpace:
    """Sampling and mutation closure of one search phase."""

    sample: Callable[[np.random.Generator], ArchitectureSpec]
    mutate: Callable[[ArchitectureSpec, np.random.Generator], ArchitectureSpec]


def block_phase_space(
    limits: SpaceLimits = DEFAULT_BLOCK_LIMITS,
    macro: str = RESNET50_MACRO,
    first_channel: int = RESNET50_FIRST_CHANNEL,
) -> SearchSpace:
    """Block search with the macro frozen to the classic bottleneck layout."""
    fixed_macro = parse_architecture(f"0-_{first_channel}_{macro}").macro

    def sample(rng: np.random.Generator) -> ArchitectureSpec:
        return ArchitectureSpec(sample_block(rng, limits), first_channel, fixed_macro)

    def mutate(spec: ArchitectureSpec, rng: np.random.Generator) -> ArchitectureSpec:
        return ArchitectureSpec(mutate_block(spec.block, rng, limits), spec.first_channel, spec.macro)

    return SearchSpace(sample=sample, mutate=mutate)


def macro_phase_space(
    blocks: Sequence[BlockSpec],
    limits: MacroLimits = DEFAULT_MACRO_LIMITS,
    total_blocks_range: tuple[int, int] = (10, 50),
) -> SearchSpace:
    """Macro search over a fixed menu of candidate blocks."""
    if not blocks:
        raise ValueError("macro phase needs at least one block")
    menu = tuple(blocks)

    def sample(rng: np.random.Generator) -> ArchitectureSpec:
        block = menu[int(rng.integers(len(menu)))]
        macro, first = sample_macro(rng, limits, total_blocks_range)
        return ArchitectureSpec(block, first, macro)

    def mutate(spec: ArchitectureSpec, rng: np.random.Generator) -> ArchitectureSpec:
        macro, first = mutate_macro(spec.macro, spec.first_channel, rng, limits)
        return ArchitectureSpec(spec.block, first, macro)

    return SearchSpace(sample=sample, mutate=mutate)


def binary_tournament(elites: Sequence[Individual], rng: np.random.Generator) -> Individual:
    a = elites[int(rng.integers(len(elites)))]
    b = elites[int(rng.integers(len(elites)))]
    ka = (a.rank, -a.crowding)
    kb = (b.rank, -b.crowding)
    return a if ka <= kb else b


def next_generation(
    elites: Sequence[Individual],
    n: int,
    rng: np.random.Generator,
    mutate: Callable[[ArchitectureSpec, np.random.Generator], ArchitectureSpec],
    seen: set[str] | None = None,
    retries: int = 10,
) -> list[ArchitectureSpec]:
    """Exactly ``n`` offspring by tournament selection plus one mutation each.

    Offspring duplicating an already-seen encoding are redrawn up to
    ``retries`` times, then admitted anyway.
    """
    if not elites:
        raise ValueError("elite pool is empty")
    seen = set(seen or ())
    offspring: list[ArchitectureSpec] = []
    for _ in range(n):
        child = None
        for _attempt in range(retries + 1):
            parent = binary_tournament(elites, rng)
            child = mutate(parent.spec, rng)
            if child.encode() not in seen:
                break
        offspring.append(child)
        seen.add(child.encode())
    return offspring


@dataclass(frozen=True)
class EvalRecord:
    generation: int
    encoding: str
    accuracy: float | None
    step_time_ms: float | None
    feasible: bool
    error: str | None = None
    rank_at_end: int | None = None


@dataclass(frozen=True)
class GenerationStats:
    generation: int
    evaluations: int
    feasible: int
    front_size: int
    hypervolume: float


@dataclass
class SearchResult:
    front: list[Individual]
    history: list[EvalRecord]
    stats: list[GenerationStats]
    archive: list[Individual] = field(default_factory=list)


def hypervolume(points: Iterable[tuple[float, float]], reference: tuple[float, float]) -> float:
    """Area dominated by (accuracy up, step time down) points w.r.t. a
    reference corner (low accuracy, high step time)."""
    ref_acc, ref_time = reference
    cleaned = [(a, t) for a, t in points if a >= ref_acc and t <= ref_time]
    if not cleaned:
        return 0.0
    cleaned.sort(key=lambda p: (p[1], -p[0]))  # by time ascending
    area = 0.0
    best_acc = -INFINITY
    prev_time = None
    kept = []
    for acc, time in cleaned:
        if acc > best_acc:
            kept.append((acc, time))
            best_acc = acc
    for i, (acc, time) in enumerate(kept):
        next_time = kept[i + 1][1] if i + 1 < len(kept) else ref_time
        area += (next_time - time) * (acc - ref_acc)
    return area


def _evaluate_batch(
    specs: Sequence[ArchitectureSpec],
    evaluator: Callable[[ArchitectureSpec], Objectives],
    cache: dict[str, tuple[Objectives | None, str | None]],
    workers: int,
) -> list[tuple[Objectives | None, str | None]]:
    """Evaluate offspring, reusing cached objectives for repeated encodings.

    Results merge in offspring order no matter how workers finish, so runs
    stay deterministic."""

    def run_one(spec: ArchitectureSpec) -> tuple[Objectives | None, str | None]:
        key = spec.encode()
        if key in cache:
            return cache[key]
        try:
            obj = evaluator(spec)
            result = (obj, None)
        except Exception as exc:  # evaluator failures mark the point infeasible
            result = (None, f"{type(exc).__name__}: {exc}")
        cache[key] = result
        return result

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run_one, specs))
    return [run_one(s) for s in specs]


def _select_elites(feasible: list[Individual], pool_size: int) -> list[Individual]:
    if not feasible:
        return []
    fronts = non_dominated_sort(feasible)
    for front in fronts:
        crowding_distance(front)
    ordered = sorted(
        feasible, key=lambda i: (i.rank, -i.crowding, i.objectives.step_time_ms, i.encoding)
    )
    return ordered[:pool_size]


def run_search(
    cfg: SearchConfig,
    evaluator: Callable[[ArchitectureSpec], Objectives],
    space: SearchSpace | None = None,
) -> SearchResult:
    """Drive the full search loop and return front, history, and stats.

    The returned front is the rank-1 set of every feasible evaluated
    individual; infeasible candidates (step time above the cap, or evaluator
    failures) stay in the history but never parent offspring.
    """
    if space is None:
        space = block_phase_space() if cfg.phase == "block" else macro_phase_space_default()
    rng = np.random.default_rng(cfg.seed)
    pool_size = cfg.elite_pool or cfg.nodes

    cache: dict[str, tuple[Objectives | None, str | None]] = {}
    archive: dict[str, Individual] = {}
    history: list[EvalRecord] = []
    per_generation: list[list[Individual]] = []

    def admit(specs: Sequence[ArchitectureSpec], generation: int) -> None:
        results = _evaluate_batch(specs, evaluator, cache, cfg.workers)
        added = []
        for spec, (obj, error) in zip(specs, results):
            feasible = obj is not None and obj.step_time_ms <= cfg.max_step_time_ms
            ind = Individual(
                spec=spec, objectives=obj, generation=generation,
                feasible=feasible, error=error,
            )
            history.append(
                EvalRecord(
                    generation=generation,
                    encoding=ind.encoding,
                    accuracy=None if obj is None else obj.accuracy,
                    step_time_ms=None if obj is None else obj.step_time_ms,
                    feasible=feasible,
                    error=error,
                )
            )
            archive.setdefault(ind.encoding, ind)
            added.append(ind)
        per_generation.append(added)

    seen: set[str] = set()
    initial: list[ArchitectureSpec] = []
    for _ in range(cfg.nodes):
        spec = space.sample(rng)
        for _attempt in range(cfg.duplicate_retries):
            if spec.encode() not in seen:
                break
            spec = space.sample(rng)
        seen.add(spec.encode())
        initial.append(spec)
    admit(initial, generation=0)

    for gen in range(1, cfg.generations + 1):
        feasible = [i for i in archive.values() if i.feasible]
        elites = _select_elites(feasible, pool_size)
        if elites:
            offspring = next_generation(
                elites, cfg.nodes, rng, space.mutate, seen=seen, retries=cfg.duplicate_retries
            )
        else:
            offspring = [space.sample(rng) for _ in range(cfg.nodes)]
        seen.update(s.encode() for s in offspring)
        admit(offspring, generation=gen)

    feasible = [i for i in archive.values() if i.feasible]
    front: list[Individual] = []
    if feasible:
        fronts = non_dominated_sort(feasible)
        for fr in fronts:
            crowding_distance(fr)
        front = sorted(fronts[0], key=lambda i: (i.objectives.step_time_ms, i.encoding))
    ranks = {i.encoding: i.rank for i in feasible}
    history = [
        EvalRecord(
            generation=r.generation, encoding=r.encoding, accuracy=r.accuracy,
            step_time_ms=r.step_time_ms, feasible=r.feasible, error=r.error,
            rank_at_end=ranks.get(r.encoding),
        )
        for r in history
    ]

    stats = _generation_stats(per_generation)
    return SearchResult(front=front, history=history, stats=stats, archive=list(archive.values()))


def _generation_stats(per_generation: list[list[Individual]]) -> list[GenerationStats]:
    """Cumulative front size and hypervolume after each generation, using the
    worst observed feasible corner of the whole run as the reference."""
    all_feasible = [i for gen in per_generation for i in gen if i.feasible]
    if not all_feasible:
        return [
            GenerationStats(g, len(gen), 0, 0, 0.0) for g, gen in enumerate(per_generation)
        ]
    ref = (
        min(i.objectives.accuracy for i in all_feasible),
        max(i.objectives.step_time_ms for i in all_feasible),
    )
    stats = []
    running: list[Individual] = []
    for g, gen in enumerate(per_generation):
        running.extend(i for i in gen if i.feasible)
        if running:
            pool = [
                Individual(spec=i.spec, objectives=i.objectives, generation=i.generation)
                for i in running
            ]
            front = non_dominated_sort(pool)[0]
            hv = hypervolume(
                [(i.objectives.accuracy, i.objectives.step_time_ms) for i in front], ref
            )
            front_size = len(front)
        else:
            hv, front_size = 0.0, 0
        stats.append(GenerationStats(g, len(gen), len(running), front_size, hv))
    return stats


def macro_phase_space_default() -> SearchSpace:
    return macro_phase_space([sample_block(np.random.default_rng(0))])


@dataclass
class TwoPhaseResult:
    block_phase: SearchResult
    macro_phase: SearchResult
    selected_blocks: list[BlockSpec]

    @property
    def front(self) -> list[Individual]:
        return self.macro_phase.front


def select_candidate_blocks(front: Sequence[Individual], m: int) -> list[BlockSpec]:
    """The ``m`` most frequent blocks on a front, ties broken by the higher
    crowding distance reached by any owner of the block."""
    counts: Counter[str] = Counter()
    best_crowding: dict[str, float] = {}
    specs: dict[str, BlockSpec] = {}
    for ind in front:
        key = ind.spec.block.encode()
        counts[key] += 1
        best_crowding[key] = max(best_crowding.get(key, -INFINITY), ind.crowding)
        specs[key] = ind.spec.block
    ordered = sorted(
        counts, key=lambda k: (-counts[k], -best_crowding[k], k)
    )
    return [specs[k] for k in ordered[:m]]


def run_two_phase(
    cfg_block: SearchConfig,
    cfg_macro: SearchConfig,
    evaluator: Callable[[ArchitectureSpec], Objectives],
    keep_blocks: int = 10,
    block_limits: SpaceLimits = DEFAULT_BLOCK_LIMITS,
    macro_limits: MacroLimits = DEFAULT_MACRO_LIMITS,
    total_blocks_range: tuple[int, int] = (10, 50),
) -> TwoPhaseResult:
    """Block search with a frozen macro, then macro search seeded with the
    most frequent front blocks."""
    if keep_blocks < 1:
        raise ValueError("keep_blocks must be >= 1")
    block_result = run_search(cfg_block, evaluator, block_phase_space(block_limits))
    blocks = select_candidate_blocks(block_result.front, keep_blocks)
    if not blocks:  # fully infeasible block phase: fall back to fresh samples
        rng = np.random.default_rng(cfg_block.seed + 1)
        blocks = [sample_block(rng, block_limits)]
    macro_result = run_search(
        cfg_macro, evaluator, macro_phase_space(blocks, macro_limits, total_blocks_range)
    )
    return TwoPhaseResult(block_result, macro_result, blocks)
