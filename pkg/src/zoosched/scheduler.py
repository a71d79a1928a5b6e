"""Online fine-tuning schedule generation.

Given task meta-data and a wall-clock budget, enumerate every (zoo entry,
hyperparameter cell) that fits the budget, pin each entry's iteration count
to its largest whole-epoch fit, rank the candidates with the accuracy
predictor, and return the argmax.  The online loop feeds each observed
outcome back into the predictor; the stream simulator replays that loop for
the adaptive predictor and fixed-depth baselines on an identical task stream
against a synthetic, exactly replayable task oracle.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Sequence

import numpy as np

from .predictor import AdaptiveMLP, Sample, init, init_fixed_depth, observe, predict
from .zoo import ModelZoo, ZooEntry

LEARNING_RATES = (0.1, 0.01, 0.001, 0.0001)
FROZEN_STAGES = (-1, 0, 1, 2, 3)
DECAY_MILESTONES = (3 / 7, 6 / 7)  # step the lr down by 10x at these fractions
META_FIELDS = 6
EXTRA_FIELDS = 4  # reference accuracy, iterations, log10 lr, frozen stages


class NoFeasibleCandidates(ValueError):
    """Every zoo entry needs more time than the request allows."""


@dataclass(frozen=True)
class TaskMeta:
    num_classes: int
    avg_images_per_class: float
    std_images_per_class: float
    domain_similarity: float
    train_set_size: int
    batch_size: int

    def __post_init__(self):
        if self.num_classes <= 0 or self.train_set_size <= 0 or self.batch_size <= 0:
            raise ValueError("counts must be positive")
        if self.avg_images_per_class <= 0 or self.std_images_per_class < 0:
            raise ValueError("image statistics out of range")


@dataclass(frozen=True)
class Regime:
    learning_rate: float
    num_iterations: int
    frozen_stages: int
    decay_milestones: tuple[float, float] = DECAY_MILESTONES

    def __post_init__(self):
        if self.learning_rate not in LEARNING_RATES:
            raise ValueError(f"learning rate {self.learning_rate} not in {LEARNING_RATES}")
        if self.frozen_stages not in FROZEN_STAGES:
            raise ValueError(f"frozen stages {self.frozen_stages} not in {FROZEN_STAGES}")
        if self.num_iterations < 1:
            raise ValueError("need at least one iteration")


@dataclass(frozen=True)
class Request:
    meta: TaskMeta
    time_limit_seconds: float

    def __post_init__(self):
        if self.time_limit_seconds <= 0:
            raise ValueError("time limit must be positive")


@dataclass(frozen=True)
class Decision:
    entry_name: str
    encoding: str
    regime: Regime
    predicted_accuracy: float
    candidates_examined: int


@dataclass(frozen=True)
class Grid:
    learning_rates: tuple[float, ...] = LEARNING_RATES
    frozen_stages: tuple[int, ...] = FROZEN_STAGES

    @property
    def size(self) -> int:
        return len(self.learning_rates) * len(self.frozen_stages)


DEFAULT_GRID = Grid()


# ---------------------------------------------------------------------------
# feature encoding: one-hot entry identity, entry reference accuracy, the six
# task scalars, then iteration count, log learning rate and frozen stages


def feature_dim(zoo: ModelZoo) -> int:
    return len(zoo) + META_FIELDS + EXTRA_FIELDS


def feature_terms(zoo: ModelZoo) -> list[str]:
    return [
        *[f"model={e.name}" for e in zoo.entries],
        "reference accuracy",
        "num classes",
        "avg images per class",
        "std images per class",
        "domain similarity",
        "train set size",
        "batch size",
        "num iterations",
        "log10 learning rate",
        "frozen stages",
    ]


def feature_vector(zoo: ModelZoo, entry: ZooEntry, regime: Regime, meta: TaskMeta) -> np.ndarray:
    x = np.zeros(feature_dim(zoo))
    for i, e in enumerate(zoo.entries):
        if e.name == entry.name:
            x[i] = 1.0
            break
    else:
        raise KeyError(f"entry {entry.name} not in zoo")
    k = len(zoo)
    x[k + 0] = entry.reference_accuracy
    x[k + 1] = meta.num_classes
    x[k + 2] = meta.avg_images_per_class
    x[k + 3] = meta.std_images_per_class
    x[k + 4] = meta.domain_similarity
    x[k + 5] = meta.train_set_size
    x[k + 6] = meta.batch_size
    x[k + 7] = regime.num_iterations
    x[k + 8] = math.log10(regime.learning_rate)
    x[k + 9] = regime.frozen_stages
    return x


# ---------------------------------------------------------------------------
# budget arithmetic


def steps_per_epoch(meta: TaskMeta) -> int:
    return -(-meta.train_set_size // meta.batch_size)


def max_iterations(
    time_limit_seconds: float, entry: ZooEntry, meta: TaskMeta, resolution: int = 224
) -> int:
    """Iterations of the largest whole epoch count that fits the budget.

    Exact floor arithmetic via rationals, so budget boundaries never wobble
    with float rounding.  Returns 0 when not even one epoch fits.
    """
    key = (meta.batch_size, resolution)
    if key not in entry.step_time_ms:
        raise KeyError(f"no step-time entry for {entry.name} at batch={key[0]} res={key[1]}")
    step_seconds = Fraction(entry.step_time_ms[key]) / 1000
    affordable = int(Fraction(time_limit_seconds) / step_seconds)
    spe = steps_per_epoch(meta)
    epochs = affordable // spe
    return epochs * spe


def feasible_entries(
    zoo: ModelZoo, request: Request, resolution: int = 224
) -> list[tuple[ZooEntry, int]]:
    """Zoo entries that fit at least one epoch, with their iteration caps."""
    out = []
    for entry in zoo.entries:
        iters = max_iterations(request.time_limit_seconds, entry, request.meta, resolution)
        if iters >= 1:
            out.append((entry, iters))
    return out


def enumerate_candidates(
    zoo: ModelZoo,
    grid: Grid,
    request: Request,
    resolution: int = 224,
    sample_count: int | None = None,
    rng: np.random.Generator | None = None,
) -> list[tuple[ZooEntry, Regime]]:
    """One candidate per feasible entry and grid cell, iterations pinned to
    the entry's maximum; or, with ``sample_count``, that many random feasible
    candidates."""
    feasible = feasible_entries(zoo, request, resolution)
    if not feasible:
        raise NoFeasibleCandidates(
            f"no zoo entry fits one epoch in {request.time_limit_seconds}s"
        )
    if sample_count is None:
        return [
            (entry, Regime(lr, iters, fs))
            for entry, iters in feasible
            for lr in grid.learning_rates
            for fs in grid.frozen_stages
        ]
    if rng is None:
        raise ValueError("sampling mode needs a random generator")
    out = []
    for _ in range(sample_count):
        entry, iters = feasible[int(rng.integers(len(feasible)))]
        lr = grid.learning_rates[int(rng.integers(len(grid.learning_rates)))]
        fs = grid.frozen_stages[int(rng.integers(len(grid.frozen_stages)))]
        out.append((entry, Regime(lr, iters, fs)))
    return out


def _candidate_features(
    zoo: ModelZoo,
    feasible: Sequence[tuple[ZooEntry, int]],
    grid: Grid,
    meta: TaskMeta,
) -> np.ndarray:
    """Vectorized feature matrix in enumerate_candidates order."""
    k = len(zoo)
    g = grid.size
    index = {e.name: i for i, e in enumerate(zoo.entries)}
    rows = np.zeros((len(feasible) * g, k + META_FIELDS + EXTRA_FIELDS))
    meta_cols = np.array(
        [
            meta.num_classes,
            meta.avg_images_per_class,
            meta.std_images_per_class,
            meta.domain_similarity,
            meta.train_set_size,
            meta.batch_size,
        ]
    )
    lr_col = np.repeat([math.log10(lr) for lr in grid.learning_rates], len(grid.frozen_stages))
    fs_col = np.tile(grid.frozen_stages, len(grid.learning_rates))
    for row, (entry, iters) in enumerate(feasible):
        lo = row * g
        rows[lo : lo + g, index[entry.name]] = 1.0
        rows[lo : lo + g, k] = entry.reference_accuracy
        rows[lo : lo + g, k + 1 : k + 7] = meta_cols
        rows[lo : lo + g, k + 7] = iters
        rows[lo : lo + g, k + 8] = lr_col
        rows[lo : lo + g, k + 9] = fs_col
    return rows


def generate(
    request: Request,
    predictor: AdaptiveMLP,
    zoo: ModelZoo,
    grid: Grid = DEFAULT_GRID,
    resolution: int = 224,
) -> Decision:
    """Argmax of the predictor over the candidate set.

    Ties break deterministically: lower step time, then lower learning rate,
    then encoding order.
    """
    feasible = feasible_entries(zoo, request, resolution)
    if not feasible:
        raise NoFeasibleCandidates(
            f"no zoo entry fits one epoch in {request.time_limit_seconds}s"
        )
    features = _candidate_features(zoo, feasible, grid, request.meta)
    preds, _ = predict(predictor, features)
    # a diverged predictor can emit NaN; those candidates rank last so the
    # tie-break still yields a deterministic decision
    preds = np.where(np.isnan(preds), -np.inf, preds)

    g = grid.size
    fs_count = len(grid.frozen_stages)
    best_idx = None
    best_key = None
    for idx in np.flatnonzero(preds == preds.max()):
        entry, _iters = feasible[idx // g]
        lr = grid.learning_rates[(idx % g) // fs_count]
        key = (entry.step_time_ms[(request.meta.batch_size, resolution)], lr, entry.encoding)
        if best_key is None or key < best_key:
            best_key, best_idx = key, int(idx)
    entry, iters = feasible[best_idx // g]
    lr = grid.learning_rates[(best_idx % g) // fs_count]
    fs = grid.frozen_stages[best_idx % fs_count]
    return Decision(
        entry_name=entry.name,
        encoding=entry.encoding,
        regime=Regime(lr, iters, fs),
        predicted_accuracy=float(preds[best_idx]),
        candidates_examined=len(feasible) * g,
    )


Oracle = Callable[[ZooEntry, Regime, TaskMeta], float]


def online_step(
    request: Request,
    predictor: AdaptiveMLP,
    zoo: ModelZoo,
    oracle: Oracle,
    grid: Grid = DEFAULT_GRID,
    resolution: int = 224,
) -> tuple[Decision, float]:
    """Generate a schedule, run it through the task oracle, learn from the
    outcome."""
    decision = generate(request, predictor, zoo, grid, resolution)
    entry = zoo.by_name(decision.entry_name)
    accuracy = float(oracle(entry, decision.regime, request.meta))
    if not 0.0 <= accuracy <= 1.0:
        raise ValueError(f"oracle returned accuracy {accuracy} outside [0, 1]")
    x = feature_vector(zoo, entry, decision.regime, request.meta)
    observe(predictor, Sample(features=x, acc_gt=accuracy))
    return decision, accuracy


# ---------------------------------------------------------------------------
# synthetic tasks and oracles


@dataclass(frozen=True)
class TaskSourceConfig:
    classes_range: tuple[int, int] = (4, 260)
    avg_images_range: tuple[float, float] = (20.0, 400.0)
    std_fraction_range: tuple[float, float] = (0.0, 0.5)
    similarity_range: tuple[float, float] = (0.0, 1.0)
    batch_sizes: tuple[int, ...] = (32, 64, 128)
    time_limit_range: tuple[float, float] = (120.0, 7200.0)  # log-uniform


def make_task_source(cfg: TaskSourceConfig = TaskSourceConfig()) -> Callable[[np.random.Generator], Request]:
    def source(rng: np.random.Generator) -> Request:
        classes = int(rng.integers(cfg.classes_range[0], cfg.classes_range[1] + 1))
        avg = float(rng.uniform(*cfg.avg_images_range))
        std = avg * float(rng.uniform(*cfg.std_fraction_range))
        sim = float(rng.uniform(*cfg.similarity_range))
        batch = int(rng.choice(cfg.batch_sizes))
        lo, hi = cfg.time_limit_range
        t_l = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
        meta = TaskMeta(
            num_classes=classes,
            avg_images_per_class=avg,
            std_images_per_class=std,
            domain_similarity=sim,
            train_set_size=max(int(classes * avg), 1),
            batch_size=batch,
        )
        return Request(meta=meta, time_limit_seconds=t_l)

    return source


def _unit_noise(seed: int, *parts) -> float:
    """Deterministic pseudo-noise in [-1, 1] from a stable hash."""
    text = "|".join([str(seed), *[repr(p) for p in parts]])
    digest = hashlib.blake2b(text.encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big") / float(2**64 - 1) * 2.0 - 1.0


@dataclass(frozen=True)
class OracleConfig:
    noise: float = 0.01  # absolute accuracy jitter bound
    seed: int = 0
    iteration_scale: float = 3000.0
    lr_bell_depth: float = 2.0
    lr_bell_width: float = 0.8
    frozen_curvature: float = 0.08
    gain: float = 1.0  # steepness of the logistic squash


def synthetic_oracle(cfg: OracleConfig = OracleConfig()) -> Oracle:
    """Bounded logistic response surface over (model, regime, task).

    A bell-shaped learning-rate term whose optimum shifts with domain
    similarity, a frozen-stage term whose optimum shrinks as the training set
    grows, saturating returns on iterations, model quality from the entry's
    reference accuracy, and a hash-seeded jitter below ``cfg.noise`` that
    keeps replays exact.
    """

    def oracle(entry: ZooEntry, regime: Regime, meta: TaskMeta) -> float:
        quality = 2.2 * (entry.reference_accuracy - 0.5) - 0.4
        iters = 0.8 * (1.0 - math.exp(-regime.num_iterations / cfg.iteration_scale))
        lr_opt = -1.0 - 2.0 * meta.domain_similarity
        miss = (math.log10(regime.learning_rate) - lr_opt) / cfg.lr_bell_width
        lr_term = cfg.lr_bell_depth * (math.exp(-(miss**2)) - 1.0)
        frozen_opt = min(max(3.0 - 1.2 * (math.log10(meta.train_set_size) - 3.0), -1.0), 3.0)
        frozen_term = -cfg.frozen_curvature * (regime.frozen_stages - frozen_opt) ** 2
        difficulty = -0.15 * (math.log10(meta.num_classes) - 2.0)
        score = quality + iters + lr_term + frozen_term + difficulty
        acc = 1.0 / (1.0 + math.exp(-cfg.gain * score))
        if cfg.noise > 0.0:
            acc += cfg.noise * _unit_noise(
                cfg.seed,
                entry.encoding,
                regime.learning_rate,
                regime.num_iterations,
                regime.frozen_stages,
                meta,
            )
        return min(max(acc, 0.0), 1.0)

    return oracle


def linear_oracle(zoo: ModelZoo, weight_seed: int = 0) -> Oracle:
    """Noise-free target that is linear in the feature vector (each feature
    pre-divided by its natural scale so the output stays inside [0, 1])."""
    rng = np.random.default_rng(weight_seed)
    dim = feature_dim(zoo)
    scales = np.ones(dim)
    k = len(zoo)
    scales[k : k + 7] = [1.0, 300.0, 400.0, 200.0, 1.0, 120000.0, 128.0]
    scales[k + 7] = 200000.0
    scales[k + 8] = 4.0
    scales[k + 9] = 4.0
    weights = rng.uniform(-0.03, 0.03, size=dim) / scales
    weights[k] = 0.25  # lean on the reference accuracy so the target moves

    def oracle(entry: ZooEntry, regime: Regime, meta: TaskMeta) -> float:
        x = feature_vector(zoo, entry, regime, meta)
        return float(min(max(0.45 + x @ weights, 0.0), 1.0))

    return oracle


# ---------------------------------------------------------------------------
# offline warm start


def train_offline(
    predictor: AdaptiveMLP,
    zoo: ModelZoo,
    grid: Grid,
    task_source: Callable[[np.random.Generator], Request],
    oracle: Oracle,
    count: int,
    seed: int = 0,
    passes: int = 1,
    validation_fraction: float = 0.0,
    resolution: int = 224,
) -> dict:
    """Collect ``count`` random (task, entry, regime, outcome) samples and
    train the predictor on them; optionally hold out a validation slice."""
    rng = np.random.default_rng(seed)
    samples: list[Sample] = []
    attempts = 0
    while len(samples) < count and attempts < count * 100 + 100:
        attempts += 1
        request = task_source(rng)
        feasible = feasible_entries(zoo, request, resolution)
        if not feasible:
            continue
        entry, iters = feasible[int(rng.integers(len(feasible)))]
        lr = grid.learning_rates[int(rng.integers(len(grid.learning_rates)))]
        fs = grid.frozen_stages[int(rng.integers(len(grid.frozen_stages)))]
        regime = Regime(lr, iters, fs)
        acc = float(oracle(entry, regime, request.meta))
        samples.append(Sample(feature_vector(zoo, entry, regime, request.meta), acc))

    n_val = int(len(samples) * validation_fraction)
    val, train = samples[:n_val], samples[n_val:]
    for _ in range(passes):
        order = rng.permutation(len(train))
        for i in order:
            observe(predictor, train[i])
    metrics: dict = {"samples": len(samples), "train": len(train), "val": len(val)}
    if val:
        errors = []
        for s in val:
            pred, _ = predict(predictor, s.features)
            errors.append(abs(min(max(pred, 0.0), 1.0) - s.acc_gt))
        errors = np.asarray(errors)
        metrics["val_mae"] = float(errors.mean())
        metrics["val_mse"] = float((errors**2).mean())
    return metrics


# ---------------------------------------------------------------------------
# stream simulation


@dataclass(frozen=True)
class SimulationConfig:
    tasks: int
    seed: int = 0
    adaptive_layers: int = 10
    fixed_layers: tuple[int, ...] = (3, 6, 10, 14)
    width: int = 64
    eta: float = 0.01
    beta: float = 0.99
    smoothing: float = 0.01
    oracle: str = "synthetic"  # synthetic | linear
    oracle_noise: float = 0.01
    resolution: int = 224
    include_adaptive: bool = True


@dataclass(frozen=True)
class PredictorMetrics:
    name: str
    layers: int
    adaptive: bool
    mae: float
    mse: float
    mae_20_40: float
    mse_20_40: float
    mae_80_100: float
    mse_80_100: float


@dataclass(frozen=True)
class StreamReport:
    tasks: int
    seed: int
    rows: tuple[PredictorMetrics, ...]

    def csv_rows(self) -> list[list]:
        header = [
            "predictor", "layers", "adaptive",
            "mae_all", "mse_all", "mae_20_40", "mse_20_40", "mae_80_100", "mse_80_100",
        ]
        out = [header]
        for r in self.rows:
            out.append(
                [r.name, r.layers, int(r.adaptive),
                 f"{r.mae:.6f}", f"{r.mse:.6f}", f"{r.mae_20_40:.6f}", f"{r.mse_20_40:.6f}",
                 f"{r.mae_80_100:.6f}", f"{r.mse_80_100:.6f}"]
            )
        return out


def _segment(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    n = len(values)
    return values[int(lo * n) : int(hi * n)]


def simulate_stream(
    zoo: ModelZoo,
    cfg: SimulationConfig,
    grid: Grid = DEFAULT_GRID,
    task_cfg: TaskSourceConfig = TaskSourceConfig(),
    decision_sink: Callable[[int, str, Request, Decision, float], None] | None = None,
) -> StreamReport:
    """Replay one task stream through the adaptive predictor and every
    fixed-depth baseline; report cumulative and segment errors per predictor.
    """
    if cfg.tasks == 0:
        return StreamReport(tasks=0, seed=cfg.seed, rows=())

    source = make_task_source(task_cfg)
    rng = np.random.default_rng(cfg.seed)
    requests = [source(rng) for _ in range(cfg.tasks)]

    if cfg.oracle == "synthetic":
        oracle = synthetic_oracle(OracleConfig(noise=cfg.oracle_noise, seed=cfg.seed))
    elif cfg.oracle == "linear":
        oracle = linear_oracle(zoo, weight_seed=cfg.seed)
    else:
        raise ValueError(f"unknown oracle {cfg.oracle!r}")

    dim = feature_dim(zoo)
    predictors: list[tuple[str, int, bool, AdaptiveMLP]] = []
    if cfg.include_adaptive:
        predictors.append(
            (
                f"adaptive (L={cfg.adaptive_layers})",
                cfg.adaptive_layers,
                True,
                init(cfg.adaptive_layers, cfg.width, dim, seed=cfg.seed,
                     beta=cfg.beta, eta=cfg.eta, smoothing=cfg.smoothing),
            )
        )
    for layers in cfg.fixed_layers:
        predictors.append(
            (
                f"fixed (L={layers})",
                layers,
                False,
                init_fixed_depth(layers, cfg.width, dim, seed=cfg.seed, eta=cfg.eta),
            )
        )

    rows = []
    for name, layers, adaptive, model in predictors:
        abs_err = np.empty(cfg.tasks)
        for t, request in enumerate(requests):
            decision, observed = online_step(request, model, zoo, oracle, grid, cfg.resolution)
            predicted = min(max(decision.predicted_accuracy, 0.0), 1.0)
            abs_err[t] = abs(predicted - observed)
            if decision_sink is not None:
                decision_sink(t, name, request, decision, observed)
        sq_err = abs_err**2
        rows.append(
            PredictorMetrics(
                name=name,
                layers=layers,
                adaptive=adaptive,
                mae=float(abs_err.mean()),
                mse=float(sq_err.mean()),
                mae_20_40=float(_segment(abs_err, 0.2, 0.4).mean()),
                mse_20_40=float(_segment(sq_err, 0.2, 0.4).mean()),
                mae_80_100=float(_segment(abs_err, 0.8, 1.0).mean()),
                mse_80_100=float(_segment(sq_err, 0.8, 1.0).mean()),
            )
        )
    return StreamReport(tasks=cfg.tasks, seed=cfg.seed, rows=tuple(rows))
