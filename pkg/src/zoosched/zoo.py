"""Model zoo selection, step-time lookup tables, efficiency scoring, and the
what-drives-training-efficiency regression analysis."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .cost import CostReport, SurrogateConfig, DEFAULT_SURROGATE, build_graph, count_costs
from .encoding import RATIO_VALUES, ArchitectureSpec, parse_architecture
from .search import Individual, crowding_distance, non_dominated_sort


@dataclass(frozen=True)
class ZooEntry:
    name: str
    encoding: str
    reference_accuracy: float
    step_time_ms: Mapping[tuple[int, int], float]  # (batch size, resolution) -> ms

    @property
    def spec(self) -> ArchitectureSpec:
        return parse_architecture(self.encoding)


@dataclass(frozen=True)
class ModelZoo:
    entries: tuple[ZooEntry, ...]

    def __post_init__(self):
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise ValueError("zoo entry names must be unique")
        for e in self.entries:
            if any(v <= 0 for v in e.step_time_ms.values()):
                raise ValueError(f"non-positive step time in entry {e.name}")

    def __len__(self) -> int:
        return len(self.entries)

    def by_name(self, name: str) -> ZooEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)


def select_zoo(front: Sequence[Individual], k: int) -> list[Individual]:
    """Pick at most ``k`` front members, preferring the highest crowding
    distance (objective extremes first), ties broken by lower step time."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not front:
        raise ValueError("cannot select from an empty front")
    if len(front) <= k:
        return list(front)
    crowding_distance(list(front))
    ordered = sorted(
        front, key=lambda i: (-i.crowding, i.objectives.step_time_ms, i.encoding)
    )
    return ordered[:k]


def build_step_time_table(
    specs: Mapping[str, ArchitectureSpec],
    batch_sizes: Sequence[int],
    resolutions: Sequence[int],
    cfg: SurrogateConfig = DEFAULT_SURROGATE,
) -> dict[str, dict[tuple[int, int], float]]:
    """Step-time lookup per (entry, batch, resolution).

    The calibration operating point (cfg.batch_size, cfg.resolution) equals
    the plain estimate; batch scales the whole estimate linearly and
    resolution scales the compute terms quadratically (parameters are
    resolution-independent).
    """
    table: dict[str, dict[tuple[int, int], float]] = {}
    for name, spec in specs.items():
        report = count_costs(build_graph(spec, cfg.resolution, cfg.classes))
        per_key = {}
        for batch in batch_sizes:
            for res in resolutions:
                spatial = (res / cfg.resolution) ** 2
                ms = (batch / cfg.batch_size) * (
                    (cfg.ms_per_mac * report.macs + cfg.ms_per_activation * report.activations)
                    * spatial
                    + cfg.ms_per_param * report.params
                )
                per_key[(batch, res)] = ms
        table[name] = per_key
    return table


def make_zoo(
    named_specs: Sequence[tuple[str, ArchitectureSpec, float]],
    batch_sizes: Sequence[int] = (32, 64, 128),
    resolutions: Sequence[int] = (224,),
    cfg: SurrogateConfig = DEFAULT_SURROGATE,
) -> ModelZoo:
    table = build_step_time_table(
        {name: spec for name, spec, _ in named_specs}, batch_sizes, resolutions, cfg
    )
    entries = tuple(
        ZooEntry(
            name=name,
            encoding=spec.encode(),
            reference_accuracy=acc,
            step_time_ms=table[name],
        )
        for name, spec, acc in named_specs
    )
    return ModelZoo(entries)


def zoo_to_json(zoo: ModelZoo) -> str:
    payload = {
        "entries": [
            {
                "name": e.name,
                "encoding": e.encoding,
                "reference_accuracy": e.reference_accuracy,
                "step_time_ms": {
                    f"{batch}x{res}": ms for (batch, res), ms in sorted(e.step_time_ms.items())
                },
            }
            for e in zoo.entries
        ]
    }
    return json.dumps(payload, indent=2, sort_keys=True)


def zoo_from_json(text: str) -> ModelZoo:
    payload = json.loads(text)
    entries = []
    for raw in payload["entries"]:
        table = {}
        for key, ms in raw["step_time_ms"].items():
            batch, res = key.split("x")
            table[(int(batch), int(res))] = float(ms)
        entries.append(
            ZooEntry(
                name=raw["name"],
                encoding=raw["encoding"],
                reference_accuracy=float(raw["reference_accuracy"]),
                step_time_ms=table,
            )
        )
    return ModelZoo(tuple(entries))


# ---------------------------------------------------------------------------
# efficiency score


@dataclass(frozen=True)
class EfficiencyScore:
    scores: tuple[float, ...]
    ranks: tuple[int, ...]


def efficiency_score(evaluated: Sequence[Individual]) -> EfficiencyScore:
    """Negated z-score of each individual's non-dominated-sort rank; higher
    means more training-efficient."""
    pool = list(evaluated)
    if len(pool) < 2:
        raise ValueError("need at least two individuals to score")
    non_dominated_sort(pool)
    ranks = np.array([i.rank for i in pool], dtype=float)
    std = ranks.std(ddof=1)
    if std == 0:
        raise ValueError("all individuals share one rank; scores are undefined")
    scores = -(ranks - ranks.mean()) / std
    return EfficiencyScore(tuple(float(s) for s in scores), tuple(int(r) for r in ranks))


# ---------------------------------------------------------------------------
# ordinary least squares with classical standard errors


class RankDeficiencyError(ValueError):
    def __init__(self, columns: Sequence[str]):
        super().__init__(f"design matrix is rank deficient; offending columns: {list(columns)}")
        self.columns = list(columns)


@dataclass(frozen=True)
class RegressionResult:
    terms: tuple[str, ...]
    coef: tuple[float, ...]
    se: tuple[float, ...]
    t_values: tuple[float, ...]
    p_values: tuple[float, ...]
    r_squared: float
    n: int
    reference_terms: tuple[str, ...] = ()  # shown with coefficient pinned at 0
    dropped_terms: tuple[str, ...] = ()  # constant columns removed before the fit


def _contfrac_beta(a: float, b: float, x: float) -> float:
    """Continued fraction for the regularized incomplete beta (Lentz)."""
    tiny = 1e-30
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-14:
            break
    return h


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _contfrac_beta(a, b, x) / a
    return 1.0 - front * _contfrac_beta(b, a, 1.0 - x) / b


def student_t_sf(t: float, df: float) -> float:
    """P(T > t) for Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    x = df / (df + t * t)
    tail = 0.5 * regularized_incomplete_beta(df / 2.0, 0.5, x)
    return tail if t >= 0 else 1.0 - tail


def regression_analysis(
    features: np.ndarray,
    targets: np.ndarray,
    terms: Sequence[str],
    standardize: bool = True,
) -> RegressionResult:
    """OLS via normal equations with classical standard errors.

    Predictors are standardized by default (coefficients are then per one
    standard deviation of the predictor); an intercept is always included.
    """
    x = np.asarray(features, dtype=float)
    y = np.asarray(targets, dtype=float)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError("features must be (n, p) aligned with targets")
    n, p = x.shape
    if n <= p + 1:
        raise ValueError(f"need more observations ({n}) than terms ({p + 1})")

    constant = [terms[j] for j in range(p) if np.ptp(x[:, j]) == 0]
    if constant:
        raise RankDeficiencyError(constant)
    if standardize:
        x = (x - x.mean(axis=0)) / x.std(axis=0)
    design = np.column_stack([np.ones(n), x])
    names = ["(intercept)", *terms]

    rank = np.linalg.matrix_rank(design)
    if rank < design.shape[1]:
        # walk columns and name those that add no rank
        offending = []
        kept = design[:, :1]
        for j in range(1, design.shape[1]):
            trial = np.column_stack([kept, design[:, j]])
            if np.linalg.matrix_rank(trial) == kept.shape[1]:
                offending.append(names[j])
            else:
                kept = trial
        raise RankDeficiencyError(offending)

    gram = design.T @ design
    beta = np.linalg.solve(gram, design.T @ y)
    residuals = y - design @ beta
    rss = float(residuals @ residuals)
    dof = n - design.shape[1]
    sigma2 = rss / dof
    cov = sigma2 * np.linalg.inv(gram)
    se = np.sqrt(np.diag(cov))
    t_vals = beta / se
    p_vals = np.array([2.0 * student_t_sf(abs(t), dof) for t in t_vals])
    tss = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - rss / tss if tss > 0 else 1.0
    return RegressionResult(
        terms=tuple(names),
        coef=tuple(float(b) for b in beta),
        se=tuple(float(s) for s in se),
        t_values=tuple(float(t) for t in t_vals),
        p_values=tuple(float(v) for v in p_vals),
        r_squared=r2,
        n=n,
    )


# ---------------------------------------------------------------------------
# architecture factors feeding the regression

BLOCK_OP_TERMS = {
    1: "conv1x1",
    2: "conv3x3, w group=2",
    3: "conv3x3, w group=4",
    4: "conv3x3, per-channel",
}
DOUBLE_POSITIONS = 5


def block_feature_terms() -> list[str]:
    return [
        "op1 channel change ratio",
        "op2 channel change ratio",
        "num skip connections (add)",
        "num skip connections (concat)",
        "output channel (log2)",
        *BLOCK_OP_TERMS.values(),
    ]


def block_features(spec: ArchitectureSpec) -> list[float]:
    block = spec.block
    ratios = [float(RATIO_VALUES[r]) for r in block.ratios]
    ratio1 = ratios[0] if len(ratios) >= 1 else 1.0
    ratio2 = ratios[1] if len(ratios) >= 2 else 1.0
    adds = sum(1 for s in block.skips if s.kind == "add")
    concats = sum(1 for s in block.skips if s.kind == "concat")
    final_channels = spec.first_channel
    for stage in spec.macro.stages:
        for mult in stage:
            final_channels *= mult
    op_counts = [block.ops.count(op_id) for op_id in BLOCK_OP_TERMS]
    return [ratio1, ratio2, float(adds), float(concats), math.log2(final_channels), *map(float, op_counts)]


def macro_feature_terms() -> list[str]:
    return [
        "channel size (log2)",
        *[f"double channel position {k}" for k in range(1, DOUBLE_POSITIONS + 1)],
        *[f"num blocks in stage {s}" for s in range(1, 5)],
    ]


def macro_features(spec: ArchitectureSpec) -> list[float]:
    multipliers = [m for stage in spec.macro.stages for m in stage]
    doubles = [
        1.0 if k <= len(multipliers) and multipliers[k - 1] >= 2 else 0.0
        for k in range(1, DOUBLE_POSITIONS + 1)
    ]
    counts = [float(len(stage)) for stage in spec.macro.stages]
    return [math.log2(spec.first_channel), *doubles, *counts]


def analyze_efficiency(
    evaluated: Sequence[Individual], level: str
) -> RegressionResult:
    """Regress the efficiency score on block- or macro-level design factors.

    Constant columns (for example macro factors during a block-phase search)
    are dropped and recorded; the reference operator is pinned to zero rather
    than entering the design.
    """
    if level not in ("block", "macro"):
        raise ValueError("level must be 'block' or 'macro'")
    scores = efficiency_score(evaluated)
    if level == "block":
        terms = block_feature_terms()
        rows = [block_features(i.spec) for i in evaluated]
        reference = ("conv3x3 (ref)",)
    else:
        terms = macro_feature_terms()
        rows = [macro_features(i.spec) for i in evaluated]
        reference = ()
    x = np.asarray(rows, dtype=float)
    keep = [j for j in range(x.shape[1]) if np.ptp(x[:, j]) > 0]
    dropped = tuple(terms[j] for j in range(x.shape[1]) if j not in keep)
    result = regression_analysis(
        x[:, keep], np.asarray(scores.scores), [terms[j] for j in keep]
    )
    return RegressionResult(
        terms=result.terms,
        coef=result.coef,
        se=result.se,
        t_values=result.t_values,
        p_values=result.p_values,
        r_squared=result.r_squared,
        n=result.n,
        reference_terms=reference,
        dropped_terms=dropped,
    )


def regression_report(result: RegressionResult, title: str) -> str:
    """Aligned text table: Terms / Coef / SE Coef / T-Value / P-Value."""
    lines = [
        f"{title}    n={result.n}    R-sq={100 * result.r_squared:.0f}%",
        "(predictors standardized before the fit; coefficients are per 1 sd)",
        "",
    ]
    width = max(
        [len(t) for t in result.terms]
        + [len(t) for t in result.reference_terms]
        + [len("Terms")]
    )
    header = f"{'Terms':<{width}}  {'Coef':>8}  {'SE Coef':>8}  {'T-Value':>8}  {'P-Value':>8}"
    lines.append(header)
    lines.append("-" * len(header))
    for term in result.reference_terms:
        lines.append(f"{term:<{width}}  {0.0:>8.3f}  {'-':>8}  {'-':>8}  {'-':>8}")
    for term, coef, se, t, p in zip(
        result.terms, result.coef, result.se, result.t_values, result.p_values
    ):
        lines.append(f"{term:<{width}}  {coef:>8.3f}  {se:>8.3f}  {t:>8.2f}  {p:>8.2f}")
    if result.dropped_terms:
        lines.append("")
        lines.append("dropped constant terms: " + ", ".join(result.dropped_terms))
    return "\n".join(lines)
