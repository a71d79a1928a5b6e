"""Block/macro architecture encoding grammar.

A full architecture string looks like ``020-_64_11-21-21-21`` and splits on
``_`` into three fields:

* block fragment: operator digits interleaved with channel-ratio digits
  (``2n-1`` characters for ``n`` operators), a ``-`` separator, then zero or
  more three-character skip descriptors such as ``a02`` (add) or ``c12``
  (concat),
* first channel: the channel count entering stage 1,
* macro fragment: four dash-separated stages, one digit per block giving the
  block's output/input channel multiplier.

Operator ids: 0 conv3x3, 1 conv1x1, 2 conv3x3 group 2, 3 conv3x3 group 4,
4 conv3x3 with one group per channel.  Ratio ids map to
x1/4, x1/2, x1, x2, x4; an interior operator's output channel is its ratio
times the block output channel, and the last operator always emits the block
output channel, so the final ratio digit is omitted.

Skip indices address the ``n+1`` junction points around the operators.  The
add skip spanning the whole block (point 0 to point n) is implicit and never
serialized.  Explicit skips are kept sorted by (from, to, kind) so every
block has exactly one string form.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterator, Sequence

import numpy as np

OP_NAMES = ("conv3x3", "conv1x1", "conv3x3_g2", "conv3x3_g4", "conv3x3_gc")
OP_GROUPS = (1, 1, 2, 4, None)  # None: one group per input channel
OP_KERNELS = (3, 1, 3, 3, 3)
RATIO_VALUES = (
    Fraction(1, 4),
    Fraction(1, 2),
    Fraction(1),
    Fraction(2),
    Fraction(4),
)
SKIP_KINDS = ("add", "concat")
SKIP_LETTERS = {"add": "a", "concat": "c"}
LETTER_KINDS = {v: k for k, v in SKIP_LETTERS.items()}

STAGE_COUNT = 4
MAX_OPS = 3
MAX_SKIPS = 3


class EncodingError(ValueError):
    """Raised for malformed encoding strings; ``code`` names the defect."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True, order=True)
class SkipSpec:
    from_idx: int
    to_idx: int
    kind: str  # "add" | "concat"

    @property
    def letter(self) -> str:
        return SKIP_LETTERS[self.kind]


@dataclass(frozen=True)
class BlockSpec:
    """Operators, channel ratios and skip connections of one block."""

    ops: tuple[int, ...]
    ratios: tuple[int, ...]
    skips: tuple[SkipSpec, ...] = ()

    def __post_init__(self):
        n = len(self.ops)
        if not 1 <= n <= MAX_OPS:
            raise EncodingError("too-many-ops", f"block needs 1..{MAX_OPS} operators, got {n}")
        if len(self.ratios) != n - 1:
            raise EncodingError(
                "ratio-count", f"{n} operators need {n - 1} ratios, got {len(self.ratios)}"
            )
        if any(o not in range(len(OP_NAMES)) for o in self.ops):
            raise EncodingError("op-range", f"operator id out of range in {self.ops}")
        if any(r not in range(len(RATIO_VALUES)) for r in self.ratios):
            raise EncodingError("ratio-range", f"ratio id out of range in {self.ratios}")
        if len(self.skips) > MAX_SKIPS:
            raise EncodingError("too-many-skips", f"at most {MAX_SKIPS} explicit skips")
        seen = set()
        for s in self.skips:
            if not (0 <= s.from_idx < s.to_idx <= n):
                raise EncodingError(
                    "skip-range", f"skip {s} outside points 0..{n} or reversed"
                )
            if s.kind not in SKIP_KINDS:
                raise EncodingError("bad-skip-kind", f"unknown skip kind {s.kind!r}")
            if (s.from_idx, s.to_idx) == (0, n) and s.kind == "add":
                raise EncodingError(
                    "redundant-skip", "explicit add over the full span duplicates the implicit skip"
                )
            key = (s.from_idx, s.to_idx, s.kind)
            if key in seen:
                raise EncodingError("duplicate-skip", f"skip {s} listed twice")
            seen.add(key)
        object.__setattr__(
            self, "skips", tuple(sorted(self.skips, key=lambda s: (s.from_idx, s.to_idx, s.kind)))
        )

    @property
    def n(self) -> int:
        return len(self.ops)

    def encode(self) -> str:
        return serialize_block(self)


@dataclass(frozen=True)
class MacroSpec:
    """Four stages of per-block channel multipliers."""

    stages: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if len(self.stages) != STAGE_COUNT:
            raise EncodingError("stage-count", f"exactly {STAGE_COUNT} stages required")
        for stage in self.stages:
            if not stage:
                raise EncodingError("empty-stage", "every stage needs at least one block")
            if any(not 1 <= m <= 9 for m in stage):
                raise EncodingError("zero-multiplier", "multipliers are single digits 1..9")
        object.__setattr__(self, "stages", tuple(tuple(s) for s in self.stages))

    @property
    def total_blocks(self) -> int:
        return sum(len(s) for s in self.stages)

    def encode(self) -> str:
        return "-".join("".join(str(m) for m in stage) for stage in self.stages)


@dataclass(frozen=True)
class ArchitectureSpec:
    block: BlockSpec
    first_channel: int
    macro: MacroSpec

    def __post_init__(self):
        if self.first_channel <= 0:
            raise EncodingError("bad-first-channel", "first channel must be positive")

    def encode(self) -> str:
        return serialize_architecture(self)


# ---------------------------------------------------------------------------
# parsing / serialization


def parse_block(text: str) -> BlockSpec:
    if text.count("-") != 1:
        raise EncodingError("dash-count", f"block fragment needs exactly one '-': {text!r}")
    op_part, skip_part = text.split("-")
    if not op_part:
        raise EncodingError("even-op-part", "operator part is empty")
    if not op_part.isdigit():
        raise EncodingError("bad-digit", f"non-digit in operator part {op_part!r}")
    if len(op_part) > 2 * MAX_OPS:
        raise EncodingError("too-many-ops", f"more than {MAX_OPS} operators in {op_part!r}")
    digits = [int(c) for c in op_part]
    if any(o >= len(OP_NAMES) for o in digits[0::2]):
        raise EncodingError("op-range", f"operator id out of 0..4 in {op_part!r}")
    if any(r >= len(RATIO_VALUES) for r in digits[1::2]):
        raise EncodingError("ratio-range", f"ratio id out of 0..4 in {op_part!r}")
    if len(op_part) % 2 == 0:
        raise EncodingError(
            "even-op-part", f"operator part must have odd length 2n-1: {op_part!r}"
        )
    ops = tuple(digits[0::2])
    ratios = tuple(digits[1::2])

    if len(skip_part) % 3 != 0:
        raise EncodingError("skip-length", f"skip part length must be a multiple of 3: {skip_part!r}")
    skips = []
    n = len(ops)
    for i in range(0, len(skip_part), 3):
        letter, lo, hi = skip_part[i], skip_part[i + 1], skip_part[i + 2]
        if letter not in LETTER_KINDS:
            raise EncodingError("bad-skip-kind", f"unknown skip kind {letter!r}")
        if not (lo.isdigit() and hi.isdigit()):
            raise EncodingError("bad-digit", f"non-digit skip index in {skip_part!r}")
        from_idx, to_idx = int(lo), int(hi)
        if from_idx >= to_idx:
            raise EncodingError("skip-reversed", f"skip indices reversed: {letter}{lo}{hi}")
        if to_idx > n:
            raise EncodingError("skip-range", f"skip index beyond point {n}: {letter}{lo}{hi}")
        skips.append(SkipSpec(from_idx, to_idx, LETTER_KINDS[letter]))
    return BlockSpec(ops=ops, ratios=ratios, skips=tuple(skips))


def serialize_block(b: BlockSpec) -> str:
    chars = []
    for i, op in enumerate(b.ops):
        chars.append(str(op))
        if i < b.n - 1:
            chars.append(str(b.ratios[i]))
    skip_part = "".join(f"{s.letter}{s.from_idx}{s.to_idx}" for s in b.skips)
    return "".join(chars) + "-" + skip_part


def parse_architecture(text: str) -> ArchitectureSpec:
    fields = text.split("_")
    if len(fields) != 3:
        raise EncodingError("field-count", f"expected block_firstchannel_macro, got {text!r}")
    block_part, channel_part, macro_part = fields
    block = parse_block(block_part)
    if not channel_part.isdigit() or int(channel_part) <= 0:
        raise EncodingError("bad-first-channel", f"bad first channel {channel_part!r}")
    first_channel = int(channel_part)
    groups = macro_part.split("-")
    if len(groups) != STAGE_COUNT:
        raise EncodingError("stage-count", f"macro needs {STAGE_COUNT} stages, got {len(groups)}")
    stages = []
    for g in groups:
        if not g or not g.isdigit():
            raise EncodingError("bad-digit", f"bad macro stage {g!r}")
        if "0" in g:
            raise EncodingError("zero-multiplier", f"zero multiplier in stage {g!r}")
        stages.append(tuple(int(c) for c in g))
    return ArchitectureSpec(block=block, first_channel=first_channel, macro=MacroSpec(tuple(stages)))


def serialize_architecture(a: ArchitectureSpec) -> str:
    return f"{serialize_block(a.block)}_{a.first_channel}_{a.macro.encode()}"


def read_encodings(path) -> list[ArchitectureSpec]:
    """Read an ``encodings.txt`` corpus, one architecture string per line."""
    specs = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                specs.append(parse_architecture(line))
    return specs


def write_encodings(path, specs: Sequence[ArchitectureSpec]) -> None:
    with open(path, "w") as fh:
        for spec in specs:
            fh.write(spec.encode() + "\n")


# ---------------------------------------------------------------------------
# channel planning
#
# Junction points carry Fractions so fractional ratios stay exact.  Merges at
# a point apply adds first (width unchanged; mismatched sources are padded or
# truncated by the graph builder), then concats (widths accumulate), in the
# canonical skip order.


@dataclass(frozen=True)
class BlockChannelPlan:
    raw_points: tuple[Fraction, ...]  # producer width at each point, before merges
    eff_points: tuple[Fraction, ...]  # width after merges (concat inflation)
    op_inputs: tuple[Fraction, ...]
    op_outputs: tuple[Fraction, ...]

    @property
    def output_channels(self) -> Fraction:
        return self.eff_points[-1]


def plan_block_channels(block: BlockSpec, c_in: Fraction, c_out: Fraction) -> BlockChannelPlan:
    n = block.n
    raw = [Fraction(c_in)]
    for i in range(n - 1):
        raw.append(RATIO_VALUES[block.ratios[i]] * c_out)
    raw.append(Fraction(c_out))
    eff = list(raw)
    for t in range(n + 1):
        extra = Fraction(0)
        for s in block.skips:
            if s.to_idx == t and s.kind == "concat":
                extra += eff[s.from_idx]
        eff[t] = raw[t] + extra
    op_inputs = tuple(eff[:n])
    op_outputs = tuple(raw[1:])
    return BlockChannelPlan(tuple(raw), tuple(eff), op_inputs, op_outputs)


@dataclass(frozen=True)
class BlockInstance:
    """One concrete block placement inside an architecture."""

    stage: int  # 1-based
    index: int  # position within the stage, 0-based
    c_in: Fraction
    c_out: Fraction
    multiplier: int
    downsamples: bool
    plan: BlockChannelPlan


def walk_blocks(a: ArchitectureSpec) -> Iterator[BlockInstance]:
    """Yield every block instance with concrete channel counts.

    A concat skip landing on the block output inflates what the next block
    sees; the walk threads that effective width through.
    """
    cur = Fraction(a.first_channel)
    for stage_no, stage in enumerate(a.macro.stages, start=1):
        for idx, mult in enumerate(stage):
            c_in = cur
            c_out = mult * c_in
            plan = plan_block_channels(a.block, c_in, c_out)
            yield BlockInstance(
                stage=stage_no,
                index=idx,
                c_in=c_in,
                c_out=c_out,
                multiplier=mult,
                downsamples=(stage_no > 1 and idx == 0),
                plan=plan,
            )
            cur = plan.output_channels


def stride_host_index(block: BlockSpec) -> int | None:
    """Index of the operator that takes stride 2 in a down-sampling block."""
    for i, op in enumerate(block.ops):
        if OP_NAMES[op] != "conv1x1":
            return i
    return None


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class ValidityRules:
    require_stride_host: bool = True
    require_integer_channels: bool = True
    require_grouped_divisibility: bool = True
    require_depthwise_integer: bool = True
    require_add_channel_match: bool = False


DEFAULT_RULES = ValidityRules()


@dataclass(frozen=True)
class Violation:
    code: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...]

    @property
    def ok(self) -> bool:
        return not self.violations


def validate(a: ArchitectureSpec, rules: ValidityRules = DEFAULT_RULES) -> ValidationReport:
    """Collect rule violations; violations are data, not exceptions."""
    violations: list[Violation] = []
    block = a.block
    n = block.n

    if rules.require_stride_host and stride_host_index(block) is None:
        for stage_no in range(2, STAGE_COUNT + 1):
            violations.append(
                Violation(
                    "no-stride-host",
                    f"stage-{stage_no} down-sampling has no operator that can host stride 2",
                )
            )

    for inst in walk_blocks(a):
        where = f"stage {inst.stage} block {inst.index}"
        plan = inst.plan
        if rules.require_add_channel_match:
            for s in block.skips:
                if s.kind != "add":
                    continue
                src = plan.eff_points[s.from_idx]
                dst = plan.raw_points[s.to_idx]
                if src != dst:
                    violations.append(
                        Violation(
                            "add-channel-mismatch",
                            f"add skip {s.from_idx}->{s.to_idx} joins {src} vs {dst} channels at {where}",
                        )
                    )
        for j, op in enumerate(block.ops):
            cin, cout = plan.op_inputs[j], plan.op_outputs[j]
            if rules.require_integer_channels and (
                cin.denominator != 1 or cout.denominator != 1 or cin < 1 or cout < 1
            ):
                violations.append(
                    Violation(
                        "fractional-channels",
                        f"operator {j} has non-integral channels {cin}->{cout} at {where}",
                    )
                )
                continue
            groups = OP_GROUPS[op]
            if groups is None:
                # one group per input channel: output must replicate input an
                # integer number of times
                if rules.require_depthwise_integer and (cout / cin).denominator != 1:
                    violations.append(
                        Violation(
                            "depthwise-ratio",
                            f"per-channel conv at {j} needs integer out/in, got {cout}/{cin} at {where}",
                        )
                    )
            elif groups > 1 and rules.require_grouped_divisibility:
                if cin % groups != 0 or cout % groups != 0:
                    violations.append(
                        Violation(
                            "group-divisibility",
                            f"group-{groups} conv at {j} needs channels divisible by {groups} at {where}",
                        )
                    )

    # deduplicate repeated per-instance findings, keep first occurrence order
    seen: set[tuple[str, str]] = set()
    unique = []
    for v in violations:
        key = (v.code, v.message)
        if key not in seen:
            seen.add(key)
            unique.append(v)
    return ValidationReport(tuple(unique))


def block_is_locally_valid(block: BlockSpec, rules: ValidityRules = DEFAULT_RULES) -> bool:
    """Macro-independent validity used by the sampler and mutation operators.

    Checks the block against a unit-channel instance (c_in = c_out = 1), which
    is the strictest multiplier for the per-channel-conv rule.
    """
    if rules.require_stride_host and stride_host_index(block) is None:
        return False
    if not rules.require_depthwise_integer:
        return True
    plan = plan_block_channels(block, Fraction(1), Fraction(1))
    for j, op in enumerate(block.ops):
        if OP_GROUPS[op] is None:
            if (plan.op_outputs[j] / plan.op_inputs[j]).denominator != 1:
                return False
    return True


# ---------------------------------------------------------------------------
# space limits, counting, sampling


@dataclass(frozen=True)
class SpaceLimits:
    min_ops: int = 1
    max_ops: int = MAX_OPS
    op_ids: tuple[int, ...] = tuple(range(len(OP_NAMES)))
    ratio_ids: tuple[int, ...] = tuple(range(len(RATIO_VALUES)))
    max_skips: int = MAX_SKIPS
    skip_kinds: tuple[str, ...] = SKIP_KINDS


DEFAULT_BLOCK_LIMITS = SpaceLimits()


@dataclass(frozen=True)
class MacroLimits:
    first_channels: tuple[int, ...] = (32, 64, 128)
    min_total_blocks: int = STAGE_COUNT
    max_total_blocks: int | None = None


DEFAULT_MACRO_LIMITS = MacroLimits()


def _legal_skip_edges(n: int, limits: SpaceLimits) -> list[SkipSpec]:
    edges = []
    for from_idx in range(n + 1):
        for to_idx in range(from_idx + 1, n + 1):
            for kind in limits.skip_kinds:
                if (from_idx, to_idx) == (0, n) and kind == "add":
                    continue
                edges.append(SkipSpec(from_idx, to_idx, kind))
    return edges


def count_block_space(limits: SpaceLimits = DEFAULT_BLOCK_LIMITS) -> int:
    """Count distinct canonical blocks within the given limits.

    Skips form unordered sets of distinct edges, so for each operator count n
    the tally is |ops|^n * |ratios|^(n-1) * sum_k C(edges(n), k).
    """
    total = 0
    for n in range(limits.min_ops, limits.max_ops + 1):
        edges = len(_legal_skip_edges(n, limits))
        skip_sets = sum(math.comb(edges, k) for k in range(limits.max_skips + 1))
        total += len(limits.op_ids) ** n * len(limits.ratio_ids) ** (n - 1) * skip_sets
    return total


def enumerate_blocks(limits: SpaceLimits = DEFAULT_BLOCK_LIMITS) -> Iterator[BlockSpec]:
    """Exhaustively generate every canonical block within the limits."""
    for n in range(limits.min_ops, limits.max_ops + 1):
        edges = _legal_skip_edges(n, limits)
        for ops in itertools.product(limits.op_ids, repeat=n):
            for ratios in itertools.product(limits.ratio_ids, repeat=n - 1):
                for k in range(limits.max_skips + 1):
                    for skips in itertools.combinations(edges, k):
                        yield BlockSpec(ops=ops, ratios=ratios, skips=skips)


def sample_block(rng: np.random.Generator, limits: SpaceLimits = DEFAULT_BLOCK_LIMITS) -> BlockSpec:
    """Draw a random locally-valid block."""
    while True:
        n = int(rng.integers(limits.min_ops, limits.max_ops + 1))
        ops = tuple(int(rng.choice(limits.op_ids)) for _ in range(n))
        ratios = tuple(int(rng.choice(limits.ratio_ids)) for _ in range(n - 1))
        edges = _legal_skip_edges(n, limits)
        k = int(rng.integers(0, limits.max_skips + 1)) if edges else 0
        k = min(k, len(edges))
        idx = rng.choice(len(edges), size=k, replace=False) if k else []
        block = BlockSpec(ops=ops, ratios=ratios, skips=tuple(edges[i] for i in idx))
        if block_is_locally_valid(block):
            return block


def sample_macro(
    rng: np.random.Generator,
    limits: MacroLimits = DEFAULT_MACRO_LIMITS,
    total_blocks_range: tuple[int, int] = (10, 50),
    last_channels: tuple[int, ...] = (512, 1024, 2048),
) -> tuple[MacroSpec, int]:
    """Draw a random macro plus first channel.

    The total block count is uniform over ``total_blocks_range``; the first
    and last channel are drawn from their menus and the implied number of
    channel-doubling blocks is scattered over the block positions.
    """
    lo, hi = total_blocks_range
    total = int(rng.integers(lo, hi + 1))
    first = int(rng.choice(limits.first_channels))
    last = int(rng.choice(last_channels))
    doublings = int(math.log2(last // first))
    # split total into 4 positive stage sizes
    cuts = sorted(rng.choice(np.arange(1, total), size=STAGE_COUNT - 1, replace=False))
    sizes = [b - a for a, b in zip([0, *cuts], [*cuts, total])]
    digits = [1] * total
    for pos in rng.choice(total, size=min(doublings, total), replace=False):
        digits[int(pos)] = 2
    stages, start = [], 0
    for size in sizes:
        stages.append(tuple(digits[start : start + size]))
        start += size
    return MacroSpec(tuple(stages)), first


def sample_architecture(
    rng: np.random.Generator,
    block_limits: SpaceLimits = DEFAULT_BLOCK_LIMITS,
    macro_limits: MacroLimits = DEFAULT_MACRO_LIMITS,
    total_blocks_range: tuple[int, int] = (10, 50),
) -> ArchitectureSpec:
    block = sample_block(rng, block_limits)
    macro, first = sample_macro(rng, macro_limits, total_blocks_range)
    return ArchitectureSpec(block=block, first_channel=first, macro=macro)


# ---------------------------------------------------------------------------
# mutation

_MUTATION_RETRY = 200


def _applicable_block_kinds(b: BlockSpec, limits: SpaceLimits) -> list[str]:
    kinds = []
    if len(limits.op_ids) >= 2:
        kinds.append("op")
    if b.n >= 2 and len(limits.ratio_ids) >= 2:
        kinds.append("ratio")
    existing = set(b.skips)
    free = [e for e in _legal_skip_edges(b.n, limits) if e not in existing]
    if len(b.skips) < limits.max_skips and free:
        kinds.append("skip_add")
    if b.skips:
        kinds.append("skip_remove")
        if free:
            kinds.append("skip_modify")
    return kinds


def mutate_block(
    b: BlockSpec,
    rng: np.random.Generator,
    limits: SpaceLimits = DEFAULT_BLOCK_LIMITS,
) -> BlockSpec:
    """Apply exactly one mutation, uniform over the applicable kinds.

    Candidates that lose local validity (no stride host, bad per-channel conv
    ratio) are redrawn so mutation chains stay inside the valid space.
    """
    for _ in range(_MUTATION_RETRY):
        kinds = _applicable_block_kinds(b, limits)
        kind = str(rng.choice(kinds))
        candidate = _apply_block_mutation(b, kind, rng, limits)
        if candidate is not None and block_is_locally_valid(candidate):
            return candidate
    raise RuntimeError(f"no valid mutation found for {b.encode()!r}")


def _apply_block_mutation(
    b: BlockSpec, kind: str, rng: np.random.Generator, limits: SpaceLimits
) -> BlockSpec | None:
    if kind == "op":
        pos = int(rng.integers(b.n))
        choices = [o for o in limits.op_ids if o != b.ops[pos]]
        new_op = int(rng.choice(choices))
        ops = b.ops[:pos] + (new_op,) + b.ops[pos + 1 :]
        return replace(b, ops=ops)
    if kind == "ratio":
        pos = int(rng.integers(b.n - 1))
        choices = [r for r in limits.ratio_ids if r != b.ratios[pos]]
        new_ratio = int(rng.choice(choices))
        ratios = b.ratios[:pos] + (new_ratio,) + b.ratios[pos + 1 :]
        return replace(b, ratios=ratios)
    existing = set(b.skips)
    free = [e for e in _legal_skip_edges(b.n, limits) if e not in existing]
    if kind == "skip_add":
        edge = free[int(rng.integers(len(free)))]
        return replace(b, skips=b.skips + (edge,))
    if kind == "skip_remove":
        drop = int(rng.integers(len(b.skips)))
        return replace(b, skips=b.skips[:drop] + b.skips[drop + 1 :])
    if kind == "skip_modify":
        drop = int(rng.integers(len(b.skips)))
        edge = free[int(rng.integers(len(free)))]
        return replace(b, skips=b.skips[:drop] + b.skips[drop + 1 :] + (edge,))
    raise ValueError(f"unknown mutation kind {kind!r}")


def _applicable_macro_kinds(
    m: MacroSpec, first_channel: int, limits: MacroLimits
) -> list[str]:
    kinds = []
    total = m.total_blocks
    if limits.max_total_blocks is None or total < limits.max_total_blocks:
        kinds.append("add_one")
    if total > limits.min_total_blocks and any(
        len(stage) >= 2 and 1 in stage for stage in m.stages
    ):
        kinds.append("remove_one")
    if any(
        stage[i] != stage[i + 1] for stage in m.stages for i in range(len(stage) - 1)
    ):
        kinds.append("swap_adjacent")
    if any(c != first_channel for c in limits.first_channels):
        kinds.append("first_channel")
    return kinds


def mutate_macro(
    m: MacroSpec,
    first_channel: int,
    rng: np.random.Generator,
    limits: MacroLimits = DEFAULT_MACRO_LIMITS,
) -> tuple[MacroSpec, int]:
    """Apply exactly one macro mutation, uniform over the applicable kinds."""
    kinds = _applicable_macro_kinds(m, first_channel, limits)
    if not kinds:
        raise RuntimeError("no applicable macro mutation")
    kind = str(rng.choice(kinds))
    stages = [list(s) for s in m.stages]

    if kind == "add_one":
        stage = int(rng.integers(STAGE_COUNT))
        stages[stage].append(1)
    elif kind == "remove_one":
        candidates = [
            (si, bi)
            for si, stage in enumerate(stages)
            if len(stage) >= 2
            for bi, mult in enumerate(stage)
            if mult == 1
        ]
        si, bi = candidates[int(rng.integers(len(candidates)))]
        del stages[si][bi]
    elif kind == "swap_adjacent":
        candidates = [
            (si, i)
            for si, stage in enumerate(stages)
            for i in range(len(stage) - 1)
            if stage[i] != stage[i + 1]
        ]
        si, i = candidates[int(rng.integers(len(candidates)))]
        stages[si][i], stages[si][i + 1] = stages[si][i + 1], stages[si][i]
    elif kind == "first_channel":
        choices = [c for c in limits.first_channels if c != first_channel]
        first_channel = int(rng.choice(choices))
    return MacroSpec(tuple(tuple(s) for s in stages)), first_channel
