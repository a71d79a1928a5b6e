"""Analytic cost model: layer graphs, parameter/MAC/activation counts, a
linear step-time proxy, and the deterministic surrogate accuracy used for
desk-scale search.

Conventions baked in here (they set the absolute numbers):

* stem: conv3x3 stride 2 into ``first_channel`` outputs, then 3x3 max-pool
  stride 2, so a 224 px input reaches stage 1 at 56 px and leaves stage 4 at
  7 px (divide-by-32 overall),
* every conv carries a normalization layer costed at 2 * C_out parameters,
* head: global average pool plus one biased linear layer,
* the implicit residual skip gets a 1x1 projection conv when its endpoints
  differ in channels or stride; explicit skips stay parameter-free (add
  sources are zero-padded or sliced to the local width, and subsampled when
  they cross the stride point).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .encoding import (
    OP_GROUPS,
    OP_KERNELS,
    OP_NAMES,
    ArchitectureSpec,
    BlockInstance,
    stride_host_index,
    walk_blocks,
)


class GraphBuildError(ValueError):
    pass


@dataclass(frozen=True)
class LayerNode:
    id: int
    kind: str  # conv | maxpool | gap | linear | add | concat | pad | slice | subsample | input
    cin: int
    cout: int
    h: int  # output spatial size (pixels per side)
    w: int
    kernel: int = 0
    stride: int = 1
    groups: int = 1
    label: str = ""


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    channels: int
    h: int
    w: int


@dataclass(frozen=True)
class LayerGraph:
    nodes: tuple[LayerNode, ...]
    edges: tuple[Edge, ...]
    resolution: int
    classes: int
    encoding: str

    def nodes_of_kind(self, *kinds: str) -> list[LayerNode]:
        return [n for n in self.nodes if n.kind in kinds]

    @property
    def block_count(self) -> int:
        return sum(1 for n in self.nodes if n.kind == "add" and n.label.endswith("residual"))


@dataclass(frozen=True)
class CostReport:
    params: int
    macs: int
    activations: int
    step_time_ms: float = 0.0


@dataclass(frozen=True)
class SurrogateConfig:
    """Coefficients of the step-time proxy and the synthetic accuracy."""

    # per-unit milliseconds, fitted against the reference zoo measurements
    ms_per_mac: float = 1.26227e-08
    ms_per_activation: float = 4.25243e-06
    ms_per_param: float = 1.13304e-06
    # synthetic accuracy shape
    acc_base: float = 0.02
    acc_scale: float = 0.90
    acc_log_params_floor: float = 5.0
    acc_log_params_tau: float = 1.2
    acc_balance_penalty: float = 0.05
    acc_skip_penalty: float = 0.01
    resolution: int = 224
    classes: int = 1000
    batch_size: int = 64


DEFAULT_SURROGATE = SurrogateConfig()


def _half(px: int) -> int:
    # 3x3 kernel, padding 1, stride 2
    return (px - 1) // 2 + 1


def _as_int(value: Fraction, where: str) -> int:
    if value.denominator != 1 or value < 1:
        raise GraphBuildError(f"channel inference gives non-integral width {value} at {where}")
    return int(value)


class _Builder:
    def __init__(self, resolution: int, classes: int, encoding: str):
        self.nodes: list[LayerNode] = []
        self.edges: list[Edge] = []
        self.resolution = resolution
        self.classes = classes
        self.encoding = encoding

    def add_node(self, kind: str, cin: int, cout: int, h: int, *, kernel=0, stride=1, groups=1, label="") -> int:
        node = LayerNode(
            id=len(self.nodes), kind=kind, cin=cin, cout=cout, h=h, w=h,
            kernel=kernel, stride=stride, groups=groups, label=label,
        )
        self.nodes.append(node)
        return node.id

    def connect(self, src: int, dst: int) -> None:
        s = self.nodes[src]
        self.edges.append(Edge(src=src, dst=dst, channels=s.cout, h=s.h, w=s.w))

    def graph(self) -> LayerGraph:
        return LayerGraph(
            nodes=tuple(self.nodes), edges=tuple(self.edges),
            resolution=self.resolution, classes=self.classes, encoding=self.encoding,
        )


@dataclass
class _Value:
    """A data value flowing through the graph: producing node plus shape."""

    node: int
    channels: int
    h: int


def _adapt(b: _Builder, src: _Value, channels: int | None, h: int, label: str) -> _Value:
    """Insert parameter-free adapters to match a skip source to its target."""
    value = src
    if value.h != h:
        factor = value.h // h
        nid = b.add_node("subsample", value.channels, value.channels, h,
                         stride=factor, label=f"{label} subsample")
        b.connect(value.node, nid)
        value = _Value(nid, value.channels, h)
    if channels is not None and value.channels != channels:
        kind = "pad" if channels > value.channels else "slice"
        nid = b.add_node(kind, value.channels, channels, h, label=f"{label} {kind}")
        b.connect(value.node, nid)
        value = _Value(nid, channels, h)
    return value


def _emit_block(b: _Builder, inst: BlockInstance, block, entry: _Value) -> _Value:
    plan = inst.plan
    n = block.n
    stride_pos = stride_host_index(block) if inst.downsamples else None
    where = f"stage {inst.stage} block {inst.index}"
    if inst.downsamples and stride_pos is None:
        raise GraphBuildError(f"{where}: no operator can host the stride")

    points: list[_Value] = [entry]
    for j in range(n):
        src = points[j]
        stride = 2 if j == stride_pos else 1
        h_out = _half(src.h) if stride == 2 else src.h
        cout = _as_int(plan.op_outputs[j], f"{where} op {j}")
        op = block.ops[j]
        groups = src.channels if OP_GROUPS[op] is None else OP_GROUPS[op]
        if src.channels % groups or cout % groups:
            raise GraphBuildError(
                f"{where} op {j}: {OP_NAMES[op]} needs channels divisible by {groups}"
            )
        nid = b.add_node(
            "conv", src.channels, cout, h_out,
            kernel=OP_KERNELS[op], stride=stride, groups=groups,
            label=f"{where} {OP_NAMES[op]}",
        )
        b.connect(src.node, nid)
        value = _Value(nid, cout, h_out)

        point = j + 1
        add_sources: list[_Value] = []
        if point == n:
            # implicit residual: project when shape changes, else identity
            if entry.channels != value.channels or entry.h != value.h:
                pid = b.add_node(
                    "conv", entry.channels, value.channels, value.h,
                    kernel=1, stride=entry.h // value.h, label=f"{where} projection",
                )
                b.connect(entry.node, pid)
                add_sources.append(_Value(pid, value.channels, value.h))
            else:
                add_sources.append(entry)
        for s in block.skips:
            if s.to_idx == point and s.kind == "add":
                add_sources.append(
                    _adapt(b, points[s.from_idx], value.channels, value.h,
                           f"{where} a{s.from_idx}{s.to_idx}")
                )
        if add_sources:
            nid = b.add_node(
                "add", value.channels, value.channels, value.h,
                label=f"{where} residual" if point == n else f"{where} add@{point}",
            )
            b.connect(value.node, nid)
            for s_val in add_sources:
                b.connect(s_val.node, nid)
            value = _Value(nid, value.channels, value.h)

        concat_sources = [
            _adapt(b, points[s.from_idx], None, value.h, f"{where} c{s.from_idx}{s.to_idx}")
            for s in block.skips
            if s.to_idx == point and s.kind == "concat"
        ]
        if concat_sources:
            total = value.channels + sum(s.channels for s in concat_sources)
            nid = b.add_node(
                "concat", value.channels, total, value.h, label=f"{where} concat@{point}"
            )
            b.connect(value.node, nid)
            for s_val in concat_sources:
                b.connect(s_val.node, nid)
            value = _Value(nid, total, value.h)
        points.append(value)
    return points[-1]


def build_graph(
    a: ArchitectureSpec, resolution: int = 224, classes: int = 1000
) -> LayerGraph:
    """Expand an architecture into a concrete layer graph with shapes."""
    b = _Builder(resolution, classes, a.encode())
    inp = b.add_node("input", 3, 3, resolution, label="input")
    h = _half(resolution)
    stem = b.add_node("conv", 3, a.first_channel, h, kernel=3, stride=2, label="stem conv")
    b.connect(inp, stem)
    h = _half(h)
    pool = b.add_node("maxpool", a.first_channel, a.first_channel, h,
                      kernel=3, stride=2, label="stem pool")
    b.connect(stem, pool)

    value = _Value(pool, a.first_channel, h)
    for inst in walk_blocks(a):
        if inst.c_in != value.channels:
            raise GraphBuildError(
                f"stage {inst.stage} block {inst.index}: planned input {inst.c_in} "
                f"!= produced {value.channels}"
            )
        value = _emit_block(b, inst, a.block, value)

    gap = b.add_node("gap", value.channels, value.channels, 1, label="global avg pool")
    b.connect(value.node, gap)
    head = b.add_node("linear", value.channels, classes, 1, label="classifier")
    b.connect(gap, head)
    return b.graph()


def count_costs(g: LayerGraph) -> CostReport:
    """Closed-form conv arithmetic over the graph nodes.

    conv params: k^2 * Cin * Cout / groups plus 2 * Cout for normalization;
    macs: conv weight count times output positions; activations: output
    elements of conv, pool, gap and linear nodes (merges and adapters are
    views and contribute nothing).
    """
    params = 0
    macs = 0
    acts = 0
    for node in g.nodes:
        if node.kind == "conv":
            weights = node.kernel * node.kernel * node.cin * node.cout // node.groups
            params += weights + 2 * node.cout
            macs += weights * node.h * node.w
            acts += node.cout * node.h * node.w
        elif node.kind in ("maxpool", "gap"):
            acts += node.cout * node.h * node.w
        elif node.kind == "linear":
            params += node.cin * node.cout + node.cout
            macs += node.cin * node.cout
            acts += node.cout
    return CostReport(params=params, macs=macs, activations=acts)


def estimate_step_time(r: CostReport, cfg: SurrogateConfig = DEFAULT_SURROGATE) -> float:
    """Milliseconds per training iteration as a linear proxy."""
    for c in (cfg.ms_per_mac, cfg.ms_per_activation, cfg.ms_per_param):
        if c < 0:
            raise ValueError("step-time coefficients must be non-negative")
    return (
        cfg.ms_per_mac * r.macs
        + cfg.ms_per_activation * r.activations
        + cfg.ms_per_param * r.params
    )


def fit_step_time_coefficients(
    metrics: Sequence[tuple[float, float, float]], times_ms: Sequence[float]
) -> tuple[float, float, float]:
    """Non-negative least squares fit of (macs, activations, params) -> ms."""
    from scipy.optimize import nnls

    design = np.asarray(metrics, dtype=float)
    target = np.asarray(times_ms, dtype=float)
    coef, _ = nnls(design, target)
    return float(coef[0]), float(coef[1]), float(coef[2])


def surrogate_accuracy(
    r: CostReport, a: ArchitectureSpec, cfg: SurrogateConfig = DEFAULT_SURROGATE
) -> float:
    """Deterministic synthetic accuracy in [0, 1].

    Rises with log parameter count with diminishing returns and pays
    penalties for uneven stage allocation and for explicit skips, so speed
    and accuracy genuinely trade off across the space.
    """
    log_params = math.log10(max(r.params, 1))
    gain = 1.0 - math.exp(-max(log_params - cfg.acc_log_params_floor, 0.0) / cfg.acc_log_params_tau)
    counts = [len(s) for s in a.macro.stages]
    mean = sum(counts) / len(counts)
    cv = math.sqrt(sum((c - mean) ** 2 for c in counts) / len(counts)) / mean
    acc = (
        cfg.acc_base
        + cfg.acc_scale * gain
        - cfg.acc_balance_penalty * cv
        - cfg.acc_skip_penalty * len(a.block.skips)
    )
    return min(max(acc, 0.0), 1.0)


def evaluate_architecture(
    a: ArchitectureSpec, cfg: SurrogateConfig = DEFAULT_SURROGATE
) -> tuple[CostReport, float]:
    """Build, count, and score one architecture (the search evaluator core)."""
    graph = build_graph(a, cfg.resolution, cfg.classes)
    report = count_costs(graph)
    report = replace(report, step_time_ms=estimate_step_time(report, cfg))
    return report, surrogate_accuracy(report, a, cfg)


def export_cost_csv(path, rows: Iterable[tuple[str, CostReport, float]]) -> None:
    """Write (encoding, params, macs, activations, step_time_est, surrogate_acc)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["encoding", "params", "macs", "activations", "step_time_est", "surrogate_acc"])
        for encoding, report, acc in rows:
            writer.writerow(
                [encoding, report.params, report.macs, report.activations,
                 f"{report.step_time_ms:.6f}", f"{acc:.6f}"]
            )
