"""Cost model tests: graph building, closed-form counting against an
independent per-node oracle, the step-time proxy, and the surrogate."""

import math

import numpy as np
import pytest
from scipy.stats import spearmanr

from zoosched.cost import (
    DEFAULT_SURROGATE,
    CostReport,
    GraphBuildError,
    SurrogateConfig,
    build_graph,
    count_costs,
    estimate_step_time,
    evaluate_architecture,
    fit_step_time_coefficients,
    surrogate_accuracy,
)
from zoosched.encoding import parse_architecture
from zoosched.reference import FAMILY_BASELINES, REFERENCE_MODELS

PUBLISHED_MPARAMS = {"ref-b": 3.9, "ref-d": 15.2, "ref-e": 21.4}

# hand count for the 3x3-stem basic-block net at 224 px / 1000 classes:
# stem 1728+128, stages of two blocks at 64/128/256/512 channels with
# projections on the stage-initial blocks of stages 2-4, head 512*1000+1000
RESNET18_PARAMS = 11_681_832


def reference_cost_walk(graph):
    """Independent per-node accumulation used as the counting oracle."""
    params = macs = acts = 0
    for node in graph.nodes:
        if node.kind == "conv":
            w = (node.kernel**2) * node.cin * node.cout // node.groups
            params += w + 2 * node.cout
            macs += w * node.h * node.w
            acts += node.cout * node.h * node.w
        elif node.kind == "linear":
            params += node.cin * node.cout + node.cout
            macs += node.cin * node.cout
            acts += node.cout
        elif node.kind in ("maxpool", "gap"):
            acts += node.cout * node.h * node.w
    return params, macs, acts


class TestBuildGraph:
    def test_resnet18_structure(self):
        graph = build_graph(parse_architecture(FAMILY_BASELINES["resnet18"]))
        assert graph.block_count == 8
        stage_channels = sorted(
            {n.cout for n in graph.nodes if n.kind == "add" and n.label.endswith("residual")}
        )
        assert stage_channels == [64, 128, 256, 512]
        head = graph.nodes_of_kind("linear")[0]
        assert head.cin == 512 and head.cout == 1000

    def test_minimal_single_op_block(self):
        graph = build_graph(parse_architecture("2-_32_1-1-1-1"))
        stage1_convs = [n for n in graph.nodes if n.kind == "conv" and "stage 1" in n.label]
        assert len(stage1_convs) == 1
        assert stage1_convs[0].groups == 2
        stage1_adds = [n for n in graph.nodes if n.kind == "add" and "stage 1" in n.label]
        assert len(stage1_adds) == 1

    def test_reference_zoo_blocks_per_stage(self):
        graph = build_graph(parse_architecture("031-_32_1-1-221-11121"))
        assert graph.block_count == 1 + 1 + 3 + 5

    def test_downsampling_schedule(self):
        graph = build_graph(parse_architecture(FAMILY_BASELINES["resnet18"]), resolution=224)
        convs = graph.nodes_of_kind("conv")
        assert min(n.h for n in convs) == 224 // 32
        strided = [n for n in convs if n.stride == 2]
        # stem + (conv + projection) in each of stages 2..4
        assert len(strided) == 1 + 6

    def test_edges_conserve_shapes(self):
        for text in (FAMILY_BASELINES["resnet50"], "23311-a02c12_64_211-2111-211-211"):
            graph = build_graph(parse_architecture(text))
            nodes = {n.id: n for n in graph.nodes}
            for edge in graph.edges:
                assert nodes[edge.src].cout == edge.channels
                assert nodes[edge.src].h == edge.h
            for node in graph.nodes:
                inputs = [nodes[e.src] for e in graph.edges if e.dst == node.id]
                if node.kind == "add":
                    assert all(i.cout == node.cout and i.h == node.h for i in inputs)
                elif node.kind == "concat":
                    assert sum(i.cout for i in inputs) == node.cout
                    assert all(i.h == node.h for i in inputs)

    def test_fractional_channels_raise(self):
        with pytest.raises(GraphBuildError):
            build_graph(parse_architecture("001-_2_1-1-1-1"))

    def test_mismatched_add_skip_gets_adapter_not_error(self):
        graph = build_graph(parse_architecture("02031-a02_64_111-2111-211-211"))
        kinds = {n.kind for n in graph.nodes}
        assert "pad" in kinds or "slice" in kinds


class TestCountCosts:
    def test_single_conv_closed_formula(self):
        graph = build_graph(parse_architecture(FAMILY_BASELINES["resnet18"]))
        stem = next(n for n in graph.nodes if n.label == "stem conv")
        assert stem.cin == 3 and stem.cout == 64 and stem.h == 112
        assert 3 * 3 * 3 * 64 == 1728  # weight count feeding params and macs
        report = count_costs(graph)
        params, macs, acts = reference_cost_walk(graph)
        assert (report.params, report.macs, report.activations) == (params, macs, acts)

    def test_resnet18_parameter_count(self):
        report = count_costs(build_graph(parse_architecture(FAMILY_BASELINES["resnet18"])))
        assert report.params == RESNET18_PARAMS
        assert abs(report.params - 11.69e6) / 11.69e6 < 0.01

    @pytest.mark.parametrize("name", sorted(PUBLISHED_MPARAMS))
    def test_reference_models_match_published_mparams(self, name):
        model = next(m for m in REFERENCE_MODELS if m.name == name)
        report = count_costs(build_graph(parse_architecture(model.encoding)))
        published = PUBLISHED_MPARAMS[name] * 1e6
        assert abs(report.params - published) / published < 0.15

    def test_oracle_walk_agrees_across_reference_zoo(self):
        for model in REFERENCE_MODELS:
            graph = build_graph(parse_architecture(model.encoding))
            report = count_costs(graph)
            assert (report.params, report.macs, report.activations) == reference_cost_walk(graph)


class TestStepTime:
    def test_zero_coefficients_give_zero(self):
        cfg = SurrogateConfig(ms_per_mac=0.0, ms_per_activation=0.0, ms_per_param=0.0)
        report = CostReport(params=10, macs=20, activations=30)
        assert estimate_step_time(report, cfg) == 0.0

    def test_linearity_in_macs(self):
        cfg = SurrogateConfig(ms_per_mac=2e-9, ms_per_activation=0.0, ms_per_param=0.0)
        one = estimate_step_time(CostReport(params=5, macs=100, activations=7), cfg)
        two = estimate_step_time(CostReport(params=5, macs=200, activations=7), cfg)
        assert two == pytest.approx(2 * one)

    def test_negative_coefficients_rejected(self):
        cfg = SurrogateConfig(ms_per_mac=-1e-9)
        with pytest.raises(ValueError):
            estimate_step_time(CostReport(1, 1, 1), cfg)

    def test_homogeneous_degree_one(self):
        r = CostReport(params=1_000, macs=50_000, activations=2_000)
        scaled = CostReport(params=3_000, macs=150_000, activations=6_000)
        assert estimate_step_time(scaled) == pytest.approx(3 * estimate_step_time(r))

    def test_monotone_in_each_component(self):
        base = CostReport(params=1_000, macs=50_000, activations=2_000)
        for bumped in (
            CostReport(2_000, 50_000, 2_000),
            CostReport(1_000, 60_000, 2_000),
            CostReport(1_000, 50_000, 3_000),
        ):
            assert estimate_step_time(bumped) >= estimate_step_time(base)

    def test_fitted_proxy_ranks_reference_step_times(self):
        metrics, times = [], []
        for m in REFERENCE_MODELS:
            report = count_costs(build_graph(parse_architecture(m.encoding)))
            metrics.append((report.macs, report.activations, report.params))
            times.append(m.step_time_ms)
        coef = fit_step_time_coefficients(metrics, times)
        assert all(c >= 0 for c in coef)
        predicted = [coef[0] * ma + coef[1] * ac + coef[2] * pa for ma, ac, pa in metrics]
        rho, _ = spearmanr(predicted, times)
        assert rho >= 0.9

    def test_default_coefficients_match_fit(self):
        # frozen defaults reproduce the calibration on the reference rows
        metrics, times = [], []
        for m in REFERENCE_MODELS:
            report = count_costs(build_graph(parse_architecture(m.encoding)))
            metrics.append((report.macs, report.activations, report.params))
            times.append(m.step_time_ms)
        coef = fit_step_time_coefficients(metrics, times)
        assert DEFAULT_SURROGATE.ms_per_mac == pytest.approx(coef[0], rel=1e-3)
        assert DEFAULT_SURROGATE.ms_per_activation == pytest.approx(coef[1], rel=1e-3)


def independent_surrogate(report, spec, cfg):
    """Second implementation of the synthetic accuracy, kept deliberately
    separate from the production code path."""
    if report.params >= 1:
        size = math.log(report.params, 10)
    else:
        size = 0.0
    shifted = size - cfg.acc_log_params_floor
    gain = 1.0 - math.exp(-shifted / cfg.acc_log_params_tau) if shifted > 0 else 0.0
    counts = np.array([len(stage) for stage in spec.macro.stages], dtype=float)
    cv = float(counts.std() / counts.mean())
    raw = (
        cfg.acc_base
        + cfg.acc_scale * gain
        - cfg.acc_balance_penalty * cv
        - cfg.acc_skip_penalty * len(spec.block.skips)
    )
    return float(np.clip(raw, 0.0, 1.0))


class TestSurrogateAccuracy:
    def test_deterministic(self):
        spec = parse_architecture(FAMILY_BASELINES["resnet18"])
        report, acc1 = evaluate_architecture(spec)
        _, acc2 = evaluate_architecture(spec)
        assert acc1 == acc2

    def test_monotone_in_params_with_same_shape_terms(self):
        small = parse_architecture("020-_64_11-21-21-21")
        large = parse_architecture("020-_128_11-21-21-21")
        r_small, acc_small = evaluate_architecture(small)
        r_large, acc_large = evaluate_architecture(large)
        assert r_large.params > r_small.params
        assert acc_large >= acc_small

    def test_skip_penalty(self):
        plain = parse_architecture("02031-_64_11-21-21-21")
        skippy = parse_architecture("02031-a01c12_64_11-21-21-21")
        cfg = DEFAULT_SURROGATE
        acc_plain = surrogate_accuracy(count_costs(build_graph(plain)), plain, cfg)
        acc_skippy = surrogate_accuracy(count_costs(build_graph(skippy)), skippy, cfg)
        assert acc_plain > acc_skippy

    def test_ranking_matches_independent_reimplementation(self):
        specs = []
        for total in range(4, 7):
            for ops in (0, 2, 3, 4):  # conv1x1 alone cannot host the stage stride
                for first in (32, 64):
                    stages = [[1]] * (4 - 1) + [[1] * (total - 3)]
                    text = f"{ops}-_{first}_" + "-".join(
                        "".join(str(d) for d in s) for s in stages
                    )
                    specs.append(parse_architecture(text))
        mine, oracle = [], []
        for spec in specs:
            report, acc = evaluate_architecture(spec)
            mine.append(acc)
            oracle.append(independent_surrogate(report, spec, DEFAULT_SURROGATE))
        assert np.allclose(mine, oracle, atol=1e-12)
        assert list(np.argsort(mine)) == list(np.argsort(oracle))

    def test_bounded(self):
        for m in REFERENCE_MODELS:
            _, acc = evaluate_architecture(parse_architecture(m.encoding))
            assert 0.0 <= acc <= 1.0
