"""Command-line entry points.

``search``, ``zoo`` and ``simulate`` run locally and are pure functions of
(config, flags, seed): identical invocations rewrite identical bytes.
``serve`` starts the scheduling service; ``request`` is a thin client for it.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import __version__
from .config import read_config, write_manifest
from .cost import DEFAULT_SURROGATE, SurrogateConfig, evaluate_architecture
from .encoding import EncodingError, parse_architecture, parse_block
from .predictor import alternating_losses, init, regret_experiment, regret_trace_rows
from .reference import REFERENCE_MODELS
from .scheduler import (
    DEFAULT_GRID,
    Grid,
    SimulationConfig,
    make_task_source,
    simulate_stream,
    synthetic_oracle,
    train_offline,
)
from .search import (
    Objectives,
    SearchConfig,
    block_phase_space,
    macro_phase_space,
    run_search,
    run_two_phase,
)
from .zoo import (
    analyze_efficiency,
    make_zoo,
    regression_report,
    select_zoo,
    zoo_from_json,
    zoo_to_json,
)

EXIT_CONFIG = 2
EXIT_MISSING_INPUT = 3
EXIT_INTERNAL = 4


class CliError(click.ClickException):
    def __init__(self, message: str, exit_code: int):
        super().__init__(message)
        self.exit_code = exit_code


def _surrogate_from_config(path: str | None) -> SurrogateConfig:
    if path is None:
        return DEFAULT_SURROGATE
    try:
        values = read_config(path)
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}", EXIT_MISSING_INPUT)
    except ValueError as exc:
        raise CliError(f"bad config: {exc}", EXIT_CONFIG)
    kwargs = {}
    valid = {f.name: f.type for f in dataclasses.fields(SurrogateConfig)}
    for key, value in values.items():
        if key not in valid:
            raise CliError(f"unknown config key {key!r}", EXIT_CONFIG)
        try:
            kwargs[key] = int(value) if key in ("resolution", "classes", "batch_size") else float(value)
        except ValueError:
            raise CliError(f"bad value for {key!r}: {value!r}", EXIT_CONFIG)
    return SurrogateConfig(**kwargs)


def _make_run_dir(outdir: str | None, command: str, seed: int) -> Path:
    if outdir is not None:
        path = Path(outdir)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        path = Path("runs") / f"{command}-{stamp}-seed{seed}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_history(path: Path, history) -> None:
    with open(path, "w") as fh:
        for rec in history:
            fh.write(
                json.dumps(
                    {
                        "generation": rec.generation,
                        "encoding": rec.encoding,
                        "accuracy": rec.accuracy,
                        "step_time_ms": rec.step_time_ms,
                        "rank_at_end": rec.rank_at_end,
                        "feasible": rec.feasible,
                        "error": rec.error,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def _write_pareto(path: Path, front) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["encoding", "accuracy", "step_time_ms", "crowding"])
        for ind in front:
            writer.writerow(
                [ind.encoding, f"{ind.objectives.accuracy:.6f}",
                 f"{ind.objectives.step_time_ms:.6f}", repr(ind.crowding)]
            )


def _write_scatter(path: Path, archive, front) -> None:
    on_front = {ind.encoding for ind in front}
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["encoding", "step_time_ms", "accuracy", "on_front"])
        for ind in sorted(archive, key=lambda i: i.encoding):
            if not ind.feasible or ind.objectives is None:
                continue
            writer.writerow(
                [ind.encoding, f"{ind.objectives.step_time_ms:.6f}",
                 f"{ind.objectives.accuracy:.6f}", int(ind.encoding in on_front)]
            )


def _zoo_from_front(front, k: int, cfg: SurrogateConfig):
    chosen = select_zoo(front, k)
    named = [
        (f"zoo-{i:02d}", ind.spec, ind.objectives.accuracy) for i, ind in enumerate(chosen)
    ]
    return make_zoo(named, cfg=cfg)


@click.group()
@click.version_option(__version__)
def main() -> None:
    """Architecture search, model zoo analytics, and schedule simulation."""


@main.command()
@click.option("--phase", type=click.Choice(["both", "block", "macro"]), default="both")
@click.option("--nodes", "-n", type=int, default=24, help="offspring per generation")
@click.option("--generations", "-g", type=int, default=20)
@click.option("--tmax", type=float, default=float("inf"), help="step-time cap in ms")
@click.option("--seed", type=int, default=0)
@click.option("--keep-blocks", type=int, default=10, help="blocks carried into the macro phase")
@click.option("--zoo-k", type=int, default=12)
@click.option("--workers", type=int, default=1)
@click.option("--config", "config_path", type=str, default=None)
@click.option("--outdir", type=str, default=None)
def search(phase, nodes, generations, tmax, seed, keep_blocks, zoo_k, workers, config_path, outdir):
    """Run the evolutionary search and export front, history, and zoo."""
    if nodes < 1 or generations < 0 or tmax <= 0:
        raise CliError("nodes must be >=1, generations >=0, tmax > 0", EXIT_CONFIG)
    cfg = _surrogate_from_config(config_path)
    run_dir = _make_run_dir(outdir, "search", seed)

    def evaluator(spec):
        report, acc = evaluate_architecture(spec, cfg)
        return Objectives(accuracy=acc, step_time_ms=report.step_time_ms)

    base = dict(nodes=nodes, max_step_time_ms=tmax, generations=generations, workers=workers)
    if phase == "both":
        result = run_two_phase(
            SearchConfig(seed=seed, phase="block", **base),
            SearchConfig(seed=seed + 1, phase="macro", **base),
            evaluator,
            keep_blocks=keep_blocks,
        )
        history = result.block_phase.history + result.macro_phase.history
        front = result.front
        archive = result.block_phase.archive + result.macro_phase.archive
    else:
        if phase == "block":
            space = block_phase_space()
        else:
            menu = sorted({m.encoding.split("_")[0] for m in REFERENCE_MODELS})
            space = macro_phase_space([parse_block(b) for b in menu])
        single = run_search(SearchConfig(seed=seed, phase=phase, **base), evaluator, space)
        history, front, archive = single.history, single.front, single.archive

    _write_history(run_dir / "history.jsonl", history)
    _write_pareto(run_dir / "pareto.csv", front)
    _write_scatter(run_dir / "front_scatter.csv", archive, front)
    if front:
        (run_dir / "zoo.json").write_text(zoo_to_json(_zoo_from_front(front, zoo_k, cfg)) + "\n")
    else:
        (run_dir / "zoo.json").write_text(json.dumps({"entries": []}) + "\n")
    write_manifest(run_dir / "manifest.txt", "search", seed, __version__, str(run_dir), config_path)
    click.echo(f"search: {len(history)} evaluations, front size {len(front)} -> {run_dir}")


@main.command()
@click.option("--run", "run_dir", type=str, default=None, help="directory with pareto.csv/history.jsonl")
@click.option("--k", type=int, default=12)
@click.option("--report", type=click.Choice(["regression"]), default=None)
@click.option("--from-reference", is_flag=True, help="build the zoo from the built-in reference models")
@click.option("--config", "config_path", type=str, default=None)
@click.option("--outdir", type=str, default=None)
@click.option("--seed", type=int, default=0)
def zoo(run_dir, k, report, from_reference, config_path, outdir, seed):
    """Select a model zoo, build its step-time table, and analyze efficiency."""
    if k < 1:
        raise CliError("k must be >= 1", EXIT_CONFIG)
    cfg = _surrogate_from_config(config_path)
    out = _make_run_dir(outdir, "zoo", seed)

    if from_reference:
        named = [(m.name, parse_architecture(m.encoding), m.top1) for m in REFERENCE_MODELS[:k]]
        (out / "zoo.json").write_text(zoo_to_json(make_zoo(named, cfg=cfg)) + "\n")
        write_manifest(out / "manifest.txt", "zoo", seed, __version__, str(out), config_path)
        click.echo(f"zoo: {len(named)} reference entries -> {out}")
        return

    if run_dir is None:
        raise CliError("either --run or --from-reference is required", EXIT_CONFIG)
    pareto_path = Path(run_dir) / "pareto.csv"
    history_path = Path(run_dir) / "history.jsonl"
    if not pareto_path.exists():
        raise CliError(f"missing input: {pareto_path}", EXIT_MISSING_INPUT)

    from .search import Individual  # local import keeps the CLI surface light

    front = []
    with open(pareto_path) as fh:
        for row in csv.DictReader(fh):
            front.append(
                Individual(
                    spec=parse_architecture(row["encoding"]),
                    objectives=Objectives(float(row["accuracy"]), float(row["step_time_ms"])),
                    generation=0,
                )
            )
    if not front:
        raise CliError("pareto.csv holds no rows", EXIT_MISSING_INPUT)
    (out / "zoo.json").write_text(zoo_to_json(_zoo_from_front(front, k, cfg)) + "\n")

    if report == "regression":
        if not history_path.exists():
            raise CliError(f"missing input: {history_path}", EXIT_MISSING_INPUT)
        evaluated = []
        with open(history_path) as fh:
            for line in fh:
                rec = json.loads(line)
                if rec["feasible"] and rec["accuracy"] is not None:
                    evaluated.append(
                        Individual(
                            spec=parse_architecture(rec["encoding"]),
                            objectives=Objectives(rec["accuracy"], rec["step_time_ms"]),
                            generation=rec["generation"],
                        )
                    )
        dedup = {i.encoding: i for i in evaluated}
        evaluated = list(dedup.values())
        text = []
        for level in ("block", "macro"):
            try:
                result = analyze_efficiency(evaluated, level)
                text.append(regression_report(result, f"{level}-level efficiency regression"))
            except ValueError as exc:
                text.append(f"{level}-level efficiency regression unavailable: {exc}")
        (out / "regression.txt").write_text("\n\n".join(text) + "\n")
        click.echo("\n\n".join(text))
    write_manifest(out / "manifest.txt", "zoo", seed, __version__, str(out), config_path)
    click.echo(f"zoo: wrote {out / 'zoo.json'}")


@main.command()
@click.option("--zoo", "zoo_path", type=str, default=None)
@click.option("--tasks", type=int, default=2000)
@click.option("--adaptive/--no-adaptive", default=True)
@click.option("--fixed", type=str, default="3,6,10,14", help="comma-separated fixed depths")
@click.option("--seed", type=int, default=0)
@click.option("--oracle", type=click.Choice(["synthetic", "linear"]), default="synthetic")
@click.option("--offline", type=int, default=0, help="offline warm-start sample count")
@click.option("--regret-only", is_flag=True)
@click.option("--T", "horizon", type=int, default=6400)
@click.option("--C", "constant", type=float, default=1.0)
@click.option("--L", "layers", type=int, default=8)
@click.option("--outdir", type=str, default=None)
def simulate(zoo_path, tasks, adaptive, fixed, seed, oracle, offline, regret_only,
             horizon, constant, layers, outdir):
    """Replay the online scheduling loop, or run the hedge regret harness."""
    out = _make_run_dir(outdir, "simulate", seed)

    if regret_only:
        outcome = regret_experiment(layers, horizon, constant, alternating_losses(layers))
        with open(out / "regret.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["t", *[f"alpha_{i+1}" for i in range(layers)],
                 *[f"loss_{i+1}" for i in range(layers)], "played_loss"]
            )
            for row in regret_trace_rows(outcome):
                writer.writerow([row[0], *[f"{v:.9f}" for v in row[1:]]])
        summary = (
            f"horizon = {outcome.horizon}\nbeta = {outcome.beta:.9f}\n"
            f"played_avg = {outcome.played_avg:.9f}\n"
            f"best_fixed_avg = {outcome.best_fixed_avg:.9f}\ngap = {outcome.gap:.9f}\n"
        )
        (out / "regret_summary.txt").write_text(summary)
        write_manifest(out / "manifest.txt", "simulate", seed, __version__, str(out))
        click.echo(summary.strip())
        return

    if zoo_path is None:
        raise CliError("--zoo is required unless --regret-only", EXIT_CONFIG)
    if not Path(zoo_path).exists():
        raise CliError(f"missing zoo manifest: {zoo_path}", EXIT_MISSING_INPUT)
    model_zoo = zoo_from_json(Path(zoo_path).read_text())
    try:
        fixed_layers = tuple(int(x) for x in fixed.split(",") if x.strip())
    except ValueError:
        raise CliError(f"bad --fixed list: {fixed!r}", EXIT_CONFIG)

    cfg = SimulationConfig(
        tasks=tasks, seed=seed, fixed_layers=fixed_layers,
        include_adaptive=adaptive, oracle=oracle,
    )

    decisions_path = out / "decisions.jsonl"
    with open(decisions_path, "w") as fh:

        def sink(t, name, request, decision, observed):
            fh.write(
                json.dumps(
                    {
                        "task": t,
                        "predictor": name,
                        "request": {
                            "time_limit_seconds": request.time_limit_seconds,
                            **dataclasses.asdict(request.meta),
                        },
                        "decision": {
                            "entry": decision.entry_name,
                            "encoding": decision.encoding,
                            "learning_rate": decision.regime.learning_rate,
                            "num_iterations": decision.regime.num_iterations,
                            "frozen_stages": decision.regime.frozen_stages,
                            "predicted_accuracy": decision.predicted_accuracy,
                            "candidates_examined": decision.candidates_examined,
                        },
                        "observed_accuracy": observed,
                    },
                    sort_keys=True,
                )
                + "\n"
            )

        report = simulate_stream(model_zoo, cfg, decision_sink=sink)

    if offline > 0:
        # warm-started variant reported separately from the cold-start rows
        from .predictor import init as _init
        from .scheduler import feature_dim, online_step

        warm = _init(cfg.adaptive_layers, cfg.width, feature_dim(model_zoo),
                     seed=seed, smoothing=cfg.smoothing)
        metrics = train_offline(
            warm, model_zoo, DEFAULT_GRID, make_task_source(),
            synthetic_oracle(), offline, seed=seed, validation_fraction=0.2,
        )
        (out / "offline_warmstart.txt").write_text(json.dumps(metrics, sort_keys=True) + "\n")

    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in report.csv_rows():
            writer.writerow(row)
    write_manifest(out / "manifest.txt", "simulate", seed, __version__, str(out))
    click.echo(f"simulate: {report.tasks} tasks, {len(report.rows)} predictors -> {out}")


@main.command()
@click.option("--zoo", "zoo_path", type=str, required=True)
@click.option("--host", type=str, default="127.0.0.1")
@click.option("--port", type=int, default=8000)
@click.option("--seed", type=int, default=0)
def serve(zoo_path, host, port, seed):
    """Start the scheduling service."""
    import uvicorn

    from .service import create_app

    if not Path(zoo_path).exists():
        raise CliError(f"missing zoo manifest: {zoo_path}", EXIT_MISSING_INPUT)
    app = create_app(zoo_path=zoo_path, seed=seed)
    uvicorn.run(app, host=host, port=port)


@main.command()
@click.option("--url", type=str, default="http://127.0.0.1:8000")
@click.option("--classes", type=int, required=True)
@click.option("--avg-images", type=float, required=True)
@click.option("--std-images", type=float, default=0.0)
@click.option("--similarity", type=float, default=0.5)
@click.option("--train-size", type=int, required=True)
@click.option("--batch-size", type=int, default=64)
@click.option("--time-limit", type=float, required=True, help="seconds")
def request(url, classes, avg_images, std_images, similarity, train_size, batch_size, time_limit):
    """Ask a running service for a fine-tuning schedule."""
    import httpx

    payload = {
        "meta": {
            "num_classes": classes,
            "avg_images_per_class": avg_images,
            "std_images_per_class": std_images,
            "domain_similarity": similarity,
            "train_set_size": train_size,
            "batch_size": batch_size,
        },
        "time_limit_seconds": time_limit,
    }
    resp = httpx.post(f"{url.rstrip('/')}/schedule", json=payload, timeout=30.0)
    if resp.status_code != 200:
        raise CliError(f"service error {resp.status_code}: {resp.text}", EXIT_INTERNAL)
    click.echo(json.dumps(resp.json(), indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
