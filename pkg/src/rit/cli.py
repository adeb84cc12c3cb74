"""Command-line entry point: ``rit <command>``."""
from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from rit import harness
from rit.backends import Ports, SimConfig, SimWorld, StubServer, Transcript
from rit.concepts import (
    DatasetSpec,
    ProbabilityCache,
    build_dataset,
    build_distance_matrix,
    load_dataset,
    load_universe,
)
from rit.errors import RitError
from rit.gate import ThresholdSchedule
from rit.metrics import SQRT_N
from rit.plan import generate_plan, loads_plan, to_text, validate_plan
from rit.report import compute_report, format_report, images_from_dumps, images_from_records, read_jsonl


def _int_list(text: str | None) -> list[int]:
    if not text:
        return []
    return [int(x) for x in text.split(",") if x.strip()]


def _ports(config: harness.RunConfig, transcript_path: Path | None, vocabulary=()) -> Ports:
    pool = harness.BackendPool(config, Transcript(transcript_path))
    return pool.ports_for(config.run_seed, vocabulary)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
def main(verbose):
    """Counterfactual text-to-image replacement engine."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command("build-dataset")
@click.option("--universe", "universe_path", required=True, type=click.Path(exists=True))
@click.option("--m", "ms", required=True, help="Collection size(s), e.g. 2 or 2,3,5.")
@click.option("--r", "rs", required=True, help="Entries per size; one value or one per size.")
@click.option("--mixed", default=None, help="Top counts per size for the mixed set, e.g. 40,40,40.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--cache", "cache_path", type=click.Path(), default=None,
              help="Probability cache JSON; read if present, written after the build.")
@click.option("--workers", default=1, show_default=True)
def build_dataset_cmd(universe_path, ms, rs, mixed, out_dir, config_path, cache_path, workers):
    """Rank concept collections by total distance and write dataset JSONL files."""
    config = harness.load_config(config_path)
    concepts = load_universe(universe_path)
    sizes, counts = _int_list(ms), _int_list(rs)
    if len(counts) == 1:
        counts = counts * len(sizes)
    if len(counts) != len(sizes):
        raise click.UsageError("--r needs one value or one per --m value")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache = ProbabilityCache(cache_path or out / "distance_cache.json")
    ports = _ports(config, out / "transcript.jsonl", [c.label for c in concepts])
    try:
        matrix = build_distance_matrix(concepts, ports, cache, workers)
        cache.save()
        spec = DatasetSpec(list(zip(sizes, counts)), _int_list(mixed) or None)
        datasets = build_dataset(concepts, matrix, spec, ports, out, workers)
    except RitError as exc:
        raise click.ClickException(str(exc))
    finally:
        ports.backend.transcript.close()
    for name, entries in datasets.items():
        click.echo(f"{name}: {len(entries)} entries -> {out / (name + '.jsonl')}")


@main.command("gen-plan")
@click.option("--prompt", default=None, help="Prompt text, or a path to a file holding it.")
@click.option("--targets", default=None, help="Comma-separated required entities.")
@click.option("--dataset", "dataset_path", type=click.Path(exists=True), default=None,
              help="Generate one plan per dataset entry instead of --prompt.")
@click.option("--universe", "universe_path", type=click.Path(exists=True), default=None)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out", "out_path", required=True, type=click.Path())
def gen_plan_cmd(prompt, targets, dataset_path, universe_path, config_path, out_path):
    """Run the three-stage plan conversation with the language model."""
    config = harness.load_config(config_path)
    out = Path(out_path)
    if dataset_path is None:
        if prompt is None:
            raise click.UsageError("give --prompt or --dataset")
        if Path(prompt).is_file():
            prompt = Path(prompt).read_text(encoding="utf-8").strip()
        target_list = [t.strip() for t in targets.split(",")] if targets else None
        ports = _ports(config, out.with_suffix(".transcript.jsonl"), target_list or ())
        try:
            plan = generate_plan(prompt, ports, target_list).plan
        except RitError as exc:
            raise click.ClickException(str(exc))
        out.write_text(to_text(plan), encoding="utf-8")
        click.echo(f"plan {plan.digest()} ({plan.K} steps) -> {out}")
        return
    universe = harness.universe_index(universe_path)
    entries = load_dataset(dataset_path)
    out.mkdir(parents=True, exist_ok=True)
    failures = 0
    for entry in entries:
        labels = [c.label for c in harness.entry_concepts(entry, universe)]
        ports = _ports(config, None, labels)
        try:
            plan = generate_plan(entry["prompt"], ports, labels).plan
        except RitError as exc:
            failures += 1
            click.echo(f"{entry['id']}: failed ({exc})", err=True)
            continue
        (out / f"{entry['id']}.plan").write_text(to_text(plan), encoding="utf-8")
    click.echo(f"{len(entries) - failures}/{len(entries)} plans -> {out}")
    if failures:
        sys.exit(1)


@main.command("validate-plan")
@click.argument("plan_file", type=click.Path(exists=True))
@click.option("--targets", default=None, help="Comma-separated required entities.")
@click.option("--json", "as_json", is_flag=True, help="Print the canonical JSON form.")
def validate_plan_cmd(plan_file, targets, as_json):
    """Parse and validate a plan file; exit 1 on any violation."""
    try:
        plan = loads_plan(Path(plan_file).read_text(encoding="utf-8"))
    except RitError as exc:
        click.echo(f"parse error: {exc}", err=True)
        sys.exit(1)
    target_list = [t.strip() for t in targets.split(",")] if targets else None
    if target_list is not None:
        plan = plan.with_targets(target_list)
    problems = validate_plan(plan)
    if as_json:
        click.echo(json.dumps(plan.to_json(), indent=2))
    for p in problems:
        click.echo(f"violation: {p}", err=True)
    if problems:
        sys.exit(1)
    if not as_json:
        click.echo(f"ok: {plan.K} steps, digest {plan.digest()}")


@main.command("run")
@click.option("--dataset", "dataset_path", required=True, type=click.Path(exists=True))
@click.option("--plans", "plans_dir", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--universe", "universe_path", type=click.Path(exists=True), default=None)
@click.option("--out", "out_dir", required=True, type=click.Path())
def run_cmd(dataset_path, plans_dir, config_path, universe_path, out_dir):
    """Execute every dataset entry N times and write the run log and report."""
    config = harness.load_config(config_path)
    entries = load_dataset(dataset_path)
    plans = harness.load_plans(plans_dir, entries)
    name = harness.dataset_name(dataset_path, entries)
    result = harness.run_benchmark(entries, plans, config, out_dir,
                                   harness.universe_index(universe_path), name)
    text, _ = format_report([result.report])
    click.echo(text, nl=False)
    for skip in result.skipped:
        click.echo(f"skipped {skip['entry']}: {skip['reason']}", err=True)


@main.command("sweep-thresholds")
@click.option("--dataset", "dataset_paths", required=True, multiple=True, type=click.Path(exists=True))
@click.option("--plans", "plans_dir", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--universe", "universe_path", type=click.Path(exists=True), default=None)
@click.option("--schedules", default=",".join(harness.SWEEP_SCHEDULES), show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
def sweep_cmd(dataset_paths, plans_dir, config_path, universe_path, schedules, out_dir):
    """Benchmark each dataset under each threshold schedule."""
    config = harness.load_config(config_path)
    datasets, plans = [], {}
    for path in dataset_paths:
        entries = load_dataset(path)
        datasets.append((harness.dataset_name(path, entries), entries))
        plans.update(harness.load_plans(plans_dir, entries))
    scheds = [ThresholdSchedule.parse(s) for s in schedules.split(",") if s.strip()]
    rows = harness.sweep_thresholds(datasets, plans, config, scheds, out_dir,
                                    harness.universe_index(universe_path))
    text, table = harness.format_sweep(rows)
    Path(out_dir, "sweep.csv").write_text(table, encoding="utf-8")
    Path(out_dir, "sweep.txt").write_text(text, encoding="utf-8")
    click.echo(text, nl=False)


@main.command("report")
@click.option("--log", "log_path", required=True, type=click.Path(exists=True))
@click.option("--csv", "csv_path", type=click.Path(), default=None)
@click.option("--raw", is_flag=True, help="Disable the x10 convention.")
def report_cmd(log_path, csv_path, raw):
    """Recompute the metric report from a run log."""
    dataset, config, records = harness.records_from_log(log_path)
    report = compute_report(images_from_records(records), dataset=dataset,
                            method=config.get("method", "RIT"),
                            scale=not raw and config.get("report_scale", True),
                            normalization=config.get("variance_normalization", SQRT_N))
    text, table = format_report([report])
    click.echo(text, nl=False)
    if csv_path:
        Path(csv_path).write_text(table, encoding="utf-8")


@main.command("eval")
@click.option("--scores", "scores_path", required=True, type=click.Path(exists=True))
@click.option("--coverage", "coverage_path", type=click.Path(exists=True), default=None)
@click.option("--dataset-name", default="", help="Label for the report header.")
@click.option("--method", default="RIT", show_default=True)
@click.option("--kind", default=None, help="Force the dataset kind: 2, 3, 5, ..., or mixed.")
@click.option("--raw", is_flag=True, help="Disable the x10 convention.")
@click.option("--biased", is_flag=True, help="Use 1/n instead of 1/sqrt(n) in the variance.")
@click.option("--csv", "csv_path", type=click.Path(), default=None)
def eval_cmd(scores_path, coverage_path, dataset_name, method, kind, raw, biased, csv_path):
    """Metrics only, on externally produced score and coverage dumps."""
    images = images_from_dumps(read_jsonl(scores_path), read_jsonl(coverage_path) if coverage_path else ())
    report = compute_report(images, dataset=dataset_name, method=method, scale=not raw,
                            kind=kind, normalization="n" if biased else SQRT_N)
    text, table = format_report([report])
    click.echo(text, nl=False)
    if csv_path:
        Path(csv_path).write_text(table, encoding="utf-8")


@main.command("serve-sim")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="JSON SimConfig fields.")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8765, show_default=True)
def serve_sim_cmd(config_path, host, port):
    """Serve the simulated world over the HTTP wire protocol."""
    data = json.loads(Path(config_path).read_text()) if config_path else {}
    server = StubServer(SimWorld(SimConfig.from_json(data)), host, port)
    click.echo(f"serving simulated world at {server.url}")
    try:
        server.httpd.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.httpd.server_close()


if __name__ == "__main__":
    main()
