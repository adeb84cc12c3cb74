"""Run orchestration: one pipeline run, benchmarks over datasets, threshold sweeps."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from rit.backends import HttpBackend, Ports, RecordingBackend, ReplayBackend, SimConfig, SimWorld, Transcript
from rit.concepts import Concept, load_universe
from rit.errors import (
    CoverageError,
    GateError,
    PlanParseError,
    ProtocolError,
    RitError,
    ScoringError,
    TokenExpiredError,
    TransportError,
)
from rit.gate import GateMachine, IterationState, ThresholdSchedule, Transition, evaluate, threshold_for_step
from rit.metrics import SQRT_N, count_covered, score_image
from rit.plan import Plan, generate_plan, loads_plan, validate_plan
from rit.report import MetricReport, compute_report, format_report, images_from_records

log = logging.getLogger(__name__)

ENV_URLS = {
    "generate": "RIT_T2I_URL", "replace": "RIT_T2I_URL", "vqa": "RIT_VQA_URL",
    "complete": "RIT_LM_URL", "prob": "RIT_PROB_URL", "score": "RIT_SCORER_URL",
}


@dataclass
class RunConfig:
    backend: str = "sim"  # sim | http | replay
    sim: dict = field(default_factory=dict)
    endpoints: dict = field(default_factory=dict)
    replay: str | None = None
    schedule: ThresholdSchedule = field(default_factory=ThresholdSchedule)
    retry_budget: int = 5
    repetitions: int = 4
    run_seed: int = 0
    report_scale: bool = True
    scorers: tuple[str, ...] = ("C", "I")
    workers: int = 1
    variance_normalization: str = SQRT_N
    method: str = "RIT"
    generate_missing_plans: bool = False

    def __post_init__(self):
        if self.repetitions < 1:
            raise ValueError("repetitions must be at least 1")
        if self.retry_budget < 1:
            raise ValueError("retry budget must be at least 1")
        if self.backend not in ("sim", "http", "replay"):
            raise ValueError(f"unknown backend {self.backend!r}")

    @classmethod
    def from_json(cls, data: dict) -> "RunConfig":
        data = dict(data)
        sched = data.pop("schedule", None)
        if isinstance(sched, str):
            data["schedule"] = ThresholdSchedule.parse(sched)
        elif isinstance(sched, dict):
            data["schedule"] = ThresholdSchedule(**sched)
        if "scorers" in data:
            data["scorers"] = tuple(data["scorers"])
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_json(self) -> dict:
        out = dataclasses.asdict(self)
        out["schedule"] = self.schedule.to_json()
        out["scorers"] = list(self.scorers)
        return out

    def log_view(self) -> dict:
        """Settings that determine results; transport and parallelism are left out."""
        out = self.to_json()
        for key in ("backend", "endpoints", "replay", "workers"):
            out.pop(key)
        if self.backend != "sim":
            out.pop("sim")
        return out

    def endpoint_urls(self) -> dict[str, str]:
        urls = {}
        base = os.environ.get("RIT_BACKEND_URL") or self.endpoints.get("base_url")
        for name, env in ENV_URLS.items():
            urls[name] = os.environ.get(env) or self.endpoints.get(name) or base
        return urls


def load_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return RunConfig.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def run_seed_for(run_seed: int, entry_id: str, rep: int) -> int:
    digest = hashlib.blake2b(f"{run_seed}|{entry_id}|{rep}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big") >> 1


class BackendPool:
    """Hands out ports per run; simulated runs get their own seeded world."""

    def __init__(self, config: RunConfig, transcript: Transcript | None = None):
        self.config = config
        self.transcript = transcript if transcript is not None else Transcript()
        self._shared = None
        if config.backend == "http":
            self._shared = HttpBackend(urls=config.endpoint_urls())
        elif config.backend == "replay":
            if not config.replay:
                raise ValueError("replay backend needs a transcript path")
            self._shared = ReplayBackend(config.replay)

    def ports_for(self, seed: int, vocabulary: Sequence[str] = ()) -> Ports:
        if self._shared is not None:
            return Ports(RecordingBackend(self._shared, self.transcript))
        sim = dict(self.config.sim)
        vocab = tuple(sorted({*sim.pop("vocabulary", ()), *vocabulary}))
        world = SimWorld(SimConfig.from_json({**sim, "run_seed": seed, "vocabulary": vocab}))
        return Ports(RecordingBackend(world, self.transcript))

    def close(self):
        if isinstance(self._shared, HttpBackend):
            self._shared.close()
        self.transcript.close()


def entry_concepts(entry: dict, universe: dict[str, Concept] | None) -> list[Concept]:
    out = []
    for cid in entry["concepts"]:
        if universe and cid in universe:
            out.append(universe[cid])
        else:
            out.append(Concept(cid, cid))
    return out


@dataclass
class RunRecord:
    run: str
    entry: str
    rep: int
    seed: int
    plan: str
    n: int
    steps: list[dict] = field(default_factory=list)
    forced_commits: list[int] = field(default_factory=list)
    rollbacks: int = 0
    evaluations: int = 0
    final_image: str | None = None
    scores: dict[str, list[dict]] = field(default_factory=dict)
    coverage: dict | None = None
    aborted: bool = False
    error: str | None = None
    wall_time: float = 0.0

    def to_json(self) -> dict:
        out = dataclasses.asdict(self)
        out.pop("wall_time")  # kept out of the log so runs are byte-reproducible
        return out


def _port_error(exc: Exception) -> str:
    return f"{type(exc).__name__}: {exc}"


def run_pipeline(
    entry: dict,
    plan: Plan,
    config: RunConfig,
    ports: Ports,
    run_id: str = "",
    rep: int = 0,
    seed: int = 0,
    concepts: Sequence[Concept] | None = None,
) -> RunRecord:
    """generate(Base_0), then replace -> evaluate -> advance per step, then score.

    Port failures never escape: they end in an aborted record.
    """
    started = time.perf_counter()
    concepts = list(concepts) if concepts is not None else entry_concepts(entry, None)
    record = RunRecord(run_id or entry["id"], entry["id"], rep, seed, plan.digest(), len(concepts))
    machine = None
    try:
        image, token = _with_retry(lambda: ports.generate(plan.base_0))
        machine = GateMachine(IterationState(0, token, image), config.retry_budget, record.run)
        expired_once = False
        for step in plan.steps:
            threshold = threshold_for_step(config.schedule, step.index)
            while machine.step == step.index and not machine.aborted:
                try:
                    image, token = ports.replace(machine.active.state_token, step.slot_refs,
                                                 step.from_entities, step.to_entities, step.resulting_base)
                except TokenExpiredError as exc:
                    machine.fail_attempt(_port_error(exc), threshold, retryable=not expired_once)
                    expired_once = True
                    continue
                except TransportError as exc:
                    machine.fail_attempt(_port_error(exc), threshold)
                    continue
                except ProtocolError as exc:
                    machine.fail_attempt(_port_error(exc), threshold, retryable=False)
                    continue
                candidate = IterationState(step.index, token, image)
                try:
                    verdict = evaluate(step.question_set, image, ports, threshold)
                except GateError as exc:
                    retryable = isinstance(exc.__cause__, TransportError)
                    cause = exc.__cause__ or exc
                    machine.fail_attempt(_port_error(cause), threshold, retryable=retryable)
                    continue
                machine.advance(verdict, candidate)
            if machine.aborted:
                break
        if machine.aborted:
            record.aborted = True
            record.error = machine.events[-1].error if machine.events else "aborted"
        else:
            final = machine.active.image_ref
            record.final_image = final
            coverage = count_covered(final, concepts, ports)
            record.coverage = coverage.to_json()
            for kind in config.scorers:
                vec = score_image(final, concepts, ports, kind)
                record.scores[kind] = [
                    {k: v for k, v in e.to_json(final).items() if k != "image"} for e in vec.entries
                ]
    except (RitError, OSError) as exc:
        record.aborted = True
        record.error = _port_error(exc.__cause__ if isinstance(exc, (CoverageError, ScoringError))
                                   and exc.__cause__ else exc)
    if machine is not None:
        record.steps = [e.to_json() for e in machine.events]
        record.forced_commits = list(machine.forced)
        record.evaluations = machine.evaluations
        record.rollbacks = sum(1 for e in machine.events if e.transition == Transition.ROLLBACK_RETRY.value)
    record.wall_time = time.perf_counter() - started
    return record


def _with_retry(fn: Callable, attempts: int = 2):
    for i in range(attempts):
        try:
            return fn()
        except TransportError:
            if i == attempts - 1:
                raise


@dataclass
class BenchmarkResult:
    dataset: str
    records: list[RunRecord]
    report: MetricReport
    skipped: list[dict]


def load_plans(plans_dir: str | os.PathLike | None, entries: Sequence[dict]) -> dict[str, Plan]:
    """Read ``<entry id>.plan`` (grammar text or JSON) for each entry that has one."""
    plans = {}
    if plans_dir is None:
        return plans
    root = Path(plans_dir)
    for entry in entries:
        for suffix in (".plan", ".json"):
            path = root / f"{entry['id']}{suffix}"
            if path.exists():
                plans[entry["id"]] = loads_plan(path.read_text(encoding="utf-8"))
                break
    return plans


def _labels(concepts: Sequence[Concept]) -> list[str]:
    return [c.label for c in concepts]


def prepare_plan(entry, plan, concepts, config, pool) -> tuple[Plan | None, str | None]:
    targets = _labels(concepts)
    if plan is None:
        if not config.generate_missing_plans:
            return None, "no plan available"
        try:
            gen = generate_plan(entry["prompt"], pool.ports_for(run_seed_for(config.run_seed, entry["id"], -1),
                                                                targets), targets)
            plan = gen.plan
        except (RitError, PlanParseError) as exc:
            return None, f"plan generation failed: {exc}"
    plan = plan.with_targets(targets)
    problems = validate_plan(plan)
    if problems:
        return None, "invalid plan: " + "; ".join(problems)
    return plan, None


def run_benchmark(
    entries: Sequence[dict],
    plans: dict[str, Plan],
    config: RunConfig,
    out_dir: str | os.PathLike | None = None,
    universe: dict[str, Concept] | None = None,
    dataset: str = "",
) -> BenchmarkResult:
    """Run every entry ``config.repetitions`` times and aggregate the report.

    The run log is written in (entry, repetition) order regardless of worker
    count, so it is byte-reproducible for a given seed.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    pool = BackendPool(config, Transcript(out / "transcript.jsonl" if out is not None else None))
    log_fh = open(out / "run_log.jsonl", "w", encoding="utf-8", newline="\n") if out is not None else None
    trace_fh = open(out / "gate_trace.jsonl", "w", encoding="utf-8", newline="\n") if out is not None else None

    def emit(event: dict):
        if log_fh is not None:
            log_fh.write(json.dumps(event, ensure_ascii=False) + "\n")
            log_fh.flush()

    skipped: list[dict] = []
    jobs = []
    emit({"event": "benchmark_start", "dataset": dataset, "entries": len(entries),
          "config": config.log_view()})
    for entry in entries:
        concepts = entry_concepts(entry, universe)
        plan, reason = prepare_plan(entry, plans.get(entry["id"]), concepts, config, pool)
        if plan is None:
            skipped.append({"entry": entry["id"], "reason": reason})
            emit({"event": "skip", "entry": entry["id"], "reason": reason})
            continue
        for rep in range(config.repetitions):
            jobs.append((entry, plan, concepts, rep))

    def execute(job):
        entry, plan, concepts, rep = job
        seed = run_seed_for(config.run_seed, entry["id"], rep)
        ports = pool.ports_for(seed, plan.vocabulary())
        return run_pipeline(entry, plan, config, ports, f"{entry['id']}#{rep}", rep, seed, concepts)

    records: list[RunRecord] = []
    timings = []
    try:
        if config.workers > 1:
            with ThreadPoolExecutor(max_workers=config.workers) as ex:
                results = ex.map(execute, jobs)
                for rec in results:
                    records.append(rec)
                    _emit_record(emit, trace_fh, rec)
        else:
            for job in jobs:
                rec = execute(job)
                records.append(rec)
                _emit_record(emit, trace_fh, rec)
        report = compute_report(
            images_from_records(r.to_json() for r in records),
            dataset=dataset, method=config.method, scale=config.report_scale,
            normalization=config.variance_normalization, skipped=len(skipped),
        )
        emit({"event": "benchmark_end", "runs": len(records), "skipped": len(skipped),
              "metrics": report.raw})
        timings = [{"run": r.run, "wall_time": r.wall_time} for r in records]
    finally:
        if log_fh is not None:
            log_fh.close()
        if trace_fh is not None:
            trace_fh.close()
        pool.close()
    if out is not None:
        text, table = format_report([report])
        (out / "report.txt").write_text(text, encoding="utf-8")
        (out / "report.csv").write_text(table, encoding="utf-8")
        with open(out / "timings.jsonl", "w", encoding="utf-8") as fh:
            for t in timings:
                fh.write(json.dumps(t) + "\n")
        with open(out / "scores.jsonl", "w", encoding="utf-8", newline="\n") as fh:
            for r in records:
                for kind, items in r.scores.items():
                    for e in items:
                        fh.write(json.dumps({"image": r.final_image, **e, "kind": kind}) + "\n")
        with open(out / "coverage.jsonl", "w", encoding="utf-8", newline="\n") as fh:
            for r in records:
                if r.coverage:
                    fh.write(json.dumps(r.coverage) + "\n")
    return BenchmarkResult(dataset, records, report, skipped)


def _emit_record(emit, trace_fh, rec: RunRecord):
    emit({"event": "run_start", "run": rec.run, "entry": rec.entry, "rep": rec.rep,
          "seed": rec.seed, "plan": rec.plan})
    for step in rec.steps:
        emit({"event": "gate", **step})
        if trace_fh is not None:
            trace_fh.write(json.dumps(step) + "\n")
    emit({"event": "run_end", **rec.to_json()})


def records_from_log(path: str | os.PathLike) -> tuple[str, dict, list[dict]]:
    """``(dataset, config, run records)`` recovered from a run log."""
    dataset, config, records = "", {}, []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            event = json.loads(line)
            if event["event"] == "benchmark_start":
                dataset, config = event.get("dataset", ""), event.get("config", {})
            elif event["event"] == "run_end":
                records.append({k: v for k, v in event.items() if k != "event"})
    return dataset, config, records


def dataset_name(path: str | os.PathLike, entries: Sequence[dict]) -> str:
    stem = Path(path).stem
    if stem.startswith("dataset-"):
        return stem
    ns = {e["n"] for e in entries}
    return f"dataset-{ns.pop()}" if len(ns) == 1 else "dataset-mixed"


SWEEP_SCHEDULES = ("0.2", "0.4", "0.6", "0.8", "1.0", "dynamic")


def sweep_thresholds(
    datasets: Sequence[tuple[str, Sequence[dict]]],
    plans: dict[str, Plan],
    config: RunConfig,
    schedules: Sequence[ThresholdSchedule],
    out_dir: str | os.PathLike | None = None,
    universe: dict[str, Concept] | None = None,
) -> list[dict]:
    """One benchmark per (schedule, dataset); one table row each."""
    if not schedules:
        raise ValueError("sweep needs at least one schedule")
    rows = []
    for schedule in schedules:
        cfg = dataclasses.replace(config, schedule=schedule)
        for name, entries in datasets:
            sub = Path(out_dir) / schedule.name.replace("%", "pct") / name if out_dir is not None else None
            result = run_benchmark(entries, plans, cfg, sub, universe, name)
            rep = result.report
            row = {"schedule": schedule.name, "dataset": name}
            for label, col in zip(("C", "I", "T"), rep.columns):
                row[label] = rep.reported(col)
                row[f"{label}_metric"] = col
            row.update({k: rep.diagnostics[k] for k in ("forced_commit_rate", "abort_rate")})
            rows.append(row)
    return rows


def format_sweep(rows: Sequence[dict]) -> tuple[str, str]:
    header = ["schedule", "dataset", "metric(C)", "C", "metric(I)", "I", "metric(T)", "T",
              "forced_commit_rate", "abort_rate"]

    def cell(v):
        return "-" if v is None else (f"{v:.2f}" if isinstance(v, float) else str(v))

    table = [[cell(r["schedule"]), cell(r["dataset"]), r.get("C_metric", ""), cell(r.get("C")),
              r.get("I_metric", ""), cell(r.get("I")), r.get("T_metric", ""), cell(r.get("T")),
              cell(r["forced_commit_rate"]), cell(r["abort_rate"])] for r in rows]
    widths = [max([len(h)] + [len(row[i]) for row in table]) for i, h in enumerate(header)]
    lines = [" | ".join(h.ljust(w) for h, w in zip(header, widths)), "-+-".join("-" * w for w in widths)]
    lines += [" | ".join(c.ljust(w) for c, w in zip(row, widths)) for row in table]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(table)
    return "\n".join(lines) + "\n", buf.getvalue()


def universe_index(path: str | os.PathLike | None) -> dict[str, Concept] | None:
    if path is None:
        return None
    return {c.id: c for c in load_universe(path)}

