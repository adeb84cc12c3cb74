import json

import pytest
from click.testing import CliRunner

from conftest import MOON_ENTRY, MOON_PLAN
from rit.backends import Ports, SimConfig, SimWorld, StubServer
from rit.cli import main
from rit.errors import TokenExpiredError
from rit.gate import ThresholdSchedule
from rit.harness import (
    RunConfig,
    records_from_log,
    run_benchmark,
    run_pipeline,
    run_seed_for,
    sweep_thresholds,
)
from rit.plan import parse_plan
from rit.report import compute_report, images_from_records


def sim_config(**sim):
    return RunConfig(sim=sim, repetitions=2)


def moon_ports(**sim):
    plan = parse_plan(MOON_PLAN)
    return plan, Ports(SimWorld(SimConfig(vocabulary=tuple(plan.vocabulary()), **sim)))


def test_success_path():
    plan, ports = moon_ports()
    rec = run_pipeline(MOON_ENTRY, plan, RunConfig(), ports)
    assert not rec.aborted
    assert [s["transition"] for s in rec.steps] == ["commit", "commit"]
    assert rec.coverage["k"] == rec.coverage["n"] == 3
    assert set(rec.scores) == {"C", "I"} and len(rec.scores["C"]) == 3


def test_failed_replacements_end_in_force_commits():
    plan, ports = moon_ports(p_success=0.0, partial_outcome_probs=(0.0, 1.0))
    rec = run_pipeline(MOON_ENTRY, plan, RunConfig(retry_budget=5), ports)
    assert rec.forced_commits == [1, 2]
    assert rec.evaluations == 10 and rec.rollbacks == 8
    assert rec.coverage["k"] < 3


def test_leftover_entity_still_passes_at_sixty_percent():
    # "both present" keeps grassland: the count question fails, 3 of 4 pass
    plan, ports = moon_ports(p_success=0.0, partial_outcome_probs=(1.0, 0.0))
    rec = run_pipeline(MOON_ENTRY, plan, RunConfig(), ports)
    assert [s["ratio"] for s in rec.steps] == [0.75, 0.75]
    assert rec.forced_commits == []


class ExpiringOnce:
    def __init__(self, inner, failures):
        self.inner, self.failures = inner, failures

    def call(self, endpoint, request):
        if endpoint == "replace" and self.failures > 0:
            self.failures -= 1
            raise TokenExpiredError("state evicted")
        return self.inner.call(endpoint, request)


@pytest.mark.parametrize("failures,aborted", [(1, False), (2, True)])
def test_token_expiry_retried_once(failures, aborted):
    plan = parse_plan(MOON_PLAN)
    w = SimWorld(SimConfig(vocabulary=tuple(plan.vocabulary())))
    rec = run_pipeline(MOON_ENTRY, plan, RunConfig(), Ports(ExpiringOnce(w, failures)))
    assert rec.aborted is aborted
    if aborted:
        assert "TokenExpiredError" in rec.error


def test_vqa_down_aborts_every_run(tmp_path):
    plan = parse_plan(MOON_PLAN)
    with StubServer(SimWorld(SimConfig(vocabulary=tuple(plan.vocabulary())))) as server:
        cfg = RunConfig(backend="http", repetitions=2,
                        endpoints={"base_url": server.url, "vqa": "http://127.0.0.1:9"})
        result = run_benchmark([MOON_ENTRY], {"moon-0000": plan}, cfg, tmp_path)
    assert all(r.aborted for r in result.records)
    assert all("TransportError" in r.error for r in result.records)
    assert result.report.diagnostics["abort_rate"] == 1.0


def test_benchmark_accounting_and_report(tmp_path):
    entries = [dict(MOON_ENTRY, id=f"moon-{i:04d}") for i in range(3)]
    plan = parse_plan(MOON_PLAN)
    cfg = RunConfig(sim={"p_success": 0.6}, repetitions=3, run_seed=11)
    result = run_benchmark(entries, {e["id"]: plan for e in entries}, cfg, tmp_path, dataset="dataset-3")
    assert len(result.records) == 9
    assert [r.run for r in result.records][:4] == ["moon-0000#0", "moon-0000#1", "moon-0000#2", "moon-0001#0"]
    for r in result.records:
        commits = [s for s in r.steps if s["transition"] in ("commit", "force-commit")]
        assert len(commits) == 2
        assert r.evaluations == len(r.steps) <= 10
        assert r.seed == run_seed_for(11, r.entry, r.rep)
    dataset, config, records = records_from_log(tmp_path / "run_log.jsonl")
    again = compute_report(images_from_records(records), dataset=dataset)
    assert again.raw == result.report.raw
    assert (tmp_path / "report.txt").read_text().startswith("dataset-3")
    assert len((tmp_path / "gate_trace.jsonl").read_text().splitlines()) == \
        sum(len(r.steps) for r in result.records)
    timings = [json.loads(x) for x in (tmp_path / "timings.jsonl").read_text().splitlines()]
    assert len(timings) == 9 and "wall_time" not in (tmp_path / "run_log.jsonl").read_text()


def test_workers_do_not_change_the_log(tmp_path):
    entries = [dict(MOON_ENTRY, id=f"moon-{i:04d}") for i in range(4)]
    plans = {e["id"]: parse_plan(MOON_PLAN) for e in entries}
    for workers, sub in ((1, "a"), (4, "b")):
        run_benchmark(entries, plans, RunConfig(sim={"p_success": 0.5}, workers=workers), tmp_path / sub)
    assert (tmp_path / "a" / "run_log.jsonl").read_bytes() == (tmp_path / "b" / "run_log.jsonl").read_bytes()


def test_missing_plan_skipped_or_generated():
    cfg = RunConfig(repetitions=1)
    result = run_benchmark([MOON_ENTRY], {}, cfg)
    assert result.skipped and result.skipped[0]["reason"] == "no plan available"
    gen = run_benchmark([MOON_ENTRY], {}, RunConfig(repetitions=1, generate_missing_plans=True))
    assert not gen.skipped and len(gen.records) == 1


def test_sweep_covers_every_schedule_and_dataset():
    plan = parse_plan(MOON_PLAN)
    datasets = [(f"set-{i}", [dict(MOON_ENTRY, id=f"e{i}")]) for i in range(4)]
    plans = {f"e{i}": plan for i in range(4)}
    scheds = [ThresholdSchedule.parse(s) for s in ("0.2", "0.4", "0.6", "0.8", "1.0", "dynamic")]
    rows = sweep_thresholds(datasets, plans, RunConfig(sim={"p_success": 0.5}, repetitions=1), scheds)
    assert len(rows) == 24
    assert {r["schedule"] for r in rows} == {"20%", "40%", "60%", "80%", "100%", "dynamic"}


def test_config_round_trip_and_unknown_keys():
    cfg = RunConfig.from_json({"schedule": "dynamic", "scorers": ["C"], "repetitions": 2})
    assert RunConfig.from_json(cfg.to_json()) == cfg
    with pytest.raises(ValueError):
        RunConfig.from_json({"bogus": 1})


def test_endpoint_env_override(monkeypatch):
    monkeypatch.setenv("RIT_VQA_URL", "http://vqa:1")
    urls = RunConfig(backend="http", endpoints={"base_url": "http://base:1"}).endpoint_urls()
    assert urls["vqa"] == "http://vqa:1" and urls["generate"] == "http://base:1"


def test_cli_end_to_end(tmp_path):
    runner = CliRunner()
    universe = tmp_path / "universe.json"
    universe.write_text(json.dumps([{"id": x, "label": x} for x in
                                    ["cat", "moon", "piano", "owl", "teapot", "glacier"]]))
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"repetitions": 1, "sim": {"p_success": 0.8}}))
    out = tmp_path / "ds"
    res = runner.invoke(main, ["build-dataset", "--universe", str(universe), "--m", "2,3", "--r", "3",
                               "--mixed", "2,2", "--out", str(out), "--config", str(cfg)])
    assert res.exit_code == 0, res.output
    plans = tmp_path / "plans"
    res = runner.invoke(main, ["gen-plan", "--dataset", str(out / "dataset-3.jsonl"),
                               "--universe", str(universe), "--out", str(plans)])
    assert res.exit_code == 0, res.output
    plan_file = next(plans.glob("*.plan"))
    assert runner.invoke(main, ["validate-plan", str(plan_file)]).exit_code == 0
    res = runner.invoke(main, ["run", "--dataset", str(out / "dataset-3.jsonl"), "--plans", str(plans),
                               "--config", str(cfg), "--universe", str(universe), "--out", str(tmp_path / "r")])
    assert res.exit_code == 0, res.output
    assert "V_3(C)" in res.output
    res = runner.invoke(main, ["report", "--log", str(tmp_path / "r" / "run_log.jsonl")])
    assert res.exit_code == 0 and "V_3(C)" in res.output


def test_cli_validate_plan_rejects(tmp_path):
    bad = tmp_path / "bad.plan"
    bad.write_text(MOON_PLAN.replace("TARGETS: cat astronaut, horse, moon", "TARGETS: owl"))
    res = CliRunner().invoke(main, ["validate-plan", str(bad)])
    assert res.exit_code == 1
    assert "unreached target: owl" in res.output
