import json

import numpy as np
import pytest
from pydantic import ValidationError

from config import Settings
from domain_model import F4, F5, ContentItem, LatencyReport, LatencySample, TraceEvent
from errors import CdnError, ErrorCode
from scenario_harness import (
    CSV_HEADER,
    LoadPhase,
    RunResult,
    ScenarioConfig,
    SessionBook,
    ScenarioReport,
    Topology,
    aggregate_latencies,
    emit_report,
    generate_load,
    measure_latencies,
    report_csv,
    run_once,
    run_scenario,
)

from tests.support import SCENARIO_DIR, load_scenario

NS = 1_000_000_000


class TestLoadGeneration:
    def test_deterministic_counts_times_and_mix(self):
        events = generate_load([LoadPhase(region="quebec", rate=4.0, duration_s=10.0, content_mix={"c1": 3, "c2": 1})])
        assert len(events) == 40
        assert [e.t for e in events[:3]] == [0, NS // 4, NS // 2]
        assert sum(e.content_id == "c1" for e in events) == 30
        assert {e.region.id for e in events} == {"quebec"}

    def test_phases_chain_and_overlap(self):
        profile = [
            LoadPhase(region="bc", rate=1.0, duration_s=4.0, content_mix={"c3": 1}, start_s=0.0),
            LoadPhase(region="quebec", rate=1.0, duration_s=2.0, content_mix={"c1": 1}, start_s=0.0),
            LoadPhase(region="quebec", rate=2.0, duration_s=1.0, content_mix={"c2": 1}),
        ]
        events = generate_load(profile)
        assert [(e.t / NS, e.region.id) for e in events] == [
            (0.0, "bc"), (0.0, "quebec"), (1.0, "bc"), (1.0, "quebec"),
            (2.0, "bc"), (2.0, "quebec"), (2.5, "quebec"), (3.0, "bc"),
        ]

    def test_load_is_a_pure_function(self):
        scenario = load_scenario("quebec-flash-crowd")
        first = generate_load(scenario.load, 7)
        assert first == generate_load(scenario.load, 7)
        assert len(first) == 60 + 50 + 600 + 50
        assert all(a.t <= b.t for a, b in zip(first, first[1:]))

    def test_zero_rate_phase_is_silent(self):
        assert generate_load(load_scenario("idle").load) == []

    def test_stochastic_pacing_is_seeded(self):
        profile = [LoadPhase(region="quebec", rate=50.0, duration_s=10.0, content_mix={"c1": 2, "c2": 1})]
        first = generate_load(profile, 11, "stochastic")
        assert first == generate_load(profile, 11, "stochastic")
        assert first != generate_load(profile, 12, "stochastic")
        assert all(0 <= e.t < 10 * NS for e in first)
        assert 350 < len(first) < 650

    def test_unknown_pacing(self):
        with pytest.raises(ValueError):
            generate_load([LoadPhase(region="quebec", rate=1.0, duration_s=1.0, content_mix={"c1": 1})], pacing="bursty")


class TestSessionBook:
    def test_sessions_end_after_their_content_duration(self):
        book = SessionBook([
            ContentItem(content_id="c1", size_bytes=1, duration_s=12.0),
            ContentItem(content_id="c2", size_bytes=1, duration_s=4.0),
        ])
        book.start("s1", "c1", 0)
        book.start("s2", "c2", 1 * NS)
        book.start("s1", "c2", 2 * NS)
        assert book.due(4 * NS) == []
        assert book.due(5 * NS) == ["s2"]
        assert book.due(11 * NS) == ["s1"]
        assert len(book) == 1
        assert book.due(12 * NS) == ["s1"]
        assert len(book) == 0

    def test_unknown_content_ends_at_the_next_request(self):
        book = SessionBook([])
        book.start("s1", "c9", 3 * NS)
        assert book.due(3 * NS) == ["s1"]


def _event(seq, action, t_s):
    return TraceEvent(seq=seq, actor="test", action=action, t=int(t_s * NS), correlation_id="run-1")


class TestLatency:
    def test_delays_from_boundary_events(self):
        trace = [
            _event(1, F4[4], 1.0),
            _event(2, F4[5], 1.5),
            _event(3, F4[9], 3.0),
            _event(4, F4[10], 3.25),
            _event(5, F4[14], 4.0),
            _event(6, F5[2], 6.0),
        ]
        report = measure_latencies(trace, run_id=3)
        assert report.deployment_delay == pytest.approx(1.5)
        assert report.orchestration_delay == pytest.approx(0.75)
        assert report.provisioning_delay == pytest.approx(5.0)
        assert report.samples[0].run_id == 3

    def test_missing_boundary(self):
        with pytest.raises(CdnError) as exc:
            measure_latencies([_event(1, F4[4], 1.0)])
        assert exc.value.code == ErrorCode.INCOMPLETE_TRACE

    def test_aggregate_uses_sample_stddev(self):
        samples = [
            LatencySample(run_id=i, deployment_delay=d, orchestration_delay=2 * d, provisioning_delay=3 * d)
            for i, d in enumerate([1.0, 2.0, 3.0], start=1)
        ]
        report = aggregate_latencies(samples)
        assert report.mean["deployment_delay"] == pytest.approx(2.0)
        assert report.stddev["deployment_delay"] == pytest.approx(1.0)
        assert report.stddev["provisioning_delay"] == pytest.approx(float(np.std([3.0, 6.0, 9.0], ddof=1)))
        assert report.provisioning_delay == pytest.approx(6.0)

    def test_aggregate_edge_cases(self):
        assert aggregate_latencies([]) is None
        single = aggregate_latencies([LatencySample(deployment_delay=1, orchestration_delay=1, provisioning_delay=3)])
        assert single.stddev == {"deployment_delay": 0.0, "orchestration_delay": 0.0, "provisioning_delay": 0.0}

    def test_provisioning_spans_deployment_and_orchestration(self):
        LatencySample(deployment_delay=1.0, orchestration_delay=0.5, provisioning_delay=1.5)
        with pytest.raises(ValidationError, match="provisioning_delay"):
            LatencySample(deployment_delay=1.0, orchestration_delay=1.0, provisioning_delay=1.5)
        with pytest.raises(ValidationError, match="provisioning_delay"):
            LatencyReport(deployment_delay=1, orchestration_delay=1, provisioning_delay=0.5)

    def test_unnested_boundary_times_are_rejected(self):
        trace = [
            _event(1, F4[4], 1.0),
            _event(2, F4[5], 1.5),
            _event(3, F4[9], 3.0),
            _event(4, F4[10], 3.25),
            _event(5, F4[14], 6.0),
            _event(6, F5[2], 4.0),
        ]
        with pytest.raises(CdnError) as exc:
            measure_latencies(trace)
        assert exc.value.code == ErrorCode.INCOMPLETE_TRACE


class TestScenarioConfig:
    @pytest.mark.parametrize("path", sorted(SCENARIO_DIR.glob("*.json")), ids=lambda p: p.stem)
    def test_shipped_scenarios_parse(self, path):
        config = ScenarioConfig.from_file(path)
        assert config.runs >= 1

    def test_unset_tunables_fall_back_to_settings(self):
        assert Topology._tunable(load_scenario("idle"), "placement_k", 5) == 5
        assert Topology._tunable(load_scenario("quebec-flash-crowd"), "placement_k", 5) == 2
        assert Topology._tunable(load_scenario("idle").faults, "registration_retries", 7) == 7
        assert Topology._tunable(load_scenario("idle"), "required_instances", 3) == 3
        assert Topology._tunable(load_scenario("idle", required_instances=1), "required_instances", 3) == 1

    @pytest.mark.parametrize("override,message", [
        ({"load": [{"region": "ontario", "rate": 1, "duration_s": 1, "content_mix": {"c1": 1}}]}, "unknown region"),
        ({"load": [{"region": "quebec", "rate": 1, "duration_s": 1, "content_mix": {"c9": 1}}]}, "catalogue"),
        ({"bootstrap_surrogates": [{"pod_id": "pod-tor-1", "contents": ["c1"]}]}, "unknown PoD"),
        ({"faults": {"pod_unreachable": ["pod-tor-1"]}}, "unknown PoD"),
        ({"runs": 0}, "runs"),
        ({"surprise": True}, "surprise"),
    ])
    def test_invalid_scenarios(self, override, message):
        with pytest.raises(ValidationError) as exc:
            load_scenario("quebec-flash-crowd", **override)
        assert message in str(exc.value)


def _report():
    sample = LatencySample(run_id=1, deployment_delay=0.125, orchestration_delay=0.25, provisioning_delay=1.5)
    runs = [
        RunResult(run_id=1, status="ok", conformance="CONFORMANT", latency=sample, component_id="comp-0001"),
        RunResult(run_id=2, status="failed", error="POD_UNREACHABLE", conformance="DIVERGED@4", integrity=False),
    ]
    trace = [_event(2, F4[2], 0.5), _event(1, F4[1], 0.25)]
    return ScenarioReport(scenario="unit", runs=runs, latencies=aggregate_latencies([sample]), traces={1: trace})


class TestReports:
    def test_csv_layout(self):
        lines = report_csv(_report()).splitlines()
        assert lines[0] == ",".join(CSV_HEADER)
        assert lines[1] == "1,0.125000,0.250000,1.500000,CONFORMANT,PASS"
        assert lines[2] == "2,,,,DIVERGED@4,FAIL"

    def test_pass_requires_conformance_and_integrity(self):
        report = _report()
        assert not report.passed
        assert ScenarioReport(scenario="x", runs=[RunResult(run_id=1, status="no-trigger")]).passed
        assert not ScenarioReport(scenario="x").passed

    def test_emitted_files_are_byte_identical(self, tmp_path):
        first = emit_report(_report(), tmp_path / "a")
        second = emit_report(_report(), tmp_path / "b")
        assert [p.name for p in first] == ["report.csv", "summary.txt", "report.json", "trace-run-1.jsonl"]
        for a, b in zip(first, second):
            assert a.read_bytes() == b.read_bytes()
        assert "traces" not in json.loads((tmp_path / "a" / "report.json").read_text())
        lines = (tmp_path / "a" / "trace-run-1.jsonl").read_text().splitlines()
        assert [json.loads(line)["seq"] for line in lines] == [1, 2]
        summary = (tmp_path / "a" / "summary.txt").read_text()
        assert "Result: FAIL" in summary and "reference mean (s)" in summary

    def test_format_subset(self, tmp_path):
        assert [p.name for p in emit_report(_report(), tmp_path, formats=("csv",))] == ["report.csv"]


def test_idle_scenario_never_triggers(loopback_settings):
    report = run_scenario(load_scenario("idle"), settings=loopback_settings)
    (run,) = report.runs
    assert run.status == "no-trigger"
    assert run.event_count == 0
    assert run.new_registrations == 0
    assert report.latencies is None
    assert report.passed


@pytest.mark.slow
class TestQuebecFlashCrowd:
    @pytest.fixture(scope="class")
    def run(self):
        result, trace = run_once(load_scenario("quebec-flash-crowd"), 1, Settings(base_port=0, provision_timeout_s=30.0))
        return result, trace

    def test_run_provisions_a_surrogate_in_quebec(self, run):
        result, _ = run
        assert result.status == "ok", result.error_message
        assert result.trigger_region == "quebec"
        assert result.trigger_rate >= 50.0
        assert result.pod_id == "pod-mtl-1"
        assert result.type_id == "cdn-abr-surrogate-v1"
        assert result.new_registrations == 1

    def test_trace_conforms_and_latencies_are_positive(self, run):
        result, trace = run
        assert result.conformance == "CONFORMANT"
        assert result.latency.deployment_delay > 0
        assert result.latency.orchestration_delay > 0
        assert result.latency.provisioning_delay > result.latency.deployment_delay
        assert result.latency.provisioning_delay >= result.latency.deployment_delay + result.latency.orchestration_delay
        assert {e.correlation_id for e in trace} == {"run-1"}

    def test_placement_and_redirection(self, run):
        result, _ = run
        assert result.placement == ["c1", "c2"]
        quebec = result.redirects["quebec"]
        assert set(quebec["before"]) == {"pod-van-1"}
        assert set(quebec["after"]) == {"pod-mtl-1"}
        assert set(result.redirects["bc"]["before"]) == {"pod-van-1"}

    def test_integrity(self, run):
        result, _ = run
        assert result.integrity
        assert result.integrity_failures == []

    def test_sessions_close_as_contents_finish(self, run):
        result, _ = run
        surrogate_redirects = sum(
            count
            for buckets in result.redirects.values()
            for bucket in buckets.values()
            for label, count in bucket.items()
            if label != "origin"
        )
        assert result.sessions_ended > 0
        assert result.open_sessions == surrogate_redirects - result.sessions_ended


@pytest.mark.slow
def test_runs_are_isolated(loopback_settings):
    config = load_scenario("quebec-flash-crowd", runs=2)
    alone, _ = run_once(config, 2, loopback_settings)
    report = run_scenario(config, settings=loopback_settings)
    together = report.runs[1]
    for field in ("status", "component_id", "pod_id", "placement", "redirects", "conformance", "event_count"):
        assert getattr(alone, field) == getattr(together, field), field
    assert report.latencies is not None and len(report.latencies.samples) == 2
    for sample in report.latencies.samples:
        assert sample.provisioning_delay >= sample.deployment_delay + sample.orchestration_delay
    assert report.latencies.provisioning_delay >= report.latencies.deployment_delay + report.latencies.orchestration_delay
