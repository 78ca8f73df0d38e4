import pytest

from cdn_flyprov import main
from domain_model import TraceEvent, provisioning_reference
from trace_collector import write_trace_jsonl

from tests.support import SCENARIO_DIR


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for name in ("CDN_FLYPROV_BASE_PORT", "CDN_FLYPROV_LOG_LEVEL", "CDN_FLYPROV_HOST"):
        monkeypatch.delenv(name, raising=False)


def _trace_file(path, labels):
    events = [
        TraceEvent(seq=n, actor="test", action=label, t=1000 * n, correlation_id="run-1")
        for n, label in enumerate(labels, start=1)
    ]
    return str(write_trace_jsonl(path, events))


def test_validate_shipped_scenario(capsys):
    assert main(["validate", "--scenario", str(SCENARIO_DIR / "quebec-flash-crowd.json")]) == 0
    assert "consistent" in capsys.readouterr().out


def test_missing_scenario_is_invalid_input(tmp_path):
    assert main(["validate", "--scenario", str(tmp_path / "missing.json")]) == 2
    assert main(["run", "--scenario", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 2


def test_malformed_scenario_is_invalid_input(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"name": "bad", "regions": []}')
    assert main(["validate", "--scenario", str(bad)]) == 2


def test_trace_check_conformant(tmp_path, capsys):
    path = _trace_file(tmp_path / "ok.jsonl", provisioning_reference(2, content_pull=True, include_bookends=True))
    assert main(["trace-check", "--trace", path]) == 0
    assert capsys.readouterr().out.strip() == "CONFORMANT"


def test_trace_check_diverged(tmp_path, capsys):
    labels = provisioning_reference(2, content_pull=True, include_bookends=True)
    labels[3], labels[4] = labels[4], labels[3]
    path = _trace_file(tmp_path / "swapped.jsonl", labels)
    assert main(["trace-check", "--trace", path]) == 1
    out = capsys.readouterr().out
    assert out.startswith("DIVERGED@3")
    assert f"expected {labels[4]}" in out


def test_trace_check_unreadable(tmp_path):
    assert main(["trace-check", "--trace", str(tmp_path / "none.jsonl")]) == 2


def test_run_idle_scenario_writes_reports(tmp_path, capsys):
    out = tmp_path / "out"
    code = main(["run", "--scenario", str(SCENARIO_DIR / "idle.json"), "--base-port", "0", "--out", str(out)])
    assert code == 0
    assert {p.name for p in out.iterdir()} >= {"report.csv", "summary.txt", "report.json"}
    assert (out / "report.csv").read_text().splitlines()[1] == "1,,,,NO-TRIGGER,PASS"
    assert "Result: PASS" in capsys.readouterr().out


def test_bad_port_in_environment(monkeypatch, capsys):
    monkeypatch.setenv("CDN_FLYPROV_BASE_PORT", "not-a-port")
    assert main(["validate", "--scenario", str(SCENARIO_DIR / "idle.json")]) == 2
    assert "CDN_FLYPROV_BASE_PORT" in capsys.readouterr().err
