"""Failure paths of a full provisioning run, driven through the scenario harness."""
import pytest

from scenario_harness import run_once

from tests.support import load_scenario

pytestmark = pytest.mark.slow


def _run(name, loopback_settings):
    result, trace = run_once(load_scenario(name), 1, loopback_settings)
    return result, trace


def test_unreachable_pod_fails_the_order(loopback_settings):
    result, trace = _run("quebec-pod-unreachable", loopback_settings)
    assert result.status == "failed"
    assert result.error == "POD_UNREACHABLE"
    assert result.component_id is None
    assert result.new_registrations == 0
    assert result.conformance.startswith("DIVERGED@")
    assert result.latency is None
    assert trace


def test_black_holed_control_interface_exhausts_step_retries(loopback_settings):
    result, _ = _run("quebec-blackhole-control", loopback_settings)
    assert result.status == "failed"
    assert result.error == "ORCHESTRATION_STEP_FAILED"
    assert result.error_details["attempts"] == 3
    assert result.new_registrations == 0
    assert result.integrity


def test_controller_down_during_registration(loopback_settings):
    result, _ = _run("quebec-controller-down", loopback_settings)
    assert result.status == "failed"
    assert result.error == "REGISTRATION_FAILED"
    assert result.new_registrations == 0
    quebec = result.redirects["quebec"]
    assert set(quebec) == {"before"}
    assert set(quebec["before"]) == {"pod-van-1"}


def test_dispose_restores_the_initial_state(loopback_settings):
    result, _ = _run("quebec-dispose", loopback_settings)
    assert result.status == "ok", result.error_message
    assert result.conformance == "CONFORMANT"
    assert result.dispose_ok is True
