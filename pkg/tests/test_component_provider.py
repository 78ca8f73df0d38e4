import pytest
import requests
from fastapi.testclient import TestClient

from component_provider import (
    ComponentDeploymentManager,
    ComponentRepository,
    MicroserviceDeployer,
    create_component_provider_app,
)
from domain_model import (
    F4,
    CdnComponentType,
    InstanceState,
    MicroservicePackage,
    MicroserviceSpec,
    ProvisionStatus,
    check_trace_order,
    is_valid_status_walk,
    provisioning_reference,
)
from errors import CdnError, ErrorCode
from http_service import free_port_access
from workflow_engine import MicroserviceOrchestrator


def _provision(provider_access, pod, type_id="cdn-abr-surrogate-v1", correlation_id="run-1"):
    return requests.post(
        provider_access.url(f"/CDNComponent/{type_id}"),
        json={"pod_access": pod.access.model_dump()},
        headers={"X-Correlation-ID": correlation_id},
        timeout=60,
    )


class TestRepository:
    def test_shipped_repository_is_consistent(self, repository, workflows):
        assert repository.validate(workflows.plan_ids()).ok
        assert repository.package_ids() == ["pkg-abr-server-1", "pkg-cache-node-1"]

    def test_duplicate_registration_rejected(self, repository):
        with pytest.raises(CdnError) as exc:
            repository.register_package(repository.fetch_package("pkg-cache-node-1"))
        assert exc.value.code == ErrorCode.INVALID_REQUEST
        existing = repository.get_type("cdn-cache-v1")
        with pytest.raises(CdnError):
            repository.register_type(existing)
        repository.register_type(existing.model_copy(update={"name": "renamed"}), replace=True)
        assert repository.get_type("cdn-cache-v1").name == "renamed"

    def test_lookups(self, repository):
        with pytest.raises(CdnError) as exc:
            repository.fetch_package("pkg-none")
        assert exc.value.code == ErrorCode.PACKAGE_NOT_FOUND
        with pytest.raises(CdnError) as exc:
            repository.get_type("nope")
        assert exc.value.code == ErrorCode.UNKNOWN_COMPONENT_TYPE


class TestCatalogue:
    def test_catalogue_lists_summaries_only(self, provider):
        body = TestClient(create_component_provider_app(provider)).get("/CDNComponentCatalogue").json()
        assert sorted(entry["type_id"] for entry in body) == ["cdn-abr-surrogate-v1", "cdn-cache-v1"]
        assert all(set(entry) == {"type_id", "name", "features"} for entry in body)
        abr_entry = next(e for e in body if e["type_id"] == "cdn-abr-surrogate-v1")
        assert abr_entry["features"] == ["ABR-streaming", "caching"]

    def test_empty_catalogue(self, workflows):
        empty = ComponentRepository()
        manager = ComponentDeploymentManager(empty, MicroserviceDeployer(empty), MicroserviceOrchestrator(workflows))
        assert TestClient(create_component_provider_app(manager)).get("/CDNComponentCatalogue").json() == []


class TestDecomposition:
    def test_decompose_returns_specs_and_plan(self, provider):
        specs, plan_id = provider.decompose("cdn-abr-surrogate-v1")
        assert [s.role for s in specs] == ["cache-node", "abr-streaming-server"]
        assert plan_id == "abr-wire-v1"
        with pytest.raises(CdnError) as exc:
            provider.decompose("cdn-nope")
        assert exc.value.code == ErrorCode.UNKNOWN_COMPONENT_TYPE

    def test_deploy_microservices_in_spec_order(self, repository, make_pod, collector, tracer):
        deployer = MicroserviceDeployer(repository, tracer=tracer("microservice-deployer"))
        pod = make_pod()
        specs = repository.get_type("cdn-abr-surrogate-v1").microservices
        instances = deployer.deploy_microservices(specs, pod.access, "run-3")
        assert [i.role for i in instances] == ["cache-node", "abr-streaming-server"]
        assert {i.state for i in instances} == {InstanceState.DEPLOYED}
        assert len({i.instance_id for i in instances}) == 2
        assert all(i.pod_id == pod.pod_id for i in instances)
        assert [e.action for e in collector.events_for("run-3") if e.actor == "microservice-deployer"] == [
            F4[6], F4[7], F4[8], F4[6], F4[7], F4[8],
        ]


class TestProvisioning:
    def test_provision_then_dispose(self, provider, provider_access, make_pod):
        pod = make_pod(capacity=4)
        response = _provision(provider_access, pod)
        assert response.status_code == 200
        assert response.json() == {"cdn_component_id": "comp-0001"}
        component_id = "comp-0001"
        assert pod.capacity_free == 2

        record = requests.get(provider_access.url(f"/CDNComponent/{component_id}"), timeout=5).json()
        assert record["status"] == "provisioned"
        assert len(record["instances"]) == 2
        assert {i["state"] for i in record["instances"]} == {"orchestrated"}

        disposed = requests.delete(provider_access.url(f"/CDNComponent/{component_id}"), timeout=10)
        assert disposed.json() == {"success": True}
        assert pod.capacity_free == 4
        assert provider.get_record(component_id).status == ProvisionStatus.DISPOSED
        assert {i.state for i in provider.get_record(component_id).instances} == {InstanceState.UNDEPLOYED}

        again = requests.delete(provider_access.url(f"/CDNComponent/{component_id}"), timeout=10)
        assert again.status_code == 404
        assert again.json()["success"] is False
        assert again.json()["error"] == "COMPONENT_NOT_FOUND"

        assert provider.status_log[component_id] == [
            ProvisionStatus.DEPLOYING,
            ProvisionStatus.DEPLOYED,
            ProvisionStatus.ORCHESTRATING,
            ProvisionStatus.PROVISIONED,
            ProvisionStatus.DISPOSED,
        ]
        assert is_valid_status_walk(provider.status_log[component_id])

    def test_provider_trace_order(self, provider_access, make_pod, collector):
        pod = make_pod()
        assert _provision(provider_access, pod, correlation_id="run-7").status_code == 200
        reference = provisioning_reference(2)
        segment = reference[reference.index(F4[5]):reference.index(F4[15]) + 1]
        assert check_trace_order(collector.events_for("run-7"), segment).conformant

    def test_record_timestamps_are_monotone(self, provider, make_pod):
        record = provider.provision_component("cdn-cache-v1", make_pod().access, "run-1")
        stamps = [record.timestamps[s] for s in ("deploying", "deployed", "orchestrating", "provisioned")]
        assert stamps == sorted(stamps)

    def test_unknown_type_touches_no_pod(self, provider, provider_access, make_pod):
        pod = make_pod()
        response = _provision(provider_access, pod, type_id="cdn-nope")
        assert response.status_code == 404
        assert response.json()["error"] == "UNKNOWN_COMPONENT_TYPE"
        assert pod.list_instances() == []
        assert provider.status_log == {}

    def test_unreachable_pod(self, provider, provider_access):
        response = requests.post(
            provider_access.url("/CDNComponent/cdn-abr-surrogate-v1"),
            json={"pod_access": free_port_access().model_dump()},
            timeout=30,
        )
        assert response.status_code == 502
        assert response.json()["error"] == "POD_UNREACHABLE"
        (walk,) = provider.status_log.values()
        assert walk == [ProvisionStatus.DEPLOYING, ProvisionStatus.FAILED]

    def test_capacity_exhaustion_cleans_up(self, provider, provider_access, make_pod):
        pod = make_pod(capacity=1)
        response = _provision(provider_access, pod)
        assert response.status_code == 502
        body = response.json()
        assert body["error"] == "DEPLOYMENT_FAILED"
        assert body["details"]["cause"] == "CAPACITY_EXHAUSTED"
        assert len(body["details"]["deployed"]) == 1
        assert pod.list_instances() == []
        assert pod.capacity_free == 1
        assert provider.active_records() == []

    def test_missing_package_before_deploy(self, workflows, make_pod, tracer):
        repository = ComponentRepository(
            component_types=[
                CdnComponentType(
                    type_id="ghost", name="ghost", features=["caching"],
                    microservices=[MicroserviceSpec(role="cache-node", package_id="pkg-ghost")],
                    plan_id="cache-only-v1",
                )
            ]
        )
        assert not repository.validate(workflows.plan_ids()).ok
        manager = ComponentDeploymentManager(
            repository, MicroserviceDeployer(repository), MicroserviceOrchestrator(workflows), tracer=tracer("m")
        )
        pod = make_pod()
        with pytest.raises(CdnError) as exc:
            manager.provision_component("ghost", pod.access)
        assert exc.value.code == ErrorCode.PACKAGE_NOT_FOUND
        assert pod.list_instances() == []

    def test_orchestration_failure_undeploys(self, repository, workflows, make_pod):
        silent = MicroservicePackage.model_validate(
            {**repository.fetch_package("pkg-cache-node-1").model_dump(), "package_id": "pkg-cache-silent"}
        )
        repository.register_package(silent)
        repository.register_type(
            CdnComponentType(
                type_id="cdn-cache-silent",
                name="cache with dead control interface",
                features=["caching"],
                microservices=[MicroserviceSpec(role="cache-node", package_id="pkg-cache-silent",
                                                config={"blackhole_control": True})],
                plan_id="cache-only-v1",
            )
        )
        plan = workflows.load_plan("cache-only-v1")
        fast = plan.model_copy(update={"steps": [s.model_copy(update={"retry_limit": 1, "timeout": 200}) for s in plan.steps]})
        workflows.store_plan(fast)
        manager = ComponentDeploymentManager(repository, MicroserviceDeployer(repository), MicroserviceOrchestrator(workflows))
        pod = make_pod()

        with pytest.raises(CdnError) as exc:
            manager.provision_component("cdn-cache-silent", pod.access)
        assert exc.value.code == ErrorCode.ORCHESTRATION_STEP_FAILED
        assert exc.value.details["attempts"] == 2
        assert pod.list_instances() == []
        (walk,) = manager.status_log.values()
        assert walk[-1] == ProvisionStatus.FAILED

    def test_dispose_unknown_component(self, provider_access):
        response = requests.delete(provider_access.url("/CDNComponent/comp-9999"), timeout=5)
        assert response.status_code == 404
        assert response.json()["success"] is False
