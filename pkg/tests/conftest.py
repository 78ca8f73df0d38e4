import pytest

from cdn_provider import CdnController, create_controller_app
from component_provider import (
    ComponentDeploymentManager,
    ComponentRepository,
    MicroserviceDeployer,
    create_component_provider_app,
)
from config import DEFAULT_PLAN_FILE, DEFAULT_REPOSITORY_FILE, Settings
from domain_model import Region
from http_service import ServiceHandle
from pod_runtime import InProcessBackend, MediaServer, PodAgent
from trace_collector import TraceCollector, Tracer, direct_sink
from workflow_engine import MicroserviceOrchestrator, WorkflowRepository

from tests.support import CONTENTS


@pytest.fixture
def serve():
    """Start FastAPI apps on ephemeral loopback ports; stopped after the test."""
    handles = []

    def _serve(app, name="test-service") -> ServiceHandle:
        handle = ServiceHandle(name, app).start()
        handles.append(handle)
        return handle

    yield _serve
    for handle in reversed(handles):
        handle.stop()


@pytest.fixture
def collector():
    return TraceCollector()


@pytest.fixture
def tracer(collector):
    def _tracer(actor: str) -> Tracer:
        return Tracer(actor, direct_sink(collector))

    return _tracer


@pytest.fixture
def origin(serve, tracer):
    server = MediaServer(CONTENTS, tracer("media-server"))
    server.access = serve(server.app(), "origin").access
    return server


@pytest.fixture
def make_pod(serve, tracer):
    agents = []

    def _make(pod_id="pod-mtl-1", region="quebec", capacity=4) -> PodAgent:
        agent = PodAgent(pod_id, Region(id=region), capacity, InProcessBackend(), tracer(f"pod-agent:{pod_id}"))
        agent.access = serve(agent.app(), pod_id).access
        agents.append(agent)
        return agent

    yield _make
    for agent in agents:
        agent.shutdown()


@pytest.fixture
def repository():
    return ComponentRepository.from_file(DEFAULT_REPOSITORY_FILE)


@pytest.fixture
def workflows():
    return WorkflowRepository.from_file(DEFAULT_PLAN_FILE)


@pytest.fixture
def provider(repository, workflows, tracer):
    return ComponentDeploymentManager(
        repository,
        MicroserviceDeployer(repository, tracer=tracer("microservice-deployer")),
        MicroserviceOrchestrator(workflows, tracer=tracer("microservice-orchestrator")),
        tracer=tracer("cdn-component-deployment-manager"),
        provision_timeout_s=30.0,
    )


@pytest.fixture
def provider_access(provider, serve):
    return serve(create_component_provider_app(provider), "component-provider").access


@pytest.fixture
def controller(origin, tracer):
    return CdnController(origin.access, default_contents=["c1", "c2"], k=10, tracer=tracer("cdn-controller"))


@pytest.fixture
def controller_handle(controller, serve):
    return serve(create_controller_app(controller), "cdn-controller")


@pytest.fixture
def loopback_settings():
    return Settings(base_port=0, provision_timeout_s=30.0)
