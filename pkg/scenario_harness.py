"""
End-to-end scenario harness: boots the whole provisioning system on loopback, replays
a load profile, lets detection, provisioning, post-deployment and redirection run on
their own, then scores each run (trace conformance, latencies, content integrity).
"""
import csv
import heapq
import io
import itertools
import json
import logging
import time
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from tabulate import tabulate

from cdn_provider import CdnController, CdnDeploymentManager, create_controller_app, create_deployment_manager_app
from component_provider import (
    ComponentDeploymentManager,
    ComponentRepository,
    MicroserviceDeployer,
    create_component_provider_app,
)
from config import Settings, load_settings
from domain_model import (
    F4,
    F5,
    REFERENCE_LATENCIES,
    AccessInfo,
    CdnComponentType,
    ContentItem,
    FlashCrowdTrigger,
    LatencyReport,
    LatencySample,
    MicroserviceRole,
    MicroserviceSpec,
    OrchestrationPlan,
    PoDDescriptor,
    ProvisionRecord,
    RedirectTarget,
    Region,
    RequestEvent,
    TraceEvent,
    check_trace_order,
    provisioning_reference,
)
from errors import CdnError, ErrorCode
from http_service import ServiceHandle, free_port_access
from pod_runtime import InProcessBackend, MediaServer, PodAgent
from service_client import ServiceClient
from trace_collector import TraceCollector, Tracer, create_collector_app, http_sink, write_trace_jsonl
from workflow_engine import MicroserviceOrchestrator, WorkflowRepository

logger = logging.getLogger(__name__)

NS_PER_S = 1_000_000_000
DELAY_FIELDS = ("deployment_delay", "orchestration_delay", "provisioning_delay")
CSV_HEADER = ["run_id", *DELAY_FIELDS, "conformance", "integrity"]

# port = base + role index; PoD agents take the indices from POD_PORT_OFFSET upward
ROLE_PORTS = {
    "trace-collector": 0,
    "media-server": 1,
    "component-provider": 2,
    "cdn-controller": 3,
    "cdn-deployment-manager": 4,
}
POD_PORT_OFFSET = 5


# ---------------------------------------------------------------------------
# Scenario configuration
# ---------------------------------------------------------------------------

class ScenarioModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PodSpec(ScenarioModel):
    pod_id: str
    region: str
    capacity_total: int = Field(default=4, ge=0)


class LoadPhase(ScenarioModel):
    region: str
    rate: float = Field(ge=0)
    duration_s: float = Field(gt=0)
    content_mix: Dict[str, float]
    start_s: Optional[float] = Field(default=None, ge=0)


class DetectorConfig(ScenarioModel):
    window_s: float = Field(default=10.0, gt=0)
    threshold: float = Field(default=50.0, gt=0)


class BootstrapSurrogate(ScenarioModel):
    pod_id: str
    contents: List[str] = Field(default_factory=list)
    type_id: str = "cdn-cache-v1"


class FaultConfig(ScenarioModel):
    pod_unreachable: List[str] = Field(default_factory=list)
    blackhole_control_role: Optional[MicroserviceRole] = None
    step_retry_limit: Optional[int] = Field(default=None, ge=0)
    step_timeout_ms: Optional[int] = Field(default=None, gt=0)
    controller_down: bool = False
    registration_retries: int = Field(default=3, ge=1)


class ScenarioConfig(ScenarioModel):
    name: str
    regions: List[Region]
    pods: List[PodSpec]
    contents: List[ContentItem]
    detector: DetectorConfig = Field(default_factory=DetectorConfig)
    load: List[LoadPhase] = Field(default_factory=list)
    runs: int = Field(default=10, ge=1)
    seed: int = Field(default=0, ge=0, lt=2 ** 64)
    pacing: Literal["deterministic", "stochastic"] = "deterministic"
    placement_k: int = Field(default=10, ge=1)
    default_contents: List[str] = Field(default_factory=list)
    media_source: Literal["origin", "surrogate"] = "origin"
    backoff_s: float = Field(default=30.0, ge=0)
    component_type: Optional[str] = None
    required_instances: int = Field(default=2, ge=1)
    bootstrap_surrogates: List[BootstrapSurrogate] = Field(default_factory=list)
    faults: FaultConfig = Field(default_factory=FaultConfig)
    dispose_after: bool = False

    @model_validator(mode="after")
    def _check_references(self) -> "ScenarioConfig":
        content_ids = {c.content_id for c in self.contents}
        region_ids = {r.id for r in self.regions}
        pod_ids = {p.pod_id for p in self.pods}
        referenced = set(self.default_contents)
        for phase in self.load:
            referenced |= set(phase.content_mix)
            if phase.region.lower() not in region_ids:
                raise ValueError(f"load phase references unknown region '{phase.region}'")
        for bootstrap in self.bootstrap_surrogates:
            referenced |= set(bootstrap.contents)
            if bootstrap.pod_id not in pod_ids:
                raise ValueError(f"bootstrap surrogate on unknown PoD '{bootstrap.pod_id}'")
        missing = sorted(referenced - content_ids)
        if missing:
            raise ValueError(f"contents not in the origin catalogue: {missing}")
        for pod in self.pods:
            if pod.region.lower() not in region_ids:
                raise ValueError(f"PoD {pod.pod_id} is in unknown region '{pod.region}'")
        for pod_id in self.faults.pod_unreachable:
            if pod_id not in pod_ids:
                raise ValueError(f"fault names unknown PoD '{pod_id}'")
        return self

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "ScenarioConfig":
        with open(path, "r", encoding="utf-8") as f:
            return cls.model_validate(json.load(f))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

class RunResult(ScenarioModel):
    run_id: int
    status: Literal["ok", "failed", "no-trigger"]
    error: Optional[str] = None
    error_message: Optional[str] = None
    error_details: Dict = Field(default_factory=dict)
    component_id: Optional[str] = None
    type_id: Optional[str] = None
    pod_id: Optional[str] = None
    trigger_region: Optional[str] = None
    trigger_rate: Optional[float] = None
    conformance: Optional[str] = None
    divergence_index: Optional[int] = None
    latency: Optional[LatencySample] = None
    integrity: bool = True
    integrity_failures: List[str] = Field(default_factory=list)
    placement: List[str] = Field(default_factory=list)
    redirects: Dict[str, Dict[str, Dict[str, int]]] = Field(default_factory=dict)
    new_registrations: int = 0
    dispose_ok: Optional[bool] = None
    event_count: int = 0
    sessions_ended: int = 0
    open_sessions: int = 0

    @property
    def conformant(self) -> bool:
        return self.conformance == "CONFORMANT"


class ScenarioReport(ScenarioModel):
    scenario: str
    runs: List[RunResult] = Field(default_factory=list)
    latencies: Optional[LatencyReport] = None
    reference: Dict[str, Dict[str, float]] = Field(default_factory=lambda: dict(REFERENCE_LATENCIES))
    traces: Dict[int, List[TraceEvent]] = Field(default_factory=dict, exclude=True)

    @property
    def all_conformant(self) -> bool:
        return all(r.conformant or r.status == "no-trigger" for r in self.runs)

    @property
    def all_integrity(self) -> bool:
        return all(r.integrity for r in self.runs)

    @property
    def passed(self) -> bool:
        return bool(self.runs) and self.all_conformant and self.all_integrity


# ---------------------------------------------------------------------------
# Load generation
# ---------------------------------------------------------------------------

def _smooth_weighted_round_robin(mix: Dict[str, float], count: int) -> List[str]:
    names = sorted(mix)
    weights = [mix[n] for n in names]
    total = sum(weights)
    current = [0.0] * len(names)
    picks = []
    for _ in range(count):
        for i, w in enumerate(weights):
            current[i] += w
        best = max(range(len(names)), key=lambda i: (current[i], -i))
        current[best] -= total
        picks.append(names[best])
    return picks


def generate_load(
    profile: Sequence[LoadPhase],
    seed: int = 0,
    pacing: str = "deterministic",
) -> List[RequestEvent]:
    """
    Turn a load profile into a time-ordered stream of request events.

    Phases without start_s begin where the previous phase ended. In deterministic
    pacing a phase emits round(rate * duration) events at start + j / rate with
    contents chosen by smooth weighted round-robin; stochastic pacing draws
    exponential inter-arrivals and weighted contents from a generator seeded with
    seed XOR phase index.

    Args:
        profile: Load phases
        seed: Generator seed
        pacing: "deterministic" or "stochastic"

    Returns:
        Events sorted by time (ties by phase order); a pure function of the arguments
    """
    keyed = []
    cursor_s = 0.0
    for index, phase in enumerate(profile):
        start_s = phase.start_s if phase.start_s is not None else cursor_s
        cursor_s = start_s + phase.duration_s
        if phase.rate <= 0 or not phase.content_mix:
            continue
        region = Region(id=phase.region)

        if pacing == "deterministic":
            count = int(round(phase.rate * phase.duration_s))
            offsets = [j / phase.rate for j in range(count)]
            contents = _smooth_weighted_round_robin(phase.content_mix, count)
        elif pacing == "stochastic":
            rng = np.random.default_rng(seed ^ index)
            offsets = []
            t = rng.exponential(1.0 / phase.rate)
            while t < phase.duration_s:
                offsets.append(float(t))
                t += rng.exponential(1.0 / phase.rate)
            names = sorted(phase.content_mix)
            weights = np.array([phase.content_mix[n] for n in names], dtype=float)
            picks = rng.choice(len(names), size=len(offsets), p=weights / weights.sum())
            contents = [names[i] for i in picks]
        else:
            raise ValueError(f"unknown pacing mode '{pacing}'")

        for j, (offset, content_id) in enumerate(zip(offsets, contents)):
            t_ns = int(round((start_s + offset) * NS_PER_S))
            keyed.append(((t_ns, index, j), RequestEvent(region=region, content_id=content_id, t=t_ns)))

    keyed.sort(key=lambda pair: pair[0])
    return [event for _, event in keyed]


# ---------------------------------------------------------------------------
# Latency measurement
# ---------------------------------------------------------------------------

def _first_time(trace: Sequence[TraceEvent], action: str) -> int:
    for event in sorted(trace, key=lambda e: e.seq):
        if event.action == action:
            return event.t
    raise CdnError(ErrorCode.INCOMPLETE_TRACE, f"trace has no '{action}' event", {"missing": action})


def measure_latencies(trace: Sequence[TraceEvent], run_id: int = 0) -> LatencyReport:
    """
    Delays of one provisioning run, in seconds.

    deployment = deploy request to deploy ack, orchestration = orchestrate request to
    orchestrate ack, provisioning = provision request to the surrogate's registration
    request at the controller.

    Raises:
        CdnError(INCOMPLETE_TRACE) when a boundary event is missing or the boundary
        times do not nest
    """
    t = {action: _first_time(trace, action) for action in (F4[4], F4[5], F4[9], F4[10], F4[14], F5[2])}
    try:
        sample = LatencySample(
            run_id=run_id,
            deployment_delay=(t[F4[9]] - t[F4[5]]) / NS_PER_S,
            orchestration_delay=(t[F4[14]] - t[F4[10]]) / NS_PER_S,
            provisioning_delay=(t[F5[2]] - t[F4[4]]) / NS_PER_S,
        )
    except ValidationError as e:
        raise CdnError(ErrorCode.INCOMPLETE_TRACE, f"boundary events are out of time order: {e.errors()[0]['msg']}")
    return LatencyReport(
        deployment_delay=sample.deployment_delay,
        orchestration_delay=sample.orchestration_delay,
        provisioning_delay=sample.provisioning_delay,
        samples=[sample],
    )


def aggregate_latencies(samples: Sequence[LatencySample]) -> Optional[LatencyReport]:
    """Mean and sample standard deviation over runs; None without samples."""
    if not samples:
        return None
    mean, stddev = {}, {}
    for name in DELAY_FIELDS:
        values = np.array([getattr(s, name) for s in samples], dtype=float)
        mean[name] = float(values.mean())
        stddev[name] = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    return LatencyReport(
        deployment_delay=mean["deployment_delay"],
        orchestration_delay=mean["orchestration_delay"],
        provisioning_delay=mean["provisioning_delay"],
        samples=list(samples),
        mean=mean,
        stddev=stddev,
    )


# ---------------------------------------------------------------------------
# Topology
# ---------------------------------------------------------------------------

def _with_spec_config(component_type: CdnComponentType, role: Optional[MicroserviceRole], updates: Dict) -> CdnComponentType:
    specs = [
        MicroserviceSpec(role=s.role, package_id=s.package_id, config={**s.config, **updates})
        if role is None or s.role == role else s
        for s in component_type.microservices
    ]
    return component_type.model_copy(update={"microservices": specs})


class Topology:
    """Every service of one run, bound to loopback; torn down as a unit."""

    def __init__(self, config: ScenarioConfig, settings: Optional[Settings] = None):
        self.config = config
        self.settings = settings or load_settings()
        self.host = self.settings.host
        self.client = ServiceClient("scenario-harness", timeout_s=self.settings.provision_timeout_s + 10.0)
        self.handles: Dict[str, ServiceHandle] = {}
        self.collector = TraceCollector()
        self.pod_agents: Dict[str, PodAgent] = {}
        self.pod_descriptors: List[PoDDescriptor] = []
        self.bootstrap_ids: List[str] = []
        self.origin: Optional[MediaServer] = None
        self.component_manager: Optional[ComponentDeploymentManager] = None
        self.controller: Optional[CdnController] = None
        self.deployment_manager: Optional[CdnDeploymentManager] = None
        self.repository: Optional[ComponentRepository] = None
        self.workflows: Optional[WorkflowRepository] = None

    def _port(self, index: int) -> int:
        return self.settings.base_port + index if self.settings.base_port else 0

    def _serve(self, name: str, app, index: int) -> AccessInfo:
        handle = ServiceHandle(name, app, self.host, self._port(index)).start()
        self.handles[name] = handle
        return handle.access

    def access(self, name: str) -> AccessInfo:
        return self.handles[name].access

    def start(self) -> "Topology":
        try:
            self._start()
        except Exception:
            self.stop()
            raise
        return self

    def _start(self) -> None:
        config, settings = self.config, self.settings
        collector_access = self._serve("trace-collector", create_collector_app(self.collector), ROLE_PORTS["trace-collector"])
        sink = http_sink(collector_access)

        self.origin = MediaServer(config.contents, Tracer("media-server", sink))
        origin_access = self._serve("media-server", self.origin.app(), ROLE_PORTS["media-server"])

        for index, spec in enumerate(config.pods):
            region = Region(id=spec.region)
            if spec.pod_id in config.faults.pod_unreachable:
                access = free_port_access(self.host)
                logger.warning(f"PoD {spec.pod_id} is unreachable at {access.endpoint}")
            else:
                agent = PodAgent(spec.pod_id, region, spec.capacity_total, InProcessBackend(self.host),
                                 Tracer(f"pod-agent:{spec.pod_id}", sink))
                access = self._serve(f"pod-{spec.pod_id}", agent.app(), POD_PORT_OFFSET + index)
                agent.access = access
                self.pod_agents[spec.pod_id] = agent
            self.pod_descriptors.append(PoDDescriptor(
                pod_id=spec.pod_id,
                region=region,
                capacity_total=spec.capacity_total,
                capacity_free=spec.capacity_total,
                access=access,
            ))

        self.workflows = WorkflowRepository.from_file(settings.plan_file)
        self._apply_plan_overrides()
        self.repository = ComponentRepository.from_file(settings.repository_file)
        self._apply_type_overrides(origin_access)

        provider_tracer = Tracer("cdn-component-deployment-manager", sink)
        self.component_manager = ComponentDeploymentManager(
            self.repository,
            MicroserviceDeployer(self.repository, tracer=provider_tracer.child("microservice-deployer")),
            MicroserviceOrchestrator(self.workflows, tracer=provider_tracer.child("microservice-orchestrator")),
            tracer=provider_tracer,
            provision_timeout_s=settings.provision_timeout_s,
        )
        provider_access = self._serve(
            "component-provider", create_component_provider_app(self.component_manager), ROLE_PORTS["component-provider"]
        )

        self.controller = CdnController(
            origin_access,
            default_contents=config.default_contents or [c.content_id for c in config.contents],
            k=self._tunable(config, "placement_k", settings.placement_k),
            media_source=config.media_source,
            tracer=Tracer("cdn-controller", sink),
        )
        controller_access = self._serve("cdn-controller", create_controller_app(self.controller), ROLE_PORTS["cdn-controller"])

        detector = self._tunable(
            config, "detector", DetectorConfig(window_s=settings.detector_window_s, threshold=settings.detector_threshold)
        )
        self.deployment_manager = CdnDeploymentManager(
            provider_access,
            controller_access,
            self.pod_descriptors,
            detector_window_s=detector.window_s,
            detector_threshold=detector.threshold,
            backoff_s=self._tunable(config, "backoff_s", settings.backoff_s),
            provision_timeout_s=settings.provision_timeout_s,
            required_instances=self._tunable(config, "required_instances", settings.required_instances),
            tracer=Tracer("cdn-deployment-manager", sink),
        )
        if config.component_type:
            self.deployment_manager.preferred_type = config.component_type
            component_type = self.repository.get_type(config.component_type)
            self.deployment_manager.required_features = frozenset(component_type.features)
            self.deployment_manager.required_instances = len(component_type.microservices)
        self._serve(
            "cdn-deployment-manager",
            create_deployment_manager_app(self.deployment_manager),
            ROLE_PORTS["cdn-deployment-manager"],
        )
        self._bootstrap()

    @staticmethod
    def _tunable(model: BaseModel, field: str, fallback):
        """Scenario value when the file sets it, the environment setting otherwise."""
        return getattr(model, field) if field in model.model_fields_set else fallback

    def _apply_plan_overrides(self) -> None:
        faults = self.config.faults
        updates = {}
        if faults.step_retry_limit is not None:
            updates["retry_limit"] = faults.step_retry_limit
        if faults.step_timeout_ms is not None:
            updates["timeout"] = faults.step_timeout_ms
        if not updates:
            return
        for plan_id in self.workflows.plan_ids():
            plan = self.workflows.load_plan(plan_id)
            steps = [step.model_copy(update=updates) for step in plan.steps]
            self.workflows.store_plan(OrchestrationPlan(plan_id=plan.plan_id, steps=steps))

    def _apply_type_overrides(self, origin_access: AccessInfo) -> None:
        faults = self.config.faults
        for component_type in self.repository.component_types():
            updated = _with_spec_config(
                component_type,
                MicroserviceRole.CACHE_NODE,
                {
                    "registration_retries": self._tunable(faults, "registration_retries", self.settings.registration_retries),
                    "media_server": origin_access.model_dump(),
                },
            )
            if faults.blackhole_control_role is not None:
                updated = _with_spec_config(updated, faults.blackhole_control_role, {"blackhole_control": True})
            self.repository.register_type(updated, replace=True)

    def _bootstrap(self) -> None:
        """Pre-existing surrogates: deployed and registered before any load arrives."""
        for bootstrap in self.config.bootstrap_surrogates:
            pod = next(p for p in self.pod_descriptors if p.pod_id == bootstrap.pod_id)
            base = self.repository.get_type(bootstrap.type_id)
            if bootstrap.contents:
                base = _with_spec_config(base, MicroserviceRole.CACHE_NODE, {"bootstrap_contents": bootstrap.contents})
            # bootstrap surrogates are never black-holed
            base = _with_spec_config(base, None, {"blackhole_control": False})
            type_id = f"{base.type_id}-bootstrap-{bootstrap.pod_id}"
            self.repository.register_type(base.model_copy(update={"type_id": type_id}), replace=True)

            correlation_id = f"bootstrap-{bootstrap.pod_id}"
            record = self.component_manager.provision_component(type_id, pod.access, correlation_id)
            control = CdnDeploymentManager._surrogate_control(record)
            self.deployment_manager.start_post_deployment(control, self.access("cdn-controller"), correlation_id)
            self.bootstrap_ids.append(record.component_id)
            logger.info(f"Bootstrap surrogate {record.component_id} ready on {pod.pod_id}")

    def stop(self) -> None:
        if self.deployment_manager is not None:
            self.deployment_manager.shutdown()
        for agent in self.pod_agents.values():
            agent.shutdown()
        for name in sorted(self.handles, reverse=True):
            self.handles[name].stop()
        self.handles.clear()

    def __enter__(self) -> "Topology":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    # -- state readers used by the run scorer ---------------------------------------------

    def surrogate_pod(self, surrogate_id: Optional[str]) -> str:
        if not surrogate_id:
            return "origin"
        try:
            return self.component_manager.get_record(surrogate_id).pod_id
        except CdnError:
            return surrogate_id

    def pod_state(self) -> Dict[str, Dict]:
        return {
            pod_id: {
                "instances": [i.instance_id for i in agent.list_instances()],
                "capacity_free": agent.capacity_free,
            }
            for pod_id, agent in sorted(self.pod_agents.items())
        }

    def registry_state(self) -> List[str]:
        return [s.surrogate_id for s in self.controller.list_surrogates()]

    def check_integrity(self) -> List[str]:
        """Every content a ready surrogate holds must hash like the origin's copy."""
        failures = []
        for surrogate in self.controller.list_surrogates():
            if not surrogate.ready:
                continue
            health = self.client.get(surrogate.control_access, "/health")
            held = health.get("contents", {})
            for content_id in self.controller.holdings(surrogate.surrogate_id):
                expected = self.origin.get_content(content_id).sha256
                if held.get(content_id) != expected:
                    failures.append(f"{surrogate.surrogate_id}:{content_id}")
        return failures


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------

class SessionBook:
    """End-user sessions opened by redirects, each lasting its content's duration in scenario time."""

    def __init__(self, contents: Iterable[ContentItem]):
        self.durations_ns = {c.content_id: int(round(c.duration_s * NS_PER_S)) for c in contents}
        self._open: List[Tuple[int, int, str]] = []
        self._order = itertools.count()

    def start(self, surrogate_id: str, content_id: str, t: int) -> None:
        end_t = t + self.durations_ns.get(content_id, 0)
        heapq.heappush(self._open, (end_t, next(self._order), surrogate_id))

    def due(self, t: int) -> List[str]:
        """Pop the sessions over by time t, earliest end first."""
        ended = []
        while self._open and self._open[0][0] <= t:
            ended.append(heapq.heappop(self._open)[2])
        return ended

    def __len__(self) -> int:
        return len(self._open)


def _end_session(topology: Topology, controller_access: AccessInfo, surrogate_id: str) -> bool:
    try:
        topology.client.post(controller_access, f"/sessions/{surrogate_id}/end")
    except CdnError as e:
        logger.warning(f"Session end for {surrogate_id} refused: {e.code.value}")
        return False
    return True


def _redirect_phase(provisioned: Optional[RunResult], content_id: str) -> str:
    if provisioned is None or provisioned.component_id is None:
        return "before"
    return "after" if content_id in provisioned.placement else "after-unplaced"


def run_once(config: ScenarioConfig, run_index: int, settings: Optional[Settings] = None) -> Tuple[RunResult, List[TraceEvent]]:
    """
    One isolated run: fresh topology, load replay, scoring, teardown.

    Hard failures are captured in the result rather than raised.
    """
    correlation_id = f"run-{run_index}"
    result = RunResult(run_id=run_index, status="no-trigger")
    events = generate_load(config.load, config.seed + run_index, config.pacing)
    result.event_count = len(events)
    topology = Topology(config, settings)
    trace: List[TraceEvent] = []
    try:
        topology.start()
        controller_access = topology.access("cdn-controller")
        dm_access = topology.access("cdn-deployment-manager")
        initial_pods = topology.pod_state()
        initial_registry = topology.registry_state()
        redirects: Dict[str, Dict[str, Dict[str, int]]] = {}
        provisioned: Optional[RunResult] = None
        sessions = SessionBook(config.contents)

        for event in events:
            for surrogate_id in sessions.due(event.t):
                if _end_session(topology, controller_access, surrogate_id):
                    result.sessions_ended += 1
            decision = topology.client.get(
                controller_access, "/redirect", params={"region": event.region.id, "content_id": event.content_id}
            )
            if decision["target_kind"] == RedirectTarget.SURROGATE.value:
                sessions.start(decision["surrogate_id"], event.content_id, event.t)
            label = topology.surrogate_pod(decision.get("surrogate_id")) \
                if decision["target_kind"] == RedirectTarget.SURROGATE.value else "origin"
            phase = _redirect_phase(provisioned, event.content_id)
            bucket = redirects.setdefault(event.region.id, {}).setdefault(phase, {})
            bucket[label] = bucket.get(label, 0) + 1

            trigger = topology.deployment_manager.observe(event)
            if trigger is None or result.status != "no-trigger":
                continue
            result = _provision(topology, trigger, result, correlation_id)
            if result.status == "ok":
                provisioned = result

        result.redirects = redirects
        result.open_sessions = sum(topology.controller.active_sessions().values())
        result.new_registrations = len(set(topology.registry_state()) - set(initial_registry))
        failures = topology.check_integrity()
        result.integrity = not failures
        result.integrity_failures = failures

        trace = topology.collector.events_for(correlation_id)
        if result.status != "no-trigger":
            _score_trace(topology, result, trace)
        if config.dispose_after and result.status == "ok":
            result.dispose_ok = _dispose_check(topology, result.component_id, initial_pods, initial_registry)
    except CdnError as e:
        logger.error(f"Run {run_index} aborted: {e}")
        result.status = "failed"
        result.error, result.error_message, result.error_details = e.code.value, e.message, e.details
    except Exception as e:
        logger.error(f"Run {run_index} crashed: {e}", exc_info=True)
        result.status = "failed"
        result.error, result.error_message = type(e).__name__, str(e)
    finally:
        topology.stop()
    return result, trace


def _provision(topology: Topology, trigger: FlashCrowdTrigger, result: RunResult, correlation_id: str) -> RunResult:
    result.trigger_region = trigger.region.id
    result.trigger_rate = trigger.rate
    controller = topology.handles["cdn-controller"]
    if topology.config.faults.controller_down:
        controller.stop()
    try:
        body = topology.client.post(
            topology.access("cdn-deployment-manager"),
            "/triggers",
            json=trigger.model_dump(mode="json"),
            correlation_id=correlation_id,
        )
        record = ProvisionRecord.model_validate(body)
        result.status = "ok"
        result.component_id = record.component_id
        result.type_id = record.type_id
        result.pod_id = record.pod_id
        result.placement = topology.controller.holdings(record.component_id)
    except CdnError as e:
        logger.error(f"Provisioning for {trigger.region.id} failed: {e.code.value}")
        result.status = "failed"
        result.error, result.error_message, result.error_details = e.code.value, e.message, e.details
    finally:
        if not controller.running:
            controller.start()
    return result


def _score_trace(topology: Topology, result: RunResult, trace: List[TraceEvent]) -> None:
    type_id = result.type_id or topology.config.component_type
    if type_id is None:
        type_id = topology.deployment_manager.select_type(
            [t.summary() for t in topology.repository.component_types()]
        ).type_id
    microservices = len(topology.repository.get_type(type_id).microservices)
    reference = provisioning_reference(microservices, content_pull=bool(result.placement), include_bookends=True)
    conformance = check_trace_order(trace, reference)
    result.conformance = conformance.verdict
    result.divergence_index = conformance.divergence_index
    if conformance.conformant:
        report = measure_latencies(trace, result.run_id)
        result.latency = report.samples[0]


def _dispose_check(topology: Topology, component_id: str, initial_pods: Dict, initial_registry: List[str]) -> bool:
    disposed = topology.deployment_manager.dispose_surrogate(component_id)
    try:
        topology.client.delete(topology.access("component-provider"), f"/CDNComponent/{component_id}")
        second_refused = False
    except CdnError as e:
        second_refused = e.code == ErrorCode.COMPONENT_NOT_FOUND
    restored = topology.pod_state() == initial_pods and topology.registry_state() == initial_registry
    logger.info(f"Dispose check for {component_id}: disposed={disposed} restored={restored} refused={second_refused}")
    return disposed and restored and second_refused


def run_scenario(
    config: ScenarioConfig,
    run_indices: Optional[Iterable[int]] = None,
    settings: Optional[Settings] = None,
) -> ScenarioReport:
    """
    Run the scenario config.runs times (or only the given run indices).

    Args:
        config: Scenario to replay
        run_indices: Subset of runs, 1-based; a run depends only on its own index
        settings: Runtime settings, loaded from the environment when omitted

    Returns:
        ScenarioReport with per-run results, traces and aggregate latencies
    """
    indices = list(run_indices) if run_indices is not None else list(range(1, config.runs + 1))
    report = ScenarioReport(scenario=config.name)
    for run_index in indices:
        started = time.monotonic()
        result, trace = run_once(config, run_index, settings)
        report.runs.append(result)
        report.traces[run_index] = trace
        logger.info(
            f"Run {run_index}/{len(indices)} of '{config.name}': {result.status}, "
            f"{result.conformance or 'no trace'} in {time.monotonic() - started:.2f}s"
        )
    report.latencies = aggregate_latencies([r.latency for r in report.runs if r.latency is not None])
    return report


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------

def _fmt(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.6f}"


def report_csv(report: ScenarioReport) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for run in report.runs:
        delays = [_fmt(getattr(run.latency, name)) if run.latency else "" for name in DELAY_FIELDS]
        writer.writerow([
            run.run_id,
            *delays,
            run.conformance or run.status.upper(),
            "PASS" if run.integrity else "FAIL",
        ])
    return buffer.getvalue()


def report_summary(report: ScenarioReport) -> str:
    rows = [
        [
            run.run_id,
            run.status,
            run.error or "",
            *[_fmt(getattr(run.latency, name)) if run.latency else "-" for name in DELAY_FIELDS],
            run.conformance or "-",
            "PASS" if run.integrity else "FAIL",
        ]
        for run in report.runs
    ]
    lines = [f"Scenario: {report.scenario}", f"Runs: {len(report.runs)}", ""]
    lines.append(tabulate(
        rows,
        headers=["run", "status", "error", "deployment (s)", "orchestration (s)", "provisioning (s)",
                 "trace", "integrity"],
        tablefmt="grid",
    ))
    if report.latencies is not None:
        aggregate = [
            [
                name,
                _fmt(report.latencies.mean[name]),
                _fmt(report.latencies.stddev[name]),
                _fmt(report.reference[name]["mean"]),
                _fmt(report.reference[name]["stddev"]),
            ]
            for name in DELAY_FIELDS
        ]
        lines += ["", tabulate(
            aggregate,
            headers=["delay", "mean (s)", "stddev (s)", "reference mean (s)", "reference stddev (s)"],
            tablefmt="grid",
        )]
    else:
        lines += ["", "No conformant provisioning run: no latency aggregate."]
    lines.append("")
    lines.append(f"Result: {'PASS' if report.passed else 'FAIL'}")
    return "\n".join(lines) + "\n"


def emit_report(
    report: ScenarioReport,
    out_dir: Union[str, Path],
    formats: Sequence[str] = ("csv", "summary", "json", "trace"),
) -> List[Path]:
    """
    Write report artefacts; identical reports produce identical bytes.

    Args:
        report: Scenario report
        out_dir: Output directory, created when missing
        formats: Any of csv, summary, json, trace

    Returns:
        Paths written
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "csv" in formats:
        written.append(_write(out / "report.csv", report_csv(report)))
    if "summary" in formats:
        written.append(_write(out / "summary.txt", report_summary(report)))
    if "json" in formats:
        written.append(_write(out / "report.json", report.model_dump_json(indent=2) + "\n"))
    if "trace" in formats:
        for run_id, events in sorted(report.traces.items()):
            written.append(write_trace_jsonl(out / f"trace-run-{run_id}.jsonl", events))
    logger.info(f"Wrote {len(written)} report file(s) to {out}")
    return written


def _write(path: Path, text: str) -> Path:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    return path
