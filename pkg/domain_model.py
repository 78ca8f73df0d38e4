"""
Shared domain types and wire schemas for every interface of the provisioning system.

All control messages are UTF-8 JSON with the snake_case field names declared here.
Value objects are frozen pydantic models; state changes return new copies.
"""
import hashlib
import logging
import re
from enum import Enum
from typing import Any, Dict, FrozenSet, Iterable, List, Optional, Sequence, Set, Tuple
from urllib.parse import urlsplit

from pydantic import BaseModel, ConfigDict, Field, field_serializer, field_validator, model_validator

from errors import CdnError, ErrorCode

logger = logging.getLogger(__name__)

SEMVER_PATTERN = re.compile(r"^\d+\.\d+\.\d+(?:-[0-9A-Za-z.-]+)?(?:\+[0-9A-Za-z.-]+)?$")

# Canonical action labels: F4 numbers the provisioning sequence, F5 the
# post-provisioning one. Recorded traces are audited against them action by action.
F4 = {
    1: "F4.1-select-pod",
    2: "F4.2-catalogue-request",
    3: "F4.3-catalogue-response",
    4: "F4.4-provision-request",
    5: "F4.5-deploy-request",
    6: "F4.6-package-fetch",
    7: "F4.7-package-received",
    8: "F4.8-deploy-on-pod",
    9: "F4.9-deploy-ack",
    10: "F4.10-orchestrate-request",
    11: "F4.11-plan-fetch",
    12: "F4.12-plan-received",
    13: "F4.13-orchestrate",
    14: "F4.14-orchestrate-ack",
    15: "F4.15-provision-ack",
    16: "F4.16-post-deployment",
}

F5 = {
    1: "F5.1-controller-access",
    2: "F5.2-register-request",
    3: "F5.3-content-placement",
    4: "F5.4-placement-response",
    5: "F5.5-content-pull-request",
    6: "F5.6-content-received",
    7: "F5.7-notify-ready",
}


class ValueModel(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


# ---------------------------------------------------------------------------
# Core types
# ---------------------------------------------------------------------------

class Region(ValueModel):
    id: str
    display_name: str = ""

    @field_validator("id")
    @classmethod
    def _normalize_id(cls, value: str) -> str:
        value = value.strip().lower()
        if not value:
            raise ValueError("region id must be non-empty")
        return value


class AccessInfo(ValueModel):
    endpoint: str
    credential: str = ""

    @field_validator("endpoint")
    @classmethod
    def _check_endpoint(cls, value: str) -> str:
        parts = urlsplit(value)
        if parts.scheme not in ("http", "https") or not parts.hostname:
            raise ValueError(f"endpoint must be an http(s) URI with a host: '{value}'")
        try:
            port = parts.port
        except ValueError:
            raise ValueError(f"endpoint port is not a number: '{value}'")
        if port is None or not 1 <= port <= 65535:
            raise ValueError(f"endpoint needs an explicit port in [1, 65535]: '{value}'")
        return value.rstrip("/")

    @classmethod
    def local(cls, host: str, port: int, base_path: str = "", credential: str = "") -> "AccessInfo":
        return cls(endpoint=f"http://{host}:{port}{base_path}", credential=credential)

    @property
    def host(self) -> str:
        return urlsplit(self.endpoint).hostname

    @property
    def port(self) -> int:
        return urlsplit(self.endpoint).port

    @property
    def base_path(self) -> str:
        return urlsplit(self.endpoint).path

    def url(self, path: str = "") -> str:
        if not path:
            return self.endpoint
        return f"{self.endpoint}/{path.lstrip('/')}"


class PoDDescriptor(ValueModel):
    pod_id: str
    region: Region
    capacity_total: int = Field(ge=0)
    capacity_free: int = Field(ge=0)
    access: AccessInfo

    @model_validator(mode="after")
    def _check_capacity(self) -> "PoDDescriptor":
        if self.capacity_free > self.capacity_total:
            raise ValueError("capacity_free cannot exceed capacity_total")
        return self


class MicroserviceRole(str, Enum):
    CACHE_NODE = "cache-node"
    ABR_STREAMING_SERVER = "abr-streaming-server"
    EXTENSIBLE = "extensible"


class MicroserviceSpec(ValueModel):
    role: MicroserviceRole
    package_id: str
    config: Dict[str, Any] = Field(default_factory=dict)


class LaunchSpec(ValueModel):
    """Backend-neutral launch descriptor: a factory name in-process, an image reference otherwise."""

    backend: str = "in-process"
    factory: Optional[str] = None
    image: Optional[str] = None

    @model_validator(mode="after")
    def _check_target(self) -> "LaunchSpec":
        if self.backend == "in-process" and not self.factory:
            raise ValueError("in-process launch spec needs a factory name")
        if self.backend != "in-process" and not self.image:
            raise ValueError("external launch spec needs an image reference")
        return self


class EndpointSpec(ValueModel):
    """Exactly one control interface and one data interface per microservice."""

    control_path: str = ""
    data_path: str = ""


class MicroservicePackage(ValueModel):
    package_id: str
    role: MicroserviceRole
    version: str
    launch_spec: LaunchSpec
    endpoint_spec: EndpointSpec = Field(default_factory=EndpointSpec)

    @field_validator("version")
    @classmethod
    def _check_semver(cls, value: str) -> str:
        if not SEMVER_PATTERN.match(value):
            raise ValueError(f"version is not semver: '{value}'")
        return value


class CdnComponentType(ValueModel):
    type_id: str
    name: str
    features: FrozenSet[str]
    microservices: List[MicroserviceSpec] = Field(min_length=1)
    plan_id: str

    @field_serializer("features")
    def _sorted_features(self, features: FrozenSet[str]) -> List[str]:
        return sorted(features)

    def summary(self) -> "CatalogueEntry":
        return CatalogueEntry(type_id=self.type_id, name=self.name, features=self.features)


class CatalogueEntry(ValueModel):
    """Public catalogue view; the decomposition stays inside the component provider."""

    type_id: str
    name: str
    features: FrozenSet[str]

    @field_serializer("features")
    def _sorted_features(self, features: FrozenSet[str]) -> List[str]:
        return sorted(features)


class InstanceState(str, Enum):
    DEPLOYED = "deployed"
    ORCHESTRATED = "orchestrated"
    FAILED = "failed"
    UNDEPLOYED = "undeployed"


INSTANCE_TRANSITIONS: Dict[InstanceState, Set[InstanceState]] = {
    InstanceState.DEPLOYED: {InstanceState.ORCHESTRATED, InstanceState.FAILED, InstanceState.UNDEPLOYED},
    InstanceState.ORCHESTRATED: {InstanceState.FAILED, InstanceState.UNDEPLOYED},
    InstanceState.FAILED: {InstanceState.UNDEPLOYED},
    InstanceState.UNDEPLOYED: {InstanceState.UNDEPLOYED},
}


class MicroserviceInstance(ValueModel):
    instance_id: str
    role: MicroserviceRole
    control_access: AccessInfo
    data_access: AccessInfo
    pod_id: str
    state: InstanceState = InstanceState.DEPLOYED

    def transition(self, new_state: InstanceState) -> "MicroserviceInstance":
        new_state = InstanceState(new_state)
        if new_state not in INSTANCE_TRANSITIONS[self.state]:
            raise ValueError(f"instance {self.instance_id}: illegal transition {self.state.value} -> {new_state.value}")
        return self.model_copy(update={"state": new_state})

    def peer_info(self) -> "PeerInfo":
        return PeerInfo(
            instance_id=self.instance_id,
            role=self.role,
            control_access=self.control_access,
            data_access=self.data_access,
        )


class PeerInfo(ValueModel):
    """One entry of the Int. G peer table body."""

    instance_id: str
    role: MicroserviceRole
    control_access: AccessInfo
    data_access: AccessInfo


class ProvisionStatus(str, Enum):
    DEPLOYING = "deploying"
    DEPLOYED = "deployed"
    ORCHESTRATING = "orchestrating"
    PROVISIONED = "provisioned"
    REGISTERED = "registered"
    DISPOSED = "disposed"
    FAILED = "failed"


PROVISION_TRANSITIONS: Dict[ProvisionStatus, Set[ProvisionStatus]] = {
    ProvisionStatus.DEPLOYING: {ProvisionStatus.DEPLOYED, ProvisionStatus.FAILED},
    ProvisionStatus.DEPLOYED: {ProvisionStatus.ORCHESTRATING, ProvisionStatus.FAILED, ProvisionStatus.DISPOSED},
    ProvisionStatus.ORCHESTRATING: {ProvisionStatus.PROVISIONED, ProvisionStatus.FAILED},
    ProvisionStatus.PROVISIONED: {ProvisionStatus.REGISTERED, ProvisionStatus.DISPOSED, ProvisionStatus.FAILED},
    ProvisionStatus.REGISTERED: {ProvisionStatus.DISPOSED},
    ProvisionStatus.FAILED: {ProvisionStatus.DISPOSED},
    ProvisionStatus.DISPOSED: set(),
}


def is_valid_status_walk(statuses: Sequence[ProvisionStatus]) -> bool:
    """True when every consecutive pair is an edge of the provisioning transition graph."""
    if not statuses:
        return True
    if ProvisionStatus(statuses[0]) != ProvisionStatus.DEPLOYING:
        return False
    return all(
        ProvisionStatus(b) in PROVISION_TRANSITIONS[ProvisionStatus(a)]
        for a, b in zip(statuses, statuses[1:])
    )


class ProvisionRecord(ValueModel):
    component_id: str
    type_id: str
    pod_id: str
    instances: List[MicroserviceInstance] = Field(default_factory=list)
    status: ProvisionStatus = ProvisionStatus.DEPLOYING
    timestamps: Dict[str, int] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_provisioned(self) -> "ProvisionRecord":
        if self.status == ProvisionStatus.PROVISIONED:
            lagging = [i.instance_id for i in self.instances if i.state != InstanceState.ORCHESTRATED]
            if lagging:
                raise ValueError(f"provisioned record has non-orchestrated instances: {lagging}")
        return self

    def advance(self, status: ProvisionStatus, t_ns: int, **updates) -> "ProvisionRecord":
        """Move to the next status, stamping the time; illegal edges raise ValueError."""
        status = ProvisionStatus(status)
        if status not in PROVISION_TRANSITIONS[self.status]:
            raise ValueError(f"record {self.component_id}: illegal transition {self.status.value} -> {status.value}")
        latest = max(self.timestamps.values(), default=t_ns)
        stamps = dict(self.timestamps)
        stamps[status.value] = max(t_ns, latest)
        data = {
            "component_id": self.component_id,
            "type_id": self.type_id,
            "pod_id": self.pod_id,
            "instances": self.instances,
            "status": status,
            "timestamps": stamps,
        }
        data.update(updates)
        return ProvisionRecord.model_validate(data)


class StepKind(str, Enum):
    COLLECT_ACCESS_INFO = "collect-access-info"
    DISTRIBUTE_PEER_INFO = "distribute-peer-info"
    VERIFY_HEALTH = "verify-health"
    NOTIFY_COMPLETE = "notify-complete"


class WorkflowStep(ValueModel):
    kind: StepKind
    target_role: Optional[MicroserviceRole] = None
    retry_limit: int = Field(default=3, ge=0)
    timeout: int = Field(default=5000, gt=0)


class OrchestrationPlan(ValueModel):
    plan_id: str
    steps: List[WorkflowStep] = Field(default_factory=list)


class ContentItem(ValueModel):
    content_id: str
    size_bytes: int = Field(ge=0)
    duration_s: float = Field(default=0.0, ge=0)
    blob_seed: int = Field(default=0, ge=0, lt=2 ** 64)


class ContentPlacement(ValueModel):
    surrogate_id: str
    contents: List[str] = Field(default_factory=list)
    media_server: AccessInfo


class RequestEvent(ValueModel):
    """One end-user request as seen by the CDN provider."""

    region: Region
    content_id: str
    t: int


class TraceEvent(ValueModel):
    seq: int = 0
    actor: str
    action: str
    t: int
    correlation_id: str = Field(min_length=1)


# ---------------------------------------------------------------------------
# Wire schemas shared by the CDN provider, component provider and PoD runtime
# ---------------------------------------------------------------------------

class ProvisionOrder(ValueModel):
    order_id: str
    type_id: str
    pod_access: AccessInfo
    correlation_id: str


class ProvisionRequestBody(ValueModel):
    pod_access: AccessInfo


class DeploymentRequest(ValueModel):
    package: MicroservicePackage
    config: Dict[str, Any] = Field(default_factory=dict)
    correlation_id: str = "unset"


class FlashCrowdTrigger(ValueModel):
    region: Region
    top_contents: List[Tuple[str, int]] = Field(default_factory=list)
    window: Tuple[int, int]
    rate: float

    @field_validator("top_contents")
    @classmethod
    def _check_sorted(cls, value: List[Tuple[str, int]]) -> List[Tuple[str, int]]:
        counts = [count for _, count in value]
        if counts != sorted(counts, reverse=True):
            raise ValueError("top_contents must be sorted by descending request count")
        return value


class SurrogateRegistration(ValueModel):
    surrogate_id: str
    region: Region
    control_access: AccessInfo
    data_access: AccessInfo
    ready: bool = False


class RedirectTarget(str, Enum):
    SURROGATE = "surrogate"
    ORIGIN = "origin"


class RedirectDecision(ValueModel):
    target: AccessInfo
    target_kind: RedirectTarget
    surrogate_id: Optional[str] = None


class PullReport(ValueModel):
    fetched: List[str] = Field(default_factory=list)
    failed: List[str] = Field(default_factory=list)


class ReadyNotice(ValueModel):
    contents: Optional[List[str]] = None


class Representation(ValueModel):
    rep_id: str
    bitrate_bps: int = Field(gt=0)
    segment_count: int = Field(ge=0)


class AbrManifest(ValueModel):
    content_id: str
    duration_s: float
    segment_duration_s: float = 4.0
    representations: List[Representation]
    segment_durations: List[float]
    segment_template: str = "/contents/{content_id}/reps/{rep_id}/segments/{n}"


DELAY_TOLERANCE_S = 1e-9


def _check_delay_nesting(deployment: float, orchestration: float, provisioning: float) -> None:
    # provisioning spans both deployment and orchestration
    if provisioning + DELAY_TOLERANCE_S < deployment + orchestration:
        raise ValueError(
            f"provisioning_delay {provisioning:.6f}s is shorter than deployment {deployment:.6f}s"
            f" plus orchestration {orchestration:.6f}s"
        )


class LatencySample(ValueModel):
    run_id: int = 0
    deployment_delay: float = Field(ge=0)
    orchestration_delay: float = Field(ge=0)
    provisioning_delay: float = Field(ge=0)

    @model_validator(mode="after")
    def _check_nesting(self) -> "LatencySample":
        _check_delay_nesting(self.deployment_delay, self.orchestration_delay, self.provisioning_delay)
        return self


REFERENCE_LATENCIES = {
    "deployment_delay": {"mean": 6.03, "stddev": 0.22},
    "orchestration_delay": {"mean": 7.97, "stddev": 1.08},
    "provisioning_delay": {"mean": 19.85, "stddev": 1.18},
}


class LatencyReport(ValueModel):
    deployment_delay: float = Field(ge=0)
    orchestration_delay: float = Field(ge=0)
    provisioning_delay: float = Field(ge=0)
    samples: List[LatencySample] = Field(default_factory=list)
    mean: Dict[str, float] = Field(default_factory=dict)
    stddev: Dict[str, float] = Field(default_factory=dict)
    reference: Dict[str, Dict[str, float]] = Field(default_factory=lambda: dict(REFERENCE_LATENCIES))

    @model_validator(mode="after")
    def _check_nesting(self) -> "LatencyReport":
        _check_delay_nesting(self.deployment_delay, self.orchestration_delay, self.provisioning_delay)
        return self


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

class ValidationIssue(ValueModel):
    kind: str  # dangling-package | dangling-plan | duplicate-type
    type_id: str
    ref: str


class ValidationReport(ValueModel):
    issues: List[ValidationIssue] = Field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.issues


def validate_catalogue(
    catalogue: Iterable[CdnComponentType],
    package_ids: Iterable[str],
    plan_ids: Iterable[str],
) -> ValidationReport:
    """
    Cross-check catalogue entries against the component and workflow repositories.

    Args:
        catalogue: Component types to check
        package_ids: Ids held by the component repository
        plan_ids: Ids held by the workflow repository

    Returns:
        ValidationReport listing dangling package/plan references and duplicate type ids
    """
    packages = set(package_ids)
    plans = set(plan_ids)
    seen: Set[str] = set()
    issues: List[ValidationIssue] = []
    for component_type in catalogue:
        if component_type.type_id in seen:
            issues.append(ValidationIssue(kind="duplicate-type", type_id=component_type.type_id, ref=component_type.type_id))
        seen.add(component_type.type_id)
        for spec in component_type.microservices:
            if spec.package_id not in packages:
                issues.append(ValidationIssue(kind="dangling-package", type_id=component_type.type_id, ref=spec.package_id))
        if component_type.plan_id not in plans:
            issues.append(ValidationIssue(kind="dangling-plan", type_id=component_type.type_id, ref=component_type.plan_id))
    if issues:
        logger.warning(f"Catalogue validation found {len(issues)} issue(s)")
    return ValidationReport(issues=issues)


class TraceConformance(ValueModel):
    conformant: bool
    divergence_index: Optional[int] = None
    observed: List[str] = Field(default_factory=list)

    @property
    def verdict(self) -> str:
        return "CONFORMANT" if self.conformant else f"DIVERGED@{self.divergence_index}"


def check_trace_order(trace: Sequence[TraceEvent], reference: Sequence[str]) -> TraceConformance:
    """
    Compare the reference-labelled subsequence of a single-run trace with the reference.

    Events are taken in collector sequence order. Divergence is reported as the index in
    the reference where the observed subsequence first differs (len(reference) when the
    trace carries extra reference-labelled events).
    """
    labels = set(reference)
    observed = [event.action for event in sorted(trace, key=lambda e: e.seq) if event.action in labels]
    for index, expected in enumerate(reference):
        if index >= len(observed) or observed[index] != expected:
            return TraceConformance(conformant=False, divergence_index=index, observed=observed)
    if len(observed) > len(reference):
        return TraceConformance(conformant=False, divergence_index=len(reference), observed=observed)
    return TraceConformance(conformant=True, observed=observed)


def provisioning_reference(
    microservice_count: int = 2,
    content_pull: bool = True,
    include_bookends: bool = False,
) -> List[str]:
    """
    Expected action labels of one provisioning run.

    F4 actions 6-8 repeat once per microservice; F5 actions 5-6 only appear when the
    placement names content.
    """
    labels = [F4[1]] if include_bookends else []
    labels += [F4[2], F4[3], F4[4], F4[5]]
    for _ in range(microservice_count):
        labels += [F4[6], F4[7], F4[8]]
    labels += [F4[9], F4[10], F4[11], F4[12], F4[13], F4[14], F4[15]]
    if include_bookends:
        labels.append(F4[16])
    labels += [F5[1], F5[2], F5[3], F5[4]]
    if content_pull:
        labels += [F5[5], F5[6]]
    labels.append(F5[7])
    return labels


def content_blob(item: ContentItem) -> bytes:
    """Deterministic pseudo-random body of a content item, identical on every host."""
    if item.size_bytes <= 0:
        raise CdnError(ErrorCode.INVALID_CONTENT, f"content '{item.content_id}' has no bytes")
    return hashlib.shake_256(item.blob_seed.to_bytes(8, "big")).digest(item.size_bytes)


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
