"""
CDN component provider domain: component repository, microservice deployer and the
CDN component deployment manager exposing the catalogue/provision/dispose REST API.
"""
import itertools
import json
import logging
import threading
import time
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union

from fastapi import FastAPI, Header
from fastapi.responses import JSONResponse

from domain_model import (
    F4,
    AccessInfo,
    CatalogueEntry,
    CdnComponentType,
    DeploymentRequest,
    MicroserviceInstance,
    MicroservicePackage,
    MicroserviceSpec,
    ProvisionRecord,
    ProvisionRequestBody,
    ProvisionStatus,
    ValidationReport,
    validate_catalogue,
)
from errors import CdnError, ErrorCode, install_error_handler
from service_client import ServiceClient
from trace_collector import Tracer
from workflow_engine import MicroserviceOrchestrator

logger = logging.getLogger(__name__)


class ComponentRepository:
    """Microservice packages (the VNFs) and the component types built from them."""

    def __init__(self, packages: Iterable[MicroservicePackage] = (), component_types: Iterable[CdnComponentType] = ()):
        self._lock = threading.Lock()
        self._packages: Dict[str, MicroservicePackage] = {}
        self._types: Dict[str, CdnComponentType] = {}
        for package in packages:
            self.register_package(package)
        for component_type in component_types:
            self.register_type(component_type)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "ComponentRepository":
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
        repository = cls(
            packages=[MicroservicePackage.model_validate(p) for p in raw.get("packages", [])],
            component_types=[CdnComponentType.model_validate(t) for t in raw.get("component_types", [])],
        )
        logger.info(
            f"Loaded component repository from {path}: "
            f"{len(repository.package_ids())} package(s), {len(repository.component_types())} type(s)"
        )
        return repository

    def register_package(self, package: MicroservicePackage) -> None:
        with self._lock:
            if package.package_id in self._packages:
                raise CdnError(ErrorCode.INVALID_REQUEST, f"package '{package.package_id}' already registered")
            self._packages[package.package_id] = package

    def register_type(self, component_type: CdnComponentType, replace: bool = False) -> None:
        """Admin-time catalogue mutation."""
        with self._lock:
            if component_type.type_id in self._types and not replace:
                raise CdnError(ErrorCode.INVALID_REQUEST, f"component type '{component_type.type_id}' already registered")
            self._types[component_type.type_id] = component_type

    def fetch_package(self, package_id: str) -> MicroservicePackage:
        with self._lock:
            package = self._packages.get(package_id)
        if package is None:
            raise CdnError(ErrorCode.PACKAGE_NOT_FOUND, f"no package '{package_id}'", {"package_id": package_id})
        return package

    def get_type(self, type_id: str) -> CdnComponentType:
        with self._lock:
            component_type = self._types.get(type_id)
        if component_type is None:
            raise CdnError(ErrorCode.UNKNOWN_COMPONENT_TYPE, f"no component type '{type_id}'", {"type_id": type_id})
        return component_type

    def component_types(self) -> List[CdnComponentType]:
        with self._lock:
            return list(self._types.values())

    def package_ids(self) -> List[str]:
        with self._lock:
            return sorted(self._packages)

    def validate(self, plan_ids: Iterable[str]) -> ValidationReport:
        return validate_catalogue(self.component_types(), self.package_ids(), plan_ids)


class MicroserviceDeployer:
    """Fetches packages (Int. C) and deploys them on a PoD agent (Int. D)."""

    def __init__(self, repository: ComponentRepository, client: Optional[ServiceClient] = None,
                 tracer: Optional[Tracer] = None):
        self.repository = repository
        self.client = client or ServiceClient("microservice-deployer", timeout_s=30.0)
        self.tracer = tracer or Tracer("microservice-deployer")

    def fetch_package(self, package_id: str, correlation_id: Optional[str] = None) -> MicroservicePackage:
        self.tracer.emit(F4[6], correlation_id)
        package = self.repository.fetch_package(package_id)
        self.tracer.emit(F4[7], correlation_id)
        return package

    def deploy_microservices(
        self,
        specs: List[MicroserviceSpec],
        pod_access: AccessInfo,
        correlation_id: Optional[str] = None,
        extra_config: Optional[Dict[str, Any]] = None,
    ) -> List[MicroserviceInstance]:
        """
        Deploy one instance per spec, sequentially in spec order.

        Args:
            specs: Decomposition of the requested component
            pod_access: Access information of the selected PoD's deployment agent
            correlation_id: Provisioning-run id
            extra_config: Config merged into every instance (component id, ...)

        Returns:
            Deployed instances with their control/data access information

        Raises:
            CdnError(PACKAGE_NOT_FOUND | POD_UNREACHABLE) before anything was deployed,
            CdnError(DEPLOYMENT_FAILED) otherwise, listing the instances that did deploy
        """
        deployed: List[MicroserviceInstance] = []
        for spec in specs:
            try:
                package = self.fetch_package(spec.package_id, correlation_id)
                request = DeploymentRequest(
                    package=package,
                    config={**spec.config, **(extra_config or {})},
                    correlation_id=correlation_id or "unset",
                )
                self.tracer.emit(F4[8], correlation_id)
                body = self.client.post(
                    pod_access,
                    "/deployments",
                    json=request.model_dump(mode="json"),
                    correlation_id=correlation_id,
                    unreachable=ErrorCode.POD_UNREACHABLE,
                )
            except CdnError as e:
                if not deployed and e.code in (ErrorCode.PACKAGE_NOT_FOUND, ErrorCode.POD_UNREACHABLE):
                    raise
                logger.error(f"Deployment of {spec.package_id} failed after {len(deployed)} instance(s): {e.code.value}")
                raise CdnError(
                    ErrorCode.DEPLOYMENT_FAILED,
                    f"deployment of '{spec.package_id}' failed: {e.message}",
                    {
                        "cause": e.code.value,
                        "package_id": spec.package_id,
                        "deployed": [i.model_dump(mode="json") for i in deployed],
                    },
                )
            deployed.append(MicroserviceInstance.model_validate(body))
        return deployed

    def undeploy(self, pod_access: AccessInfo, instance_id: str, correlation_id: Optional[str] = None) -> None:
        self.client.delete(
            pod_access,
            f"/deployments/{instance_id}",
            correlation_id=correlation_id,
            unreachable=ErrorCode.POD_UNREACHABLE,
        )


class ComponentDeploymentManager:
    """Decomposes provisioning orders and drives deployment then orchestration."""

    def __init__(
        self,
        repository: ComponentRepository,
        deployer: MicroserviceDeployer,
        orchestrator: MicroserviceOrchestrator,
        tracer: Optional[Tracer] = None,
        provision_timeout_s: float = 60.0,
    ):
        self.repository = repository
        self.deployer = deployer
        self.orchestrator = orchestrator
        self.tracer = tracer or Tracer("cdn-component-deployment-manager")
        self.provision_timeout_s = provision_timeout_s
        self._records: Dict[str, ProvisionRecord] = {}
        self._pods: Dict[str, AccessInfo] = {}
        self.status_log: Dict[str, List[ProvisionStatus]] = {}
        self._ids = itertools.count(1)
        self._lock = threading.Lock()

    # -- catalogue -----------------------------------------------------------------

    def get_catalogue(self) -> List[CatalogueEntry]:
        return [t.summary() for t in self.repository.component_types()]

    def decompose(self, type_id: str) -> Tuple[List[MicroserviceSpec], str]:
        component_type = self.repository.get_type(type_id)
        return list(component_type.microservices), component_type.plan_id

    # -- records -------------------------------------------------------------------

    def _store(self, record: ProvisionRecord) -> ProvisionRecord:
        with self._lock:
            self._records[record.component_id] = record
            self.status_log.setdefault(record.component_id, []).append(record.status)
        return record

    def get_record(self, component_id: str) -> ProvisionRecord:
        with self._lock:
            record = self._records.get(component_id)
        if record is None:
            raise CdnError(ErrorCode.COMPONENT_NOT_FOUND, f"no component '{component_id}'")
        return record

    def active_records(self) -> List[ProvisionRecord]:
        with self._lock:
            return [
                r for _, r in sorted(self._records.items())
                if r.status not in (ProvisionStatus.DISPOSED, ProvisionStatus.FAILED)
            ]

    # -- provisioning --------------------------------------------------------------

    def provision_component(
        self,
        type_id: str,
        pod_access: AccessInfo,
        correlation_id: Optional[str] = None,
    ) -> ProvisionRecord:
        """
        Provision a component of the given type on a PoD; blocks until provisioned.

        Returns:
            ProvisionRecord in status provisioned

        Raises:
            CdnError(UNKNOWN_COMPONENT_TYPE) before any PoD contact; POD_UNREACHABLE,
            PACKAGE_NOT_FOUND, DEPLOYMENT_FAILED, ORCHESTRATION_STEP_FAILED or
            PROVISIONING_TIMEOUT after best-effort cleanup
        """
        specs, plan_id = self.decompose(type_id)
        started = time.monotonic()
        component_id = f"comp-{next(self._ids):04d}"
        correlation_id = correlation_id or component_id
        with self._lock:
            self._pods[component_id] = pod_access
        record = self._store(ProvisionRecord(
            component_id=component_id,
            type_id=type_id,
            pod_id=pod_access.endpoint,
            timestamps={ProvisionStatus.DEPLOYING.value: time.monotonic_ns()},
        ))
        logger.info(f"Provisioning {component_id} ({type_id}) on {pod_access.endpoint} [{correlation_id}]")

        try:
            self.tracer.emit(F4[5], correlation_id)
            instances = self.deployer.deploy_microservices(
                specs, pod_access, correlation_id, extra_config={"component_id": component_id}
            )
            self.tracer.emit(F4[9], correlation_id)
            pod_id = instances[0].pod_id if instances else record.pod_id
            record = self._store(record.advance(
                ProvisionStatus.DEPLOYED, time.monotonic_ns(), instances=instances, pod_id=pod_id
            ))
            self._check_deadline(started, component_id)

            self.tracer.emit(F4[10], correlation_id)
            record = self._store(record.advance(ProvisionStatus.ORCHESTRATING, time.monotonic_ns()))
            execution = self.orchestrator.orchestrate(record, plan_id, correlation_id)
            self.tracer.emit(F4[14], correlation_id)
            self._check_deadline(started, component_id)
            record = self._store(record.advance(
                ProvisionStatus.PROVISIONED, time.monotonic_ns(), instances=execution.record.instances
            ))
        except CdnError as e:
            self._fail(record, e, correlation_id)
            raise

        self.tracer.emit(F4[15], correlation_id)
        logger.info(f"✅ {component_id} provisioned with {len(record.instances)} microservice(s)")
        return record

    def _check_deadline(self, started: float, component_id: str) -> None:
        elapsed = time.monotonic() - started
        if elapsed > self.provision_timeout_s:
            raise CdnError(
                ErrorCode.PROVISIONING_TIMEOUT,
                f"{component_id} exceeded {self.provision_timeout_s}s",
                {"elapsed_s": elapsed},
            )

    def _fail(self, record: ProvisionRecord, error: CdnError, correlation_id: Optional[str]) -> None:
        instances = list(record.instances)
        for raw in error.details.get("deployed", []):
            instance = MicroserviceInstance.model_validate(raw)
            if all(i.instance_id != instance.instance_id for i in instances):
                instances.append(instance)
        pod_access = self._pods.get(record.component_id)
        for instance in instances:
            try:
                self.deployer.undeploy(pod_access, instance.instance_id, correlation_id)
            except CdnError as e:
                logger.warning(f"Cleanup of {instance.instance_id} failed: {e.code.value}")
        self._store(record.advance(ProvisionStatus.FAILED, time.monotonic_ns()))
        logger.error(f"❌ {record.component_id} failed: {error.code.value} ({len(instances)} instance(s) cleaned up)")

    def dispose_component(self, component_id: str, correlation_id: Optional[str] = None) -> bool:
        """
        Undeploy every instance of a component.

        Returns:
            True when all instances were undeployed (record becomes disposed)

        Raises:
            CdnError(COMPONENT_NOT_FOUND) for unknown or already disposed components
        """
        with self._lock:
            record = self._records.get(component_id)
            pod_access = self._pods.get(component_id)
        if record is None or record.status == ProvisionStatus.DISPOSED:
            raise CdnError(ErrorCode.COMPONENT_NOT_FOUND, f"no live component '{component_id}'")

        remaining = []
        for instance in record.instances:
            try:
                self.deployer.undeploy(pod_access, instance.instance_id, correlation_id)
            except CdnError as e:
                if e.code != ErrorCode.INSTANCE_NOT_FOUND:
                    logger.error(f"Dispose of {component_id}: {instance.instance_id} not undeployed ({e.code.value})")
                    remaining.append(instance)
        if remaining:
            return False

        undeployed = [i.transition("undeployed") for i in record.instances]
        self._store(record.advance(ProvisionStatus.DISPOSED, time.monotonic_ns(), instances=undeployed))
        logger.info(f"Disposed {component_id}")
        return True


def create_component_provider_app(manager: ComponentDeploymentManager) -> FastAPI:
    app = FastAPI(title="cdn-component-provider")
    install_error_handler(app)

    @app.get("/CDNComponentCatalogue")
    def get_catalogue() -> List[Dict]:
        return [entry.model_dump(mode="json") for entry in manager.get_catalogue()]

    @app.post("/CDNComponent/{CDNComponentTypeID}")
    def post_component(CDNComponentTypeID: str, body: ProvisionRequestBody,
                       x_correlation_id: Optional[str] = Header(None)) -> Dict:
        record = manager.provision_component(CDNComponentTypeID, body.pod_access, x_correlation_id)
        return {"cdn_component_id": record.component_id}

    @app.delete("/CDNComponent/{CDNComponentID}")
    def delete_component(CDNComponentID: str, x_correlation_id: Optional[str] = Header(None)):
        try:
            success = manager.dispose_component(CDNComponentID, x_correlation_id)
        except CdnError as e:
            return JSONResponse(status_code=e.http_status, content={"success": False, **e.to_body()})
        return {"success": success}

    @app.get("/CDNComponent/{CDNComponentID}")
    def get_component(CDNComponentID: str) -> Dict:
        return manager.get_record(CDNComponentID).model_dump(mode="json")

    return app
