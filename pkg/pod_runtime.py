"""
Simulated Point of Deployment: deployment agent (Int. D), instance backends, and the
origin media server surrogates pull content from.
"""
import logging
import threading
from abc import ABC, abstractmethod
from typing import Dict, Iterable, List, Optional

from fastapi import FastAPI, Header
from fastapi.responses import Response

from domain_model import (
    AccessInfo,
    ContentItem,
    DeploymentRequest,
    MicroserviceInstance,
    MicroservicePackage,
    PoDDescriptor,
    Region,
    content_blob,
    sha256_hex,
)
from errors import CdnError, ErrorCode, install_error_handler
from microservices import MICROSERVICE_FACTORIES, Microservice, StoredContent, content_response
from trace_collector import Tracer

logger = logging.getLogger(__name__)


class MediaServer:
    """Origin server: authoritative content bodies generated from each item's seed."""

    def __init__(self, items: Iterable[ContentItem] = (), tracer: Optional[Tracer] = None):
        self.items: Dict[str, ContentItem] = {item.content_id: item for item in items}
        self.tracer = tracer or Tracer("media-server")
        self._blobs: Dict[str, StoredContent] = {}
        self._lock = threading.Lock()

    def get_content(self, content_id: str) -> StoredContent:
        item = self.items.get(content_id)
        if item is None:
            raise CdnError(ErrorCode.CONTENT_NOT_FOUND, f"'{content_id}' not in the origin catalogue")
        with self._lock:
            stored = self._blobs.get(content_id)
            if stored is None:
                blob = content_blob(item)
                stored = StoredContent(blob=blob, sha256=sha256_hex(blob), duration_s=item.duration_s)
                self._blobs[content_id] = stored
        return stored

    def app(self) -> FastAPI:
        app = FastAPI(title="media-server")
        install_error_handler(app)

        @app.get("/health")
        def get_health() -> Dict:
            return {"status": "ok", "contents": len(self.items)}

        @app.get("/contents")
        def list_contents() -> List[Dict]:
            return [item.model_dump() for _, item in sorted(self.items.items())]

        @app.get("/contents/{content_id}")
        def get_content(content_id: str) -> Response:
            return content_response(content_id, self.get_content(content_id))

        return app


class InstanceBackend(ABC):
    """Turns a package's launch spec into a running microservice."""

    @abstractmethod
    def resolve(self, package: MicroservicePackage) -> None:
        """Raise PACKAGE_NOT_FOUND when the launch spec cannot be satisfied."""

    @abstractmethod
    def launch(self, instance_id: str, pod_id: str, package: MicroservicePackage, config: Dict,
               tracer: Tracer) -> Microservice:
        ...

    @abstractmethod
    def terminate(self, instance: Microservice) -> None:
        ...


class InProcessBackend(InstanceBackend):
    """Default backend: each instance is a pair of uvicorn servers in this process."""

    def __init__(self, host: str = "127.0.0.1"):
        self.host = host

    def resolve(self, package: MicroservicePackage) -> None:
        spec = package.launch_spec
        if spec.backend != "in-process" or spec.factory not in MICROSERVICE_FACTORIES:
            raise CdnError(
                ErrorCode.PACKAGE_NOT_FOUND,
                f"launch spec of '{package.package_id}' not resolvable in-process",
                {"package_id": package.package_id},
            )

    def launch(self, instance_id, pod_id, package, config, tracer) -> Microservice:
        factory = MICROSERVICE_FACTORIES[package.launch_spec.factory]
        return factory(instance_id, pod_id, config, tracer, self.host).start()

    def terminate(self, instance: Microservice) -> None:
        instance.stop()


class PodAgent:
    """Deployment agent of one PoD; deploy/undeploy are serialized."""

    def __init__(
        self,
        pod_id: str,
        region: Region,
        capacity_total: int,
        backend: Optional[InstanceBackend] = None,
        tracer: Optional[Tracer] = None,
    ):
        self.pod_id = pod_id
        self.region = region
        self.capacity_total = capacity_total
        self.capacity_free = capacity_total
        self.backend = backend or InProcessBackend()
        self.tracer = tracer or Tracer(f"pod-agent:{pod_id}")
        self.access: Optional[AccessInfo] = None
        self._instances: Dict[str, Microservice] = {}
        self._counter = 0
        self._lock = threading.Lock()

    def descriptor(self) -> PoDDescriptor:
        if self.access is None:
            raise RuntimeError(f"PoD agent {self.pod_id} has no access endpoint yet")
        with self._lock:
            free = self.capacity_free
        return PoDDescriptor(
            pod_id=self.pod_id,
            region=self.region,
            capacity_total=self.capacity_total,
            capacity_free=free,
            access=self.access,
        )

    def deploy_package(self, request: DeploymentRequest) -> MicroserviceInstance:
        """
        Int. D: start one instance of the requested package.

        Raises:
            CdnError(CAPACITY_EXHAUSTED) when no slot is free
            CdnError(PACKAGE_NOT_FOUND) when the backend cannot resolve the launch spec
        """
        package = request.package
        with self._lock:
            if self.capacity_free < 1:
                raise CdnError(ErrorCode.CAPACITY_EXHAUSTED, f"PoD {self.pod_id} has no free slot")
            self.backend.resolve(package)
            self._counter += 1
            instance_id = f"{self.pod_id}-{self._counter:04d}-{package.role.value}"
            config = {**request.config, "region": self.region.id, "correlation_id": request.correlation_id}
            instance = self.backend.launch(instance_id, self.pod_id, package, config, self.tracer)
            self._instances[instance_id] = instance
            self.capacity_free -= 1
        self.tracer.emit(f"pod:instance-started:{package.role.value}", request.correlation_id)
        logger.info(f"PoD {self.pod_id}: deployed {instance_id} ({package.package_id} {package.version})")
        return instance.instance()

    def undeploy(self, instance_id: str) -> Dict:
        with self._lock:
            instance = self._instances.pop(instance_id, None)
            if instance is None:
                raise CdnError(ErrorCode.INSTANCE_NOT_FOUND, f"no instance '{instance_id}' on PoD {self.pod_id}")
            self.backend.terminate(instance)
            self.capacity_free += 1
        logger.info(f"PoD {self.pod_id}: undeployed {instance_id}")
        return {"ack": True, "instance_id": instance_id}

    def get_instance(self, instance_id: str) -> Microservice:
        with self._lock:
            instance = self._instances.get(instance_id)
        if instance is None:
            raise CdnError(ErrorCode.INSTANCE_NOT_FOUND, f"no instance '{instance_id}' on PoD {self.pod_id}")
        return instance

    def list_instances(self) -> List[MicroserviceInstance]:
        with self._lock:
            return [self._instances[k].instance() for k in sorted(self._instances)]

    def shutdown(self) -> None:
        with self._lock:
            for instance_id in sorted(self._instances):
                try:
                    self.backend.terminate(self._instances[instance_id])
                except Exception as e:
                    logger.warning(f"PoD {self.pod_id}: failed to stop {instance_id}: {e}")
            self.capacity_free += len(self._instances)
            self._instances.clear()

    def app(self) -> FastAPI:
        app = FastAPI(title=f"pod-agent-{self.pod_id}")
        install_error_handler(app)

        @app.post("/deployments")
        def post_deployment(request: DeploymentRequest, x_correlation_id: Optional[str] = Header(None)) -> Dict:
            if x_correlation_id and request.correlation_id == "unset":
                request = request.model_copy(update={"correlation_id": x_correlation_id})
            return self.deploy_package(request).model_dump(mode="json")

        @app.delete("/deployments/{instance_id}")
        def delete_deployment(instance_id: str) -> Dict:
            return self.undeploy(instance_id)

        @app.get("/deployments")
        def get_deployments() -> List[Dict]:
            return [i.model_dump(mode="json") for i in self.list_instances()]

        @app.get("/pod")
        def get_pod() -> Dict:
            return self.descriptor().model_dump(mode="json")

        @app.get("/health")
        def get_health() -> Dict:
            return {"status": "ok", "pod_id": self.pod_id}

        return app
