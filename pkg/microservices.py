"""
Surrogate microservices: the cache node and the ABR streaming server.

Each instance exposes one control interface (peers, health, registration) and one
data interface (content exchange), each served on its own loopback port.
"""
import logging
import threading
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Type

from fastapi import FastAPI, Header
from fastapi.responses import Response

import abr
from domain_model import (
    F5,
    AbrManifest,
    AccessInfo,
    ContentPlacement,
    InstanceState,
    MicroserviceInstance,
    MicroserviceRole,
    PeerInfo,
    PullReport,
    ReadyNotice,
    Region,
    SurrogateRegistration,
    sha256_hex,
)
from errors import CdnError, ErrorCode, install_error_handler
from http_service import BlackholeListener, ServiceHandle
from service_client import ServiceClient, call_with_retries
from trace_collector import Tracer

logger = logging.getLogger(__name__)

SHA_HEADER = "X-Content-Sha256"
DURATION_HEADER = "X-Content-Duration"


@dataclass(frozen=True)
class StoredContent:
    blob: bytes
    sha256: str
    duration_s: float


def content_response(content_id: str, stored: StoredContent) -> Response:
    return Response(
        content=stored.blob,
        media_type="application/octet-stream",
        headers={SHA_HEADER: stored.sha256, DURATION_HEADER: repr(stored.duration_s), "X-Content-Id": content_id},
    )


def fetch_content(client: ServiceClient, source: AccessInfo, content_id: str, correlation_id: Optional[str] = None,
                  unreachable: ErrorCode = ErrorCode.CONTENT_SOURCE_UNAVAILABLE) -> StoredContent:
    """GET a content body from a media server or peer data interface and check its hash."""
    response = client.get(
        source,
        f"/contents/{content_id}",
        raw=True,
        correlation_id=correlation_id,
        unreachable=unreachable,
        timeout_s=30.0,
    )
    blob = response.content
    digest = sha256_hex(blob)
    declared = response.headers.get(SHA_HEADER)
    if declared and declared != digest:
        raise CdnError(ErrorCode.CONTENT_SOURCE_UNAVAILABLE, f"hash mismatch for '{content_id}'", {"content_id": content_id})
    return StoredContent(blob=blob, sha256=digest, duration_s=float(response.headers.get(DURATION_HEADER, 0.0)))


class Microservice:
    """Common lifecycle, peer table and control routes of every microservice."""

    role: MicroserviceRole = MicroserviceRole.EXTENSIBLE

    def __init__(
        self,
        instance_id: str,
        pod_id: str,
        config: Optional[Dict[str, Any]] = None,
        tracer: Optional[Tracer] = None,
        host: str = "127.0.0.1",
    ):
        self.instance_id = instance_id
        self.pod_id = pod_id
        self.config = dict(config or {})
        self.host = host
        self.tracer = (tracer or Tracer("microservice")).child(f"{self.role.value}:{instance_id}")
        self.client = ServiceClient(f"{self.role.value}:{instance_id}")
        self.state = InstanceState.DEPLOYED
        self.peers: Dict[str, PeerInfo] = {}
        self._lock = threading.RLock()
        self._control = ServiceHandle(f"{instance_id}-control", self.control_app(), host)
        self._data = ServiceHandle(f"{instance_id}-data", self.data_app(), host)
        self._blackhole: Optional[BlackholeListener] = None

    # -- lifecycle -----------------------------------------------------------------

    def start(self) -> "Microservice":
        if self.config.get("blackhole_control"):
            self._blackhole = BlackholeListener(self.host)
            logger.warning(f"{self.instance_id}: control interface black-holed on port {self._blackhole.port}")
        else:
            self._control.start()
        self._data.start()
        self.on_started()
        return self

    def on_started(self) -> None:
        pass

    def stop(self) -> None:
        if self._blackhole is not None:
            self._blackhole.close()
        else:
            self._control.stop()
        self._data.stop()
        self.state = InstanceState.UNDEPLOYED

    @property
    def control_access(self) -> AccessInfo:
        if self._blackhole is not None:
            return self._blackhole.access
        return self._control.access

    @property
    def data_access(self) -> AccessInfo:
        return self._data.access

    def instance(self) -> MicroserviceInstance:
        return MicroserviceInstance(
            instance_id=self.instance_id,
            role=self.role,
            control_access=self.control_access,
            data_access=self.data_access,
            pod_id=self.pod_id,
            state=self.state,
        )

    # -- control plane -------------------------------------------------------------

    def mark_orchestrated(self) -> Dict:
        """Idempotent deployed -> orchestrated move, sent by the orchestrator's notify-complete step."""
        with self._lock:
            if self.state == InstanceState.DEPLOYED:
                self.state = InstanceState.ORCHESTRATED
                logger.info(f"{self.instance_id}: orchestrated")
            elif self.state != InstanceState.ORCHESTRATED:
                raise CdnError(
                    ErrorCode.INVALID_REQUEST,
                    f"{self.instance_id} is {self.state.value} and cannot become orchestrated",
                    {"instance_id": self.instance_id, "state": self.state.value},
                )
            return {"ack": True, "state": self.state.value}

    def set_peers(self, peers: List[PeerInfo]) -> Dict:
        """Idempotent overwrite of the peer table (Int. G)."""
        with self._lock:
            self.peers = {p.instance_id: p for p in peers if p.instance_id != self.instance_id}
            known = sorted(self.peers)
        logger.info(f"{self.instance_id}: peer table set to {known}")
        return {"ack": True, "peers": known}

    def peer_with_role(self, role: MicroserviceRole) -> Optional[PeerInfo]:
        with self._lock:
            matches = sorted((p for p in self.peers.values() if p.role == role), key=lambda p: p.instance_id)
        return matches[0] if matches else None

    def health(self) -> Dict:
        with self._lock:
            return {
                "status": "ok",
                "instance_id": self.instance_id,
                "role": self.role.value,
                "state": self.state.value,
                "peers": sorted(self.peers),
            }

    def control_app(self) -> FastAPI:
        app = FastAPI(title=f"{self.role.value}-control")
        install_error_handler(app)

        @app.post("/peers")
        def post_peers(peers: List[PeerInfo]) -> Dict:
            return self.set_peers(peers)

        @app.post("/orchestrated")
        def post_orchestrated() -> Dict:
            return self.mark_orchestrated()

        @app.get("/health")
        def get_health() -> Dict:
            return self.health()

        self.add_control_routes(app)
        return app

    def add_control_routes(self, app: FastAPI) -> None:
        pass

    def data_app(self) -> FastAPI:
        app = FastAPI(title=f"{self.role.value}-data")
        install_error_handler(app)
        self.add_data_routes(app)
        return app

    def add_data_routes(self, app: FastAPI) -> None:
        pass


class CacheNode(Microservice):
    """Stores content pulled from a media server and integrates the surrogate into the CDN."""

    role = MicroserviceRole.CACHE_NODE

    def __init__(self, *args, **kwargs):
        self.contents: Dict[str, StoredContent] = {}
        self.registered_controller: Optional[AccessInfo] = None
        self.last_placement: Optional[ContentPlacement] = None
        super().__init__(*args, **kwargs)

    @property
    def surrogate_id(self) -> str:
        return self.config.get("component_id") or self.instance_id

    @property
    def region(self) -> Region:
        return Region(id=self.config.get("region", "unknown"))

    def on_started(self) -> None:
        bootstrap = self.config.get("bootstrap_contents") or []
        media = self.config.get("media_server")
        if bootstrap and media:
            placement = ContentPlacement(
                surrogate_id=self.surrogate_id,
                contents=list(bootstrap),
                media_server=AccessInfo.model_validate(media),
            )
            try:
                report = self.pull_content(placement, self.config.get("correlation_id"), traced=False)
            except CdnError as e:
                logger.warning(f"{self.instance_id}: bootstrap pull skipped: {e}")
                return
            logger.info(f"{self.instance_id}: bootstrap pull fetched {report.fetched}, failed {report.failed}")

    def health(self) -> Dict:
        report = super().health()
        with self._lock:
            report["contents"] = {cid: stored.sha256 for cid, stored in sorted(self.contents.items())}
            report["registered_controller"] = (
                self.registered_controller.model_dump() if self.registered_controller else None
            )
        return report

    def get_content(self, content_id: str) -> StoredContent:
        with self._lock:
            stored = self.contents.get(content_id)
        if stored is None:
            raise CdnError(ErrorCode.CONTENT_NOT_FOUND, f"'{content_id}' not cached on {self.instance_id}")
        return stored

    def pull_content(self, placement: ContentPlacement, correlation_id: Optional[str] = None, traced: bool = True) -> PullReport:
        """
        Int. J: fetch every listed content from the placement's media server.

        Partial success is reported per content; only a media server that cannot be
        reached for any content raises CONTENT_SOURCE_UNAVAILABLE.
        """
        if not placement.contents:
            return PullReport()
        if traced:
            self.tracer.emit(F5[5], correlation_id)
        fetched, failed, unreachable = [], [], 0
        for content_id in placement.contents:
            with self._lock:
                already = content_id in self.contents
            if already:
                fetched.append(content_id)
                continue
            try:
                stored = fetch_content(self.client, placement.media_server, content_id, correlation_id)
            except CdnError as e:
                if e.code == ErrorCode.CONTENT_SOURCE_UNAVAILABLE and "status" not in e.details:
                    unreachable += 1
                logger.warning(f"{self.instance_id}: pull of '{content_id}' failed: {e.code.value}")
                failed.append(content_id)
                continue
            with self._lock:
                self.contents[content_id] = stored
            fetched.append(content_id)
        if unreachable == len(placement.contents):
            raise CdnError(
                ErrorCode.CONTENT_SOURCE_UNAVAILABLE,
                f"media server {placement.media_server.endpoint} unreachable",
                {"contents": list(placement.contents)},
            )
        if traced:
            self.tracer.emit(F5[6], correlation_id)
        return PullReport(fetched=fetched, failed=failed)

    def registration(self) -> SurrogateRegistration:
        abr_peer = self.peer_with_role(MicroserviceRole.ABR_STREAMING_SERVER)
        return SurrogateRegistration(
            surrogate_id=self.surrogate_id,
            region=self.region,
            control_access=self.control_access,
            data_access=abr_peer.data_access if abr_peer else self.data_access,
        )

    def register_with(self, controller: AccessInfo, correlation_id: Optional[str] = None) -> Dict:
        """
        Int. H target: register with the controller, apply its placement, then report ready.

        Raises:
            CdnError(INVALID_REQUEST) before the instance is orchestrated
            CdnError(REGISTRATION_FAILED) after the configured number of attempts
        """
        with self._lock:
            state = self.state
        if state != InstanceState.ORCHESTRATED:
            raise CdnError(
                ErrorCode.INVALID_REQUEST,
                f"{self.instance_id} is {state.value}; registration needs an orchestrated surrogate",
                {"instance_id": self.instance_id, "state": state.value},
            )
        registration = self.registration()
        attempts = int(self.config.get("registration_retries", 3))
        backoff_s = float(self.config.get("registration_backoff_s", 0.1))
        self.tracer.emit(F5[2], correlation_id)

        def _register() -> Dict:
            return self.client.post(
                controller,
                "/surrogates",
                json=registration.model_dump(mode="json"),
                correlation_id=correlation_id,
                unreachable=ErrorCode.REGISTRATION_FAILED,
            )

        body = call_with_retries(
            _register, attempts, backoff_s, what=f"{self.instance_id} registration", retry_on=ErrorCode.REGISTRATION_FAILED
        )
        placement = ContentPlacement.model_validate(body)
        with self._lock:
            self.registered_controller = controller
            self.last_placement = placement
        logger.info(f"{self.surrogate_id}: registered, placement {placement.contents} from {placement.media_server.endpoint}")

        report = self.pull_content(placement, correlation_id)
        with self._lock:
            held = sorted(self.contents)
        self.tracer.emit(F5[7], correlation_id)
        self.client.post(
            controller,
            f"/surrogates/{self.surrogate_id}/ready",
            json=ReadyNotice(contents=held).model_dump(),
            correlation_id=correlation_id,
            unreachable=ErrorCode.REGISTRATION_FAILED,
        )
        return {
            "surrogate_id": self.surrogate_id,
            "placement": placement.model_dump(mode="json"),
            "pull_report": report.model_dump(),
        }

    def add_control_routes(self, app: FastAPI) -> None:
        @app.post("/register-with")
        def post_register_with(controller: AccessInfo, x_correlation_id: Optional[str] = Header(None)) -> Dict:
            return self.register_with(controller, x_correlation_id)

        @app.post("/pull")
        def post_pull(placement: ContentPlacement, x_correlation_id: Optional[str] = Header(None)) -> Dict:
            return self.pull_content(placement, x_correlation_id).model_dump()

    def add_data_routes(self, app: FastAPI) -> None:
        @app.get("/contents")
        def list_contents() -> List[str]:
            with self._lock:
                return sorted(self.contents)

        @app.get("/contents/{content_id}")
        def get_content(content_id: str) -> Response:
            return content_response(content_id, self.get_content(content_id))


class AbrStreamingServer(Microservice):
    """Serves ABR-lite manifests and segments for content held by the co-located cache node."""

    role = MicroserviceRole.ABR_STREAMING_SERVER

    def __init__(self, *args, **kwargs):
        self._sources: Dict[str, StoredContent] = {}
        super().__init__(*args, **kwargs)

    @property
    def segment_duration_s(self) -> float:
        return float(self.config.get("segment_duration_s", abr.DEFAULT_SEGMENT_DURATION_S))

    @property
    def bitrates(self) -> List[int]:
        return [int(b) for b in self.config.get("bitrates", abr.DEFAULT_BITRATES)]

    def _source(self, content_id: str) -> StoredContent:
        with self._lock:
            cached = self._sources.get(content_id)
        if cached is not None:
            return cached
        cache = self.peer_with_role(MicroserviceRole.CACHE_NODE)
        if cache is None:
            raise CdnError(ErrorCode.CONTENT_NOT_FOUND, f"no cache peer known to {self.instance_id}")
        try:
            stored = fetch_content(self.client, cache.data_access, content_id)
        except CdnError as e:
            if e.code == ErrorCode.CONTENT_NOT_FOUND:
                raise
            raise CdnError(ErrorCode.CONTENT_NOT_FOUND, f"'{content_id}' unavailable from cache peer", {"cause": e.code.value})
        with self._lock:
            self._sources[content_id] = stored
        return stored

    def generate_manifest(self, content_id: str) -> AbrManifest:
        stored = self._source(content_id)
        return abr.build_manifest(content_id, stored.duration_s, self.segment_duration_s, self.bitrates)

    def serve_segment(self, content_id: str, rep_id: str, n: int) -> bytes:
        manifest = self.generate_manifest(content_id)
        return abr.slice_segment(self._source(content_id).blob, manifest, rep_id, n)

    def add_data_routes(self, app: FastAPI) -> None:
        @app.get("/contents/{content_id}")
        def get_content(content_id: str) -> Response:
            # read-through so a surrogate can act as media server for another
            return content_response(content_id, self._source(content_id))

        @app.get("/contents/{content_id}/manifest")
        def get_manifest(content_id: str) -> Dict:
            return self.generate_manifest(content_id).model_dump()

        @app.get("/contents/{content_id}/reps/{rep_id}/segments/{n}")
        def get_segment(content_id: str, rep_id: str, n: int) -> Response:
            return Response(content=self.serve_segment(content_id, rep_id, n), media_type="video/mp4")


MicroserviceFactory = Callable[..., Microservice]

MICROSERVICE_FACTORIES: Dict[str, Type[Microservice]] = {
    "cache-node": CacheNode,
    "abr-streaming-server": AbrStreamingServer,
}


def register_factory(name: str, factory: Type[Microservice]) -> None:
    """Make an extra microservice kind launchable by the in-process backend."""
    MICROSERVICE_FACTORIES[name] = factory
