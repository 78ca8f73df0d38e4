"""
CDN provider domain: flash-crowd detection, PoD selection and ordering (CDN deployment
manager), and the CDN controller's registry, content placement and request redirection.
"""
import itertools
import logging
import threading
import time
from collections import Counter, defaultdict, deque
from concurrent.futures import Future, ThreadPoolExecutor
from typing import Callable, Deque, Dict, FrozenSet, Iterable, List, Optional, Protocol, Sequence, Set, Tuple

from fastapi import FastAPI, Header, Query

from domain_model import (
    F4,
    F5,
    AccessInfo,
    CatalogueEntry,
    ContentPlacement,
    FlashCrowdTrigger,
    MicroserviceRole,
    PoDDescriptor,
    ProvisionRecord,
    ProvisionStatus,
    ReadyNotice,
    RedirectDecision,
    RedirectTarget,
    Region,
    RequestEvent,
    SurrogateRegistration,
)
from errors import CdnError, ErrorCode, install_error_handler
from service_client import ServiceClient
from trace_collector import Tracer

logger = logging.getLogger(__name__)

NS_PER_S = 1_000_000_000
REQUIRED_FEATURES = frozenset({"ABR-streaming"})


# ---------------------------------------------------------------------------
# Flash-crowd detection
# ---------------------------------------------------------------------------

class FlashCrowdDetector:
    """
    Reactive per-region sliding-window rate detector.

    The rate at an event is the number of requests from its region with
    t in (t_now - W, t_now], divided by W.
    """

    def __init__(
        self,
        window_s: float = 10.0,
        threshold: float = 50.0,
        suppressed: Optional[Callable[[Region, int], bool]] = None,
    ):
        if window_s <= 0:
            raise ValueError("detector window must be positive")
        self.window_s = window_s
        self.window_ns = int(window_s * NS_PER_S)
        self.threshold = threshold
        self.suppressed = suppressed or (lambda region, t: False)
        self._events: Dict[str, Deque[Tuple[int, str]]] = defaultdict(deque)
        self._lock = threading.Lock()

    def rate(self, region: Region) -> float:
        with self._lock:
            return len(self._events[region.id]) / self.window_s

    def observe(self, event: RequestEvent) -> Optional[FlashCrowdTrigger]:
        with self._lock:
            window = self._events[event.region.id]
            window.append((event.t, event.content_id))
            while window and window[0][0] <= event.t - self.window_ns:
                window.popleft()
            rate = len(window) / self.window_s
            if rate < self.threshold:
                return None
            counts = Counter(content_id for _, content_id in window)
        if self.suppressed(event.region, event.t):
            return None
        top = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        logger.info(f"Flash crowd in {event.region.id}: {rate:.1f} req/s over {self.window_s}s")
        return FlashCrowdTrigger(
            region=event.region,
            top_contents=top,
            window=(event.t - self.window_ns, event.t),
            rate=rate,
        )

    def reset(self) -> None:
        with self._lock:
            self._events.clear()


def detect_flash_crowd(detector: FlashCrowdDetector, event: RequestEvent) -> Optional[FlashCrowdTrigger]:
    return detector.observe(event)


# ---------------------------------------------------------------------------
# PoD selection
# ---------------------------------------------------------------------------

def pod_score(pod: PoDDescriptor, target_region: Region) -> float:
    ratio = pod.capacity_free / pod.capacity_total if pod.capacity_total else 0.0
    return 10.0 * (pod.region.id == target_region.id) + ratio


def select_pod(candidates: Sequence[PoDDescriptor], target_region: Region, required: int = 1) -> PoDDescriptor:
    """
    Pick the PoD for a new component.

    Args:
        candidates: PoD inventory
        target_region: Region the flash crowd comes from
        required: Free instance slots the component needs

    Returns:
        The highest scoring eligible PoD; ties go to the smallest pod_id

    Raises:
        CdnError(NO_ELIGIBLE_POD) when no candidate has enough free slots
    """
    eligible = [p for p in candidates if p.capacity_free >= required]
    if not eligible:
        raise CdnError(
            ErrorCode.NO_ELIGIBLE_POD,
            f"no PoD with {required} free slot(s) among {len(candidates)} candidate(s)",
            {"region": target_region.id},
        )
    return min(eligible, key=lambda p: (-pod_score(p, target_region), p.pod_id))


# ---------------------------------------------------------------------------
# Placement and redirection strategies
# ---------------------------------------------------------------------------

class PlacementStrategy(Protocol):
    def place(self, region: Region, history: Counter, k: int) -> List[str]:
        ...


class RedirectStrategy(Protocol):
    def choose(
        self,
        region: Region,
        candidates: List[SurrogateRegistration],
        sessions: Dict[str, int],
    ) -> Optional[SurrogateRegistration]:
        ...


class TopKPlacement:
    """Most requested contents of the region; a default sample set when nothing was requested yet."""

    def __init__(self, default_contents: Iterable[str] = ()):
        self.default_contents = list(default_contents)

    def place(self, region: Region, history: Counter, k: int) -> List[str]:
        if not history:
            return self.default_contents[:k]
        ranked = sorted(history.items(), key=lambda kv: (-kv[1], kv[0]))
        return [content_id for content_id, _ in ranked[:k]]


class NearestLeastLoadedRedirect:
    def choose(self, region, candidates, sessions):
        if not candidates:
            return None
        return min(
            candidates,
            key=lambda s: (s.region.id != region.id, sessions.get(s.surrogate_id, 0), s.surrogate_id),
        )


def place_content(
    region: Region,
    request_history: Counter,
    media_server: AccessInfo,
    k: int = 10,
    default_contents: Iterable[str] = (),
    surrogate_id: str = "",
) -> ContentPlacement:
    contents = TopKPlacement(default_contents).place(region, request_history, k)
    return ContentPlacement(surrogate_id=surrogate_id, contents=contents, media_server=media_server)


# ---------------------------------------------------------------------------
# CDN controller
# ---------------------------------------------------------------------------

class CdnController:
    """
    Surrogate registry, content placement and request redirection.

    Every operation runs under one lock, so readiness changes and redirect
    decisions are linearizable.
    """

    def __init__(
        self,
        origin: AccessInfo,
        default_contents: Iterable[str] = (),
        k: int = 10,
        media_source: str = "origin",
        placement: Optional[PlacementStrategy] = None,
        redirect: Optional[RedirectStrategy] = None,
        tracer: Optional[Tracer] = None,
    ):
        if media_source not in ("origin", "surrogate"):
            raise ValueError(f"media_source must be 'origin' or 'surrogate', not '{media_source}'")
        self.origin = origin
        self.k = k
        self.media_source = media_source
        self.placement = placement or TopKPlacement(default_contents)
        self.redirect_strategy = redirect or NearestLeastLoadedRedirect()
        self.tracer = tracer or Tracer("cdn-controller")
        self._registry: Dict[str, SurrogateRegistration] = {}
        self._placements: Dict[str, ContentPlacement] = {}
        self._holdings: Dict[str, FrozenSet[str]] = {}
        self._sessions: Dict[str, int] = defaultdict(int)
        self._history: Dict[str, Counter] = defaultdict(Counter)
        self._lock = threading.RLock()

    # -- registry ------------------------------------------------------------------

    def register_surrogate(self, registration: SurrogateRegistration, correlation_id: Optional[str] = None) -> ContentPlacement:
        """
        Int. I: add a surrogate (not ready yet) and return the contents it must pull.

        Raises:
            CdnError(ALREADY_REGISTERED) when the id is taken with different access info
        """
        registration = registration.model_copy(update={"ready": False})
        with self._lock:
            existing = self._registry.get(registration.surrogate_id)
            if existing is not None:
                if (existing.region, existing.control_access, existing.data_access) != (
                    registration.region, registration.control_access, registration.data_access
                ):
                    raise CdnError(
                        ErrorCode.ALREADY_REGISTERED,
                        f"surrogate '{registration.surrogate_id}' registered with other access info",
                    )
                logger.info(f"Re-registration of {registration.surrogate_id}; returning its placement")
                return self._placements[registration.surrogate_id]

            self._registry[registration.surrogate_id] = registration
            self.tracer.emit(F5[3], correlation_id)
            placement = self.place_content(registration.region, surrogate_id=registration.surrogate_id)
            self._placements[registration.surrogate_id] = placement
            self.tracer.emit(F5[4], correlation_id)
        logger.info(
            f"Registered surrogate {registration.surrogate_id} in {registration.region.id}; "
            f"placement {placement.contents}"
        )
        return placement

    def place_content(self, region: Region, k: Optional[int] = None, surrogate_id: str = "") -> ContentPlacement:
        with self._lock:
            contents = self.placement.place(region, Counter(self._history[region.id]), k or self.k)
            media_server = self.origin
            if self.media_source == "surrogate" and contents:
                source = self._surrogate_source(region, contents, exclude=surrogate_id)
                if source is not None:
                    media_server = source.data_access
        return ContentPlacement(surrogate_id=surrogate_id, contents=contents, media_server=media_server)

    def _surrogate_source(self, region: Region, contents: List[str], exclude: str) -> Optional[SurrogateRegistration]:
        wanted = set(contents)
        holders = [
            s for s in self._registry.values()
            if s.ready and s.surrogate_id != exclude and wanted <= self._holdings.get(s.surrogate_id, frozenset())
        ]
        return self.redirect_strategy.choose(region, holders, self._sessions)

    def notify_ready(self, surrogate_id: str, notice: Optional[ReadyNotice] = None) -> Dict:
        with self._lock:
            registration = self._registry.get(surrogate_id)
            if registration is None:
                raise CdnError(ErrorCode.SURROGATE_NOT_FOUND, f"no surrogate '{surrogate_id}'")
            if notice is not None and notice.contents is not None:
                held = frozenset(notice.contents)
            else:
                held = frozenset(self._placements[surrogate_id].contents)
            self._holdings[surrogate_id] = held
            if not registration.ready:
                self._registry[surrogate_id] = registration.model_copy(update={"ready": True})
                logger.info(f"Surrogate {surrogate_id} ready with {sorted(held)}")
        return {"ack": True, "surrogate_id": surrogate_id}

    def deregister_surrogate(self, surrogate_id: str) -> Dict:
        with self._lock:
            if self._registry.pop(surrogate_id, None) is None:
                raise CdnError(ErrorCode.SURROGATE_NOT_FOUND, f"no surrogate '{surrogate_id}'")
            self._placements.pop(surrogate_id, None)
            self._holdings.pop(surrogate_id, None)
            self._sessions.pop(surrogate_id, None)
        logger.info(f"Deregistered surrogate {surrogate_id}")
        return {"ack": True, "surrogate_id": surrogate_id}

    def list_surrogates(self, region: Optional[Region] = None) -> List[SurrogateRegistration]:
        with self._lock:
            return [
                s for _, s in sorted(self._registry.items())
                if region is None or s.region.id == region.id
            ]

    def holdings(self, surrogate_id: str) -> List[str]:
        with self._lock:
            return sorted(self._holdings.get(surrogate_id, frozenset()))

    # -- redirection ---------------------------------------------------------------

    def redirect_request(self, region: Region, content_id: str) -> RedirectDecision:
        with self._lock:
            self._history[region.id][content_id] += 1
            candidates = [
                s for s in self._registry.values()
                if s.ready and content_id in self._holdings.get(s.surrogate_id, frozenset())
            ]
            chosen = self.redirect_strategy.choose(region, candidates, self._sessions)
            if chosen is None:
                return RedirectDecision(target=self.origin, target_kind=RedirectTarget.ORIGIN)
            self._sessions[chosen.surrogate_id] += 1
            return RedirectDecision(
                target=chosen.data_access,
                target_kind=RedirectTarget.SURROGATE,
                surrogate_id=chosen.surrogate_id,
            )

    def end_session(self, surrogate_id: str) -> Dict:
        with self._lock:
            if surrogate_id not in self._registry:
                raise CdnError(ErrorCode.SURROGATE_NOT_FOUND, f"no surrogate '{surrogate_id}'")
            if self._sessions[surrogate_id] > 0:
                self._sessions[surrogate_id] -= 1
            return {"ack": True, "active_sessions": self._sessions[surrogate_id]}

    def active_sessions(self) -> Dict[str, int]:
        with self._lock:
            return {sid: count for sid, count in self._sessions.items() if count > 0}

    def request_history(self, region: Region) -> Counter:
        with self._lock:
            return Counter(self._history[region.id])


def create_controller_app(controller: CdnController) -> FastAPI:
    app = FastAPI(title="cdn-controller")
    install_error_handler(app)

    @app.post("/surrogates")
    def post_surrogate(registration: SurrogateRegistration, x_correlation_id: Optional[str] = Header(None)) -> Dict:
        return controller.register_surrogate(registration, x_correlation_id).model_dump(mode="json")

    @app.post("/surrogates/{surrogate_id}/ready")
    def post_ready(surrogate_id: str, notice: Optional[ReadyNotice] = None) -> Dict:
        return controller.notify_ready(surrogate_id, notice)

    @app.get("/surrogates")
    def get_surrogates(region: Optional[str] = None) -> List[Dict]:
        selected = Region(id=region) if region else None
        return [s.model_dump(mode="json") for s in controller.list_surrogates(selected)]

    @app.delete("/surrogates/{surrogate_id}")
    def delete_surrogate(surrogate_id: str) -> Dict:
        return controller.deregister_surrogate(surrogate_id)

    @app.get("/redirect")
    def get_redirect(region: str = Query(...), content_id: str = Query(...)) -> Dict:
        return controller.redirect_request(Region(id=region), content_id).model_dump(mode="json")

    @app.post("/sessions/{surrogate_id}/end")
    def post_session_end(surrogate_id: str) -> Dict:
        return controller.end_session(surrogate_id)

    @app.get("/health")
    def get_health() -> Dict:
        return {"status": "ok", "surrogates": len(controller.list_surrogates())}

    return app


# ---------------------------------------------------------------------------
# CDN deployment manager
# ---------------------------------------------------------------------------

class CdnDeploymentManager:
    """Turns flash-crowd triggers into provisioned, registered surrogates."""

    def __init__(
        self,
        component_provider: AccessInfo,
        controller: AccessInfo,
        pods: Iterable[PoDDescriptor],
        detector_window_s: float = 10.0,
        detector_threshold: float = 50.0,
        backoff_s: float = 30.0,
        required_features: Iterable[str] = REQUIRED_FEATURES,
        provision_timeout_s: float = 60.0,
        client: Optional[ServiceClient] = None,
        tracer: Optional[Tracer] = None,
        max_workers: int = 4,
        preferred_type: Optional[str] = None,
        required_instances: int = 2,
    ):
        self.component_provider = component_provider
        self.controller = controller
        self.pods: List[PoDDescriptor] = list(pods)
        self.backoff_ns = int(backoff_s * NS_PER_S)
        self.required_features = frozenset(required_features)
        self.preferred_type = preferred_type
        self.required_instances = required_instances
        self.provision_timeout_s = provision_timeout_s
        self.client = client or ServiceClient("cdn-deployment-manager")
        self.tracer = tracer or Tracer("cdn-deployment-manager")
        self.detector = FlashCrowdDetector(detector_window_s, detector_threshold, self._suppressed)
        self.records: Dict[str, ProvisionRecord] = {}
        self.failures: List[CdnError] = []
        self._in_flight: Set[str] = set()
        self._ordering: Set[str] = set()
        self._backoff_until: Dict[str, int] = {}
        self._covered: Set[str] = set()
        self._orders = itertools.count(1)
        self._lock = threading.Lock()
        self._executor = ThreadPoolExecutor(max_workers=max_workers, thread_name_prefix="cdn-order")

    # -- detection -----------------------------------------------------------------

    def _suppressed(self, region: Region, t: int) -> bool:
        with self._lock:
            if region.id in self._in_flight or region.id in self._covered:
                return True
            if t < self._backoff_until.get(region.id, -1):
                return True
        if self._controller_covers(region):
            with self._lock:
                self._covered.add(region.id)
            return True
        return False

    def _controller_covers(self, region: Region) -> bool:
        try:
            body = self.client.get(self.controller, "/surrogates", params={"region": region.id})
        except CdnError as e:
            logger.warning(f"Coverage check for {region.id} failed: {e.code.value}")
            return False
        return any(SurrogateRegistration.model_validate(s).ready for s in body)

    def observe(self, event: RequestEvent) -> Optional[FlashCrowdTrigger]:
        """Feed one request to the detector; a returned trigger already holds the region's refractory slot."""
        trigger = self.detector.observe(event)
        if trigger is not None:
            with self._lock:
                self._in_flight.add(trigger.region.id)
        return trigger

    def in_flight(self, region: Region) -> bool:
        with self._lock:
            return region.id in self._in_flight

    # -- ordering ------------------------------------------------------------------

    def refresh_pods(self) -> List[PoDDescriptor]:
        """Current capacity from each PoD agent, the static inventory entry when it does not answer."""
        refreshed = []
        for pod in self.pods:
            try:
                body = self.client.get(pod.access, "/pod", timeout_s=1.0)
                refreshed.append(PoDDescriptor.model_validate(body))
            except (CdnError, ValueError) as e:
                logger.warning(f"PoD {pod.pod_id} did not report capacity: {e}")
                refreshed.append(pod)
        return refreshed

    def get_catalogue(self, component_provider: AccessInfo, correlation_id: str) -> List[CatalogueEntry]:
        self.tracer.emit(F4[2], correlation_id)
        body = self.client.get(component_provider, "/CDNComponentCatalogue", correlation_id=correlation_id)
        self.tracer.emit(F4[3], correlation_id)
        return [CatalogueEntry.model_validate(entry) for entry in body]

    def get_record(self, component_provider: AccessInfo, component_id: str, correlation_id: Optional[str] = None) -> ProvisionRecord:
        """Instance endpoints of a provisioned component, read back from the component provider."""
        body = self.client.get(component_provider, f"/CDNComponent/{component_id}", correlation_id=correlation_id)
        return ProvisionRecord.model_validate(body)

    def select_type(self, catalogue: List[CatalogueEntry]) -> CatalogueEntry:
        """First catalogue entry offering the required features, restricted to preferred_type when set."""
        for entry in catalogue:
            if self.preferred_type is not None and entry.type_id != self.preferred_type:
                continue
            if self.required_features <= entry.features:
                return entry
        raise CdnError(
            ErrorCode.NO_MATCHING_COMPONENT_TYPE,
            f"no catalogue entry offers {sorted(self.required_features)}",
            {"catalogue": [e.type_id for e in catalogue], "preferred_type": self.preferred_type},
        )

    def order_provisioning(
        self,
        trigger: FlashCrowdTrigger,
        component_provider: Optional[AccessInfo] = None,
        pods: Optional[List[PoDDescriptor]] = None,
        correlation_id: Optional[str] = None,
    ) -> ProvisionRecord:
        """
        Order a surrogate for the trigger's region and integrate it into the CDN.

        Args:
            trigger: Flash crowd to react to
            component_provider: Int. A endpoint, defaults to the configured one
            pods: Candidate PoDs, defaults to the refreshed inventory
            correlation_id: Provisioning-run id, generated when absent

        Returns:
            ProvisionRecord of the new component in status registered

        Raises:
            CdnError(NO_ELIGIBLE_POD | NO_MATCHING_COMPONENT_TYPE), provider errors,
            POST_DEPLOYMENT_FAILED or REGISTRATION_FAILED
        """
        region = trigger.region
        order_id = f"order-{next(self._orders):04d}"
        correlation_id = correlation_id or f"{order_id}-{region.id}"
        component_provider = component_provider or self.component_provider
        with self._lock:
            self._in_flight.add(region.id)
        logger.info(f"{order_id}: provisioning for {region.id} at {trigger.rate:.1f} req/s [{correlation_id}]")

        try:
            self.tracer.emit(F4[1], correlation_id)
            pod = select_pod(pods if pods is not None else self.refresh_pods(), region, self.required_instances)
            catalogue = self.get_catalogue(component_provider, correlation_id)
            entry = self.select_type(catalogue)

            self.tracer.emit(F4[4], correlation_id)
            body = self.client.post(
                component_provider,
                f"/CDNComponent/{entry.type_id}",
                json={"pod_access": pod.access.model_dump()},
                correlation_id=correlation_id,
                timeout_s=self.provision_timeout_s + 5.0,
            )
            record = self.get_record(component_provider, body["cdn_component_id"], correlation_id)
            logger.info(f"{order_id}: {record.component_id} provisioned on {pod.pod_id}")

            self.tracer.emit(F4[16], correlation_id)
            try:
                self.start_post_deployment(self._surrogate_control(record), self.controller, correlation_id)
            except CdnError:
                self._dispose_quietly(component_provider, record.component_id, correlation_id)
                raise
            record = record.advance(ProvisionStatus.REGISTERED, time.monotonic_ns())
        except CdnError as e:
            logger.error(f"❌ {order_id} for {region.id} failed: {e.code.value} {e.message}")
            with self._lock:
                self._in_flight.discard(region.id)
                self._backoff_until[region.id] = trigger.window[1] + self.backoff_ns
                self.failures.append(e)
            raise

        with self._lock:
            self.records[record.component_id] = record
            self._in_flight.discard(region.id)
            self._covered.add(region.id)
        logger.info(f"✅ {order_id}: surrogate {record.component_id} registered for {region.id}")
        return record

    @staticmethod
    def _surrogate_control(record: ProvisionRecord) -> AccessInfo:
        for instance in record.instances:
            if instance.role == MicroserviceRole.CACHE_NODE:
                return instance.control_access
        raise CdnError(
            ErrorCode.POST_DEPLOYMENT_FAILED,
            f"{record.component_id} has no cache node to register",
            {"component_id": record.component_id},
        )

    def start_post_deployment(self, surrogate_control: AccessInfo, controller: AccessInfo,
                              correlation_id: Optional[str] = None) -> Dict:
        """Int. H: hand the controller's access info to the surrogate, which registers itself."""
        self.tracer.emit(F5[1], correlation_id)
        return self.client.post(
            surrogate_control,
            "/register-with",
            json=controller.model_dump(),
            correlation_id=correlation_id,
            timeout_s=self.provision_timeout_s,
            unreachable=ErrorCode.POST_DEPLOYMENT_FAILED,
        )

    def submit_trigger(self, trigger: FlashCrowdTrigger) -> Optional[Future]:
        """
        Run an order in the background; None when an order for the region is already running.

        Triggers returned by observe() are accepted: they hold the refractory slot, not an order.
        """
        region_id = trigger.region.id
        with self._lock:
            if region_id in self._ordering:
                logger.info(f"Trigger for {region_id} ignored: order already running")
                return None
            self._ordering.add(region_id)
            self._in_flight.add(region_id)
        future = self._executor.submit(self.order_provisioning, trigger)
        future.add_done_callback(lambda _: self._order_done(region_id))
        return future

    def _order_done(self, region_id: str) -> None:
        with self._lock:
            self._ordering.discard(region_id)

    # -- dispose -------------------------------------------------------------------

    def _dispose_quietly(self, component_provider: AccessInfo, component_id: str, correlation_id: str) -> None:
        try:
            self.client.delete(component_provider, f"/CDNComponent/{component_id}", correlation_id=correlation_id)
        except CdnError as e:
            logger.warning(f"Dispose of {component_id} after failed post-deployment: {e.code.value}")

    def dispose_surrogate(self, component_id: str) -> bool:
        """Deregister the surrogate from the controller, then dispose its component."""
        with self._lock:
            record = self.records.get(component_id)
        try:
            self.client.delete(self.controller, f"/surrogates/{component_id}")
        except CdnError as e:
            if e.code != ErrorCode.SURROGATE_NOT_FOUND:
                raise
        body = self.client.delete(self.component_provider, f"/CDNComponent/{component_id}")
        success = bool(body and body.get("success"))
        if record is not None:
            region = next((p.region.id for p in self.pods if p.pod_id == record.pod_id), None)
            with self._lock:
                if success:
                    self.records[component_id] = record.advance(ProvisionStatus.DISPOSED, time.monotonic_ns())
                self._covered.discard(region)
        return success

    def shutdown(self) -> None:
        self._executor.shutdown(wait=True)


def create_deployment_manager_app(manager: CdnDeploymentManager) -> FastAPI:
    app = FastAPI(title="cdn-deployment-manager")
    install_error_handler(app)

    @app.post("/triggers")
    def post_trigger(trigger: FlashCrowdTrigger, x_correlation_id: Optional[str] = Header(None)) -> Dict:
        record = manager.order_provisioning(trigger, correlation_id=x_correlation_id)
        return record.model_dump(mode="json")

    @app.get("/components")
    def get_components() -> List[Dict]:
        return [r.model_dump(mode="json") for _, r in sorted(manager.records.items())]

    @app.delete("/components/{component_id}")
    def delete_component(component_id: str) -> Dict:
        return {"success": manager.dispose_surrogate(component_id)}

    return app
