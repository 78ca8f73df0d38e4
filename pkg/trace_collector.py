import itertools
import logging
import threading
import time
from pathlib import Path
from typing import Callable, Dict, List, Optional, Union

from fastapi import FastAPI
from pydantic import BaseModel

from domain_model import AccessInfo, TraceEvent
from errors import CdnError, install_error_handler
from service_client import ServiceClient

logger = logging.getLogger(__name__)

UNCORRELATED = "uncorrelated"

TraceSink = Callable[[TraceEvent], None]


class TraceCollector:
    """Stores trace events in arrival order; the arrival counter is the event's seq."""

    def __init__(self):
        self._lock = threading.Lock()
        self._events: List[TraceEvent] = []
        self._seq = itertools.count(1)

    def record(self, event: TraceEvent) -> TraceEvent:
        with self._lock:
            stored = event.model_copy(update={"seq": next(self._seq)})
            self._events.append(stored)
        return stored

    def events_for(self, correlation_id: str) -> List[TraceEvent]:
        with self._lock:
            return [e for e in self._events if e.correlation_id == correlation_id]

    def all_events(self) -> List[TraceEvent]:
        with self._lock:
            return list(self._events)

    def correlation_ids(self) -> List[str]:
        with self._lock:
            return sorted({e.correlation_id for e in self._events})

    def clear(self) -> None:
        with self._lock:
            self._events.clear()


class TracePost(BaseModel):
    actor: str
    action: str
    t: int
    correlation_id: str


def create_collector_app(collector: TraceCollector) -> FastAPI:
    app = FastAPI(title="trace-collector")
    install_error_handler(app)

    @app.post("/trace")
    def post_trace(body: TracePost) -> Dict:
        stored = collector.record(TraceEvent(**body.model_dump()))
        return stored.model_dump()

    @app.get("/trace")
    def get_trace(correlation_id: Optional[str] = None) -> List[Dict]:
        events = collector.events_for(correlation_id) if correlation_id else collector.all_events()
        return [e.model_dump() for e in events]

    return app


def direct_sink(collector: TraceCollector) -> TraceSink:
    return collector.record


def http_sink(collector_access: AccessInfo, client: Optional[ServiceClient] = None) -> TraceSink:
    """Post events to a collector endpoint; a lost event is logged, never raised."""
    client = client or ServiceClient("trace-sink", timeout_s=2.0)

    def _post(event: TraceEvent) -> None:
        try:
            client.post(collector_access, "/trace", json=event.model_dump(exclude={"seq"}))
        except CdnError as e:
            logger.warning(f"Trace event {event.action} lost: {e}")

    return _post


def null_sink(event: TraceEvent) -> None:
    return None


class Tracer:
    """Emits trace events for one actor with monotonic timestamps."""

    def __init__(self, actor: str, sink: TraceSink = null_sink):
        self.actor = actor
        self.sink = sink

    def emit(self, action: str, correlation_id: Optional[str], t: Optional[int] = None) -> TraceEvent:
        event = TraceEvent(
            actor=self.actor,
            action=action,
            t=t if t is not None else time.monotonic_ns(),
            correlation_id=correlation_id or UNCORRELATED,
        )
        self.sink(event)
        return event

    def child(self, actor: str) -> "Tracer":
        return Tracer(actor, self.sink)


def write_trace_jsonl(path: Union[str, Path], events: List[TraceEvent]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for event in sorted(events, key=lambda e: e.seq):
            f.write(event.model_dump_json() + "\n")
    return path


def read_trace_jsonl(path: Union[str, Path]) -> List[TraceEvent]:
    events = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                events.append(TraceEvent.model_validate_json(line))
    logger.info(f"Loaded {len(events)} trace events from {path}")
    return events
