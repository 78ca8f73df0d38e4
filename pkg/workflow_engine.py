"""
Microservice orchestrator and workflow repository.

Plans are pre-defined linear workflows. Each plan is compiled into a langgraph
StateGraph with one node per step, executed on the caller's thread.
"""
import json
import logging
import threading
import uuid
from dataclasses import dataclass, field
from enum import Enum
from functools import partial
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, TypedDict, Union

from langgraph.graph import END, StateGraph

from domain_model import (
    F4,
    InstanceState,
    MicroserviceInstance,
    OrchestrationPlan,
    PeerInfo,
    ProvisionRecord,
    StepKind,
    WorkflowStep,
)
from errors import CdnError, ErrorCode
from service_client import ServiceClient
from trace_collector import Tracer

logger = logging.getLogger(__name__)


class WorkflowRepository:
    """Holds orchestration plans keyed by plan_id."""

    def __init__(self, plans: Iterable[OrchestrationPlan] = ()):
        self._lock = threading.Lock()
        self._plans: Dict[str, OrchestrationPlan] = {}
        for plan in plans:
            self.store_plan(plan)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "WorkflowRepository":
        """Load plans from a JSON plan-definition file: {"plans": [OrchestrationPlan, ...]}."""
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
        plans = [OrchestrationPlan.model_validate(p) for p in raw.get("plans", [])]
        logger.info(f"Loaded {len(plans)} orchestration plan(s) from {path}")
        return cls(plans)

    def store_plan(self, plan: OrchestrationPlan) -> None:
        with self._lock:
            if plan.plan_id in self._plans:
                logger.info(f"Replacing orchestration plan '{plan.plan_id}'")
            self._plans[plan.plan_id] = plan

    def load_plan(self, plan_id: str) -> OrchestrationPlan:
        with self._lock:
            plan = self._plans.get(plan_id)
        if plan is None:
            raise CdnError(ErrorCode.PLAN_NOT_FOUND, f"no orchestration plan '{plan_id}'", {"plan_id": plan_id})
        return plan

    def plan_ids(self) -> List[str]:
        with self._lock:
            return sorted(self._plans)


class ExecutionOutcome(str, Enum):
    RUNNING = "running"
    SUCCEEDED = "succeeded"
    FAILED = "failed"


@dataclass
class PlanExecution:
    execution_id: str
    plan_id: str
    record: ProvisionRecord
    step_cursor: int = 0
    step_attempts: List[int] = field(default_factory=list)
    outcome: ExecutionOutcome = ExecutionOutcome.RUNNING
    calls: List[Tuple[int, str, str]] = field(default_factory=list)
    collected: Dict[str, PeerInfo] = field(default_factory=dict)
    error: Optional[CdnError] = None


class _PlanState(TypedDict):
    cursor: int


def distribute_peer_info(
    client: ServiceClient,
    target: MicroserviceInstance,
    peers: List[MicroserviceInstance],
    timeout_s: float = 5.0,
    correlation_id: Optional[str] = None,
) -> Dict:
    """
    Int. G: overwrite the target's peer table with the given peers.

    Raises:
        CdnError(STEP_CALL_FAILED) when the target's control endpoint times out or refuses
    """
    body = [peer.peer_info().model_dump(mode="json") for peer in peers]
    try:
        return client.post(
            target.control_access,
            "/peers",
            json=body,
            timeout_s=timeout_s,
            correlation_id=correlation_id,
            unreachable=ErrorCode.STEP_CALL_FAILED,
        )
    except CdnError as e:
        if e.code != ErrorCode.STEP_CALL_FAILED:
            e = CdnError(ErrorCode.STEP_CALL_FAILED, e.message, dict(e.details))
        e.details["instance_id"] = target.instance_id
        raise e


def notify_orchestrated(
    client: ServiceClient,
    target: MicroserviceInstance,
    timeout_s: float = 5.0,
    correlation_id: Optional[str] = None,
) -> Dict:
    """Tell the target its component is wired; idempotent on the microservice side."""
    try:
        return client.post(
            target.control_access,
            "/orchestrated",
            timeout_s=timeout_s,
            correlation_id=correlation_id,
            unreachable=ErrorCode.STEP_CALL_FAILED,
        )
    except CdnError as e:
        if e.code != ErrorCode.STEP_CALL_FAILED:
            e = CdnError(ErrorCode.STEP_CALL_FAILED, e.message, dict(e.details))
        e.details["instance_id"] = target.instance_id
        raise e


class MicroserviceOrchestrator:
    """Executes orchestration plans against freshly deployed microservice instances."""

    def __init__(
        self,
        repository: WorkflowRepository,
        client: Optional[ServiceClient] = None,
        tracer: Optional[Tracer] = None,
    ):
        self.repository = repository
        self.client = client or ServiceClient("microservice-orchestrator")
        self.tracer = tracer or Tracer("microservice-orchestrator")
        self.executions: Dict[str, PlanExecution] = {}
        self._lock = threading.Lock()

    def load_plan(self, plan_id: str, correlation_id: Optional[str] = None) -> OrchestrationPlan:
        """Int. F: fetch a plan from the workflow repository."""
        self.tracer.emit(F4[11], correlation_id)
        plan = self.repository.load_plan(plan_id)
        self.tracer.emit(F4[12], correlation_id)
        return plan

    def orchestrate(self, record: ProvisionRecord, plan_id: str, correlation_id: Optional[str] = None) -> PlanExecution:
        """Int. E entry point: fetch the plan, then run it over the record's instances."""
        plan = self.load_plan(plan_id, correlation_id)
        return self.execute_plan(plan, record, correlation_id)

    def execute_plan(
        self,
        plan: OrchestrationPlan,
        record: ProvisionRecord,
        correlation_id: Optional[str] = None,
    ) -> PlanExecution:
        """
        Run plan steps strictly in order over the record's instances.

        Args:
            plan: Orchestration plan to execute
            record: Provision record whose instances are all in state deployed
            correlation_id: Provisioning-run id for traces and outbound calls

        Returns:
            PlanExecution with outcome succeeded and every instance orchestrated

        Raises:
            CdnError(ORCHESTRATION_STEP_FAILED) when a step exhausts its retry limit
        """
        not_ready = [i.instance_id for i in record.instances if i.state != InstanceState.DEPLOYED]
        if not_ready:
            raise CdnError(ErrorCode.INVALID_REQUEST, "instances not in state deployed", {"instances": not_ready})

        execution = PlanExecution(
            execution_id=f"exec-{uuid.uuid4().hex[:12]}",
            plan_id=plan.plan_id,
            record=record,
            step_attempts=[0] * len(plan.steps),
        )
        with self._lock:
            self.executions[execution.execution_id] = execution

        logger.info(
            f"Executing plan '{plan.plan_id}' ({len(plan.steps)} steps) over "
            f"{len(record.instances)} instance(s) of {record.component_id}"
        )
        self.tracer.emit(F4[13], correlation_id)

        if plan.steps:
            graph = self._compile(plan, execution, correlation_id)
            try:
                graph.invoke({"cursor": 0}, config={"recursion_limit": len(plan.steps) + 5})
            except Exception as e:
                execution.outcome = ExecutionOutcome.FAILED
                if execution.error is not None:
                    raise execution.error
                logger.error(f"Plan '{plan.plan_id}' aborted: {e}", exc_info=True)
                raise CdnError(
                    ErrorCode.ORCHESTRATION_STEP_FAILED,
                    str(e),
                    {"step_index": execution.step_cursor, "execution_id": execution.execution_id},
                )

        self._mark_orchestrated(execution)
        execution.outcome = ExecutionOutcome.SUCCEEDED
        logger.info(f"Plan '{plan.plan_id}' succeeded for {record.component_id} with {len(execution.calls)} call(s)")
        return execution

    def _compile(self, plan: OrchestrationPlan, execution: PlanExecution, correlation_id: Optional[str]):
        graph = StateGraph(_PlanState)
        names = [f"step_{index}_{step.kind.value.replace('-', '_')}" for index, step in enumerate(plan.steps)]
        for index, (name, step) in enumerate(zip(names, plan.steps)):
            graph.add_node(name, partial(self._run_node, execution, index, step, correlation_id))
        graph.set_entry_point(names[0])
        for current, following in zip(names, names[1:]):
            graph.add_edge(current, following)
        graph.add_edge(names[-1], END)
        return graph.compile()

    def _run_node(
        self,
        execution: PlanExecution,
        index: int,
        step: WorkflowStep,
        correlation_id: Optional[str],
        state: _PlanState,
    ) -> Dict:
        try:
            self._run_step(execution, index, step, correlation_id)
        except CdnError as e:
            execution.error = e
            raise
        return {"cursor": index + 1}

    def _targets(self, execution: PlanExecution, step: WorkflowStep) -> List[MicroserviceInstance]:
        instances = sorted(execution.record.instances, key=lambda i: i.instance_id)
        if step.target_role is None:
            return instances
        return [i for i in instances if i.role == step.target_role]

    def _run_step(self, execution: PlanExecution, index: int, step: WorkflowStep, correlation_id: Optional[str]) -> None:
        handlers = {
            StepKind.COLLECT_ACCESS_INFO: self._collect_access_info,
            StepKind.DISTRIBUTE_PEER_INFO: self._distribute_peer_info,
            StepKind.VERIFY_HEALTH: self._verify_health,
            StepKind.NOTIFY_COMPLETE: self._notify_complete,
        }
        handler = handlers[step.kind]
        targets = self._targets(execution, step)

        while True:
            execution.step_attempts[index] += 1
            attempt = execution.step_attempts[index]
            try:
                handler(execution, index, step, targets, correlation_id)
                break
            except CdnError as e:
                if attempt > step.retry_limit:
                    failing = e.details.get("instance_id")
                    self._mark_failed(execution, failing)
                    logger.error(
                        f"Step {index} ({step.kind.value}) of plan '{execution.plan_id}' failed after "
                        f"{attempt} attempt(s) on instance {failing}: {e.code.value}"
                    )
                    raise CdnError(
                        ErrorCode.ORCHESTRATION_STEP_FAILED,
                        f"step {index} ({step.kind.value}) failed after {attempt} attempt(s)",
                        {
                            "step_index": index,
                            "step_kind": step.kind.value,
                            "instance_id": failing,
                            "attempts": attempt,
                            "cause": e.code.value,
                            "execution_id": execution.execution_id,
                        },
                    )
                logger.warning(
                    f"Step {index} ({step.kind.value}) attempt {attempt}/{step.retry_limit + 1} failed: {e.message}"
                )
        execution.step_cursor = index + 1

    def _collect_access_info(self, execution, index, step, targets, correlation_id) -> None:
        # Reads the deployment ack; no remote call.
        execution.collected = {i.instance_id: i.peer_info() for i in targets}
        self.tracer.emit(f"step:{step.kind.value}", correlation_id)

    def _distribute_peer_info(self, execution, index, step, targets, correlation_id) -> None:
        everyone = sorted(execution.record.instances, key=lambda i: i.instance_id)
        for target in targets:
            peers = [i for i in everyone if i.instance_id != target.instance_id]
            execution.calls.append((index, step.kind.value, target.instance_id))
            self.tracer.emit(f"step:{step.kind.value}:{target.instance_id}", correlation_id)
            distribute_peer_info(self.client, target, peers, step.timeout / 1000.0, correlation_id)

    def _verify_health(self, execution, index, step, targets, correlation_id) -> None:
        everyone = {i.instance_id for i in execution.record.instances}
        distributed = {instance_id for _, kind, instance_id in execution.calls if kind == StepKind.DISTRIBUTE_PEER_INFO.value}
        for target in targets:
            execution.calls.append((index, step.kind.value, target.instance_id))
            self.tracer.emit(f"step:{step.kind.value}:{target.instance_id}", correlation_id)
            try:
                health = self.client.get(
                    target.control_access,
                    "/health",
                    timeout_s=step.timeout / 1000.0,
                    correlation_id=correlation_id,
                    unreachable=ErrorCode.STEP_CALL_FAILED,
                )
            except CdnError as e:
                e.details["instance_id"] = target.instance_id
                raise
            if health.get("status") != "ok":
                raise CdnError(ErrorCode.STEP_CALL_FAILED, f"{target.instance_id} unhealthy", {"instance_id": target.instance_id})
            if target.instance_id in distributed:
                expected = everyone - {target.instance_id}
                if set(health.get("peers", [])) != expected:
                    raise CdnError(
                        ErrorCode.STEP_CALL_FAILED,
                        f"{target.instance_id} peer table incomplete",
                        {"instance_id": target.instance_id, "peers": health.get("peers", [])},
                    )

    def _notify_complete(self, execution, index, step, targets, correlation_id) -> None:
        for target in targets:
            execution.calls.append((index, step.kind.value, target.instance_id))
            self.tracer.emit(f"step:{step.kind.value}:{target.instance_id}", correlation_id)
            notify_orchestrated(self.client, target, step.timeout / 1000.0, correlation_id)
        self._mark_orchestrated(execution)

    def _mark_orchestrated(self, execution: PlanExecution) -> None:
        instances = [
            i if i.state == InstanceState.ORCHESTRATED else i.transition(InstanceState.ORCHESTRATED)
            for i in execution.record.instances
        ]
        execution.record = execution.record.model_copy(update={"instances": instances})

    def _mark_failed(self, execution: PlanExecution, instance_id: Optional[str]) -> None:
        if instance_id is None:
            return
        instances = [
            i.transition(InstanceState.FAILED) if i.instance_id == instance_id else i
            for i in execution.record.instances
        ]
        execution.record = execution.record.model_copy(update={"instances": instances})
