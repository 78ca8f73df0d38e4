import logging
from enum import Enum
from typing import Any, Dict, Optional

logger = logging.getLogger(__name__)


class ErrorCode(str, Enum):
    """Every failure the control plane can report, across all interfaces."""

    INVALID_CONTENT = "INVALID_CONTENT"
    INVALID_REQUEST = "INVALID_REQUEST"
    PLAN_NOT_FOUND = "PLAN_NOT_FOUND"
    ORCHESTRATION_STEP_FAILED = "ORCHESTRATION_STEP_FAILED"
    STEP_CALL_FAILED = "STEP_CALL_FAILED"
    UNKNOWN_COMPONENT_TYPE = "UNKNOWN_COMPONENT_TYPE"
    POD_UNREACHABLE = "POD_UNREACHABLE"
    DEPLOYMENT_FAILED = "DEPLOYMENT_FAILED"
    COMPONENT_NOT_FOUND = "COMPONENT_NOT_FOUND"
    PACKAGE_NOT_FOUND = "PACKAGE_NOT_FOUND"
    PROVISIONING_TIMEOUT = "PROVISIONING_TIMEOUT"
    NO_ELIGIBLE_POD = "NO_ELIGIBLE_POD"
    NO_MATCHING_COMPONENT_TYPE = "NO_MATCHING_COMPONENT_TYPE"
    POST_DEPLOYMENT_FAILED = "POST_DEPLOYMENT_FAILED"
    ALREADY_REGISTERED = "ALREADY_REGISTERED"
    SURROGATE_NOT_FOUND = "SURROGATE_NOT_FOUND"
    CAPACITY_EXHAUSTED = "CAPACITY_EXHAUSTED"
    INSTANCE_NOT_FOUND = "INSTANCE_NOT_FOUND"
    CONTENT_SOURCE_UNAVAILABLE = "CONTENT_SOURCE_UNAVAILABLE"
    REGISTRATION_FAILED = "REGISTRATION_FAILED"
    CONTENT_NOT_FOUND = "CONTENT_NOT_FOUND"
    SEGMENT_NOT_FOUND = "SEGMENT_NOT_FOUND"
    INCOMPLETE_TRACE = "INCOMPLETE_TRACE"
    HTTP_ERROR = "HTTP_ERROR"


_NOT_FOUND = {
    ErrorCode.PLAN_NOT_FOUND,
    ErrorCode.UNKNOWN_COMPONENT_TYPE,
    ErrorCode.COMPONENT_NOT_FOUND,
    ErrorCode.PACKAGE_NOT_FOUND,
    ErrorCode.SURROGATE_NOT_FOUND,
    ErrorCode.INSTANCE_NOT_FOUND,
    ErrorCode.CONTENT_NOT_FOUND,
    ErrorCode.SEGMENT_NOT_FOUND,
}

_CONFLICT = {
    ErrorCode.ALREADY_REGISTERED,
    ErrorCode.CAPACITY_EXHAUSTED,
    ErrorCode.NO_ELIGIBLE_POD,
    ErrorCode.NO_MATCHING_COMPONENT_TYPE,
}

_UPSTREAM = {
    ErrorCode.POD_UNREACHABLE,
    ErrorCode.STEP_CALL_FAILED,
    ErrorCode.DEPLOYMENT_FAILED,
    ErrorCode.ORCHESTRATION_STEP_FAILED,
    ErrorCode.POST_DEPLOYMENT_FAILED,
    ErrorCode.REGISTRATION_FAILED,
    ErrorCode.CONTENT_SOURCE_UNAVAILABLE,
    ErrorCode.HTTP_ERROR,
}


class CdnError(Exception):
    """
    A control-plane failure carrying a stable error code.

    Args:
        code: One of ErrorCode
        message: Human readable explanation
        details: Extra machine readable context (failing step, attempts, instances...)
    """

    def __init__(self, code: ErrorCode, message: str = "", details: Optional[Dict[str, Any]] = None):
        self.code = ErrorCode(code)
        self.message = message or self.code.value
        self.details = details or {}
        super().__init__(f"{self.code.value}: {self.message}")

    @property
    def http_status(self) -> int:
        if self.code in _NOT_FOUND:
            return 404
        if self.code in _CONFLICT:
            return 409
        if self.code == ErrorCode.PROVISIONING_TIMEOUT:
            return 504
        if self.code in _UPSTREAM:
            return 502
        return 422

    def to_body(self) -> Dict[str, Any]:
        return {"error": self.code.value, "message": self.message, "details": self.details}

    @classmethod
    def from_body(cls, body: Dict[str, Any], status: int) -> "CdnError":
        """Rebuild an error from a JSON error body, tolerating unknown codes."""
        try:
            code = ErrorCode(body.get("error"))
        except ValueError:
            logger.warning(f"Unknown error code in response body: {body.get('error')}")
            code = ErrorCode.HTTP_ERROR
        details = dict(body.get("details") or {})
        details.setdefault("status", status)
        return cls(code, body.get("message", ""), details)


def install_error_handler(app) -> None:
    """Render CdnError raised inside a FastAPI route as a JSON error body."""
    from fastapi import Request
    from fastapi.responses import JSONResponse

    @app.exception_handler(CdnError)
    async def _handle_cdn_error(request: Request, exc: CdnError):
        return JSONResponse(status_code=exc.http_status, content=exc.to_body())
