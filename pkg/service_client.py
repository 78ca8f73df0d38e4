import logging
import threading
import time
from typing import Any, Callable, Dict, Optional, TypeVar

import requests

from domain_model import AccessInfo
from errors import CdnError, ErrorCode

logger = logging.getLogger(__name__)

CORRELATION_HEADER = "X-Correlation-ID"
DEFAULT_TIMEOUT_S = 5.0

T = TypeVar("T")


class ServiceClient:
    """
    Thin REST client shared by every control-plane component.

    Connection failures and timeouts become CdnError with the caller's chosen code;
    JSON error bodies from our own services are decoded back into CdnError.
    """

    def __init__(self, name: str, timeout_s: float = DEFAULT_TIMEOUT_S):
        self.name = name
        self.timeout_s = timeout_s
        self._local = threading.local()

    @property
    def session(self) -> requests.Session:
        # requests.Session is not safe to share across threads
        session = getattr(self._local, "session", None)
        if session is None:
            session = requests.Session()
            session.trust_env = False
            self._local.session = session
        return session

    def request(
        self,
        method: str,
        access: AccessInfo,
        path: str = "",
        *,
        json: Any = None,
        params: Optional[Dict[str, Any]] = None,
        timeout_s: Optional[float] = None,
        correlation_id: Optional[str] = None,
        unreachable: ErrorCode = ErrorCode.HTTP_ERROR,
        raw: bool = False,
    ) -> Any:
        """
        Issue one HTTP call against a service.

        Args:
            method: HTTP verb
            access: Access info of the target service
            path: Path appended to the endpoint's base path
            json: Optional JSON body
            params: Optional query parameters
            timeout_s: Per-call timeout, defaults to the client's
            correlation_id: Provisioning-run id forwarded in the X-Correlation-ID header
            unreachable: Error code raised when the service cannot be reached
            raw: Return the requests.Response instead of decoded JSON

        Returns:
            Decoded JSON body (or the raw response)
        """
        url = access.url(path)
        headers = {}
        if correlation_id:
            headers[CORRELATION_HEADER] = correlation_id
        if access.credential:
            headers["Authorization"] = f"Bearer {access.credential}"
        try:
            response = self.session.request(
                method,
                url,
                json=json,
                params=params,
                headers=headers,
                timeout=timeout_s if timeout_s is not None else self.timeout_s,
            )
        except (requests.exceptions.ConnectionError, requests.exceptions.Timeout) as e:
            logger.debug(f"[{self.name}] {method} {url} failed: {e}")
            raise CdnError(unreachable, f"{method} {url} unreachable", {"url": url, "reason": type(e).__name__})

        if response.status_code >= 400:
            try:
                body = response.json()
            except ValueError:
                body = None
            if isinstance(body, dict) and "error" in body:
                raise CdnError.from_body(body, response.status_code)
            raise CdnError(
                ErrorCode.HTTP_ERROR,
                f"{method} {url} returned {response.status_code}",
                {"url": url, "status": response.status_code},
            )
        if raw:
            return response
        if not response.content:
            return None
        return response.json()

    def get(self, access: AccessInfo, path: str = "", **kwargs) -> Any:
        return self.request("GET", access, path, **kwargs)

    def post(self, access: AccessInfo, path: str = "", **kwargs) -> Any:
        return self.request("POST", access, path, **kwargs)

    def delete(self, access: AccessInfo, path: str = "", **kwargs) -> Any:
        return self.request("DELETE", access, path, **kwargs)


def call_with_retries(
    fn: Callable[[], T],
    attempts: int,
    backoff_s: float = 0.1,
    what: str = "call",
    retry_on: ErrorCode = None,
) -> T:
    """
    Run fn up to `attempts` times with linear backoff.

    Args:
        fn: Zero-argument callable
        attempts: Total attempts (>= 1)
        backoff_s: Sleep after attempt k is k * backoff_s
        what: Label for the logs
        retry_on: Only retry CdnError with this code (None = any CdnError)

    Returns:
        fn's result; the last CdnError is re-raised with `attempts` in its details
    """
    last_error = None
    for attempt in range(1, attempts + 1):
        try:
            return fn()
        except CdnError as e:
            if retry_on is not None and e.code != retry_on:
                raise
            last_error = e
            logger.warning(f"{what}: attempt {attempt}/{attempts} failed ({e.code.value})")
            if attempt < attempts:
                time.sleep(backoff_s * attempt)
    last_error.details["attempts"] = attempts
    raise last_error


def wait_until_healthy(client: ServiceClient, access: AccessInfo, path: str = "/health", timeout_s: float = 5.0) -> None:
    deadline = time.monotonic() + timeout_s
    while True:
        try:
            client.get(access, path, timeout_s=0.5)
            return
        except CdnError:
            if time.monotonic() > deadline:
                raise
            time.sleep(0.05)
