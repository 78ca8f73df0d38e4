import logging
import socket
import threading
import time
from typing import Optional

import uvicorn

from domain_model import AccessInfo

logger = logging.getLogger(__name__)


def bind_socket(host: str, port: int = 0) -> socket.socket:
    """Bind a loopback listening socket; port 0 asks the kernel for a free one."""
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    sock.bind((host, port))
    sock.listen(128)
    return sock


class ServiceHandle:
    """A FastAPI app served by uvicorn on a background thread."""

    def __init__(self, name: str, app, host: str = "127.0.0.1", port: int = 0):
        self.name = name
        self.app = app
        self.host = host
        self.requested_port = port
        self.port: Optional[int] = None
        self._socket: Optional[socket.socket] = None
        self._server: Optional[uvicorn.Server] = None
        self._thread: Optional[threading.Thread] = None

    @property
    def access(self) -> AccessInfo:
        if self.port is None:
            raise RuntimeError(f"service {self.name} is not started")
        return AccessInfo.local(self.host, self.port)

    @property
    def running(self) -> bool:
        return self._thread is not None and self._thread.is_alive()

    def start(self, timeout_s: float = 5.0) -> "ServiceHandle":
        self._socket = bind_socket(self.host, self.port or self.requested_port)
        self.port = self._socket.getsockname()[1]
        config = uvicorn.Config(self.app, log_level="warning", access_log=False, lifespan="off")
        self._server = uvicorn.Server(config)
        self._thread = threading.Thread(
            target=self._server.run,
            kwargs={"sockets": [self._socket]},
            name=f"svc-{self.name}",
            daemon=True,
        )
        self._thread.start()

        deadline = time.monotonic() + timeout_s
        while not self._server.started:
            if not self._thread.is_alive() or time.monotonic() > deadline:
                self.stop()
                raise RuntimeError(f"service {self.name} failed to start on {self.host}:{self.port}")
            time.sleep(0.01)
        logger.debug(f"Service {self.name} listening on {self.access.endpoint}")
        return self

    def stop(self, timeout_s: float = 5.0) -> None:
        if self._server is not None:
            self._server.should_exit = True
        if self._thread is not None:
            self._thread.join(timeout_s)
            if self._thread.is_alive():
                logger.warning(f"Service {self.name} did not stop within {timeout_s}s, forcing exit")
                self._server.force_exit = True
                self._thread.join(timeout_s)
        if self._socket is not None:
            self._socket.close()
        self._thread = None
        self._server = None
        self._socket = None
        logger.debug(f"Service {self.name} stopped")


class BlackholeListener:
    """
    A socket that listens but never accepts.

    Connections complete in the kernel backlog, so clients send their request and then
    wait until their read timeout fires.
    """

    def __init__(self, host: str = "127.0.0.1"):
        self._socket = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._socket.bind((host, 0))
        self._socket.listen(64)
        self.host = host
        self.port = self._socket.getsockname()[1]

    @property
    def access(self) -> AccessInfo:
        return AccessInfo.local(self.host, self.port)

    def close(self) -> None:
        self._socket.close()


def free_port_access(host: str = "127.0.0.1") -> AccessInfo:
    """Access info for a port nothing listens on (connections are refused)."""
    sock = bind_socket(host, 0)
    port = sock.getsockname()[1]
    sock.close()
    return AccessInfo.local(host, port)
