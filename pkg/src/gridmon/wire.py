"""Control protocol plumbing.

Every service speaks the same framing: newline-delimited UTF-8 over TCP,
one JSON object per line with a mandatory "type" field. This module owns
the framing, a threaded line-protocol server and a small client connection
wrapper; the frame vocabularies live with their services.
"""
from __future__ import annotations

import json
import socket
import socketserver
import threading
from typing import Callable, Optional

PROTO_VERSION = 1
MAX_FRAME_BYTES = 8 * 1024 * 1024


class WireError(Exception):
    def __init__(self, code: str, msg: str = ""):
        super().__init__(f"{code}: {msg}" if msg else code)
        self.code = code
        self.msg = msg


def error_frame(code: str, msg: str = "") -> dict:
    return {"type": "ERROR", "code": code, "msg": msg}


def encode_frame(frame: dict) -> bytes:
    return json.dumps(frame, separators=(",", ":")).encode("utf-8") + b"\n"


def read_frame(rfile) -> Optional[dict]:
    """Read one frame; None on clean EOF."""
    line = rfile.readline(MAX_FRAME_BYTES + 1)
    if not line:
        return None
    if len(line) > MAX_FRAME_BYTES:
        raise WireError("FRAME_TOO_LARGE", f"> {MAX_FRAME_BYTES} bytes")
    line = line.strip()
    if not line:
        return {}
    frame = json.loads(line.decode("utf-8"))
    if not isinstance(frame, dict) or "type" not in frame:
        raise WireError("BAD_FRAME", "frame must be an object with a type")
    return frame


class Connection:
    """One framed TCP connection; writes are serialized by a lock."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.rfile = sock.makefile("rb")
        self._wlock = threading.Lock()
        self.closed = False

    @classmethod
    def open(cls, host: str, port: int, timeout_s: float = 5.0) -> "Connection":
        sock = socket.create_connection((host, port), timeout=timeout_s)
        sock.settimeout(None)
        return cls(sock)

    @classmethod
    def open_endpoint(cls, endpoint: str, timeout_s: float = 5.0) -> "Connection":
        host, port = split_endpoint(endpoint)
        return cls.open(host, port, timeout_s)

    def send(self, frame: dict) -> None:
        data = encode_frame(frame)
        with self._wlock:
            self.sock.sendall(data)

    def recv(self) -> Optional[dict]:
        return read_frame(self.rfile)

    def rpc(self, frame: dict) -> dict:
        """Send one frame and read one reply; raises on ERROR replies."""
        self.send(frame)
        reply = self.recv()
        if reply is None:
            raise WireError("CONNECTION_CLOSED")
        if reply.get("type") == "ERROR":
            raise WireError(reply.get("code", "ERROR"), reply.get("msg", ""))
        return reply

    def close(self) -> None:
        self.closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self.sock.close()
        except OSError:
            pass


def split_endpoint(endpoint: str) -> tuple[str, int]:
    host, _, port = endpoint.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"endpoint must be host:port, got {endpoint!r}")
    return host, int(port)


class FrameServer:
    """Threaded TCP server; the handler owns the connection for its lifetime.

    handler(conn) is invoked per accepted connection on its own thread and
    may stream frames in both directions (event subscriptions do).
    """

    def __init__(self, listen: str, handler: Callable[[Connection], None]):
        host, port = split_endpoint(listen) if ":" in listen else (listen, 0)
        outer = self

        class _Handler(socketserver.BaseRequestHandler):
            def handle(self) -> None:
                conn = Connection(self.request)
                try:
                    outer._handler(conn)
                except (ConnectionError, WireError, OSError, json.JSONDecodeError):
                    pass
                finally:
                    conn.close()

        class _Server(socketserver.ThreadingTCPServer):
            daemon_threads = True
            allow_reuse_address = True

        self._handler = handler
        self._server = _Server((host, port), _Handler)
        self._thread: Optional[threading.Thread] = None

    @property
    def endpoint(self) -> str:
        host, port = self._server.server_address[:2]
        return f"{host}:{port}"

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    def start(self) -> None:
        self._thread = threading.Thread(
            target=self._server.serve_forever, kwargs={"poll_interval": 0.05},
            name=f"frameserver:{self.port}", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread:
            self._thread.join(timeout=5)
