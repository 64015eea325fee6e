"""Socket transport for AISP frames with bandwidth emulation.

Pacing is done in 8 KiB chunks. A sender paces with :func:`throttled_send`;
a receiver can emulate the link on ingress with ``Connection.recv(bandwidth=...)``,
which holds each frame until ``frame_bits / bandwidth`` has elapsed since its
first byte arrived.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import threading
import time
from dataclasses import dataclass
from typing import Callable, Optional

from ..errors import TransmissionError
from .frames import Frame, FrameDecoder, encode

log = logging.getLogger(__name__)

CHUNK_SIZE = 8 * 1024
DEFAULT_TIMEOUT = 30.0


@dataclass(frozen=True)
class TransmissionRecord:
    bytes_sent: int
    ideal_delay_s: float
    measured_delay_s: float


def ideal_delay(num_bytes: int, bandwidth_bps: Optional[float]) -> float:
    if not bandwidth_bps:
        return 0.0
    return num_bytes * 8 / bandwidth_bps


def _sleep_until(deadline: float) -> None:
    while True:
        remaining = deadline - time.perf_counter()
        if remaining <= 0:
            return
        time.sleep(remaining)


def throttled_send(sock: socket.socket, data: bytes, bandwidth_bps: Optional[float],
                   chunk_size: int = CHUNK_SIZE) -> TransmissionRecord:
    """Send ``data`` paced to ``bandwidth_bps`` (unpaced when None)."""
    if bandwidth_bps is not None and bandwidth_bps <= 0:
        raise ValueError("bandwidth must be positive")
    ideal = ideal_delay(len(data), bandwidth_bps)
    sent = 0
    start = time.perf_counter()
    view = memoryview(data)
    try:
        while sent < len(data):
            chunk = view[sent:sent + chunk_size]
            sock.sendall(chunk)
            sent += len(chunk)
            if bandwidth_bps:
                _sleep_until(start + sent * 8 / bandwidth_bps)
    except OSError as exc:
        raise TransmissionError(f"connection lost mid-frame: {exc}", sent) from exc
    return TransmissionRecord(sent, ideal, time.perf_counter() - start)


class Connection:
    """One frame stream over a connected socket. Not shared between threads."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.decoder = FrameDecoder()
        self._pending: list = []

    @classmethod
    def connect(cls, address, timeout: float = DEFAULT_TIMEOUT) -> "Connection":
        sock = socket.create_connection(parse_address(address), timeout=timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return cls(sock)

    def send(self, frame: Frame, bandwidth_bps: Optional[float] = None) -> TransmissionRecord:
        return throttled_send(self.sock, encode(frame), bandwidth_bps)

    def recv(self, bandwidth_bps: Optional[float] = None):
        """Next frame and its ingress record; returns (None, None) on clean EOF."""
        if self._pending:
            frame = self._pending.pop(0)
            return frame, TransmissionRecord(frame.encoded_size, 0.0, 0.0)
        start = None
        received = 0
        while True:
            try:
                data = self.sock.recv(min(CHUNK_SIZE, self.decoder.bytes_wanted()))
            except OSError as exc:
                raise TransmissionError(f"receive failed: {exc}", received) from exc
            if not data:
                if self.decoder.mid_frame:
                    raise TransmissionError("connection closed mid-frame", received)
                return None, None
            if start is None:
                start = time.perf_counter()
            received += len(data)
            if bandwidth_bps:
                _sleep_until(start + received * 8 / bandwidth_bps)
            frames = self.decoder.feed(data)
            if frames:
                self._pending.extend(frames[1:])
                frame = frames[0]
                return frame, TransmissionRecord(
                    received, ideal_delay(received, bandwidth_bps), time.perf_counter() - start
                )

    def request(self, frame: Frame, bandwidth_bps: Optional[float] = None) -> Frame:
        self.send(frame, bandwidth_bps)
        reply, _ = self.recv()
        if reply is None:
            raise TransmissionError("peer closed before replying", 0)
        return reply

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def parse_address(address) -> tuple:
    if isinstance(address, tuple):
        return address
    host, _, port = str(address).rpartition(":")
    return (host or "127.0.0.1", int(port))


def format_address(address) -> str:
    host, port = parse_address(address)
    return f"{host}:{port}"


def request(address, frame: Frame, timeout: float = DEFAULT_TIMEOUT,
            bandwidth_bps: Optional[float] = None) -> Frame:
    """Open a connection, send one frame, return the reply."""
    with Connection.connect(address, timeout) as conn:
        return conn.request(frame, bandwidth_bps)


# Handler signature: (frame, ingress record, peer address) -> reply frame or None.
FrameHandler = Callable[[Frame, TransmissionRecord, tuple], Optional[Frame]]


class FrameServer(socketserver.ThreadingTCPServer):
    """Threaded TCP server: one thread per connection, frames handled in order."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, handler: FrameHandler,
                 ingress_bandwidth_bps: Optional[float] = None,
                 egress_bandwidth_bps: Optional[float] = None,
                 on_error: Optional[Callable[[Exception, tuple], Optional[Frame]]] = None):
        self.frame_handler = handler
        self.ingress_bandwidth_bps = ingress_bandwidth_bps
        self.egress_bandwidth_bps = egress_bandwidth_bps
        self.on_error = on_error
        self._thread: Optional[threading.Thread] = None
        super().__init__(parse_address(address), _StreamHandler)

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> "FrameServer":
        self._thread = threading.Thread(target=self.serve_forever, name=f"aisp@{self.address}",
                                        daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)


class _StreamHandler(socketserver.BaseRequestHandler):
    server: FrameServer

    def handle(self):
        self.request.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        conn = Connection(self.request)
        while True:
            try:
                frame, record = conn.recv(self.server.ingress_bandwidth_bps)
            except Exception as exc:  # undecodable stream: report once, drop connection
                reply = self.server.on_error(exc, self.client_address) if self.server.on_error else None
                if reply is not None:
                    try:
                        conn.send(reply)
                    except OSError:
                        pass
                return
            if frame is None:
                return
            reply = self.server.frame_handler(frame, record, self.client_address)
            if reply is not None:
                try:
                    conn.send(reply, self.server.egress_bandwidth_bps)
                except (OSError, TransmissionError):
                    log.warning("peer %s went away before the reply", self.client_address)
                    return
