"""Request/reply links between nodes: real TCP or in-process through the codec."""

from __future__ import annotations

from typing import Callable, Optional

from .protocol import Frame, TransmissionRecord, decode, encode, request


class TcpLink:
    def __init__(self, address: str, timeout: float = 10.0, bandwidth_bps: Optional[float] = None):
        self.address = address
        self.timeout = timeout
        self.bandwidth_bps = bandwidth_bps

    def exchange(self, frame: Frame) -> Frame:
        return request(self.address, frame, self.timeout, self.bandwidth_bps)

    def __repr__(self):
        return f"TcpLink({self.address!r})"


class LocalLink:
    """Delivers frames to an in-process handler, still round-tripping the bytes.

    Set ``down = True`` to simulate an unreachable peer.
    """

    def __init__(self, handler: Callable, name: str = "local"):
        self.handler = handler
        self.address = name
        self.down = False

    def exchange(self, frame: Frame) -> Frame:
        if self.down:
            raise ConnectionRefusedError(f"{self.address} is down")
        data = encode(frame)
        reply = self.handler(decode(data), TransmissionRecord(len(data), 0.0, 0.0),
                             (self.address, 0))
        if reply is None:
            raise ConnectionError(f"{self.address} sent no reply")
        return decode(encode(reply))

    def __repr__(self):
        return f"LocalLink({self.address!r})"
