"""Transports carrying encoded frames between engine components.

The in-memory hub keeps one FIFO queue per directed channel and delivers
one frame at a time under a selection strategy: "fifo" replays global
send order (deterministic), "random" picks among non-empty channels with
a seeded RNG while preserving per-channel order — used to exercise fence
interleavings. The socket transport runs the same components over real
loopback TCP with a select() pump; frames are reassembled from the byte
stream via the header's length field.
"""

from __future__ import annotations

import random
import select
import socket
import struct
from collections import deque
from typing import Callable, Optional

from .wire import HEADER_LEN


class Channel:
    def __init__(self, name: str, deliver: Callable[[bytes], None], hub: "InMemHub"):
        self.name = name
        self._deliver = deliver
        self._hub = hub
        self.queue: deque[tuple[int, bytes]] = deque()

    def send(self, frame: bytes) -> None:
        self.queue.append((self._hub.next_stamp(), frame))


class InMemHub:
    def __init__(self, mode: str = "fifo", rng: Optional[random.Random] = None):
        if mode not in ("fifo", "random"):
            raise ValueError(f"unknown hub mode {mode!r}")
        if mode == "random" and rng is None:
            raise ValueError("random mode requires an rng")
        self._mode = mode
        self._rng = rng
        self._channels: list[Channel] = []
        self._stamp = 0

    def next_stamp(self) -> int:
        self._stamp += 1
        return self._stamp

    def channel(self, name: str, deliver: Callable[[bytes], None]) -> Callable[[bytes], None]:
        ch = Channel(name, deliver, self)
        self._channels.append(ch)
        return ch.send

    def _pick(self) -> Optional[Channel]:
        busy = [ch for ch in self._channels if ch.queue]
        if not busy:
            return None
        if self._mode == "random":
            return self._rng.choice(busy)
        return min(busy, key=lambda ch: ch.queue[0][0])

    def step(self) -> bool:
        """Deliver one frame; False when every queue is empty."""
        ch = self._pick()
        if ch is None:
            return False
        _, frame = ch.queue.popleft()
        ch._deliver(frame)
        return True

    def pump(self, max_steps: int = 1_000_000) -> int:
        steps = 0
        while self.step():
            steps += 1
            if steps >= max_steps:
                raise RuntimeError("transport pump exceeded step budget")
        return steps


class FrameBuffer:
    """Reassemble complete frames from a byte stream."""

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[bytes]:
        self._buf.extend(data)
        frames: list[bytes] = []
        while True:
            if len(self._buf) < HEADER_LEN:
                break
            (payload_len,) = struct.unpack_from(">H", self._buf, 2)
            total = HEADER_LEN + payload_len
            if len(self._buf) < total:
                break
            frames.append(bytes(self._buf[:total]))
            del self._buf[:total]
        return frames

    @property
    def pending(self) -> int:
        return len(self._buf)


class SocketHub:
    """Loopback-TCP transport pumped by a single select() loop.

    Endpoints are registered client-side sockets plus the core's accepted
    connections; deliver callbacks fire as complete frames arrive. Used
    for interop testing; frame interleaving across peers follows socket
    readiness, so reports are not byte-stable like the in-memory hub's.
    """

    def __init__(self) -> None:
        self._server = socket.create_server(("127.0.0.1", 0))
        self._server.setblocking(True)
        self._socks: list[socket.socket] = []
        self._handlers: dict[socket.socket, Callable[[bytes], None]] = {}
        self._buffers: dict[socket.socket, FrameBuffer] = {}

    @property
    def address(self) -> tuple[str, int]:
        return self._server.getsockname()

    def connect_client(self, deliver: Callable[[bytes], None]) -> Callable[[bytes], None]:
        """Open a client connection; returns its send callable."""
        sock = socket.create_connection(self.address)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._register(sock, deliver)
        return lambda frame: sock.sendall(frame)

    def accept_peer(self, deliver_factory) -> Callable[[bytes], None]:
        """Accept one connection at the core; deliver_factory(send) -> handler."""
        conn, _ = self._server.accept()
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

        def send(frame: bytes) -> None:
            conn.sendall(frame)

        self._register(conn, deliver_factory(send))
        return send

    def _register(self, sock: socket.socket, deliver: Callable[[bytes], None]) -> None:
        self._socks.append(sock)
        self._handlers[sock] = deliver
        self._buffers[sock] = FrameBuffer()

    def pump(self, idle_rounds: int = 3, timeout: float = 0.05) -> None:
        """Deliver frames until the sockets stay quiet for idle_rounds polls."""
        quiet = 0
        while quiet < idle_rounds:
            readable, _, _ = select.select(self._socks, [], [], timeout)
            if not readable:
                quiet += 1
                continue
            quiet = 0
            for sock in readable:
                data = sock.recv(65536)
                if not data:
                    continue
                for frame in self._buffers[sock].feed(data):
                    self._handlers[sock](frame)

    def close(self) -> None:
        for sock in self._socks:
            sock.close()
        self._server.close()
