"""Message transport with two interchangeable backends.

SimTransport runs on a virtual microsecond clock advanced by a discrete-event
loop: seeded per-link latencies, scheduled link cuts, and a byte-level
delivery trace make latency-sensitive experiments reproducible. TcpTransport
is the thin framing layer used between real processes on loopback.

Both preserve FIFO order per (source, destination) link and never duplicate;
loss only happens across a scheduled cut or a dead peer, which the protocol
treats as a disconnect.
"""

from __future__ import annotations

import heapq
import random
import socket
import struct
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from .replication import Message, bytes_for, decode, encode

US = 1
MS = 1000
SECOND = 1_000_000


class EventLoop:
    """Virtual-clock event heap. Time is integer microseconds."""

    def __init__(self):
        self.now = 0
        self._heap: list[tuple[int, int, Callable, tuple]] = []
        self._seq = 0
        self.stopped = False

    def call_at(self, t: int, fn: Callable, *args) -> None:
        if t < self.now:
            t = self.now
        self._seq += 1
        heapq.heappush(self._heap, (t, self._seq, fn, args))

    def call_after(self, dt: int, fn: Callable, *args) -> None:
        self.call_at(self.now + int(dt), fn, *args)

    def run_until(self, t_end: int) -> None:
        while self._heap and not self.stopped:
            t, _seq, fn, args = self._heap[0]
            if t > t_end:
                break
            heapq.heappop(self._heap)
            self.now = t
            fn(*args)
        self.now = max(self.now, t_end)

    def run_while(self, predicate: Callable[[], bool], t_limit: int) -> None:
        while self._heap and not self.stopped and predicate():
            t, _seq, fn, args = heapq.heappop(self._heap)
            if t > t_limit:
                raise TimeoutError(f"no progress by t={t_limit}us")
            self.now = t
            fn(*args)


@dataclass
class LinkCut:
    """Links touching `nodes` (or exactly matching `pairs`) drop every frame
    sent during [start_us, end_us)."""

    start_us: int
    end_us: int
    nodes: frozenset[int] = frozenset()
    pairs: frozenset[tuple[int, int]] = frozenset()

    def cuts(self, t: int, src: int, dst: int) -> bool:
        if not self.start_us <= t < self.end_us:
            return False
        return src in self.nodes or dst in self.nodes or (src, dst) in self.pairs


@dataclass
class SimConfig:
    seed: int = 1
    latency_us: int = 500
    jitter_us: int = 0  # uniform [latency, latency + jitter]
    cuts: list[LinkCut] = field(default_factory=list)


class SimTransport:
    """Deterministic in-process network. Frames are delivered to a registered
    handler (or a pollable inbox) in per-link FIFO order at
    send_time + latency; identical seeds and schedules give identical traces."""

    def __init__(self, loop: EventLoop, config: SimConfig):
        self.loop = loop
        self.config = config
        self.rng = random.Random(config.seed)
        self.handlers: dict[int, Callable[[int, Message], None]] = {}
        self.inboxes: dict[int, dict[int, deque[Message]]] = {}
        self.last_delivery: dict[tuple[int, int], int] = {}
        self.down_nodes: set[int] = set()
        self.trace: list[tuple[int, int, int, int, int]] = []  # (t, src, dst, kind, bytes)
        self.dropped = 0

    def register(self, node_id: int, handler: Callable[[int, Message], None] | None = None) -> None:
        self.handlers[node_id] = handler
        self.inboxes.setdefault(node_id, {})

    def _latency(self) -> int:
        if self.config.jitter_us:
            return self.config.latency_us + self.rng.randrange(self.config.jitter_us + 1)
        return self.config.latency_us

    def link_up(self, src: int, dst: int, t: int | None = None) -> bool:
        if src in self.down_nodes or dst in self.down_nodes:
            return False
        t = self.loop.now if t is None else t
        return not any(c.cuts(t, src, dst) for c in self.config.cuts)

    def send(self, src: int, dst: int, frame: Message) -> bool:
        """Queue one frame; returns False if the link is cut (frame dropped,
        as the connection would be)."""
        if not self.link_up(src, dst):
            self.dropped += 1
            return False
        if src == dst:  # local short-circuit still goes through delivery
            t = self.loop.now
        else:
            t = self.loop.now + self._latency()
        link = (src, dst)
        t = max(t, self.last_delivery.get(link, 0))  # FIFO per link
        self.last_delivery[link] = t
        self.loop.call_at(t, self._deliver, src, dst, frame)
        return True

    def _deliver(self, src: int, dst: int, frame: Message) -> None:
        if dst in self.down_nodes or src in self.down_nodes:
            self.dropped += 1
            return
        self.trace.append((self.loop.now, src, dst, frame.kind, bytes_for(frame)))
        frame.source_node = src
        handler = self.handlers.get(dst)
        if handler is not None:
            handler(src, frame)
        else:
            self.inboxes.setdefault(dst, {}).setdefault(src, deque()).append(frame)

    def poll(self, node_id: int, source: int) -> Message | None:
        q = self.inboxes.get(node_id, {}).get(source)
        return q.popleft() if q else None


# -- real sockets -----------------------------------------------------------

_LEN = struct.Struct("<I")


def send_frame(sock: socket.socket, msg: Message) -> int:
    data = encode(msg)
    sock.sendall(data)
    return len(data)


class FrameReader:
    """Incremental frame decoder over a stream socket."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.buf = bytearray()

    def recv_frame(self) -> Message | None:
        """Blocking read of one frame; None on clean EOF."""
        while True:
            if len(self.buf) >= 4:
                (length,) = _LEN.unpack_from(self.buf, 0)
                if len(self.buf) >= 4 + length:
                    msg, end = decode(bytes(self.buf[: 4 + length]))
                    del self.buf[:end]
                    return msg
            chunk = self.sock.recv(256 * 1024)
            if not chunk:
                return None
            self.buf.extend(chunk)


class PeerListener:
    """Accepts inbound simplex connections; each starts with a hello frame
    naming the dialing node, then carries its frames until close."""

    def __init__(self, host: str, port: int,
                 on_frame: Callable[[int, Message], None],
                 hello_code: int):
        self.on_frame = on_frame
        self.hello_code = hello_code
        self.sock = socket.create_server((host, port))
        self.threads: list[threading.Thread] = []
        self.closing = False
        self.thread = threading.Thread(target=self._accept_loop, daemon=True)
        self.thread.start()

    @property
    def port(self) -> int:
        return self.sock.getsockname()[1]

    def _accept_loop(self) -> None:
        while not self.closing:
            try:
                conn, _addr = self.sock.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            t = threading.Thread(target=self._conn_loop, args=(conn,), daemon=True)
            t.start()
            self.threads.append(t)

    def _conn_loop(self, conn: socket.socket) -> None:
        reader = FrameReader(conn)
        try:
            hello = reader.recv_frame()
            if hello is None or hello.table_id != self.hello_code:
                return
            peer = hello.source_worker  # dialer's node id rides here
            while True:
                msg = reader.recv_frame()
                if msg is None:
                    return
                msg.source_node = peer
                self.on_frame(peer, msg)
        except (OSError, ValueError):
            return
        finally:
            conn.close()

    def close(self) -> None:
        self.closing = True
        try:
            self.sock.close()
        except OSError:
            pass


def dial(host: str, port: int, my_node: int, hello_code: int,
         timeout_s: float = 10.0) -> socket.socket:
    import time as _time
    deadline = _time.monotonic() + timeout_s
    last: Exception | None = None
    while _time.monotonic() < deadline:
        try:
            sock = socket.create_connection((host, port), timeout=2.0)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            hello = Message(kind=2, table_id=hello_code, tid=0, key=b"", source_worker=my_node)
            send_frame(sock, hello)
            sock.settimeout(None)
            return sock
        except OSError as e:
            last = e
            _time.sleep(0.05)
    raise ConnectionError(f"cannot reach {host}:{port}: {last}")
