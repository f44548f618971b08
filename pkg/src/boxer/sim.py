"""Deterministic in-process network fabric.

Hosts, constant-delay links, and NAT gateways, driven by one discrete-event
loop.  Time is integer nanoseconds.  Every segment or timer gets a monotone
sequence number at scheduling time and the loop processes entries strictly
by (time, seq), so identical configurations and identical program behavior
produce byte-identical traces.

TCP is modeled at handshake granularity: SYN out, SYN-ACK back, then DATA
segments (one per send call) in order, FIN to close.  A FIN answering an
unestablished dial means connection-refused.  PUNCH is a SYN the sender
abandons: it exists for the state it installs in the sender's gateway and
is a no-op wherever it lands.

Source translation happens when a segment leaves its subnet; inbound
filtering happens when it reaches the destination gateway.  Trace rows
record the in-flight form: source already translated, destination not yet
rewritten.
"""

from __future__ import annotations

import heapq
import json
import random
from dataclasses import dataclass, field
from typing import Callable, Optional

from .nat import DEFAULT_PROFILE, NatGateway, NatPolicy
from .proto import Endpoint
from .transport import (
    BindFailed,
    ConnectRefused,
    ConnectTimedOut,
    Listener,
    Stream,
    Transport,
    TransportError,
)

SYN = "SYN"
SYN_ACK = "SYN-ACK"
DATA = "DATA"
FIN = "FIN"
PUNCH = "PUNCH"

_EPHEMERAL_BASE = 40000


class Exhausted(Exception):
    """step() found no pending events."""


@dataclass(frozen=True)
class FabricConfig:
    rng_seed: int = 0
    link_delay: float = 100e-6           # one-way, seconds
    gateways: dict = field(default_factory=dict)   # subnet -> NatPolicy
    mapping_idle_timeout: float | None = None
    jitter: float = 0.0                  # max extra per-segment delay, seconds
    connect_timeout: float = 2.0


@dataclass
class TraceEvent:
    time: int
    seq: int
    kind: str
    src: str
    dst: str
    verdict: str

    def row(self) -> dict:
        return {"time": self.time, "seq": self.seq, "kind": self.kind,
                "src": self.src, "dst": self.dst, "verdict": self.verdict}


class _Segment:
    __slots__ = ("kind", "src", "dst", "payload", "seq", "conn", "sender_side",
                 "origin", "stream_seq")

    def __init__(self, kind, src, dst, payload=b"", conn=None, sender_side=None,
                 origin=None, stream_seq=-1):
        self.kind = kind
        self.src = src
        self.dst = dst
        self.payload = payload
        self.seq = -1
        self.conn = conn
        self.sender_side = sender_side
        self.origin = origin
        self.stream_seq = stream_seq


class _Timer:
    __slots__ = ("fn",)

    def __init__(self, fn):
        self.fn = fn

    def cancel(self):
        self.fn = None


class _Conn:
    """Both halves of one simulated TCP connection."""

    __slots__ = ("cid", "a", "b", "established", "timed_out", "timer",
                 "on_result", "listener")

    def __init__(self, cid):
        self.cid = cid
        self.a: Optional[SimStream] = None   # dialer side
        self.b: Optional[SimStream] = None   # accepter side
        self.established = False
        self.timed_out = False
        self.timer: Optional[_Timer] = None
        self.on_result = None
        self.listener = None


class SimStream(Stream):
    def __init__(self, fabric: "Fabric", host: "Host", conn: _Conn, side: str,
                 local: Endpoint, peer: Endpoint):
        self._fabric = fabric
        self._host = host
        self._conn = conn
        self._side = side
        self.local = local
        self.peer = peer
        self._data_cb: Callable[[bytes], None] | None = None
        self._close_cb: Callable[[], None] | None = None
        self._pending: list[bytes] = []
        self.closed = False
        self._peer_closed = False
        # per-direction sequencing keeps the byte stream ordered even when
        # per-segment jitter reorders deliveries
        self._send_seq = 0
        self._recv_expect = 0
        self._recv_buf: dict[int, tuple[str, bytes]] = {}

    def on(self, data_cb, close_cb):
        self._data_cb = data_cb
        self._close_cb = close_cb
        for chunk in self._pending:
            data_cb(chunk)
        self._pending.clear()
        if self._peer_closed and close_cb:
            close_cb()

    def send(self, data: bytes) -> None:
        if self.closed:
            raise TransportError("send on closed stream")
        self._fabric._emit(self._host, _Segment(
            DATA, self.local, self.peer, bytes(data), self._conn, self._side,
            stream_seq=self._next_seq()))

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        self._fabric._emit(self._host, _Segment(
            FIN, self.local, self.peer, b"", self._conn, self._side,
            stream_seq=self._next_seq()))

    def _next_seq(self) -> int:
        seq = self._send_seq
        self._send_seq += 1
        return seq

    # -- fabric side -------------------------------------------------------

    def _arrive(self, kind: str, payload: bytes, stream_seq: int) -> None:
        """Reassemble in sender order regardless of delivery order."""
        if stream_seq != self._recv_expect:
            self._recv_buf[stream_seq] = (kind, payload)
            return
        self._process(kind, payload)
        self._recv_expect += 1
        while self._recv_expect in self._recv_buf:
            kind, payload = self._recv_buf.pop(self._recv_expect)
            self._process(kind, payload)
            self._recv_expect += 1

    def _process(self, kind: str, payload: bytes) -> None:
        if kind == DATA:
            self._deliver(payload)
        else:
            self._peer_close()

    def _deliver(self, data: bytes) -> None:
        if self.closed:
            return
        if self._data_cb is None:
            self._pending.append(data)
        else:
            self._data_cb(data)

    def _peer_close(self) -> None:
        if self.closed or self._peer_closed:
            return
        self._peer_closed = True
        if self._close_cb:
            self._close_cb()


class _SimListener(Listener):
    def __init__(self, host: "Host", port: int, on_accept, shared: bool):
        self._host = host
        self.endpoint = Endpoint(host.ip, port)
        self.on_accept = on_accept
        self.shared = shared
        self.closed = False

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self._host._drop_listener(self.endpoint.port)


class _TempBind:
    """A port-shared binding held only long enough to punch from it."""

    def __init__(self, host: "Host", port: int):
        self._host = host
        self.port = port
        self.released = False

    def release(self) -> None:
        if not self.released:
            self.released = True
            self._host._release_shared(self.port)


class Host(Transport):
    """One machine on the fabric; doubles as its Transport."""

    def __init__(self, fabric: "Fabric", ip: str, gateway: NatGateway | None):
        self._fabric = fabric
        self.ip = ip
        self.gateway = gateway
        self._listeners: dict[int, _SimListener] = {}
        # port -> ("excl",) or ["shared", refcount]
        self._bindings: dict[int, list] = {}
        self._next_eph = _EPHEMERAL_BASE

    # -- Transport ---------------------------------------------------------

    def now(self) -> float:
        return self._fabric.now_ns / 1e9

    def call_later(self, delay: float, fn):
        return self._fabric.call_later(delay, fn)

    def listen(self, port: int, on_accept, shared: bool = True) -> Listener:
        if port == 0:
            port = self._ephemeral()
        elif port in self._listeners:
            raise BindFailed(f"port {port} already has a listener on {self.ip}")
        else:
            self._bind(port, shared)
        lst = _SimListener(self, port, on_accept, shared)
        self._listeners[port] = lst
        return lst

    def connect(self, remote: Endpoint, on_result, local_port: int | None = None,
                timeout: float | None = None) -> None:
        if timeout is None:
            timeout = self._fabric.config.connect_timeout
        if local_port is None:
            port = self._ephemeral()
        else:
            port = local_port
            binding = self._bindings.get(port)
            if binding is None:
                self._bind(port, shared=True)
            elif binding[0] == "excl":
                raise BindFailed(f"port {port} exclusively bound on {self.ip}")
        conn = self._fabric._new_conn()
        local = Endpoint(self.ip, port)
        stream = SimStream(self._fabric, self, conn, "a", local, remote)
        conn.a = stream

        def fire_timeout():
            if not conn.established:
                conn.timed_out = True
                on_result(None, ConnectTimedOut(f"connect {local} -> {remote}"))

        conn.timer = self._fabric.call_later(timeout, fire_timeout)
        conn.on_result = on_result
        self._fabric._emit(self, _Segment(SYN, local, remote, b"", conn, "a"))

    def punch(self, local_port: int, remote: Endpoint) -> None:
        self._fabric._emit(self, _Segment(
            PUNCH, Endpoint(self.ip, local_port), remote, b"", None, None))

    # -- extras used by the services ----------------------------------------

    def temp_bind(self, port: int) -> _TempBind:
        self._bind(port, shared=True)
        return _TempBind(self, port)

    # -- bookkeeping ---------------------------------------------------------

    def _bind(self, port: int, shared: bool) -> None:
        binding = self._bindings.get(port)
        if binding is None:
            self._bindings[port] = ["shared", 1] if shared else ["excl"]
        elif binding[0] == "shared" and shared:
            binding[1] += 1
        else:
            raise BindFailed(f"port {port} already bound on {self.ip}")

    def _release_shared(self, port: int) -> None:
        binding = self._bindings.get(port)
        if binding and binding[0] == "shared":
            binding[1] -= 1
            if binding[1] == 0:
                del self._bindings[port]

    def _drop_listener(self, port: int) -> None:
        self._listeners.pop(port, None)
        self._release_shared(port)

    def _ephemeral(self) -> int:
        while True:
            port = self._next_eph
            self._next_eph += 1
            if port > 0xFFFF:
                raise BindFailed(f"ephemeral ports exhausted on {self.ip}")
            if port not in self._bindings:
                self._bind(port, shared=True)
                return port

    # -- segment arrival -----------------------------------------------------

    def _receive(self, seg: _Segment) -> None:
        if seg.kind == PUNCH:
            return  # its work was done at the sender's gateway
        if seg.kind == SYN:
            listener = self._listeners.get(seg.dst.port)
            conn = seg.conn
            if listener is None or listener.closed:
                self._fabric._emit(self, _Segment(
                    FIN, seg.dst, seg.src, b"", conn, "b"))
                return
            stream = SimStream(self._fabric, self, conn, "b", seg.dst, seg.src)
            conn.b = stream
            conn.listener = listener
            self._fabric._emit(self, _Segment(SYN_ACK, seg.dst, seg.src, b"", conn, "b"))
            return

        conn = seg.conn
        if conn is None:
            return
        if seg.kind == SYN_ACK:
            if conn.timed_out or conn.established:
                return
            conn.established = True
            if conn.timer:
                conn.timer.cancel()
            # the handshake completes for both ends at this instant; the
            # accepter learns first so it is ready before any client data
            listener = conn.listener
            if listener is not None and not listener.closed:
                listener.on_accept(conn.b)
            conn.on_result(conn.a, None)
            return
        # DATA / FIN go to the stream opposite the sender
        target = conn.b if seg.sender_side == "a" else conn.a
        if seg.kind == FIN and not conn.established and seg.sender_side == "b":
            # refusal: the dial was answered by a close
            if not conn.timed_out:
                conn.timed_out = True  # suppress the pending timer
                if conn.timer:
                    conn.timer.cancel()
                conn.on_result(None, ConnectRefused(f"{seg.src} refused {seg.dst}"))
            return
        if target is not None:
            target._arrive(seg.kind, seg.payload, seg.stream_seq)


class Fabric:
    def __init__(self, config: FabricConfig | None = None):
        self.config = config = config or FabricConfig()
        self.now_ns = 0
        self._seq = 0
        self._heap: list = []
        self._hosts: dict[str, Host] = {}
        self._gateways: list[NatGateway] = []
        self._gateway_by_public_ip: dict[str, NatGateway] = {}
        self._conn_counter = 0
        self.trace: list[TraceEvent] = []
        self.rng = random.Random(config.rng_seed)
        self._delay_ns = int(round(config.link_delay * 1e9))
        self._jitter_ns = int(round(config.jitter * 1e9))
        self._idle_ns = (None if config.mapping_idle_timeout is None
                         else int(round(config.mapping_idle_timeout * 1e9)))
        for i, (subnet, policy) in enumerate(sorted(config.gateways.items()), start=1):
            self.add_gateway(subnet, f"54.0.0.{i}", policy)

    # -- topology ------------------------------------------------------------

    def add_gateway(self, subnet: str, public_ip: str,
                    policy: NatPolicy = DEFAULT_PROFILE) -> NatGateway:
        if public_ip in self._gateway_by_public_ip or public_ip in self._hosts:
            raise ValueError(f"address {public_ip} already in use")
        gw = NatGateway(subnet, public_ip, policy, idle_timeout_ns=self._idle_ns)
        self._gateways.append(gw)
        self._gateway_by_public_ip[public_ip] = gw
        return gw

    def add_host(self, ip: str) -> Host:
        if ip in self._hosts or ip in self._gateway_by_public_ip:
            raise ValueError(f"address {ip} already in use")
        gateway = None
        for gw in self._gateways:
            if gw.contains(ip):
                gateway = gw
                break
        host = Host(self, ip, gateway)
        self._hosts[ip] = host
        return host

    # -- scheduling ------------------------------------------------------------

    def call_later(self, delay: float, fn) -> _Timer:
        timer = _Timer(fn)
        self._push(self.now_ns + int(round(delay * 1e9)), timer)
        return timer

    def _push(self, time_ns: int, item) -> None:
        self._seq += 1
        if isinstance(item, _Segment):
            item.seq = self._seq
        heapq.heappush(self._heap, (time_ns, self._seq, item))

    def _new_conn(self) -> _Conn:
        self._conn_counter += 1
        return _Conn(self._conn_counter)

    def _emit(self, host: Host, seg: _Segment) -> None:
        seg.origin = host
        gw = host.gateway
        if gw is not None and not gw.contains(seg.dst.ip):
            seg.src = Endpoint(gw.public_ip,
                               gw.translate_outbound(seg.src, seg.dst, self.now_ns).port)
        delay = self._delay_ns
        if self._jitter_ns:
            delay += self.rng.randrange(self._jitter_ns + 1)
        self._push(self.now_ns + delay, seg)

    # -- the loop ---------------------------------------------------------------

    def step(self) -> TraceEvent | None:
        """Process one queue entry.

        Returns the TraceEvent for a segment, None for a timer.  Raises
        Exhausted when nothing is pending.
        """
        if not self._heap:
            raise Exhausted
        time_ns, seq, item = heapq.heappop(self._heap)
        if isinstance(item, _Timer):
            if item.fn is None:
                return None       # cancelled: discard without advancing time
            self.now_ns = time_ns
            fn, item.fn = item.fn, None
            fn()
            return None
        self.now_ns = time_ns
        return self._deliver(item)

    def drain(self, limit: int = 2_000_000) -> None:
        """Run until no events remain."""
        n = 0
        while self._heap:
            self.step()
            n += 1
            if n >= limit:
                raise RuntimeError(f"fabric did not quiesce within {limit} events")

    def trace_jsonl(self) -> str:
        return "\n".join(json.dumps(ev.row()) for ev in self.trace) + "\n"

    # -- delivery -----------------------------------------------------------------

    def _record(self, seg: _Segment, verdict: str) -> TraceEvent:
        ev = TraceEvent(self.now_ns, seg.seq, seg.kind, str(seg.src), str(seg.dst), verdict)
        self.trace.append(ev)
        return ev

    def _deliver(self, seg: _Segment) -> TraceEvent:
        gw = self._gateway_by_public_ip.get(seg.dst.ip)
        if gw is not None:
            internal = gw.filter_inbound(seg.src, seg.dst, self.now_ns)
            if internal is None:
                return self._record(seg, "dropped")
            host = self._hosts.get(internal.ip)
            if host is None:
                return self._record(seg, "dropped")
            ev = self._record(seg, "delivered")
            seg.dst = internal
            host._receive(seg)
            return ev
        host = self._hosts.get(seg.dst.ip)
        if host is None:
            return self._record(seg, "dropped")
        if host.gateway is not None:
            origin = seg.origin
            if origin is None or origin.gateway is not host.gateway:
                # private address, unreachable from outside its subnet
                return self._record(seg, "dropped")
        ev = self._record(seg, "delivered")
        host._receive(seg)
        return ev
