"""Benchmark engines: throughput, ping-pong latency, TTFB, fan-in.

Each engine runs over either transport and measures both connection types:

    native   plain connect, no overlay involvement
    broker   connection setup through the agents, then a plain connect

The fabric engines are deterministic (times are exact multiples of the
configured link delay); the socket engines measure wall-clock behavior on
loopback.  Data streams are stop-and-wait (one message in flight, one-byte
ack), which makes simulated throughput well-defined and identical in both
directions.

Summary rows use the schema connection_type,metric,mean,median,std,min,max;
eCDF files are two-column value,quantile; a raw dump of every sample always
accompanies a summary so the stats can be recomputed independently.
"""

from __future__ import annotations

import csv
import socket as socketlib
import statistics
import threading
import time
from collections import defaultdict
from dataclasses import dataclass

from .agent import NodeAgent
from .nat import DEFAULT_PROFILE
from .proto import Endpoint
from .seed import SeedAgent
from .sim import Fabric, FabricConfig
from .sockets import SocketTransport, join_network, register_listener
from .sockets import request_setup as setup_sync

MSG_SIZE = 1024          # ping-pong payload bytes
ROUNDS = 128             # ping-pong rounds per rep
REPS = 1024              # reps per pair
PAIRS = 32               # concurrently measured pairs
CHUNK = 1 << 16          # throughput write size
ACK = b"k"               # stop-and-wait acknowledgement byte


@dataclass
class BenchRecord:
    connection_type: str
    metric: str
    mean: float
    median: float
    std: float
    min: float
    max: float

    def row(self) -> list:
        return [self.connection_type, self.metric, self.mean, self.median,
                self.std, self.min, self.max]


def summarize(connection_type: str, metric: str, values: list[float]) -> BenchRecord:
    return BenchRecord(connection_type, metric,
                       statistics.fmean(values), statistics.median(values),
                       statistics.pstdev(values), min(values), max(values))


def write_summary(path: str, records: list[BenchRecord]) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["connection_type", "metric", "mean", "median",
                      "std", "min", "max"])
        for rec in records:
            out.writerow(rec.row())


def write_ecdf(path: str, values: list[float]) -> None:
    ordered = sorted(values)
    n = len(ordered)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["value", "quantile"])
        for i, v in enumerate(ordered, start=1):
            out.writerow([v, i / n])


def write_raw(path: str, series: dict[str, list[float]]) -> None:
    """One labeled sample per line: '<connection_type>.<metric> <value>'."""
    with open(path, "w") as fh:
        for label, values in series.items():
            for v in values:
                fh.write(f"{label} {v}\n")


# -- fabric topology ---------------------------------------------------------


class SimOverlay:
    """2*pairs NAT'd nodes joined through a public seed, mesh complete."""

    def __init__(self, pairs: int, delay_us: float = 100.0,
                 policy=DEFAULT_PROFILE):
        self.delay_ns = int(delay_us * 1000)
        self.fabric = Fabric(FabricConfig(link_delay=delay_us * 1e-6))
        self.seed = SeedAgent(self.fabric.add_host("54.0.0.100"), port=7077)
        self.agents: list[NodeAgent] = []
        self.hosts = []
        self._serving: set[tuple[int, int]] = set()
        self._next_src = 20000
        failures: list[Exception] = []
        for i in range(1, 2 * pairs + 1):
            self.fabric.add_gateway(f"10.{i}.0.0/16",
                                    f"54.1.{i >> 8 & 255}.{i & 255}", policy)
            host = self.fabric.add_host(f"10.{i}.0.2")
            agent = NodeAgent(host, self.seed.external)
            agent.start(lambda a: None, failures.append)
            self.agents.append(agent)
            self.hosts.append(host)
        self.fabric.drain()
        if failures:
            raise RuntimeError(f"overlay never formed: {failures[0]}")

    def serve(self, node: int, port: int, accept) -> Endpoint:
        """Open an app listener on a node once; return its overlay address."""
        if (node, port) not in self._serving:
            self.hosts[node].listen(port, accept)
            self.agents[node].register_listener(
                Endpoint(self.hosts[node].ip, port))
            self._serving.add((node, port))
        return Endpoint(self.agents[node].external.ip, port)

    def next_port(self) -> int:
        """Fresh app source port: every dial uses a never-reused 4-tuple."""
        self._next_src += 1
        return self._next_src

    def open(self, node: int, dst: Endpoint, src_port: int, path: str,
             on_stream) -> None:
        """Connect node -> dst via the chosen path; on_stream(stream, err)."""
        host, agent = self.hosts[node], self.agents[node]

        if path == "native":
            # a direct dial across two gateways needs the far side punched
            # by hand; the peer node is whoever owns dst's external address
            owner = next(i for i, a in enumerate(self.agents)
                         if a.external.ip == dst.ip)
            self.hosts[owner].punch(dst.port,
                                    Endpoint(agent.external.ip, src_port))
            host.connect(dst, on_stream, local_port=src_port)
            return

        def setup_done(err):
            if err is not None:
                on_stream(None, err)
                return
            host.connect(dst, on_stream, local_port=src_port)

        agent.request_setup(Endpoint(host.ip, src_port), dst, setup_done)


def _echo_accept(stream) -> None:
    stream.on(stream.send, lambda: None)


def _sink_accept(stream) -> None:
    """Ack each delivery with one byte (stop-and-wait receiver)."""
    stream.on(lambda data: stream.send(ACK), lambda: None)


def _collect_stream(streams: list):
    def on_stream(stream, err):
        streams.append((stream, err))
    return on_stream


def ttfb_sim(pairs: int = 1, reps: int = 16, path: str = "broker",
             delay_us: float = 100.0, overlay: SimOverlay | None = None):
    """Per-connection time to the server's first byte, in µs.

    Returns (values, failures): failed establishments are counted, never
    silently dropped.
    """
    overlay = overlay or SimOverlay(pairs, delay_us)
    values: list[float] = []
    failures: list[Exception] = []

    def banner_accept(stream):
        stream.send(b"!")
        stream.on(lambda data: None, lambda: None)

    for rep in range(reps):
        for k in range(pairs):
            dst = overlay.serve(2 * k + 1, 9000, banner_accept)
            src_port = overlay.next_port()
            t0 = overlay.fabric.now_ns

            def on_stream(stream, err, t0=t0):
                if err is not None:
                    failures.append(err)
                    return

                def first_byte(data):
                    values.append((overlay.fabric.now_ns - t0) / 1000.0)
                    stream.close()

                stream.on(first_byte, lambda: None)

            overlay.open(2 * k, dst, src_port, path, on_stream)
            overlay.fabric.drain()
    return values, failures


def latency_sim(pairs: int = 1, msg_size: int = MSG_SIZE, rounds: int = ROUNDS,
                reps: int = 8, path: str = "broker", delay_us: float = 100.0,
                overlay: SimOverlay | None = None):
    """Per-rep mean ping-pong RTT in µs over an established stream."""
    overlay = overlay or SimOverlay(pairs, delay_us)
    values: list[float] = []
    msg = b"\xa5" * msg_size
    for k in range(pairs):
        dst = overlay.serve(2 * k + 1, 9100, _echo_accept)
        streams: list = []
        overlay.open(2 * k, dst, overlay.next_port(), path,
                     _collect_stream(streams))
        overlay.fabric.drain()
        stream, err = streams[0]
        if err is not None:
            raise RuntimeError(f"pair {k} never connected: {err}")
        for _ in range(reps):
            rtts: list[int] = []
            state = {"t0": 0, "buf": 0}

            def pong(data, stream=stream, rtts=rtts, state=state):
                state["buf"] += len(data)
                while state["buf"] >= msg_size:
                    state["buf"] -= msg_size
                    rtts.append(overlay.fabric.now_ns - state["t0"])
                    if len(rtts) < rounds:
                        state["t0"] = overlay.fabric.now_ns
                        stream.send(msg)

            stream.on(pong, lambda: None)
            state["t0"] = overlay.fabric.now_ns
            stream.send(msg)
            overlay.fabric.drain()
            values.append(statistics.fmean(rtts) / 1000.0)
        stream.close()
        overlay.fabric.drain()
    return values


class _StopAndWait:
    """Send `rounds` messages one at a time, each awaiting a one-byte ack.

    Timestamps are taken inside delivery callbacks, so draining the event
    heap afterwards cannot distort them.
    """

    def __init__(self, fabric: Fabric, stream, msg: bytes, rounds: int):
        self.fabric = fabric
        self.stream = stream
        self.msg = msg
        self.rounds = rounds
        self.acked = 0
        self.t0 = fabric.now_ns
        self.t_done = self.t0
        stream.on(self._on_ack, lambda: None)
        stream.send(msg)

    def _on_ack(self, data: bytes) -> None:
        for _ in data:
            self.acked += 1
            self.t_done = self.fabric.now_ns
            if self.acked < self.rounds:
                self.stream.send(self.msg)

    def mbits(self) -> float:
        elapsed = self.t_done - self.t0
        return self.acked * len(self.msg) * 8 / (elapsed / 1e9) / 1e6


def throughput_sim(pairs: int = 1, rounds: int = ROUNDS,
                   msg_size: int = MSG_SIZE, direction: str = "forward",
                   path: str = "broker", delay_us: float = 100.0,
                   overlay: SimOverlay | None = None):
    """Stop-and-wait stream rate in Mbit/s per pair.

    forward: the dialing node generates traffic and the accepting node acks;
    reverse: the accepting node generates as soon as the dial lands.
    """
    overlay = overlay or SimOverlay(pairs, delay_us)
    msg = b"\x5a" * msg_size
    values: list[float] = []
    runs: list[_StopAndWait] = []
    # the accept closure registers once per overlay; route accepts to the
    # currently running call
    overlay._thr_source = lambda stream: runs.append(
        _StopAndWait(overlay.fabric, stream, msg, rounds))

    def source_accept(stream):
        overlay._thr_source(stream)

    def ack_collect(streams):
        # the dialing side acks; wired before any event runs so the
        # source's first message is never buffered across a drain
        def on_stream(stream, err):
            if err is None:
                stream.on(lambda data, s=stream: s.send(ACK), lambda: None)
            streams.append((stream, err))
        return on_stream

    port = 9200 if direction == "forward" else 9201
    for k in range(pairs):
        accept = _sink_accept if direction == "forward" else source_accept
        dst = overlay.serve(2 * k + 1, port, accept)
        streams: list = []
        collect = (_collect_stream if direction == "forward" else ack_collect)
        overlay.open(2 * k, dst, overlay.next_port(), path, collect(streams))
        overlay.fabric.drain()
        stream, err = streams[0]
        if err is not None:
            raise RuntimeError(f"pair {k} never connected: {err}")
        if direction == "forward":
            run = _StopAndWait(overlay.fabric, stream, msg, rounds)
            overlay.fabric.drain()
            values.append(run.mbits())
        else:
            values.append(runs[k].mbits())
        stream.close()
        overlay.fabric.drain()
    return values


def fanin_sim(senders: int, rounds: int = ROUNDS, msg_size: int = MSG_SIZE,
              delay_us: float = 100.0, overlay: SimOverlay | None = None):
    """Aggregate Mbit/s into one sink from `senders` concurrent nodes."""
    overlay = overlay or SimOverlay(max(1, (senders + 1) // 2), delay_us)
    # the accept closure registers once per overlay; route deliveries to
    # whichever call is currently running
    sink = {"bytes": 0, "t_last": overlay.fabric.now_ns}
    overlay._fanin_sink = sink

    def sink_accept(stream):
        def deliver(data):
            cur = overlay._fanin_sink
            cur["bytes"] += len(data)
            cur["t_last"] = overlay.fabric.now_ns
            stream.send(ACK)

        stream.on(deliver, lambda: None)

    dst = overlay.serve(0, 9300, sink_accept)
    msg = b"\x11" * msg_size
    t0 = overlay.fabric.now_ns
    streams: list = []
    for s in range(senders):
        node = 1 + s % (len(overlay.agents) - 1)
        overlay.open(node, dst, overlay.next_port(), "broker",
                     _collect_stream(streams))
    overlay.fabric.drain()
    bad = [err for _, err in streams if err is not None]
    if bad:
        raise RuntimeError(f"fan-in sender failed: {bad[0]}")
    runs = [_StopAndWait(overlay.fabric, stream, msg, rounds)
            for stream, _ in streams]
    overlay.fabric.drain()
    assert all(r.acked == rounds for r in runs)
    for stream, _ in streams:
        stream.close()
    overlay.fabric.drain()
    elapsed = (sink["t_last"] - t0) / 1e9
    return sink["bytes"] * 8 / elapsed / 1e6


# -- loopback sockets --------------------------------------------------------


class SocketOverlay:
    """A seed plus one node on loopback; listeners register with the node."""

    def __init__(self):
        self.seed_transport = SocketTransport()
        self.seed = SeedAgent(self.seed_transport, port=0)
        self.transport = SocketTransport()
        self.agent = join_network(self.transport, self.seed.external)

    def close(self) -> None:
        self.transport.stop()
        self.seed_transport.stop()

    def serve(self, handler) -> tuple[socketlib.socket, int]:
        """A real listening socket registered with the agent; handler(conn)
        runs on its own thread per accepted connection."""
        lst = socketlib.socket()
        lst.setsockopt(socketlib.SOL_SOCKET, socketlib.SO_REUSEPORT, 1)
        lst.bind(("127.0.0.1", 0))
        lst.listen(128)
        port = lst.getsockname()[1]
        register_listener(self.agent, Endpoint("127.0.0.1", port))

        def acceptor():
            while True:
                try:
                    conn, _ = lst.accept()
                except OSError:
                    return
                conn.setsockopt(socketlib.IPPROTO_TCP, socketlib.TCP_NODELAY, 1)
                threading.Thread(target=handler, args=(conn,),
                                 daemon=True).start()

        threading.Thread(target=acceptor, daemon=True).start()
        return lst, port

    def dial(self, port: int, path: str) -> socketlib.socket:
        if path == "broker":
            # bind first so the setup request names the true source port
            sock = socketlib.socket()
            sock.setsockopt(socketlib.SOL_SOCKET, socketlib.SO_REUSEPORT, 1)
            sock.bind(("127.0.0.1", 0))
            src = Endpoint("127.0.0.1", sock.getsockname()[1])
            setup_sync(self.agent, src, Endpoint("127.0.0.1", port))
            sock.connect(("127.0.0.1", port))
        else:
            sock = socketlib.create_connection(("127.0.0.1", port))
        sock.setsockopt(socketlib.IPPROTO_TCP, socketlib.TCP_NODELAY, 1)
        return sock


def _recv_exact(sock: socketlib.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed mid-message")
        buf.extend(chunk)
    return bytes(buf)


def ttfb_socket(overlay: SocketOverlay, reps: int, path: str):
    """connect -> first byte µs on loopback; returns (values, failures)."""
    def handler(conn):
        try:
            conn.sendall(b"!")
            conn.close()
        except OSError:
            pass

    lst, port = overlay.serve(handler)
    values: list[float] = []
    failures: list[Exception] = []
    try:
        for _ in range(reps):
            t0 = time.perf_counter()
            try:
                sock = overlay.dial(port, path)
                _recv_exact(sock, 1)
            except Exception as exc:
                failures.append(exc)
                continue
            values.append((time.perf_counter() - t0) * 1e6)
            sock.close()
    finally:
        lst.close()
    return values, failures


def latency_socket(overlay: SocketOverlay, msg_size: int = MSG_SIZE,
                   rounds: int = ROUNDS, reps: int = REPS,
                   path: str = "broker"):
    """Per-rep mean RTT µs of `rounds` ping-pong exchanges on one stream."""
    def handler(conn):
        try:
            while True:
                conn.sendall(_recv_exact(conn, msg_size))
        except (ConnectionError, OSError):
            pass

    lst, port = overlay.serve(handler)
    msg = b"\xa5" * msg_size
    values: list[float] = []
    try:
        sock = overlay.dial(port, path)
        for _ in range(reps):
            t0 = time.perf_counter()
            for _ in range(rounds):
                sock.sendall(msg)
                _recv_exact(sock, msg_size)
            values.append((time.perf_counter() - t0) / rounds * 1e6)
        sock.close()
    finally:
        lst.close()
    return values


class _ByteMeter:
    """Thread-safe per-second byte buckets relative to a shared origin."""

    def __init__(self):
        self.t0 = time.perf_counter()
        self._lock = threading.Lock()
        self._buckets: dict[int, int] = defaultdict(int)
        self.total = 0

    def add(self, n: int) -> None:
        sec = int(time.perf_counter() - self.t0)
        with self._lock:
            self._buckets[sec] += n
            self.total += n

    def samples(self, duration: float) -> list[float]:
        """Full-second Mbit/s samples; sub-second runs yield one average."""
        if duration < 1.0:
            return [self.total * 8 / duration / 1e6]
        with self._lock:
            return [self._buckets[i] * 8 / 1e6
                    for i in range(int(duration)) if i in self._buckets]


def _pump_out(sock: socketlib.socket, stop: threading.Event) -> None:
    blob = b"\0" * CHUNK
    try:
        while not stop.is_set():
            sock.sendall(blob)
    except OSError:
        pass


def _pump_in(sock: socketlib.socket, meter: _ByteMeter,
             stop: threading.Event) -> None:
    try:
        while not stop.is_set():
            data = sock.recv(1 << 18)
            if not data:
                return
            meter.add(len(data))
    except OSError:
        pass


def throughput_socket(overlay: SocketOverlay, duration: float,
                      path: str = "broker", direction: str = "forward",
                      pairs: int = 1):
    """Per-second Mbit/s samples across `pairs` concurrent streams.

    forward: dialing side sends; reverse: accepting side sends.  Every pair
    gets its own listener, connection, and meter; all samples are pooled.
    """
    stop = threading.Event()
    meters = [_ByteMeter() for _ in range(pairs)]
    listeners, socks, threads = [], [], []
    for meter in meters:
        def handler(conn, meter=meter):
            if direction == "reverse":
                _pump_out(conn, stop)
            else:
                _pump_in(conn, meter, stop)

        lst, port = overlay.serve(handler)
        listeners.append(lst)
        sock = overlay.dial(port, path)
        socks.append(sock)
        if direction == "reverse":
            t = threading.Thread(target=_pump_in, args=(sock, meter, stop),
                                 daemon=True)
        else:
            t = threading.Thread(target=_pump_out, args=(sock, stop),
                                 daemon=True)
        t.start()
        threads.append(t)
    time.sleep(duration)
    stop.set()
    for sock in socks:
        try:
            sock.shutdown(socketlib.SHUT_RDWR)
        except OSError:
            pass
        sock.close()
    for lst in listeners:
        lst.close()
    for t in threads:
        t.join(timeout=2.0)
    values: list[float] = []
    for meter in meters:
        values.extend(meter.samples(duration))
    return values


def fanin_socket(overlay: SocketOverlay, senders: int, duration: float):
    """Aggregate per-second Mbit/s into one listener from many senders."""
    stop = threading.Event()
    meter = _ByteMeter()

    def handler(conn):
        _pump_in(conn, meter, stop)

    lst, port = overlay.serve(handler)
    socks = [overlay.dial(port, "broker") for _ in range(senders)]
    threads = []
    for sock in socks:
        t = threading.Thread(target=_pump_out, args=(sock, stop), daemon=True)
        t.start()
        threads.append(t)
    time.sleep(duration)
    stop.set()
    for sock in socks:
        try:
            sock.shutdown(socketlib.SHUT_RDWR)
        except OSError:
            pass
        sock.close()
    lst.close()
    for t in threads:
        t.join(timeout=2.0)
    return meter.samples(duration)
