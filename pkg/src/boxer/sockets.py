"""Socket-backed Transport: a reactor thread drives the event-driven core.

All agent callbacks run on the reactor thread, giving the same
single-threaded dispatch the sim fabric provides.  Public Transport
methods may be called from any thread; they hop onto the reactor when
needed.  Blocking facades at the bottom wrap the callback APIs for
synchronous callers (launcher, benchmarks, CLI).

The data plane stays out of this module entirely: applications and
benchmarks use ordinary blocking sockets; only control traffic and IPC
run on the reactor.
"""

from __future__ import annotations

import errno
import heapq
import itertools
import logging
import os
import selectors
import socket
import threading
from typing import Callable, Optional

from .agent import NodeAgent, SetupError, SetupTimeout
from .proto import (
    SETUP_ERR_NO_LISTENER,
    SETUP_ERR_UNKNOWN_DESTINATION,
    Endpoint,
    NatSetupAck,
    NatSetupErr,
    NatSetupReq,
    RegisterListener,
    UnregisterListener,
)
from .transport import (
    BindFailed,
    ConnectRefused,
    ConnectTimedOut,
    FrameConn,
    Listener,
    Stream,
    Transport,
    TransportError,
)
from .agent import NoListener, UnknownDestination

log = logging.getLogger("boxer.sockets")

_READ = selectors.EVENT_READ
_WRITE = selectors.EVENT_WRITE

# synthetic endpoints for AF_UNIX streams, which have no IP identity
_LOCAL_EP = Endpoint("127.0.0.1", 1)


def _tcp_socket(shared: bool) -> socket.socket:
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    if shared:
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEPORT, 1)
    sock.setblocking(False)
    return sock


class _Timer:
    __slots__ = ("fn",)

    def __init__(self, fn):
        self.fn = fn

    def cancel(self):
        self.fn = None


class SockStream(Stream):
    """Nonblocking TCP stream bound to the reactor."""

    def __init__(self, transport: "SocketTransport", sock: socket.socket,
                 local: Endpoint | None = None, peer: Endpoint | None = None):
        self._t = transport
        self._sock = sock
        self.local = local if local is not None else Endpoint(*sock.getsockname())
        self.peer = peer if peer is not None else Endpoint(*sock.getpeername())
        self._out = bytearray()
        self._data_cb: Callable[[bytes], None] | None = None
        self._close_cb: Callable[[], None] | None = None
        self._pending: list[bytes] = []
        self._peer_closed = False
        self.closed = False
        self._closing = False
        transport._register(sock, _READ, self._io)

    def on(self, data_cb, close_cb) -> None:
        self._data_cb = data_cb
        self._close_cb = close_cb
        for chunk in self._pending:
            data_cb(chunk)
        self._pending.clear()
        if self._peer_closed and close_cb is not None:
            close_cb()

    def send(self, data: bytes) -> None:
        self._t._dispatch(lambda: self._send(bytes(data)))

    def close(self) -> None:
        self._t._dispatch(self._close)

    # -- reactor side -----------------------------------------------------

    def _send(self, data: bytes) -> None:
        if self.closed or self._closing:
            raise TransportError("send on closed stream")
        self._out.extend(data)
        self._flush()

    def _close(self) -> None:
        if self.closed or self._closing:
            return
        if self._out:
            self._closing = True     # flush, then close
        else:
            self._teardown()

    def _flush(self) -> None:
        while self._out:
            try:
                n = self._sock.send(self._out)
            except BlockingIOError:
                break
            except OSError:
                self._teardown(notify=True)
                return
            del self._out[:n]
        want = _READ | (_WRITE if self._out else 0)
        self._t._modify(self._sock, want, self._io)
        if self._closing and not self._out:
            self._teardown()

    def _io(self, mask: int) -> None:
        if mask & _WRITE:
            self._flush()
        if self.closed or not mask & _READ:
            return
        while True:
            try:
                data = self._sock.recv(65536)
            except BlockingIOError:
                return
            except OSError:
                self._teardown(notify=True)
                return
            if data == b"":
                self._teardown(notify=True)
                return
            if self._data_cb is None:
                self._pending.append(data)
            else:
                self._data_cb(data)

    def _teardown(self, notify: bool = False) -> None:
        if self.closed:
            return
        self.closed = True
        self._t._unregister(self._sock)
        self._sock.close()
        if notify:
            self._peer_closed = True
            if self._close_cb is not None:
                self._close_cb()


class SockListener(Listener):
    def __init__(self, transport: "SocketTransport", sock: socket.socket, on_accept):
        self._t = transport
        self._sock = sock
        self.on_accept = on_accept
        self.endpoint = Endpoint(*sock.getsockname())
        self.closed = False
        transport._register(sock, _READ, self._accept)

    def _accept(self, mask: int) -> None:
        while True:
            try:
                conn, _ = self._sock.accept()
            except BlockingIOError:
                return
            except OSError:
                return
            conn.setblocking(False)
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self.on_accept(SockStream(self._t, conn))

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self._t._dispatch(lambda: (self._t._unregister(self._sock),
                                       self._sock.close()))


class _PortHold:
    """A spare port-shared socket held open while punching from the port."""

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self.released = False

    def release(self) -> None:
        if not self.released:
            self.released = True
            self._sock.close()


class SocketTransport(Transport):
    """Real-socket Transport; one daemon reactor thread per instance."""

    def __init__(self, ip: str = "127.0.0.1"):
        self.ip = ip
        self._sel = selectors.DefaultSelector()
        self._timers: list = []
        self._timer_seq = itertools.count()
        self._calls: list = []
        self._lock = threading.Lock()
        rd, wr = socket.socketpair()
        rd.setblocking(False)
        wr.setblocking(False)
        self._wake_r, self._wake_w = rd, wr
        self._sel.register(rd, _READ, self._drain_wake)
        self._running = True
        self._thread = threading.Thread(target=self._run, name="boxer-reactor",
                                        daemon=True)
        self._thread.start()

    # -- reactor loop -------------------------------------------------------

    def _run(self) -> None:
        while self._running:
            try:
                events = self._sel.select(self._next_timeout())
            except OSError:
                continue
            for key, mask in events:
                if not self._running:
                    break
                try:
                    key.data(mask)
                except Exception:
                    log.exception("reactor handler failed")
            self._fire_timers()
            self._run_calls()

    def stop(self) -> None:
        if not self._running:
            return
        self._running = False
        self._wake()
        if threading.current_thread() is not self._thread:
            self._thread.join(timeout=2.0)
        self._sel.close()
        self._wake_r.close()
        self._wake_w.close()

    def _wake(self) -> None:
        try:
            self._wake_w.send(b"\0")
        except OSError:
            pass

    def _drain_wake(self, mask: int) -> None:
        try:
            while self._wake_r.recv(4096):
                pass
        except (BlockingIOError, OSError):
            pass

    def call_soon(self, fn: Callable[[], None]) -> None:
        with self._lock:
            self._calls.append(fn)
        self._wake()

    def _run_calls(self) -> None:
        with self._lock:
            calls, self._calls = self._calls, []
        for fn in calls:
            try:
                fn()
            except Exception:
                log.exception("scheduled call failed")

    def _dispatch(self, fn: Callable[[], None]) -> None:
        if threading.current_thread() is self._thread:
            fn()
        else:
            self.call_soon(fn)

    def _on_reactor(self, fn):
        """Run fn on the reactor and return its result (blocking off-thread)."""
        if threading.current_thread() is self._thread:
            return fn()
        box = []
        done = threading.Event()

        def run():
            try:
                box.append((fn(), None))
            except Exception as exc:   # re-raised in the caller
                box.append((None, exc))
            done.set()

        self.call_soon(run)
        done.wait()
        result, exc = box[0]
        if exc is not None:
            raise exc
        return result

    # -- timers ---------------------------------------------------------------

    def now(self) -> float:
        import time
        return time.monotonic()

    def call_later(self, delay: float, fn: Callable[[], None]) -> _Timer:
        timer = _Timer(fn)
        deadline = self.now() + delay
        entry = (deadline, next(self._timer_seq), timer)
        self._dispatch(lambda: heapq.heappush(self._timers, entry))
        return timer

    def _next_timeout(self) -> float | None:
        while self._timers and self._timers[0][2].fn is None:
            heapq.heappop(self._timers)
        if not self._timers:
            return None
        return max(0.0, self._timers[0][0] - self.now())

    def _fire_timers(self) -> None:
        now = self.now()
        while self._timers and self._timers[0][0] <= now:
            _, _, timer = heapq.heappop(self._timers)
            if timer.fn is not None:
                fn, timer.fn = timer.fn, None
                try:
                    fn()
                except Exception:
                    log.exception("timer failed")

    # -- selector plumbing -------------------------------------------------------

    def _register(self, sock, events, handler) -> None:
        self._sel.register(sock, events, handler)

    def _modify(self, sock, events, handler) -> None:
        try:
            self._sel.modify(sock, events, handler)
        except KeyError:
            pass

    def _unregister(self, sock) -> None:
        try:
            self._sel.unregister(sock)
        except (KeyError, ValueError):
            pass

    # -- Transport ------------------------------------------------------------------

    def listen(self, port: int, on_accept, shared: bool = True) -> Listener:
        def do():
            sock = _tcp_socket(shared)
            try:
                sock.bind((self.ip, port))
            except OSError as exc:
                sock.close()
                raise BindFailed(f"cannot bind {self.ip}:{port}: {exc}") from exc
            sock.listen(128)
            return SockListener(self, sock, on_accept)

        return self._on_reactor(do)

    def connect(self, remote: Endpoint, on_result,
                local_port: int | None = None, timeout: float = 2.0) -> None:
        def do():
            sock = _tcp_socket(shared=True)
            if local_port:
                try:
                    sock.bind((self.ip, local_port))
                except OSError as exc:
                    sock.close()
                    on_result(None, BindFailed(f"{self.ip}:{local_port}: {exc}"))
                    return
            rc = sock.connect_ex((remote.ip, remote.port))
            if rc not in (0, errno.EINPROGRESS):
                sock.close()
                on_result(None, self._connect_error(rc, remote))
                return
            state = {"done": False}

            def finish(err_code: int) -> None:
                if state["done"]:
                    return
                state["done"] = True
                timer.cancel()
                self._unregister(sock)
                if err_code == 0:
                    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                    on_result(SockStream(self, sock), None)
                else:
                    sock.close()
                    on_result(None, self._connect_error(err_code, remote))

            def writable(mask: int) -> None:
                finish(sock.getsockopt(socket.SOL_SOCKET, socket.SO_ERROR))

            def expire() -> None:
                if not state["done"]:
                    state["done"] = True
                    self._unregister(sock)
                    sock.close()
                    on_result(None, ConnectTimedOut(f"connect to {remote} timed out"))

            timer = self.call_later(timeout, expire)
            self._register(sock, _WRITE, writable)

        self._dispatch(do)

    @staticmethod
    def _connect_error(code: int, remote: Endpoint) -> TransportError:
        if code == errno.ECONNREFUSED:
            return ConnectRefused(f"{remote} refused the connection")
        if code == errno.ETIMEDOUT:
            return ConnectTimedOut(f"connect to {remote} timed out")
        return TransportError(f"connect to {remote}: {os.strerror(code)}")

    def punch(self, local_port: int, remote: Endpoint) -> None:
        """Fire-and-forget SYN from local_port; the socket dies regardless."""
        def do():
            sock = _tcp_socket(shared=True)
            try:
                sock.bind((self.ip, local_port))
            except OSError:
                sock.close()
                return
            rc = sock.connect_ex((remote.ip, remote.port))
            if rc not in (0, errno.EINPROGRESS):
                sock.close()
                return

            def done(mask: int) -> None:
                timer.cancel()
                self._unregister(sock)
                sock.close()

            def expire() -> None:
                self._unregister(sock)
                sock.close()

            timer = self.call_later(1.0, expire)
            self._register(sock, _READ | _WRITE, done)

        self._dispatch(do)

    def temp_bind(self, port: int) -> _PortHold:
        def do():
            sock = _tcp_socket(shared=True)
            try:
                sock.bind((self.ip, port))
            except OSError as exc:
                sock.close()
                raise BindFailed(f"cannot share {self.ip}:{port}: {exc}") from exc
            return _PortHold(sock)

        return self._on_reactor(do)


# -- local IPC ---------------------------------------------------------------------


class IpcServer:
    """AF_UNIX socket where local processes talk to their node's agent.

    Speaks the control encoding: RegisterListener / UnregisterListener
    (one-way) and NatSetupReq answered by NatSetupAck / NatSetupErr with the
    client's req_id echoed back.  Listener registrations die with their
    connection, so a crashed client leaves nothing behind.
    """

    def __init__(self, transport: SocketTransport, node, path: str):
        self.transport = transport
        self.node = node
        self.path = path

        def do():
            sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
            try:
                os.unlink(path)
            except FileNotFoundError:
                pass
            sock.bind(path)
            sock.listen(16)
            sock.setblocking(False)
            transport._register(sock, _READ, self._accept)
            return sock

        self._sock = transport._on_reactor(do)

    def close(self) -> None:
        def do():
            self.transport._unregister(self._sock)
            self._sock.close()
            try:
                os.unlink(self.path)
            except FileNotFoundError:
                pass

        self.transport._dispatch(do)

    def _accept(self, mask: int) -> None:
        while True:
            try:
                client, _ = self._sock.accept()
            except (BlockingIOError, OSError):
                return
            client.setblocking(False)
            stream = SockStream(self.transport, client,
                                local=_LOCAL_EP, peer=_LOCAL_EP)
            conn = FrameConn(stream)
            conn.on(lambda msg, raw, c=conn: self._msg(c, msg),
                    lambda c=conn: self.node.registry.drop_owner(c))

    def _msg(self, conn: FrameConn, msg) -> None:
        if isinstance(msg, RegisterListener):
            self.node.register_listener(msg.endpoint, owner=conn)
        elif isinstance(msg, UnregisterListener):
            self.node.unregister_listener(msg.endpoint)
        elif isinstance(msg, NatSetupReq):
            self.node.request_setup(
                msg.src, msg.dst,
                lambda err, c=conn, m=msg: self._setup_reply(c, m, err))
        else:
            log.warning("ipc: unexpected %s, closing client", type(msg).__name__)
            conn.close()

    def _setup_reply(self, conn: FrameConn, req: NatSetupReq,
                     err: Optional[SetupError]) -> None:
        if conn.closed:
            return
        if err is None:
            conn.send_msg(NatSetupAck(req.req_id))
        elif isinstance(err, UnknownDestination):
            conn.send_msg(NatSetupErr(req.req_id, SETUP_ERR_UNKNOWN_DESTINATION))
        else:
            # NoListener, timeouts, and dead links all look the same to the
            # application: nothing answers at that address
            conn.send_msg(NatSetupErr(req.req_id, SETUP_ERR_NO_LISTENER))


# -- blocking facades ------------------------------------------------------------------


def join_network(transport: SocketTransport, seed: Endpoint,
                 control_port: int = 0, timeout: float = 10.0) -> NodeAgent:
    """Join via the seed; returns the ready agent or raises Join*."""
    box: list = []
    done = threading.Event()

    def go():
        agent = NodeAgent(transport, seed, control_port=control_port)
        agent.start(lambda a: (box.append((a, None)), done.set()),
                    lambda e: (box.append((None, e)), done.set()),
                    timeout=timeout)

    transport.call_soon(go)
    if not done.wait(timeout + 5.0):
        raise ConnectTimedOut(f"join via {seed} timed out")
    agent, err = box[0]
    if err is not None:
        raise err
    return agent


def await_members(agent, n: int, deadline: float | None = None):
    """Block until the view holds n non-seed members; returns the stable prefix."""
    box: list = []
    done = threading.Event()

    def go():
        agent.coord.await_members_cb(
            n, lambda members, err: (box.append((members, err)), done.set()),
            deadline=deadline)

    agent.transport.call_soon(go)
    wait = None if deadline is None else deadline + 5.0
    if not done.wait(wait):
        raise SetupTimeout("barrier wait stalled")
    members, err = box[0]
    if err is not None:
        raise err
    return members


def request_setup(agent, src: Endpoint, dst: Endpoint,
                  timeout: float = 5.0) -> None:
    """Blocking connection setup; returns on Ack, raises SetupError otherwise."""
    box: list = []
    done = threading.Event()

    def go():
        agent.request_setup(src, dst, lambda err: (box.append(err), done.set()),
                            timeout=timeout)

    agent.transport.call_soon(go)
    if not done.wait(timeout + 5.0):
        raise SetupTimeout(f"setup toward {dst} stalled")
    if box[0] is not None:
        raise box[0]


def register_listener(agent, endpoint: Endpoint) -> None:
    """Register an app listener with the agent from any thread."""
    agent.transport._on_reactor(lambda: agent.register_listener(endpoint))


def unregister_listener(agent, endpoint: Endpoint) -> None:
    """Withdraw an app listener registration from any thread."""
    agent.transport._on_reactor(lambda: agent.unregister_listener(endpoint))
