"""Node-side control plane: join protocol, control mesh, connection broker.

One agent runs per node.  It joins through the seed, keeps a long-lived
control connection to every other member (the mesh), registers local
listeners, and brokers connection setup: a NatSetupReq travels over the
control link to the destination's agent, which punches its own NAT from
the listener's port and acknowledges, after which the requester's plain
connect traverses both gateways.  The agent never opens TCP connections on
behalf of applications; it only installs NAT state.

All logic is event-driven against the Transport interface, so the same
code runs on the deterministic fabric and on real sockets.
"""

from __future__ import annotations

import logging
from typing import Callable, Optional

from .membership import SEED_ID, Coordination
from .proto import (
    SETUP_ERR_BIND_FAILED,
    SETUP_ERR_NO_LISTENER,
    AddressReply,
    CtrlHello,
    Endpoint,
    Hello,
    MemberList,
    MemberRecord,
    MemberUpdate,
    NatSetupAck,
    NatSetupErr,
    NatSetupReq,
    NodeId,
    Reject,
    SubscribeTree,
)
from .transport import BindFailed, FrameConn, Stream, Transport

log = logging.getLogger("boxer.agent")

DEFAULT_SEED_PORT = 7077
DEFAULT_CONTROL_PORT = 7070

ESTABLISH_ATTEMPTS = 3
ESTABLISH_BACKOFF = 0.1     # seconds, doubled per retry
SETUP_TIMEOUT = 5.0
JOIN_TIMEOUT = 10.0


class JoinFailed(Exception):
    """The seed could not be reached."""


class JoinRejected(Exception):
    """The seed refused this node."""

    def __init__(self, reason: int, reason_name: str):
        super().__init__(f"join rejected: {reason_name}")
        self.reason = reason
        self.reason_name = reason_name


class EstablishFailed(Exception):
    """A control link could not be established within the retry budget."""


class SetupError(Exception):
    pass


class UnknownDestination(SetupError):
    """dst is not a member address; callers fall through to a native connect."""


class NoListener(SetupError):
    """The remote agent has nothing registered at dst."""


class RemoteUnreachable(SetupError):
    """No control link to the member owning dst."""


class SetupTimeout(SetupError):
    pass


class ListenerRegistry:
    """Local endpoints currently accepting connections.

    A wildcard-IP registration (0.0.0.0) matches any local address with the
    same port.  Entries carry an owner token so everything a dead IPC client
    registered can be dropped at once.
    """

    def __init__(self):
        self._entries: dict[Endpoint, object] = {}

    def register(self, ep: Endpoint, owner: object = None) -> None:
        self._entries[ep] = owner

    def unregister(self, ep: Endpoint) -> None:
        self._entries.pop(ep, None)

    def drop_owner(self, owner: object) -> None:
        for ep in [e for e, o in self._entries.items() if o is owner]:
            del self._entries[ep]

    def match(self, local: Endpoint) -> bool:
        if local in self._entries:
            return True
        return Endpoint("0.0.0.0", local.port) in self._entries

    def endpoints(self) -> list[Endpoint]:
        return list(self._entries)


class _PendingSetup:
    __slots__ = ("callback", "timer", "req")

    def __init__(self, callback, timer, req):
        self.callback = callback
        self.timer = timer
        self.req = req


class ControlNode:
    """State and behavior common to the seed and ordinary nodes."""

    def __init__(self, transport: Transport):
        self.transport = transport
        self.id: NodeId | None = None
        self.external: Endpoint | None = None
        self.coord = Coordination(transport)
        self.links: dict[NodeId, FrameConn] = {}
        self.registry = ListenerRegistry()
        self.pending: dict[int, _PendingSetup] = {}
        self.failures: dict[NodeId, EstablishFailed] = {}
        self._req_counter = 0
        self._link_hooks: list[Callable[[NodeId], None]] = []

    # -- mesh bookkeeping ---------------------------------------------------

    def on_link(self, fn: Callable[[NodeId], None]) -> None:
        self._link_hooks.append(fn)

    def _unhook(self, fn: Callable[[NodeId], None]) -> None:
        if fn in self._link_hooks:
            self._link_hooks.remove(fn)

    def _register_link(self, peer_id: NodeId, conn: FrameConn) -> None:
        existing = self.links.get(peer_id)
        if existing is not None and not existing.closed:
            log.warning("%s: duplicate control link for peer %d, keeping first",
                        self, peer_id)
            conn.close()
            return
        self.links[peer_id] = conn
        self.failures.pop(peer_id, None)
        conn.on(lambda msg, raw: self._on_link_msg(peer_id, conn, msg, raw),
                lambda: self._on_link_close(peer_id, conn))
        for fn in list(self._link_hooks):
            fn(peer_id)

    def _on_link_close(self, peer_id: NodeId, conn: FrameConn) -> None:
        if self.links.get(peer_id) is conn:
            del self.links[peer_id]
        self.coord.drop_child(conn)

    def links_complete(self) -> bool:
        """True when a live link exists to every other member in the view."""
        for rec in self.coord.view.records:
            if rec.id == self.id:
                continue
            conn = self.links.get(rec.id)
            if conn is None or conn.closed:
                return False
        return True

    # -- control-frame dispatch ----------------------------------------------

    def _on_link_msg(self, peer_id: NodeId, conn: FrameConn, msg, raw: bytes) -> None:
        if isinstance(msg, NatSetupReq):
            self.handle_setup(msg, conn.send_msg)
        elif isinstance(msg, (NatSetupAck, NatSetupErr)):
            self._resolve_pending(msg)
        elif isinstance(msg, SubscribeTree):
            self.coord.add_child(conn)
        elif isinstance(msg, MemberUpdate):
            self._on_member_update(peer_id, msg.member, raw)
        else:
            log.warning("%s: unexpected %s on link to %d", self, type(msg).__name__, peer_id)

    def _on_member_update(self, peer_id: NodeId, member: MemberRecord, raw: bytes) -> None:
        # ordinary nodes accept updates from their parent; overridden there
        log.debug("%s: ignoring MemberUpdate from %d", self, peer_id)

    # -- connection brokering ---------------------------------------------------

    def _owner_of(self, dst: Endpoint) -> MemberRecord | None:
        candidates = [r for r in self.coord.view.records if r.external.ip == dst.ip]
        if not candidates:
            return None
        for rec in candidates:
            if rec.id == self.id:
                return rec
        if len(candidates) > 1:
            # several members share the IP (co-located dev setups); route to
            # the oldest — multi-node-per-address is out of scope
            log.warning("%s: %d members share %s, using id %d",
                        self, len(candidates), dst.ip, candidates[0].id)
        return candidates[0]

    def request_setup(self, src: Endpoint, dst: Endpoint,
                      callback: Callable[[Optional[SetupError]], None],
                      timeout: float = SETUP_TIMEOUT) -> None:
        """Ask the member owning dst to open its NAT for src.

        callback(None) means the caller may now connect(src -> dst) natively;
        callback(error) carries one of the SetupError kinds.
        """
        owner = self._owner_of(dst)
        if owner is None:
            callback(UnknownDestination(f"{dst} does not belong to any member"))
            return
        req = NatSetupReq(self._next_req_id(),
                          Endpoint(self.external.ip, src.port), dst)
        if owner.id == self.id:
            self.handle_setup(req, lambda msg: self._resolve_local(msg, callback))
            return
        if owner.id in self.failures:
            callback(RemoteUnreachable(f"control link to {owner.id} failed"))
            return

        entry = _PendingSetup(callback, None, req)
        self.pending[req.req_id] = entry

        # link may still be settling: send as soon as it registers, give up
        # with the timer
        def when_linked(peer_id: NodeId) -> None:
            if peer_id != owner.id:
                return
            self._unhook(when_linked)
            if req.req_id not in self.pending:
                return
            link = self.links.get(owner.id)
            if link is not None and not link.closed:
                link.send_msg(req)

        def expire():
            self._unhook(when_linked)
            if self.pending.pop(req.req_id, None) is not None:
                callback(SetupTimeout(f"no reply for setup {req.req_id} to {owner.id}"))

        entry.timer = self.transport.call_later(timeout, expire)

        conn = self.links.get(owner.id)
        if conn is not None and not conn.closed:
            conn.send_msg(req)
        else:
            self.on_link(when_linked)

    def _resolve_local(self, msg, callback) -> None:
        if isinstance(msg, NatSetupAck):
            callback(None)
        else:
            callback(self._setup_error(msg))

    def _resolve_pending(self, msg) -> None:
        entry = self.pending.pop(msg.req_id, None)
        if entry is None:
            return
        if entry.timer is not None:
            entry.timer.cancel()
        if isinstance(msg, NatSetupAck):
            entry.callback(None)
        else:
            entry.callback(self._setup_error(msg))

    @staticmethod
    def _setup_error(err: NatSetupErr) -> SetupError:
        if err.code == SETUP_ERR_NO_LISTENER:
            return NoListener(f"setup {err.req_id}: nothing listening at destination")
        return SetupError(f"setup {err.req_id} failed: {err.code_name}")

    def handle_setup(self, req: NatSetupReq, reply: Callable) -> None:
        """Serve a setup request for a local listener (Fig-3 responder side).

        Punches are serialized per listener endpoint by the single-threaded
        dispatch of the transport.
        """
        local = Endpoint(self.transport.ip, req.dst.port)
        if not self.registry.match(local):
            reply(NatSetupErr(req.req_id, SETUP_ERR_NO_LISTENER))
            return
        try:
            hold = self.transport.temp_bind(local.port)
        except BindFailed:
            reply(NatSetupErr(req.req_id, SETUP_ERR_BIND_FAILED))
            return
        try:
            self.transport.punch(local.port, req.src)
        finally:
            hold.release()
        reply(NatSetupAck(req.req_id))

    def _next_req_id(self) -> int:
        self._req_counter += 1
        return self._req_counter

    # -- local listener API (the non-shim path) ---------------------------------

    def register_listener(self, ep: Endpoint, owner: object = None) -> None:
        self.registry.register(ep, owner)

    def unregister_listener(self, ep: Endpoint) -> None:
        self.registry.unregister(ep)

    def __str__(self) -> str:
        return f"node{self.id if self.id is not None else '?'}"


class NodeAgent(ControlNode):
    """An ordinary member: joins via the seed and keeps the mesh complete."""

    def __init__(self, transport: Transport, seed: Endpoint,
                 control_port: int = DEFAULT_CONTROL_PORT):
        super().__init__(transport)
        self.seed_endpoint = seed
        self.control_port = control_port
        self._seed_conn: FrameConn | None = None
        self._join_state = "idle"
        self._on_ready = None
        self._on_fail = None

    # -- join -----------------------------------------------------------------

    def start(self, on_ready: Callable[["NodeAgent"], None],
              on_fail: Callable[[Exception], None],
              timeout: float = JOIN_TIMEOUT) -> None:
        self._on_ready = on_ready
        self._on_fail = on_fail
        listener = self.transport.listen(self.control_port, self._accept_ctrl,
                                         shared=True)
        self.control_port = listener.endpoint.port
        self._listener = listener
        self._join_state = "dialing"
        self.transport.connect(self.seed_endpoint, self._seed_connected,
                               local_port=self.control_port, timeout=timeout)

    def _seed_connected(self, stream: Stream | None, err: Exception | None) -> None:
        if err is not None:
            self._join_state = "failed"
            self._on_fail(JoinFailed(f"cannot reach seed {self.seed_endpoint}: {err}"))
            return
        conn = FrameConn(stream)
        self._seed_conn = conn
        self._join_state = "greeting"
        conn.on(self._seed_msg, self._seed_closed)
        conn.send_msg(Hello())

    def _seed_msg(self, msg, raw: bytes) -> None:
        state = self._join_state
        if state == "greeting":
            if isinstance(msg, Reject):
                self._join_state = "rejected"
                self._seed_conn.close()
                self._on_fail(JoinRejected(msg.reason, msg.reason_name))
            elif isinstance(msg, AddressReply):
                self.id = msg.assigned
                self.external = msg.observed
                if msg.observed.port != self.control_port:
                    # external-endpoint prediction relies on port preservation
                    log.warning("%s: observed port %d differs from bound port %d; "
                                "inbound traversal will likely fail",
                                self, msg.observed.port, self.control_port)
                self._join_state = "awaiting-members"
            else:
                self._join_fail_protocol(msg)
        elif state == "awaiting-members":
            if isinstance(msg, MemberList):
                self._join_state = "joined"
                self.coord.load_initial(
                    list(msg.members) + [MemberRecord(self.id, self.external)])
                self._register_link(SEED_ID, self._seed_conn)
                self.coord.subscribe(self._on_member)
                for rec in msg.members:
                    if rec.id not in (SEED_ID, self.id):
                        self._establish(rec)
                self._on_ready(self)
            else:
                self._join_fail_protocol(msg)
        # joined-state messages arrive via the link handler registered above

    def _join_fail_protocol(self, msg) -> None:
        self._join_state = "failed"
        self._seed_conn.close()
        self._on_fail(JoinFailed(f"unexpected {type(msg).__name__} during join"))

    def _seed_closed(self) -> None:
        if self._join_state in ("greeting", "awaiting-members"):
            self._join_state = "failed"
            self._on_fail(JoinFailed("seed closed the connection during join"))

    # -- membership-driven mesh -----------------------------------------------

    def _on_member_update(self, peer_id: NodeId, member: MemberRecord, raw: bytes) -> None:
        if peer_id != SEED_ID:
            # tree children may feed us too; the duplicate guard keeps the
            # view single-sourced
            pass
        self.coord.apply_update(member, raw)

    def _on_member(self, rec: MemberRecord) -> None:
        if rec.id in (SEED_ID, self.id):
            return
        self._establish(rec)

    def _establish(self, rec: MemberRecord) -> None:
        # the lower id dials — its SYN installs the same gateway state a
        # punch would, and doubling up would collide on the 4-tuple; the
        # higher id only punches so the dial can get in
        if self.id < rec.id:
            self._dial_peer(rec, attempt=0)
        else:
            self.transport.punch(self.control_port, rec.external)

    def _dial_peer(self, rec: MemberRecord, attempt: int) -> None:
        def dialed(stream, err):
            if err is not None:
                nxt = attempt + 1
                if nxt >= ESTABLISH_ATTEMPTS:
                    failure = EstablishFailed(
                        f"link to {rec.id} at {rec.external} failed after "
                        f"{ESTABLISH_ATTEMPTS} attempts: {err}")
                    self.failures[rec.id] = failure
                    log.error("%s: %s", self, failure)
                    return
                delay = ESTABLISH_BACKOFF * (2 ** attempt)
                self.transport.call_later(delay, lambda: self._dial_peer(rec, nxt))
                return
            conn = FrameConn(stream)

            def first_msg(msg, raw):
                if isinstance(msg, CtrlHello) and msg.id == rec.id:
                    self._register_link(rec.id, conn)
                else:
                    log.warning("%s: bad link handshake from %s", self, rec.external)
                    conn.close()

            conn.on(first_msg, lambda: None)
            conn.send_msg(CtrlHello(self.id))

        self.transport.connect(rec.external, dialed,
                               local_port=self.control_port)

    # -- inbound mesh connections ----------------------------------------------

    def _accept_ctrl(self, stream: Stream) -> None:
        conn = FrameConn(stream)

        def first_msg(msg, raw):
            if isinstance(msg, CtrlHello):
                conn.send_msg(CtrlHello(self.id))
                self._register_link(msg.id, conn)
            else:
                log.warning("%s: control connection opened with %s, closing",
                            self, type(msg).__name__)
                conn.close()

        conn.on(first_msg, lambda: None)

    # -- tree -------------------------------------------------------------------

    def subscribe_via(self, peer_id: NodeId) -> None:
        """Become a tree child of peer_id (in addition to the seed feed)."""
        conn = self.links.get(peer_id)
        if conn is None:
            raise RemoteUnreachable(f"no control link to {peer_id}")
        conn.send_msg(SubscribeTree())
