"""Rendezvous seed: address reflection, id assignment, membership root.

The seed is member 0.  Every joiner dials it from its own control port, so
the source address the seed observes is exactly the joiner's external
control endpoint — the address other members punch toward and connect to.
The join connection is kept open afterwards and doubles as the seed's
control link to that member and as the root edge of the membership
propagation tree.

Joins are serialized by the single-threaded transport dispatch: a join
commits (id assigned, update broadcast, joiner subscribed) before the next
Hello is examined, so no joiner can miss a concurrent member.
"""

from __future__ import annotations

import logging
from typing import Callable, Optional

from .agent import DEFAULT_SEED_PORT, ControlNode
from .membership import SEED_ID, DuplicateId
from .proto import (
    PROTO_VERSION,
    REJECT_DUPLICATE_ADDRESS,
    REJECT_VERSION_MISMATCH,
    AddressReply,
    Endpoint,
    Hello,
    MemberList,
    MemberRecord,
    NodeId,
    Reject,
)
from .transport import FrameConn, Stream, Transport

log = logging.getLogger("boxer.seed")


class SeedAgent(ControlNode):
    """Accepts joins, reflects addresses, and roots the update tree."""

    def __init__(self, transport: Transport, port: int = DEFAULT_SEED_PORT,
                 trace_fn: Optional[Callable[[dict], None]] = None):
        super().__init__(transport)
        self.id = SEED_ID
        self._next_id = 1
        self._trace_fn = trace_fn
        self._listener = transport.listen(port, self._accept, shared=True)
        self.port = self._listener.endpoint.port
        self.external = Endpoint(transport.ip, self.port)
        self.coord.load_initial([MemberRecord(SEED_ID, self.external)])

    def close(self) -> None:
        self._listener.close()

    # -- join handling ----------------------------------------------------------

    def _accept(self, stream: Stream) -> None:
        conn = FrameConn(stream)

        def first_msg(msg, raw):
            if not isinstance(msg, Hello):
                log.warning("seed: connection opened with %s, closing",
                            type(msg).__name__)
                conn.close()
                return
            self._join(conn, msg)

        conn.on(first_msg, lambda: None)

    def _join(self, conn: FrameConn, hello: Hello) -> None:
        observed = conn.peer
        if hello.version != PROTO_VERSION:
            self._reject(conn, observed, REJECT_VERSION_MISMATCH)
            return
        if self.coord.view.has_endpoint(observed):
            self._reject(conn, observed, REJECT_DUPLICATE_ADDRESS)
            return

        member_id = self._next_id
        self._next_id += 1
        others = self.coord.view.snapshot()          # everyone but the joiner
        conn.send_msg(AddressReply(observed, member_id))
        conn.send_msg(MemberList(tuple(others)))

        rec = MemberRecord(member_id, observed)
        try:
            # inserts into the view and broadcasts to the members that joined
            # earlier; the joiner itself learned its record from AddressReply
            self.coord.apply_update(rec)
        except DuplicateId:   # pragma: no cover - ids are locally monotone
            raise AssertionError(f"id {member_id} assigned twice")
        self.coord.add_child(conn)
        self._register_link(member_id, conn)
        self._trace({"event": "join", "id": member_id, "endpoint": str(observed)})
        log.info("seed: member %d joined from %s", member_id, observed)

    def _reject(self, conn: FrameConn, observed: Endpoint, reason: int) -> None:
        msg = Reject(reason)
        conn.send_msg(msg)
        conn.close()
        self._trace({"event": "reject", "endpoint": str(observed),
                     "reason": msg.reason_name})
        log.info("seed: rejected %s (%s)", observed, msg.reason_name)

    # -- departure ---------------------------------------------------------------

    def _on_link_close(self, peer_id: NodeId, conn: FrameConn) -> None:
        super()._on_link_close(peer_id, conn)
        if self.coord.view.get(peer_id) is not None:
            self.coord.view.remove(peer_id)
            self._trace({"event": "leave", "id": peer_id})
            log.info("seed: member %d left", peer_id)

    def _trace(self, event: dict) -> None:
        if self._trace_fn is not None:
            self._trace_fn(event)
