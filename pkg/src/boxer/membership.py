"""Per-node membership state: the view, tree propagation, and barriers.

Updates arrive on the parent link (the seed connection, which roots the
propagation tree), are applied in arrival order by a single applier, and
fan out three ways: to local subscribers exactly once, to tree children as
the verbatim frame bytes that arrived, and to barrier waiters counting
non-seed members.
"""

from __future__ import annotations

import logging
from typing import Callable

from .proto import Endpoint, MemberRecord, MemberUpdate, NodeId, encode

log = logging.getLogger("boxer.membership")

SEED_ID: NodeId = 0


class DuplicateId(Exception):
    """An update re-announced an id (or endpoint) the view already holds."""


class MembershipView:
    """All known members, ordered by id, unique ids and unique endpoints."""

    def __init__(self):
        self.records: list[MemberRecord] = []
        self.version = 0
        self._ids: set[NodeId] = set()
        self._endpoints: set[Endpoint] = set()

    def insert(self, record: MemberRecord) -> None:
        if record.id in self._ids:
            raise DuplicateId(f"id {record.id} already in view")
        if record.external in self._endpoints:
            raise DuplicateId(f"endpoint {record.external} already in view")
        self.records.append(record)
        self.records.sort(key=lambda r: r.id)
        self._ids.add(record.id)
        self._endpoints.add(record.external)
        self.version += 1

    def remove(self, node_id: NodeId) -> MemberRecord | None:
        for i, rec in enumerate(self.records):
            if rec.id == node_id:
                del self.records[i]
                self._ids.discard(node_id)
                self._endpoints.discard(rec.external)
                return rec
        return None

    def get(self, node_id: NodeId) -> MemberRecord | None:
        for rec in self.records:
            if rec.id == node_id:
                return rec
        return None

    def has_endpoint(self, ep: Endpoint) -> bool:
        return ep in self._endpoints

    def non_seed(self) -> list[MemberRecord]:
        return [r for r in self.records if r.id != SEED_ID]

    def snapshot(self) -> list[MemberRecord]:
        return list(self.records)

    def __contains__(self, node_id: NodeId) -> bool:
        return node_id in self._ids

    def __len__(self) -> int:
        return len(self.records)


class _Waiter:
    __slots__ = ("n", "callback", "timer", "done")

    def __init__(self, n, callback, timer):
        self.n = n
        self.callback = callback
        self.timer = timer
        self.done = False


class BarrierTimeout(Exception):
    """await_members deadline passed before enough members joined."""


class Coordination:
    """Applies membership updates and distributes them."""

    def __init__(self, transport):
        self._transport = transport
        self.view = MembershipView()
        self._subscribers: list[Callable[[MemberRecord], None]] = []
        self._children: list = []   # FrameConns that subscribed via the tree
        self._waiters: list[_Waiter] = []

    # -- wiring --------------------------------------------------------------

    def subscribe(self, fn: Callable[[MemberRecord], None]) -> None:
        self._subscribers.append(fn)

    def add_child(self, conn) -> None:
        if conn not in self._children:
            self._children.append(conn)

    def drop_child(self, conn) -> None:
        if conn in self._children:
            self._children.remove(conn)

    # -- applying ------------------------------------------------------------

    def load_initial(self, records) -> None:
        """Seed the view from a join-time snapshot; not forwarded anywhere."""
        for rec in records:
            self.view.insert(rec)
        self._check_waiters()

    def apply_update(self, record: MemberRecord, raw: bytes | None = None) -> bool:
        """Apply one update from the parent; returns False on a duplicate.

        The frame is forwarded to children byte-for-byte as it arrived.
        """
        try:
            self.view.insert(record)
        except DuplicateId as exc:
            log.debug("dropping duplicate update %s: %s", record, exc)
            return False
        frame = raw if raw is not None else encode(MemberUpdate(record))
        for child in list(self._children):
            if child.closed:
                self._children.remove(child)
            else:
                child.send_raw(frame)
        for fn in self._subscribers:
            fn(record)
        self._check_waiters()
        return True

    # -- barriers --------------------------------------------------------------

    def await_members_cb(self, n: int, callback, deadline: float | None = None) -> None:
        """Invoke callback(members, error) once the view holds >= n non-seed
        members; the list is the first n non-seed members by id and is stable
        under later joins."""
        assert n >= 1
        ready = self.view.non_seed()
        if len(ready) >= n:
            callback(ready[:n], None)
            return
        timer = None
        waiter = _Waiter(n, callback, None)

        if deadline is not None:
            def expire():
                if not waiter.done:
                    waiter.done = True
                    self._waiters.remove(waiter)
                    callback(None, BarrierTimeout(
                        f"only {len(self.view.non_seed())} of {n} members joined"))
            timer = self._transport.call_later(deadline, expire)
            waiter.timer = timer
        self._waiters.append(waiter)

    def _check_waiters(self) -> None:
        if not self._waiters:
            return
        ready = self.view.non_seed()
        for waiter in list(self._waiters):
            if not waiter.done and len(ready) >= waiter.n:
                waiter.done = True
                self._waiters.remove(waiter)
                if waiter.timer is not None:
                    waiter.timer.cancel()
                waiter.callback(ready[:waiter.n], None)
