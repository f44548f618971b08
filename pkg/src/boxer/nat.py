"""NAT gateway model: source address translation and inbound filtering.

A gateway owns one public IP in front of one private subnet.  Outbound
segments get their source rewritten to an external endpoint chosen by the
mapping and port-allocation policies; the destination is remembered so the
filtering policy can judge later inbound traffic.  Inbound segments are
delivered only when they land on a live mapping whose permitted remotes
admit the sender; everything else is dropped without a response.
"""

from __future__ import annotations

import ipaddress
from dataclasses import dataclass, field
from enum import Enum

from .proto import Endpoint


class MappingPolicy(Enum):
    # one external endpoint per internal endpoint, reused for every destination
    ENDPOINT_INDEPENDENT = "endpoint-independent"
    # a fresh external endpoint per (internal endpoint, destination) pair
    ENDPOINT_DEPENDENT = "endpoint-dependent"


class FilteringPolicy(Enum):
    ADDRESS_AND_PORT = "address-and-port-dependent"
    ADDRESS = "address-dependent"
    OPEN = "open"


class PortAllocation(Enum):
    PRESERVING = "preserving"
    SEQUENTIAL = "sequential"


@dataclass(frozen=True)
class NatPolicy:
    mapping: MappingPolicy = MappingPolicy.ENDPOINT_INDEPENDENT
    filtering: FilteringPolicy = FilteringPolicy.ADDRESS_AND_PORT
    port_allocation: PortAllocation = PortAllocation.PRESERVING
    # first external port handed out under sequential allocation
    sequential_base: int = 50000


# The weakest gateway class under which outbound-punch traversal works.
DEFAULT_PROFILE = NatPolicy()

# A symmetric NAT: per-destination mappings with unpredictable ports, the
# class under which punch-based traversal must fail.
SYMMETRIC_PROFILE = NatPolicy(
    mapping=MappingPolicy.ENDPOINT_DEPENDENT,
    port_allocation=PortAllocation.SEQUENTIAL,
)


class PortExhausted(Exception):
    """Sequential port allocation wrapped past 65535 (misconfigured test)."""


@dataclass
class NatMapping:
    internal: Endpoint
    external: Endpoint
    permitted_remotes: set[Endpoint] = field(default_factory=set)
    created_at: int = 0       # fabric time, ns
    last_active: int = 0

    def permits(self, src: Endpoint, filtering: FilteringPolicy) -> bool:
        if filtering is FilteringPolicy.OPEN:
            return True
        if filtering is FilteringPolicy.ADDRESS:
            return any(p.ip == src.ip for p in self.permitted_remotes)
        return src in self.permitted_remotes


class NatGateway:
    """One NAT device: a public IP, a private subnet, and a mapping table."""

    def __init__(self, subnet: str, public_ip: str, policy: NatPolicy = DEFAULT_PROFILE,
                 idle_timeout_ns: int | None = None):
        self.subnet = ipaddress.ip_network(subnet)
        self.public_ip = public_ip
        self.policy = policy
        self.idle_timeout_ns = idle_timeout_ns
        # keyed by internal endpoint (endpoint-independent) or by
        # (internal endpoint, destination) (endpoint-dependent)
        self._mappings: dict = {}
        self._next_sequential = policy.sequential_base
        self._ports_in_use: set[int] = set()
        # bookkeeping for the endpoint-independent invariant check
        self._externals_by_internal: dict[Endpoint, set[Endpoint]] = {}

    def contains(self, ip: str) -> bool:
        return ipaddress.ip_address(ip) in self.subnet

    # -- outbound ----------------------------------------------------------

    def _mapping_key(self, internal: Endpoint, dst: Endpoint):
        if self.policy.mapping is MappingPolicy.ENDPOINT_INDEPENDENT:
            return internal
        return (internal, dst)

    def _allocate_port(self, internal: Endpoint) -> int:
        alloc = self.policy.port_allocation
        if alloc is PortAllocation.PRESERVING:
            if self.policy.mapping is MappingPolicy.ENDPOINT_INDEPENDENT:
                # Preserve unconditionally.  Two internal endpoints sharing a
                # port collide on the same external endpoint, which is exactly
                # how co-located workers become indistinguishable from outside.
                return internal.port
            port = internal.port
            while port in self._ports_in_use:
                port += 1
                if port > 0xFFFF:
                    raise PortExhausted(f"no free port at or above {internal.port}")
            self._ports_in_use.add(port)
            return port
        port = self._next_sequential
        if port > 0xFFFF:
            raise PortExhausted(f"sequential allocator passed 65535 on {self.public_ip}")
        self._next_sequential += 1
        self._ports_in_use.add(port)
        return port

    def translate_outbound(self, src: Endpoint, dst: Endpoint, now: int = 0) -> Endpoint:
        """Rewrite `src` for a segment leaving the subnet toward `dst`.

        Creates the mapping on first use, records `dst` as a permitted
        remote, and returns the external source endpoint.
        """
        assert self.contains(src.ip), f"{src} is not inside {self.subnet}"
        self._expire_idle(now)
        key = self._mapping_key(src, dst)
        mapping = self._mappings.get(key)
        if mapping is None:
            external = Endpoint(self.public_ip, self._allocate_port(src))
            mapping = NatMapping(src, external, created_at=now, last_active=now)
            self._mappings[key] = mapping
            externals = self._externals_by_internal.setdefault(src, set())
            externals.add(external)
            if self.policy.mapping is MappingPolicy.ENDPOINT_INDEPENDENT:
                assert len(externals) == 1, (
                    f"endpoint-independent gateway gave {src} two externals: {externals}")
        mapping.permitted_remotes.add(dst)
        mapping.last_active = now
        return mapping.external

    # -- inbound -----------------------------------------------------------

    def filter_inbound(self, src: Endpoint, dst: Endpoint, now: int = 0) -> Endpoint | None:
        """Judge a segment arriving at external endpoint `dst` from `src`.

        Returns the internal endpoint to deliver to, or None for a silent
        drop.  With colliding preserved mappings the earliest mapping whose
        filter admits the sender wins.
        """
        if dst.ip != self.public_ip:
            return None
        self._expire_idle(now)
        best = None
        for mapping in self._mappings.values():
            if mapping.external != dst:
                continue
            if not mapping.permits(src, self.policy.filtering):
                continue
            if best is None or mapping.created_at < best.created_at:
                best = mapping
        if best is None:
            return None
        best.last_active = now
        # Delivery-time recheck of the filtering decision.
        assert best.external == dst and best.permits(src, self.policy.filtering)
        return best.internal

    # -- maintenance -------------------------------------------------------

    def _expire_idle(self, now: int) -> None:
        if self.idle_timeout_ns is None:
            return
        dead = [k for k, m in self._mappings.items()
                if now - m.last_active > self.idle_timeout_ns]
        for k in dead:
            m = self._mappings.pop(k)
            self._ports_in_use.discard(m.external.port)
            ext = self._externals_by_internal.get(m.internal)
            if ext is not None:
                ext.discard(m.external)

    def mapping_count(self) -> int:
        return len(self._mappings)

    def external_ports_of(self, internal: Endpoint) -> set[int]:
        """All external ports currently mapped for an internal endpoint."""
        return {m.external.port for m in self._mappings.values() if m.internal == internal}
