"""Control wire format shared by the seed, the node services, and the IPC shim.

Every message travels as one frame:

    +------------------+-----+---------------------------+
    | length (u32, BE) | tag | payload (`length` bytes)  |
    +------------------+-----+---------------------------+

The length prefix counts the payload only, not the tag byte.  All integers
are big-endian.  An endpoint is encoded as 4 IPv4 address bytes followed by
a 2-byte port.  Lists are a 2-byte element count followed by the elements.

Tags:

    0x01 Hello{version}                 joiner -> seed
    0x02 AddressReply{observed, id}     seed -> joiner
    0x03 Reject{reason}                 seed -> joiner
    0x04 MemberList{members}            seed -> joiner
    0x05 MemberUpdate{member}           tree parent -> child
    0x06 CtrlHello{id}                  both ways on a fresh control link
    0x07 NatSetupReq{req_id, src, dst}  requester -> destination's service
    0x08 NatSetupAck{req_id}            destination's service -> requester
    0x09 NatSetupErr{req_id, code}      destination's service -> requester
    0x0A SubscribeTree{}                child -> tree parent
    0x0B RegisterListener{endpoint}     local IPC only
    0x0C UnregisterListener{endpoint}   local IPC only

Decoding errors are distinguishable: TruncatedFrame (more bytes needed),
UnknownTag, MalformedPayload (length or field contents wrong for the tag).
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass
from typing import Union

PROTO_VERSION = 1

# Frames larger than this are treated as malformed rather than "keep
# waiting"; the largest legitimate frame (a full MemberList) is ~640 KiB.
MAX_FRAME_LEN = 1 << 20

TAG_HELLO = 0x01
TAG_ADDRESS_REPLY = 0x02
TAG_REJECT = 0x03
TAG_MEMBER_LIST = 0x04
TAG_MEMBER_UPDATE = 0x05
TAG_CTRL_HELLO = 0x06
TAG_NAT_SETUP_REQ = 0x07
TAG_NAT_SETUP_ACK = 0x08
TAG_NAT_SETUP_ERR = 0x09
TAG_SUBSCRIBE_TREE = 0x0A
TAG_REGISTER_LISTENER = 0x0B
TAG_UNREGISTER_LISTENER = 0x0C

# Reject{reason} codes.
REJECT_DUPLICATE_ADDRESS = 1
REJECT_VERSION_MISMATCH = 2

# NatSetupErr{code} codes.
SETUP_ERR_NO_LISTENER = 1
SETUP_ERR_BIND_FAILED = 2
SETUP_ERR_UNKNOWN_DESTINATION = 3      # IPC replies only: dial it natively

REJECT_NAMES = {
    REJECT_DUPLICATE_ADDRESS: "duplicate-address",
    REJECT_VERSION_MISMATCH: "version-mismatch",
}

SETUP_ERR_NAMES = {
    SETUP_ERR_NO_LISTENER: "no-listener",
    SETUP_ERR_BIND_FAILED: "bind-failed",
    SETUP_ERR_UNKNOWN_DESTINATION: "unknown-destination",
}

_LEN = struct.Struct(">I")
_ENDPOINT = struct.Struct(">4sH")
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")


class WireError(Exception):
    """Base class for decode failures."""


class TruncatedFrame(WireError):
    """The buffer ends before the declared frame does."""


class UnknownTag(WireError):
    """The tag byte names no known message."""


class MalformedPayload(WireError):
    """The payload does not parse for its tag."""


@dataclass(frozen=True, order=True)
class Endpoint:
    """An IPv4 address and a nonzero TCP port."""

    ip: str
    port: int

    def __post_init__(self):
        try:
            packed = socket.inet_aton(self.ip)
        except OSError:
            raise ValueError(f"bad IPv4 address: {self.ip!r}") from None
        # Normalize shorthand like "10.1" so equality is textual equality.
        object.__setattr__(self, "ip", socket.inet_ntoa(packed))
        if not 1 <= self.port <= 0xFFFF:
            raise ValueError(f"bad port: {self.port}")

    @classmethod
    def parse(cls, text: str) -> "Endpoint":
        ip, _, port = text.rpartition(":")
        if not ip:
            raise ValueError(f"expected ip:port, got {text!r}")
        return cls(ip, int(port))

    def __str__(self) -> str:
        return f"{self.ip}:{self.port}"


NodeId = int


@dataclass(frozen=True, order=True)
class MemberRecord:
    """One network member: its id and its control endpoint as seen from outside."""

    id: NodeId
    external: Endpoint


@dataclass(frozen=True)
class Hello:
    version: int = PROTO_VERSION


@dataclass(frozen=True)
class AddressReply:
    observed: Endpoint
    assigned: NodeId


@dataclass(frozen=True)
class Reject:
    reason: int

    @property
    def reason_name(self) -> str:
        return REJECT_NAMES.get(self.reason, f"reason-{self.reason}")


@dataclass(frozen=True)
class MemberList:
    members: tuple[MemberRecord, ...]


@dataclass(frozen=True)
class MemberUpdate:
    member: MemberRecord


@dataclass(frozen=True)
class CtrlHello:
    id: NodeId


@dataclass(frozen=True)
class NatSetupReq:
    req_id: int
    src: Endpoint
    dst: Endpoint


@dataclass(frozen=True)
class NatSetupAck:
    req_id: int


@dataclass(frozen=True)
class NatSetupErr:
    req_id: int
    code: int

    @property
    def code_name(self) -> str:
        return SETUP_ERR_NAMES.get(self.code, f"code-{self.code}")


@dataclass(frozen=True)
class SubscribeTree:
    pass


@dataclass(frozen=True)
class RegisterListener:
    endpoint: Endpoint


@dataclass(frozen=True)
class UnregisterListener:
    endpoint: Endpoint


ControlMessage = Union[
    Hello,
    AddressReply,
    Reject,
    MemberList,
    MemberUpdate,
    CtrlHello,
    NatSetupReq,
    NatSetupAck,
    NatSetupErr,
    SubscribeTree,
    RegisterListener,
    UnregisterListener,
]


def _pack_endpoint(ep: Endpoint) -> bytes:
    return _ENDPOINT.pack(socket.inet_aton(ep.ip), ep.port)


def _pack_member(m: MemberRecord) -> bytes:
    return _U32.pack(m.id) + _pack_endpoint(m.external)


def encode(msg: ControlMessage) -> bytes:
    """Serialize one message into a full frame (length prefix included)."""
    if isinstance(msg, Hello):
        tag, body = TAG_HELLO, bytes([msg.version])
    elif isinstance(msg, AddressReply):
        tag, body = TAG_ADDRESS_REPLY, _pack_endpoint(msg.observed) + _U32.pack(msg.assigned)
    elif isinstance(msg, Reject):
        tag, body = TAG_REJECT, bytes([msg.reason])
    elif isinstance(msg, MemberList):
        if len(msg.members) > 0xFFFF:
            raise ValueError("member list too long to encode")
        body = struct.pack(">H", len(msg.members))
        for m in msg.members:
            body += _pack_member(m)
        tag = TAG_MEMBER_LIST
    elif isinstance(msg, MemberUpdate):
        tag, body = TAG_MEMBER_UPDATE, _pack_member(msg.member)
    elif isinstance(msg, CtrlHello):
        tag, body = TAG_CTRL_HELLO, _U32.pack(msg.id)
    elif isinstance(msg, NatSetupReq):
        tag = TAG_NAT_SETUP_REQ
        body = _U64.pack(msg.req_id) + _pack_endpoint(msg.src) + _pack_endpoint(msg.dst)
    elif isinstance(msg, NatSetupAck):
        tag, body = TAG_NAT_SETUP_ACK, _U64.pack(msg.req_id)
    elif isinstance(msg, NatSetupErr):
        tag, body = TAG_NAT_SETUP_ERR, _U64.pack(msg.req_id) + bytes([msg.code])
    elif isinstance(msg, SubscribeTree):
        tag, body = TAG_SUBSCRIBE_TREE, b""
    elif isinstance(msg, RegisterListener):
        tag, body = TAG_REGISTER_LISTENER, _pack_endpoint(msg.endpoint)
    elif isinstance(msg, UnregisterListener):
        tag, body = TAG_UNREGISTER_LISTENER, _pack_endpoint(msg.endpoint)
    else:
        raise TypeError(f"not a control message: {msg!r}")
    return _LEN.pack(len(body)) + bytes([tag]) + body


def _unpack_endpoint(body: memoryview, off: int) -> tuple[Endpoint, int]:
    if off + 6 > len(body):
        raise MalformedPayload("endpoint runs past payload end")
    raw_ip, port = _ENDPOINT.unpack_from(body, off)
    if port == 0:
        raise MalformedPayload("endpoint port is zero")
    return Endpoint(socket.inet_ntoa(raw_ip), port), off + 6


def _unpack_member(body: memoryview, off: int) -> tuple[MemberRecord, int]:
    if off + 4 > len(body):
        raise MalformedPayload("member id runs past payload end")
    (node_id,) = _U32.unpack_from(body, off)
    ep, off = _unpack_endpoint(body, off + 4)
    return MemberRecord(node_id, ep), off


def _expect_len(body: memoryview, n: int) -> None:
    if len(body) != n:
        raise MalformedPayload(f"payload is {len(body)} bytes, expected {n}")


def decode(data: bytes | memoryview) -> tuple[ControlMessage, int]:
    """Decode the first frame in `data`.

    Returns (message, bytes consumed).  Trailing bytes beyond the frame are
    left for the caller.  Raises TruncatedFrame if `data` ends before the
    frame does, UnknownTag or MalformedPayload for bad frames.
    """
    view = memoryview(data)
    if len(view) < 4:
        raise TruncatedFrame("length prefix incomplete")
    (body_len,) = _LEN.unpack_from(view, 0)
    if body_len > MAX_FRAME_LEN:
        raise MalformedPayload(f"declared payload of {body_len} bytes exceeds cap")
    total = 4 + 1 + body_len
    if len(view) < 5:
        raise TruncatedFrame("tag byte missing")
    if len(view) < total:
        raise TruncatedFrame(f"frame needs {total} bytes, have {len(view)}")
    tag = view[4]
    body = view[5:total]

    if tag == TAG_HELLO:
        _expect_len(body, 1)
        msg: ControlMessage = Hello(body[0])
    elif tag == TAG_ADDRESS_REPLY:
        _expect_len(body, 10)
        observed, off = _unpack_endpoint(body, 0)
        (assigned,) = _U32.unpack_from(body, off)
        msg = AddressReply(observed, assigned)
    elif tag == TAG_REJECT:
        _expect_len(body, 1)
        msg = Reject(body[0])
    elif tag == TAG_MEMBER_LIST:
        if len(body) < 2:
            raise MalformedPayload("member list shorter than its count field")
        (count,) = struct.unpack_from(">H", body, 0)
        _expect_len(body, 2 + 10 * count)
        members = []
        off = 2
        for _ in range(count):
            member, off = _unpack_member(body, off)
            members.append(member)
        msg = MemberList(tuple(members))
    elif tag == TAG_MEMBER_UPDATE:
        _expect_len(body, 10)
        member, _ = _unpack_member(body, 0)
        msg = MemberUpdate(member)
    elif tag == TAG_CTRL_HELLO:
        _expect_len(body, 4)
        msg = CtrlHello(_U32.unpack_from(body, 0)[0])
    elif tag == TAG_NAT_SETUP_REQ:
        _expect_len(body, 20)
        (req_id,) = _U64.unpack_from(body, 0)
        src, off = _unpack_endpoint(body, 8)
        dst, _ = _unpack_endpoint(body, off)
        msg = NatSetupReq(req_id, src, dst)
    elif tag == TAG_NAT_SETUP_ACK:
        _expect_len(body, 8)
        msg = NatSetupAck(_U64.unpack_from(body, 0)[0])
    elif tag == TAG_NAT_SETUP_ERR:
        _expect_len(body, 9)
        (req_id,) = _U64.unpack_from(body, 0)
        msg = NatSetupErr(req_id, body[8])
    elif tag == TAG_SUBSCRIBE_TREE:
        _expect_len(body, 0)
        msg = SubscribeTree()
    elif tag == TAG_REGISTER_LISTENER:
        _expect_len(body, 6)
        ep, _ = _unpack_endpoint(body, 0)
        msg = RegisterListener(ep)
    elif tag == TAG_UNREGISTER_LISTENER:
        _expect_len(body, 6)
        ep, _ = _unpack_endpoint(body, 0)
        msg = UnregisterListener(ep)
    else:
        raise UnknownTag(f"tag 0x{tag:02x}")
    return msg, total


class FrameBuffer:
    """Reassembles a byte stream into decoded messages.

    feed() returns the messages completed by the new bytes; a frame split
    across feeds is held until the rest arrives.  Decode errors propagate
    to the caller, which should drop the connection.
    """

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[ControlMessage]:
        self._buf.extend(data)
        out = []
        while True:
            try:
                msg, used = decode(self._buf)
            except TruncatedFrame:
                break
            del self._buf[:used]
            out.append(msg)
        return out

    def pending(self) -> int:
        return len(self._buf)
