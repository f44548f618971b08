"""Transport abstraction the node services are written against.

Two implementations exist: the deterministic in-process fabric (sim.py)
and real sockets (sockets.py).  Service code is event-driven: it reacts to
accept/data/close callbacks and schedules work with call_later, so the
same logic runs single-threaded on the fabric and on a reactor thread over
real sockets.  Both implementations raise the same error taxonomy.
"""

from __future__ import annotations

from typing import Callable, Optional

from .proto import ControlMessage, Endpoint, TruncatedFrame, WireError, decode, encode


class TransportError(Exception):
    pass


class ConnectRefused(TransportError):
    """The destination host answered, but nothing was listening."""


class ConnectTimedOut(TransportError):
    """No answer within the timeout (typically: segments filtered at a NAT)."""


class BindFailed(TransportError):
    """The requested local endpoint cannot be bound."""


class Stream:
    """A reliable, ordered byte stream between two endpoints.

    local is the endpoint bound on this host; peer is the address this side
    uses to reach the other (for a dialer, the address it dialed).
    """

    local: Endpoint
    peer: Endpoint

    def on(self, data_cb: Callable[[bytes], None], close_cb: Callable[[], None]) -> None:
        raise NotImplementedError

    def send(self, data: bytes) -> None:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError


class Listener:
    endpoint: Endpoint

    def close(self) -> None:
        raise NotImplementedError


class Transport:
    """One host's view of the network."""

    ip: str

    def now(self) -> float:
        raise NotImplementedError

    def call_later(self, delay: float, fn: Callable[[], None]):
        """Schedule fn; returns a zero-argument canceller."""
        raise NotImplementedError

    def listen(self, port: int, on_accept: Callable[[Stream], None],
               shared: bool = True) -> Listener:
        raise NotImplementedError

    def connect(self, remote: Endpoint,
                on_result: Callable[[Optional[Stream], Optional[Exception]], None],
                local_port: int | None = None, timeout: float = 2.0) -> None:
        """Dial remote; exactly one of (stream, error) is non-None in the callback."""
        raise NotImplementedError

    def punch(self, local_port: int, remote: Endpoint) -> None:
        """Emit one connection-opening segment from local_port toward remote
        and abandon it.  Its only purpose is the state it leaves in this
        side's NAT gateway; no connection results and no error is reported."""
        raise NotImplementedError

    def temp_bind(self, port: int):
        """Hold a shared binding on port for an outgoing punch; returns an
        object with release().  Raises BindFailed if the port is held
        exclusively by something that does not share."""
        raise NotImplementedError


class FrameConn:
    """A Stream carrying length-prefixed control frames.

    Wraps reassembly and dispatch; a wire error from a peer closes the
    connection rather than propagating.
    """

    def __init__(self, stream: Stream):
        self.stream = stream
        self._buf = bytearray()
        self._on_msg: Callable[[ControlMessage, bytes], None] | None = None
        self._on_close: Callable[[], None] | None = None
        self.closed = False

    @property
    def local(self) -> Endpoint:
        return self.stream.local

    @property
    def peer(self) -> Endpoint:
        return self.stream.peer

    def on(self, msg_cb: Callable[[ControlMessage, bytes], None],
           close_cb: Callable[[], None]) -> None:
        """msg_cb receives (message, raw frame bytes); raw bytes let tree
        forwarding relay updates verbatim."""
        self._on_msg = msg_cb
        self._on_close = close_cb
        self.stream.on(self._data, self._closed)

    def send_msg(self, msg: ControlMessage) -> None:
        self.stream.send(encode(msg))

    def send_raw(self, frame: bytes) -> None:
        self.stream.send(frame)

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self.stream.close()

    def _data(self, data: bytes) -> None:
        self._buf.extend(data)
        while not self.closed:
            try:
                msg, used = decode(self._buf)
            except TruncatedFrame:
                return
            except WireError:
                self.close()
                if self._on_close:
                    self._on_close()
                return
            raw = bytes(self._buf[:used])
            del self._buf[:used]
            self._on_msg(msg, raw)

    def _closed(self) -> None:
        if not self.closed:
            self.closed = True
            if self._on_close:
                self._on_close()
