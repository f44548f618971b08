"""Process launcher: join the network, wait at the barrier, exec the app.

The launched command inherits a complete description of the overlay:

    BOXER_NODE_ID      this node's id
    BOXER_NODE_ADDR    this node's external endpoint ("ip:port")
    BOXER_PEERS_FILE   path of the peers file (see below)
    BOXER_IPC          path of the local IPC socket

The peers file holds one line per non-self member, "<node_id> <ip>:<port>",
sorted by id, and is replaced atomically (temp file + rename) whenever the
membership view changes, so readers never observe a partial write.
"""

from __future__ import annotations

import logging
import os
import subprocess
import tempfile
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .agent import JoinRejected, NodeAgent
from .membership import SEED_ID, BarrierTimeout
from .proto import Endpoint, MemberRecord
from .sockets import IpcServer, SocketTransport, await_members, join_network

log = logging.getLogger("boxer.launcher")

EXIT_REJECTED = 64        # duplicate-address rejection: benign to orchestration
EXIT_BARRIER = 65         # barrier deadline expired
EXIT_SPAWN = 127          # command could not be started


class SpawnFailed(Exception):
    pass


@dataclass
class LaunchSpec:
    seed: Endpoint
    command: Sequence[str]
    barrier_n: Optional[int] = None
    deadline: Optional[float] = None
    env_extra: dict = field(default_factory=dict)
    workdir: Optional[str] = None
    control_port: int = 0
    peers_path: Optional[str] = None
    ipc_path: Optional[str] = None
    preload: Optional[str] = None

    def __post_init__(self):
        if not self.command:
            raise ValueError("command must be non-empty")
        if self.barrier_n is not None and self.barrier_n < 1:
            raise ValueError("barrier count must be >= 1")


def format_peers(members: Sequence[MemberRecord], self_id: int) -> str:
    """Peers-file body: every member but self, one per line, sorted by id."""
    lines = [f"{r.id} {r.external}\n"
             for r in sorted(members, key=lambda r: r.id) if r.id != self_id]
    return "".join(lines)


def write_peers_file(members: Sequence[MemberRecord], path: str, self_id: int) -> None:
    """Atomic snapshot: readers see either the old file or the new one."""
    body = format_peers(members, self_id)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".",
                               prefix=".peers-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(body)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def _default_path(kind: str) -> str:
    fd, path = tempfile.mkstemp(prefix=f"boxer-{kind}-")
    os.close(fd)
    return path


class Launcher:
    """Runs one command wired into the overlay; see launch()."""

    def __init__(self, spec: LaunchSpec, transport: SocketTransport | None = None):
        self.spec = spec
        self.transport = transport or SocketTransport()
        self._owns_transport = transport is None
        self.agent: NodeAgent | None = None
        self.peers_path = spec.peers_path or _default_path("peers")
        self.ipc_path = spec.ipc_path or _default_path("ipc") + ".sock"
        self._ipc: IpcServer | None = None

    def run(self) -> int:
        try:
            return self._run()
        finally:
            if self._ipc is not None:
                self._ipc.close()
            if self._owns_transport:
                self.transport.stop()

    def _run(self) -> int:
        spec = self.spec
        try:
            self.agent = join_network(self.transport, spec.seed,
                                      control_port=spec.control_port)
        except JoinRejected as exc:
            log.error("join rejected: %s", exc)
            return EXIT_REJECTED

        agent = self.agent
        if spec.barrier_n is not None:
            try:
                workers = await_members(agent, spec.barrier_n,
                                        deadline=spec.deadline)
            except BarrierTimeout as exc:
                log.error("barrier not reached: %s", exc)
                return EXIT_BARRIER
            records = [agent.coord.view.get(SEED_ID)] + list(workers)
        else:
            records = self.transport._on_reactor(agent.coord.view.snapshot)

        write_peers_file(records, self.peers_path, agent.id)
        self._ipc = IpcServer(self.transport, agent, self.ipc_path)

        # keep the peers file fresh while the child runs
        def refresh(_rec):
            write_peers_file(agent.coord.view.snapshot(), self.peers_path,
                             agent.id)

        self.transport._on_reactor(lambda: agent.coord.subscribe(refresh))

        return self._spawn()

    def _spawn(self) -> int:
        return exec_wired(self.spec, self.agent.id, str(self.agent.external),
                          self.peers_path, self.ipc_path)


def exec_wired(spec: LaunchSpec, node_id: int, node_addr: str,
               peers_path: str, ipc_path: str) -> int:
    """Spawn spec.command with the overlay env set; returns its exit code
    (128+signal if it died on one)."""
    env = dict(os.environ)
    env.update(spec.env_extra)
    env["BOXER_NODE_ID"] = str(node_id)
    env["BOXER_NODE_ADDR"] = node_addr
    env["BOXER_PEERS_FILE"] = peers_path
    env["BOXER_IPC"] = ipc_path
    if spec.preload:
        prior = env.get("LD_PRELOAD")
        env["LD_PRELOAD"] = (spec.preload + (" " + prior if prior else ""))
    try:
        proc = subprocess.Popen(list(spec.command), env=env, cwd=spec.workdir)
    except OSError as exc:
        raise SpawnFailed(f"cannot run {spec.command[0]}: {exc}") from exc
    rc = proc.wait()
    if rc < 0:
        return 128 + (-rc)        # died on a signal
    return rc


def launch(spec: LaunchSpec, transport: SocketTransport | None = None) -> int:
    return Launcher(spec, transport).run()
