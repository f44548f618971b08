"""Build fixtures and a live single-machine broker for interposer tests."""

import os
import subprocess

import pytest

from boxer.launcher import write_peers_file
from boxer.seed import SeedAgent
from boxer.sockets import IpcServer, SocketTransport, join_network

SHIM_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


@pytest.fixture(scope="session")
def built():
    """Compile the shim and the helper binaries once per test run."""
    subprocess.run(["make", "-s", "-C", SHIM_DIR, "all", "helpers"], check=True)
    bins = os.path.join(SHIM_DIR, "tests", "bin")
    return {
        "shim": os.path.join(SHIM_DIR, "libboxershim.so"),
        "server": os.path.join(bins, "echo_server"),
        "client": os.path.join(bins, "echo_client"),
        "sctrace": os.path.join(bins, "sctrace"),
    }


@pytest.fixture(scope="module")
def broker(tmp_path_factory):
    """A joined node with its IPC service and peers file, all on loopback."""
    root = tmp_path_factory.mktemp("broker")
    seed_transport = SocketTransport()
    node_transport = SocketTransport()
    seed = SeedAgent(seed_transport, port=0)
    agent = join_network(node_transport, seed.external)
    ipc_path = str(root / "ipc.sock")
    server = IpcServer(node_transport, agent, ipc_path)
    peers_path = str(root / "peers")
    write_peers_file(list(agent.coord.view.records), peers_path, agent.id)
    yield {"agent": agent, "ipc": ipc_path, "peers": peers_path}
    server.close()
    node_transport.stop()
    seed_transport.stop()
