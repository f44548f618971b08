"""Peers-file contract, launcher env injection, barrier, and exit codes."""

import os
import threading
import time

import pytest

from boxer.launcher import (
    EXIT_BARRIER,
    EXIT_REJECTED,
    LaunchSpec,
    Launcher,
    SpawnFailed,
    format_peers,
    launch,
    write_peers_file,
)
from boxer.proto import Endpoint, MemberRecord
from boxer.seed import SeedAgent
from boxer.sockets import SocketTransport, join_network

WAIT = 10.0


@pytest.fixture
def transport_factory():
    made = []

    def make(**kw):
        t = SocketTransport(**kw)
        made.append(t)
        return t

    yield make
    for t in made:
        t.stop()


@pytest.fixture
def seed(transport_factory):
    return SeedAgent(transport_factory(), port=0)


# -- peers file ----------------------------------------------------------------


def members(*pairs) -> list[MemberRecord]:
    return [MemberRecord(i, Endpoint(ip, port)) for i, ip, port in pairs]


def test_format_excludes_self_and_sorts():
    recs = members((3, "54.1.0.3", 7070), (0, "54.0.0.100", 7077),
                   (1, "54.1.0.1", 7070))
    assert format_peers(recs, self_id=3) == (
        "0 54.0.0.100:7077\n"
        "1 54.1.0.1:7070\n")


def test_format_only_self_is_empty():
    assert format_peers(members((2, "54.1.0.2", 7070)), self_id=2) == ""


def test_format_is_byte_stable():
    recs = members((1, "54.1.0.1", 7070), (0, "54.0.0.100", 7077))
    assert format_peers(recs, 9) == format_peers(list(reversed(recs)), 9)


def test_write_peers_file_atomic_content(tmp_path):
    path = tmp_path / "peers"
    recs = members((0, "54.0.0.100", 7077), (2, "54.1.0.2", 7070))
    write_peers_file(recs, str(path), self_id=2)
    assert path.read_text() == "0 54.0.0.100:7077\n"
    # a rewrite replaces, never appends
    write_peers_file(recs + members((5, "54.1.0.5", 7070)), str(path), 2)
    assert path.read_text() == "0 54.0.0.100:7077\n5 54.1.0.5:7070\n"
    assert [p for p in os.listdir(tmp_path) if p.startswith(".peers-")] == []


# -- spec validation ---------------------------------------------------------


def test_spec_rejects_empty_command():
    with pytest.raises(ValueError):
        LaunchSpec(seed=Endpoint("1.2.3.4", 7077), command=[])


def test_spec_rejects_zero_barrier():
    with pytest.raises(ValueError):
        LaunchSpec(seed=Endpoint("1.2.3.4", 7077), command=["true"],
                   barrier_n=0)


# -- live launches -------------------------------------------------------------


def test_child_env_and_peers(seed, tmp_path):
    out = tmp_path / "env.txt"
    spec = LaunchSpec(
        seed=seed.external,
        command=["sh", "-c", f"env | grep ^BOXER_ | sort > {out}; "
                             f"cat $BOXER_PEERS_FILE >> {out}"],
        peers_path=str(tmp_path / "peers"),
        ipc_path=str(tmp_path / "ipc.sock"))
    assert launch(spec) == 0
    text = out.read_text()
    assert f"BOXER_PEERS_FILE={tmp_path / 'peers'}" in text
    assert f"BOXER_IPC={tmp_path / 'ipc.sock'}" in text
    assert "BOXER_NODE_ID=1" in text
    assert f"0 {seed.external}" in text          # seed listed in peers file


def test_child_exit_code_passes_through(seed):
    spec = LaunchSpec(seed=seed.external, command=["sh", "-c", "exit 9"])
    assert launch(spec) == 9


def test_child_signal_becomes_128_plus(seed):
    spec = LaunchSpec(seed=seed.external, command=["sh", "-c", "kill -TERM $$"])
    assert launch(spec) == 128 + 15


def test_missing_binary_raises_spawn_failed(seed):
    spec = LaunchSpec(seed=seed.external, command=["/no/such/binary"])
    with pytest.raises(SpawnFailed):
        launch(spec)


def test_duplicate_address_exits_64(seed, transport_factory):
    # a join whose observed endpoint is already a member must be rejected;
    # plant the collision, then join from that exact port
    import socket as socketlib

    probe = socketlib.socket()
    probe.bind(("127.0.0.1", 0))
    port = probe.getsockname()[1]
    probe.close()
    seed.transport._on_reactor(lambda: seed.coord.view.insert(
        MemberRecord(41, Endpoint("127.0.0.1", port))))

    spec = LaunchSpec(seed=seed.external, command=["true"], control_port=port)
    assert launch(spec) == EXIT_REJECTED


def test_barrier_deadline_exits_65(seed):
    spec = LaunchSpec(seed=seed.external, command=["true"],
                      barrier_n=3, deadline=0.3)
    assert launch(spec) == EXIT_BARRIER


def test_barrier_releases_when_member_arrives(seed, transport_factory, tmp_path):
    out = tmp_path / "peers-seen.txt"
    spec = LaunchSpec(
        seed=seed.external,
        command=["sh", "-c", f"cat $BOXER_PEERS_FILE > {out}"],
        barrier_n=2, deadline=WAIT,
        peers_path=str(tmp_path / "peers"),
        ipc_path=str(tmp_path / "ipc.sock"))
    rc = []
    runner = threading.Thread(target=lambda: rc.append(launch(spec)))
    runner.start()
    time.sleep(0.4)
    join_network(transport_factory(), seed.external)
    runner.join(WAIT)
    assert rc == [0]
    lines = out.read_text().splitlines()
    assert lines[0] == f"0 {seed.external}"
    assert len(lines) == 2                    # seed + the other worker


def test_peers_file_refreshes_on_join(seed, transport_factory, tmp_path):
    peers = tmp_path / "peers"
    spec = LaunchSpec(
        seed=seed.external,
        command=["python3", "-c", "import time; time.sleep(2)"],
        peers_path=str(peers), ipc_path=str(tmp_path / "ipc.sock"))
    rc = []
    runner = threading.Thread(target=lambda: rc.append(launch(spec)))
    runner.start()
    deadline = time.monotonic() + WAIT
    while time.monotonic() < deadline and not peers.exists():
        time.sleep(0.05)
    assert peers.read_text().splitlines() == [f"0 {seed.external}"]

    join_network(transport_factory(), seed.external)
    while time.monotonic() < deadline:
        if len(peers.read_text().splitlines()) == 2:
            break
        time.sleep(0.05)
    else:
        raise AssertionError("peers file never picked up the new member")
    runner.join(WAIT)
    assert rc == [0]
