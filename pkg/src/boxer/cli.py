"""Command-line front ends.

    boxer        run a command wired into the overlay (launcher)
    boxer-seed   stand-alone rendezvous/membership service
    boxer-bench  throughput / latency / ttfb / fanin measurements

Layout of a bench invocation:

    boxer-bench ttfb --transport sim --pairs 4 --out ttfb.csv --ecdf ttfb.ecdf

Every summary CSV is accompanied by <out>.raw holding each individual
sample, so the summary statistics can be recomputed independently.  eCDF
files cover the broker-path samples.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import signal
import sys
import tempfile
import threading

from . import bench
from .agent import JoinRejected, NodeAgent
from .launcher import (EXIT_BARRIER, EXIT_REJECTED, EXIT_SPAWN, LaunchSpec,
                       Launcher, SpawnFailed, exec_wired, write_peers_file)
from .membership import BarrierTimeout
from .proto import Endpoint
from .seed import SeedAgent
from .sim import Fabric, FabricConfig
from .sockets import SocketTransport


def _parse_endpoint(text: str) -> Endpoint:
    ip, _, port = text.rpartition(":")
    if not ip or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected ip:port, got {text!r}")
    return Endpoint(ip, int(port))


# -- boxer (launcher) ---------------------------------------------------------


def _run_sim(args) -> int:
    """Single-node dry run on a private fabric: join an in-process seed,
    write the peers file, export the env, run the command."""
    fabric = Fabric(FabricConfig())
    seed = SeedAgent(fabric.add_host("54.0.0.100"), port=7077)
    fabric.add_gateway("10.1.0.0/16", "54.1.0.1")
    host = fabric.add_host("10.1.0.2")
    agent = NodeAgent(host, seed.external)
    outcome: list = []
    agent.start(lambda a: outcome.append(None), outcome.append)
    fabric.drain()
    if isinstance(outcome[0], JoinRejected):
        print(f"boxer: join rejected: {outcome[0]}", file=sys.stderr)
        return EXIT_REJECTED
    if outcome[0] is not None:
        print(f"boxer: join failed: {outcome[0]}", file=sys.stderr)
        return 1

    if args.barrier is not None and args.barrier > 1:
        # a private fabric has no other workers to wait for
        done: list = []
        agent.coord.await_members_cb(
            args.barrier, lambda members, err: done.append(err),
            deadline=args.deadline if args.deadline is not None else 0.0)
        fabric.drain()
        if done and isinstance(done[0], BarrierTimeout):
            print(f"boxer: {done[0]}", file=sys.stderr)
            return EXIT_BARRIER

    def scratch(kind: str) -> str:
        fd, path = tempfile.mkstemp(prefix=f"boxer-{kind}-")
        os.close(fd)
        return path

    spec = LaunchSpec(seed=seed.external, command=args.command,
                      peers_path=args.peers_file, ipc_path=args.ipc,
                      preload=args.preload)
    peers_path = spec.peers_path or scratch("peers")
    ipc_path = spec.ipc_path or scratch("ipc")      # nothing listens on it
    write_peers_file(agent.coord.view.snapshot(), peers_path, agent.id)
    try:
        return exec_wired(spec, agent.id, str(agent.external),
                          peers_path, ipc_path)
    except SpawnFailed as exc:
        print(f"boxer: {exc}", file=sys.stderr)
        return EXIT_SPAWN


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="boxer", description="run a command as an overlay node")
    sub = ap.add_subparsers(dest="cmd", required=True)
    run = sub.add_parser("run", help="join the overlay and exec a command")
    run.add_argument("-s", "--seed", type=_parse_endpoint, required=True,
                     metavar="IP:PORT", help="rendezvous endpoint")
    run.add_argument("-n", "--barrier", type=int, default=None,
                     help="wait until this many workers joined (incl. self)")
    run.add_argument("--deadline", type=float, default=None,
                     help="seconds to wait at the barrier")
    run.add_argument("--transport", choices=("sim", "socket"),
                     default="socket")
    run.add_argument("--control-port", type=int, default=0)
    run.add_argument("--peers-file", default=None)
    run.add_argument("--ipc", default=None)
    run.add_argument("--preload", default=None,
                     help="shared object to LD_PRELOAD into the command")
    run.add_argument("command", nargs=argparse.REMAINDER,
                     metavar="-- COMMAND...")
    args = ap.parse_args(argv)

    command = list(args.command)
    if command and command[0] == "--":
        command = command[1:]
    if not command:
        ap.error("no command given (separate it with --)")
    args.command = command

    if args.transport == "sim":
        return _run_sim(args)

    spec = LaunchSpec(seed=args.seed, command=command,
                      barrier_n=args.barrier, deadline=args.deadline,
                      control_port=args.control_port,
                      peers_path=args.peers_file, ipc_path=args.ipc,
                      preload=args.preload)
    try:
        return Launcher(spec).run()
    except SpawnFailed as exc:
        print(f"boxer: {exc}", file=sys.stderr)
        return EXIT_SPAWN


# -- boxer-seed ---------------------------------------------------------------


def seed_main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="boxer-seed", description="rendezvous and membership service")
    ap.add_argument("--listen", type=_parse_endpoint, required=True,
                    metavar="IP:PORT")
    ap.add_argument("--trace", default=None,
                    help="append one JSON line per membership event")
    args = ap.parse_args(argv)

    trace_fh = open(args.trace, "a") if args.trace else None

    def trace(event: dict) -> None:
        line = json.dumps(event)
        if trace_fh is not None:
            trace_fh.write(line + "\n")
            trace_fh.flush()
        print(line, file=sys.stderr)

    transport = SocketTransport(ip=args.listen.ip)
    stop = threading.Event()
    signal.signal(signal.SIGINT, lambda *a: stop.set())
    signal.signal(signal.SIGTERM, lambda *a: stop.set())
    seed = SeedAgent(transport, port=args.listen.port, trace_fn=trace)
    print(f"boxer-seed: listening on {seed.external}", file=sys.stderr)
    try:
        stop.wait()
    finally:
        transport.stop()
        if trace_fh is not None:
            trace_fh.close()
    return 0


# -- boxer-bench --------------------------------------------------------------


def _bench_args(argv):
    ap = argparse.ArgumentParser(
        prog="boxer-bench",
        description="overlay benchmarks; writes a summary CSV plus raw samples")
    sub = ap.add_subparsers(dest="op", required=True)
    common = dict(formatter_class=argparse.ArgumentDefaultsHelpFormatter)

    def add_shared(p):
        p.add_argument("--transport", choices=("sim", "socket"), default="sim")
        p.add_argument("--pairs", type=int, default=bench.PAIRS)
        p.add_argument("--out", required=True, metavar="CSV")
        p.add_argument("--ecdf", default=None, metavar="CSV")
        p.add_argument("--delay", type=float, default=100.0,
                       help="one-way link delay in µs (sim only)")
        p.add_argument("--msg-size", type=int, default=bench.MSG_SIZE)

    p = sub.add_parser("throughput", **common)
    add_shared(p)
    p.add_argument("--duration", type=float, default=10.0,
                   help="seconds per direction (socket)")
    p.add_argument("--rounds", type=int, default=bench.ROUNDS,
                   help="messages per stream (sim)")

    p = sub.add_parser("latency", **common)
    add_shared(p)
    p.add_argument("--rounds", type=int, default=bench.ROUNDS)
    p.add_argument("--reps", type=int, default=bench.REPS)

    p = sub.add_parser("ttfb", **common)
    add_shared(p)
    p.add_argument("--reps", type=int, default=bench.REPS)

    p = sub.add_parser("fanin", **common)
    add_shared(p)
    p.add_argument("--duration", type=float, default=10.0)
    p.add_argument("--rounds", type=int, default=bench.ROUNDS)
    p.add_argument("--senders", default="1,2,4,8,16,32",
                   help="comma-separated sweep of sender counts")
    return ap.parse_args(argv)


def bench_main(argv=None) -> int:
    args = _bench_args(argv)
    raw: dict[str, list[float]] = {}
    records: list[bench.BenchRecord] = []
    ecdf_values: list[float] | None = None
    failed = 0

    overlay = None
    sim_overlay = None
    sweep = ([int(s) for s in args.senders.split(",") if s]
             if args.op == "fanin" else [])
    try:
        if args.transport == "socket":
            overlay = bench.SocketOverlay()
        elif args.op == "fanin":
            sim_overlay = bench.SimOverlay(max(1, (max(sweep) + 1) // 2),
                                           args.delay)
        else:
            sim_overlay = bench.SimOverlay(args.pairs, args.delay)

        if args.op == "throughput":
            for path in ("native", "broker"):
                for direction, metric in (("forward", "throughput_fwd"),
                                          ("reverse", "throughput_rev")):
                    if args.transport == "sim":
                        values = bench.throughput_sim(
                            pairs=args.pairs, rounds=args.rounds,
                            msg_size=args.msg_size, direction=direction,
                            path=path, overlay=sim_overlay)
                    else:
                        values = bench.throughput_socket(
                            overlay, args.duration, path=path,
                            direction=direction, pairs=args.pairs)
                    raw[f"{path}.{metric}"] = values
                    records.append(bench.summarize(path, metric, values))

        elif args.op == "latency":
            for path in ("native", "broker"):
                if args.transport == "sim":
                    values = bench.latency_sim(
                        pairs=args.pairs, msg_size=args.msg_size,
                        rounds=args.rounds, reps=args.reps, path=path,
                        overlay=sim_overlay)
                else:
                    values = bench.latency_socket(
                        overlay, msg_size=args.msg_size, rounds=args.rounds,
                        reps=args.reps, path=path)
                raw[f"{path}.rtt_latency"] = values
                records.append(bench.summarize(path, "rtt_latency", values))
                if path == "broker":
                    ecdf_values = values

        elif args.op == "ttfb":
            for path in ("native", "broker"):
                if args.transport == "sim":
                    values, failures = bench.ttfb_sim(
                        pairs=args.pairs, reps=args.reps, path=path,
                        overlay=sim_overlay)
                else:
                    values, failures = bench.ttfb_socket(
                        overlay, reps=args.reps, path=path)
                if failures:
                    failed += len(failures)
                    print(f"boxer-bench: {len(failures)} {path} connections "
                          f"failed ({failures[0]!r})", file=sys.stderr)
                raw[f"{path}.ttfb"] = values
                records.append(bench.summarize(path, "ttfb", values))
                if path == "broker":
                    ecdf_values = values

        elif args.op == "fanin":
            with open(args.out, "w", newline="") as fh:
                out = csv.writer(fh)
                out.writerow(["senders", "mean_mbits", "std"])
                for n in sweep:
                    if args.transport == "sim":
                        values = [bench.fanin_sim(n, rounds=args.rounds,
                                                  msg_size=args.msg_size,
                                                  overlay=sim_overlay)]
                    else:
                        values = bench.fanin_socket(overlay, n, args.duration)
                    raw[f"fanin.senders={n}"] = values
                    rec = bench.summarize("broker", f"fanin{n}", values)
                    out.writerow([n, rec.mean, rec.std])
            bench.write_raw(args.out + ".raw", raw)
            return 0
    finally:
        if overlay is not None:
            overlay.close()

    bench.write_summary(args.out, records)
    bench.write_raw(args.out + ".raw", raw)
    if args.ecdf and ecdf_values:
        bench.write_ecdf(args.ecdf, ecdf_values)
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
