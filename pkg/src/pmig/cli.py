"""Operator command line: ``pmig daemon|spawn|migrate|checkpoint|restart|bench|status``.

Guests live inside the CLI process: ``spawn``, ``migrate`` and ``checkpoint``
build them from a workload config, so the pids they print are harness pids.

Environment overrides: ``PMIG_PORT`` (daemon control port) and
``PMIG_WATCHDOG_PERIOD`` (seconds).

Exit codes:

    0  success                    7  truncated stream
    1  other failure              8  unknown subsystem in a stream
    2  usage error                9  checksum mismatch
    3  invalid combination       10  handshake rejected
    4  connection refused        11  port busy
    5  event failed              12  unknown module name
    6  event frozen              13  unknown pid
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading

from . import bench
from .config import WorkloadConfig, load_config, spawn_from_config
from .core import Node, RequestSpec, run_request, validate_combination
from .errors import (ChecksumMismatch, ConnectRefused, EventFrozen, GuestSpecError,
                     HandshakeRejected, InvalidCombination, LinkDown, MigrationError, PortBusy,
                     TruncatedStream, UnknownPid, UnknownSubsystem)
from .guest import DEFAULT_PAGE_SIZE, snapshot_digest
from .medium import DEFAULT_DATA_PORT
from .proto import (DEFAULT_CONTROL_PORT, Coordinator, Daemon, DaemonServer, MigrationFailed,
                    Workload, _normalize_endpoint)
from .strategy import EventKind, ExecCtx, QuiesceMethod, parse_strategy
from .subsystems import available_modules

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_INVALID_COMBINATION = 3
EXIT_CONNECT_REFUSED = 4
EXIT_FAILED = 5
EXIT_FROZEN = 6
EXIT_TRUNCATED = 7
EXIT_UNKNOWN_SUBSYSTEM = 8
EXIT_CHECKSUM = 9
EXIT_REJECTED = 10
EXIT_PORT_BUSY = 11
EXIT_UNKNOWN_MODULE = 12
EXIT_UNKNOWN_PID = 13

# first match wins, so subclasses come before their bases
_EXIT_CODES: list[tuple[type[BaseException], int]] = [
    (InvalidCombination, EXIT_INVALID_COMBINATION),
    (ConnectRefused, EXIT_CONNECT_REFUSED),
    (LinkDown, EXIT_CONNECT_REFUSED),
    (EventFrozen, EXIT_FROZEN),
    (TruncatedStream, EXIT_TRUNCATED),
    (UnknownSubsystem, EXIT_UNKNOWN_SUBSYSTEM),
    (ChecksumMismatch, EXIT_CHECKSUM),
    (HandshakeRejected, EXIT_REJECTED),
    (PortBusy, EXIT_PORT_BUSY),
    (UnknownPid, EXIT_UNKNOWN_PID),
    (GuestSpecError, EXIT_USAGE),
    (MigrationError, EXIT_FAILED),
]


class UnknownModule(MigrationError):
    pass


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, MigrationFailed):
        frozen = any(p.state == "frozen" for p in error.report.processes)
        if frozen:
            return EXIT_FROZEN
        if error.cause is not None and not isinstance(error.cause, MigrationFailed):
            code = exit_code_for(error.cause)
            if code not in (EXIT_ERROR, EXIT_FAILED):
                return code
        return EXIT_FAILED
    if isinstance(error, UnknownModule):
        return EXIT_UNKNOWN_MODULE
    for cls, code in _EXIT_CODES:
        if isinstance(error, cls):
            return code
    return EXIT_ERROR


def _env_float(name: str, default: float) -> float:
    raw = os.environ.get(name)
    return float(raw) if raw else default


def _env_int(name: str, default: int) -> int:
    raw = os.environ.get(name)
    return int(raw) if raw else default


def _modules(text: str | None) -> list[str] | None:
    if text is None:
        return None
    names = [m.strip() for m in text.split(",") if m.strip()]
    known = available_modules()
    for name in names:
        if name not in known:
            raise UnknownModule(f"unknown module {name!r}; available: {', '.join(sorted(known))}")
    return names


def _config(args) -> WorkloadConfig:
    if args.config:
        return load_config(args.config)
    return bench.builtin_config("fig3")


def _node(args, name: str, page_size: int | None = None) -> Node:
    return Node(name, modules=_modules(getattr(args, "modules", None)),
                page_size=page_size or getattr(args, "page_size", None) or DEFAULT_PAGE_SIZE,
                watchdog_period=args.watchdog_period)


def _select(procs: list, pids: list[int] | None) -> list[int]:
    have = [p.pid for p in procs]
    if not pids:
        return have
    for pid in pids:
        if pid not in have:
            raise UnknownPid(f"no process with pid {pid}; spawned pids are {have}")
    return pids


def _print(args, payload: dict, text: str) -> None:
    if getattr(args, "json", False):
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        print(text)


# -- commands ----------------------------------------------------------------------


def cmd_daemon(args) -> int:
    node = _node(args, "daemon")
    media = tuple(m.strip() for m in args.media.split(",") if m.strip())
    daemon = Daemon(node, host=args.host, data_port=args.data_port, media=media)
    server = DaemonServer(daemon, args.host, args.port)
    caps = ",".join(c[0] for c in node.registry.capabilities())
    print(f"listening on {server.host}:{server.port} modules={caps} media={','.join(media)}", flush=True)
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    try:
        stop.wait(args.max_seconds)
    except KeyboardInterrupt:
        pass
    finally:
        server.close()
        node.close()
    return EXIT_OK


def cmd_spawn(args) -> int:
    config = _config(args)
    with _node(args, "local", config.guest.page_size) as node:
        procs = spawn_from_config(node, config)
        rows = [{"pid": p.pid, "threads": len(p.threads), "pages": len(p.address_space.pages),
                 "digest": snapshot_digest(p)} for p in procs]
    _print(args, {"processes": rows},
           "\n".join(f"pid {r['pid']}: {r['threads']} threads, {r['pages']} pages, {r['digest']}"
                     for r in rows))
    return EXIT_OK


def cmd_migrate(args) -> int:
    config = _config(args)
    strategy = parse_strategy(args.strategy)
    with _node(args, "local", config.guest.page_size) as node:
        procs = spawn_from_config(node, config)
        pids = _select(procs, args.pid)
        spec = RequestSpec(EventKind.MIGRATE, pids, strategy, ExecCtx(args.exec_ctx),
                           QuiesceMethod(args.quiesce), args.medium)
        # reject impossible shapes before touching the network
        validate_combination(spec, node.media)
        coordinator = Coordinator(node, commit_timeout=args.commit_timeout)
        try:
            report = coordinator.migrate(
                pids, _normalize_endpoint(args.dest), strategy, quiesce=QuiesceMethod(args.quiesce),
                exec_ctx=ExecCtx(args.exec_ctx), medium=args.medium, dedup=not args.no_dedup,
                workload=Workload(config.steps, config.write_rate, config.seed))
        except MigrationFailed as e:
            _print(args, e.report.to_dict(), f"migration failed: {e}")
            raise
        finally:
            coordinator.close()
    lines = [f"token {report.token} strategy {report.strategy} "
             f"negotiation_msgs {report.negotiation_msgs}"]
    for p in report.processes:
        lines.append(f"pid {p.pid} -> {p.dest_pid}: freeze {p.freeze_time:.6f}s "
                     f"pre-resume {p.bytes_pre_resume} B, post-resume {p.bytes_post_resume} B")
    _print(args, report.to_dict(), "\n".join(lines))
    return EXIT_OK


def cmd_checkpoint(args) -> int:
    config = _config(args)
    with _node(args, "local", config.guest.page_size) as node:
        procs = spawn_from_config(node, config)
        pids = _select(procs, args.pid)
        digests = {pid: snapshot_digest(node.guests[pid]) for pid in pids}
        image = args.image
        if len(pids) > 1 and "{pid}" not in image and not os.path.isdir(image):
            os.makedirs(image, exist_ok=True)
        spec = RequestSpec(EventKind.CHECKPOINT, pids, parse_strategy(args.strategy),
                           ExecCtx(args.exec_ctx), QuiesceMethod(args.quiesce), "image-file", image)
        events = run_request(node, spec)
        paths = {ev.pid: ev.channel.path for ev in events}
    rows = [{"pid": pid, "image": paths[pid], "digest": digests[pid]} for pid in pids]
    _print(args, {"images": rows}, "\n".join(f"pid {r['pid']}: {r['image']} {r['digest']}" for r in rows))
    return EXIT_OK


def cmd_restart(args) -> int:
    with _node(args, "local") as node:
        spec = RequestSpec(EventKind.RESTART, [], parse_strategy("stop-and-copy"), ExecCtx.EXTERNAL,
                           QuiesceMethod.ASYNCHRONOUS, "image-file", args.image)
        (ev,) = run_request(node, spec)
        proc = node.guests[ev.pid]
        digest = snapshot_digest(proc)
    _print(args, {"pid": ev.pid, "digest": digest, "state": proc.run_state.value},
           f"pid {ev.pid}: {proc.run_state.value} {digest}")
    return EXIT_OK


def cmd_bench(args) -> int:
    config = load_config(args.config) if args.config else None
    points = [int(x) for x in args.points.split(",")] if args.points else None
    rows = bench.run_scenario(args.scenario, config=config, points=points, endpoint=args.dest)
    if args.out and args.out != "-":
        with open(args.out, "w", newline="") as fh:
            bench.write_csv(rows, fh)
    else:
        bench.write_csv(rows, sys.stdout)
    return EXIT_OK


def cmd_status(args) -> int:
    with _node(args, "status-probe") as node:
        coordinator = Coordinator(node)
        try:
            status = coordinator.remote_status(_normalize_endpoint(args.dest))
        finally:
            coordinator.close()
    print(json.dumps(status, indent=2, sort_keys=True))
    return EXIT_OK


# -- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pmig", description="Process migration harness.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("--watchdog-period", type=float,
                        default=_env_float("PMIG_WATCHDOG_PERIOD", 2.0),
                        help="seconds without progress before an event freezes (env PMIG_WATCHDOG_PERIOD)")
    sub = parser.add_subparsers(dest="command", required=True)
    port = _env_int("PMIG_PORT", DEFAULT_CONTROL_PORT)
    default_dest = f"127.0.0.1:{port}"

    def common(p, *, guests: bool = True) -> None:
        p.add_argument("--modules", help="comma-separated subsystem modules (default cpu,mem,file)")
        p.add_argument("--json", action="store_true", help="machine-readable output")
        if guests:
            p.add_argument("--config", help="workload config (INI); default: built-in 1 MiB guest")

    p = sub.add_parser("daemon", help="run a migration daemon")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=port, help="control port (env PMIG_PORT)")
    p.add_argument("--data-port", type=int, default=DEFAULT_DATA_PORT, help="first data port")
    p.add_argument("--media", default="stream", help="media accepted for data channels")
    p.add_argument("--modules", help="comma-separated subsystem modules (default cpu,mem,file)")
    p.add_argument("--page-size", type=int, default=DEFAULT_PAGE_SIZE)
    p.add_argument("--max-seconds", type=float, default=None, help="exit after this long")
    p.set_defaults(func=cmd_daemon)

    p = sub.add_parser("spawn", help="spawn guests from a config and print their digests")
    common(p)
    p.set_defaults(func=cmd_spawn)

    p = sub.add_parser("migrate", help="migrate spawned guests to a daemon")
    common(p)
    p.add_argument("--pid", type=int, action="append", help="pid to migrate (repeatable; default all)")
    p.add_argument("--dest", default=default_dest, help="daemon host:port")
    p.add_argument("--strategy", default="stop-and-copy",
                   help="stop-and-copy | pre-copy[:rounds[:threshold]] | lazy[:prefetch]")
    p.add_argument("--quiesce", choices=[m.value for m in QuiesceMethod], default="async")
    p.add_argument("--exec-ctx", choices=[c.value for c in ExecCtx], default="external")
    p.add_argument("--medium", default="stream")
    p.add_argument("--no-dedup", action="store_true", help="send shared regions once per process")
    p.add_argument("--commit-timeout", type=float, default=30.0)
    p.set_defaults(func=cmd_migrate)

    p = sub.add_parser("checkpoint", help="checkpoint spawned guests to image files")
    common(p)
    p.add_argument("--pid", type=int, action="append")
    p.add_argument("--image", required=True, help="image path, directory, or template with {pid}")
    p.add_argument("--strategy", default="stop-and-copy")
    p.add_argument("--quiesce", choices=[m.value for m in QuiesceMethod], default="async")
    p.add_argument("--exec-ctx", choices=[c.value for c in ExecCtx], default="external")
    p.set_defaults(func=cmd_checkpoint)

    p = sub.add_parser("restart", help="restart a process from an image file")
    common(p, guests=False)
    p.add_argument("--image", required=True)
    p.add_argument("--page-size", type=int, default=DEFAULT_PAGE_SIZE)
    p.set_defaults(func=cmd_restart)

    p = sub.add_parser("bench", help="run a benchmark scenario and write CSV")
    p.add_argument("scenario", choices=bench.SCENARIOS)
    p.add_argument("--points", help="comma-separated sweep points (MiB for fig3/fig4, counts otherwise)")
    p.add_argument("--config", help="base workload config")
    p.add_argument("--dest", help="remote daemon host:port (default: in-process daemon)")
    p.add_argument("--out", default="-", help="CSV output path (default stdout)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("status", help="show a daemon's batches")
    p.add_argument("--dest", default=default_dest)
    p.set_defaults(func=cmd_status)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (MigrationError, ValueError, OSError) as e:
        print(f"pmig {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        if isinstance(e, ValueError):
            return EXIT_USAGE
        return exit_code_for(e)


if __name__ == "__main__":
    sys.exit(main())
