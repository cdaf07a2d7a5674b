"""Coordinator/daemon protocol: handshake, migration orchestration, strategies.

Control frames reuse the chunk framing with magic ``PMCT``; the 16-byte
identifier field carries the migration token and the kind byte carries the
message type (all integers big-endian)::

    offset  size  field
    0       4     magic "PMCT"
    4       2     version (u16)
    6       16    token
    22      1     type: 1 Offer, 2 Accept, 3 Reject, 4 FrameSetup, 5 ResumeAck,
                  6 RemovedConfirm, 7 StatusQuery, 8 StatusReply
    23      4     sequence (u32), per link direction
    27      4     body length (u32)
    31      n     body: UTF-8 JSON object, keys sorted
    31+n    4     CRC-32 over bytes [0, 31+n)

Node-level commands (batch Abort, ResidualFileOp) travel on the same link as
``PMCM`` command envelopes and are multiplexed by token. Per-process commands
(StepAck, PagePull, Resend, Abort) use the reverse path of that process's data
channel.

A batch migrates N processes with one Offer, one Accept and N FrameSetup
messages. Commit is two messages per process: the destination sends ResumeAck
once the process runs there, the coordinator answers with RemovedConfirm and
only then drops the source. A destination that never sees RemovedConfirm
destroys its copy.
"""

from __future__ import annotations

import enum
import itertools
import json
import logging
import os
import socket
import struct
import threading
import time
import zlib
from dataclasses import asdict, dataclass, field
from typing import Any, Callable

from .core import (EventAborted, EventContext, EventState, Node, ProcessHooks, RequestSpec,
                   validate_combination)
from .errors import (AlreadyTerminal, CapabilityMismatch, ChannelClosed, ChecksumMismatch, ConnectRefused,
                     HandshakeRejected, LinkDown, MediumError, MigrationError, NotFound, PortBusy,
                     ProtocolError, RejectedByPolicy, SourceGone, Timeout, VersionMismatch)
from .guest import GuestProcess, ResourcePolicy, RunState, run_workload
from .medium import (CHUNK_HEADER, COMMAND_MAGIC, CONTROL_MAGIC, CRC, DEFAULT_BUFFER_SIZE,
                     DEFAULT_DEADLINE, DEFAULT_WINDOW, ENVELOPE_HEADER, FRAME_OVERHEAD,
                     ONE_WAY_OPCODES, WIRE_VERSION, Channel, ChunkSource, CommandMessage,
                     EnvelopeFlag, Opcode, Role, StreamChannel, connect_stream, decode_envelope,
                     encode_envelope, read_envelope, read_frame_after, recv_exact)
from .strategy import (EventKind, ExecCtx, PostCopyLazy, PreCopy, QuiesceMethod, StopAndCopy,
                       Strategy, parse_strategy, strategy_label)

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
DEFAULT_CONTROL_PORT = 7141
DEFAULT_COMMIT_TIMEOUT = 30.0
BATCH_TIMEOUT = 120.0

_PULL_REQUEST = struct.Struct(">I")
_PULL_COUNT = struct.Struct(">H")
_PULL_PAGE = struct.Struct(">I")
_ROUND_ACK = struct.Struct(">Q")


class ControlType(enum.IntEnum):
    OFFER = 1
    ACCEPT = 2
    REJECT = 3
    FRAME_SETUP = 4
    RESUME_ACK = 5
    REMOVED_CONFIRM = 6
    STATUS_QUERY = 7
    STATUS_REPLY = 8


HANDSHAKE_TYPES = frozenset({ControlType.OFFER, ControlType.ACCEPT, ControlType.REJECT,
                             ControlType.FRAME_SETUP})


def new_token() -> bytes:
    """A fresh 16-byte migration token."""
    return os.urandom(16)


@dataclass(frozen=True)
class ControlFrame:
    type: ControlType
    token: bytes
    body: dict = field(default_factory=dict)
    sequence: int = 0

    def encode(self) -> bytes:
        payload = json.dumps(self.body, sort_keys=True, separators=(",", ":")).encode()
        head = CHUNK_HEADER.pack(CONTROL_MAGIC, WIRE_VERSION, self.token, int(self.type),
                                 self.sequence, len(payload))
        return head + payload + CRC.pack(zlib.crc32(head + payload))

    @classmethod
    def decode(cls, frame: bytes) -> ControlFrame:
        if len(frame) < FRAME_OVERHEAD:
            raise ProtocolError("short control frame")
        magic, version, token, kind, seq, plen = CHUNK_HEADER.unpack_from(frame)
        if len(frame) != FRAME_OVERHEAD + plen:
            raise ChecksumMismatch(seq)
        (crc,) = CRC.unpack_from(frame, len(frame) - CRC.size)
        if zlib.crc32(memoryview(frame)[:-CRC.size]) != crc:
            raise ChecksumMismatch(seq)
        if magic != CONTROL_MAGIC:
            raise ProtocolError(f"bad control magic {magic!r}")
        if version != WIRE_VERSION:
            raise ProtocolError(f"unsupported wire version {version}")
        try:
            ctype = ControlType(kind)
        except ValueError:
            raise ProtocolError(f"unknown control message type {kind}") from None
        try:
            body = json.loads(frame[CHUNK_HEADER.size:-CRC.size] or b"{}")
        except ValueError:
            raise ProtocolError("control body is not JSON") from None
        return cls(ctype, bytes(token), body, seq)


# errors that survive the trip through an error reply
_REMOTE_ERRORS: dict[str, type[MigrationError]] = {
    "SourceGone": SourceGone,
    "ProtocolError": ProtocolError,
    "NotFound": NotFound,
}


def _remote_error(text: str) -> MigrationError:
    name, _, message = text.partition(": ")
    return _REMOTE_ERRORS.get(name, ProtocolError)(message or text)


class ControlLink:
    """A node-pair control connection carrying control frames and commands."""

    def __init__(self, sock: socket.socket,
                 on_control: Callable[[ControlLink, ControlFrame], None],
                 on_command: Callable[[ControlLink, CommandMessage], CommandMessage | None] | None = None,
                 on_close: Callable[[ControlLink], None] | None = None,
                 *, name: str = "control", deadline: float = DEFAULT_DEADLINE):
        self._sock = sock
        self.name = name
        self.deadline = deadline
        self.on_control = on_control
        self.on_command = on_command
        self.on_close = on_close
        self.closed = False
        self.counts: dict[tuple[bytes, ControlType], int] = {}
        self._send_lock = threading.Lock()
        self._cond = threading.Condition()
        self._seq = itertools.count()
        self._corr = itertools.count(1)
        self._replies: dict[int, tuple[EnvelopeFlag, CommandMessage]] = {}
        self._reader = threading.Thread(target=self._read_loop, daemon=True, name=name)
        self._reader.start()

    def _write(self, data: bytes) -> None:
        if self.closed:
            raise LinkDown(f"{self.name} is closed")
        try:
            with self._send_lock:
                self._sock.sendall(data)
        except OSError as e:
            self._mark_closed()
            raise LinkDown(f"{self.name}: {e}") from None

    def _count(self, token: bytes, ctype: ControlType) -> None:
        with self._cond:
            self.counts[(token, ctype)] = self.counts.get((token, ctype), 0) + 1

    def send(self, ctype: ControlType, token: bytes, body: dict | None = None) -> None:
        frame = ControlFrame(ctype, token, body or {}, next(self._seq) & 0xFFFFFFFF)
        self._write(frame.encode())
        self._count(token, ctype)

    def command(self, msg: CommandMessage, timeout: float | None = None) -> CommandMessage | None:
        flag = EnvelopeFlag.ONE_WAY if msg.opcode in ONE_WAY_OPCODES else EnvelopeFlag.REQUEST
        corr = next(self._corr) & 0xFFFFFFFF
        self._write(encode_envelope(flag, corr, msg))
        if flag is EnvelopeFlag.ONE_WAY:
            return None
        limit = time.monotonic() + (self.deadline if timeout is None else timeout)
        with self._cond:
            while corr not in self._replies:
                if self.closed:
                    raise LinkDown(f"{self.name} closed awaiting reply")
                remaining = limit - time.monotonic()
                if remaining <= 0:
                    raise Timeout(f"no reply to {msg.opcode.name}")
                self._cond.wait(min(remaining, 0.1))
            rflag, reply = self._replies.pop(corr)
        if rflag is EnvelopeFlag.ERROR:
            raise _remote_error(reply.payload.decode(errors="replace"))
        return reply

    def message_count(self, token: bytes, types=HANDSHAKE_TYPES) -> int:
        with self._cond:
            return sum(n for (tok, t), n in self.counts.items() if tok == token and t in types)

    def _read_loop(self) -> None:
        read = recv_exact(self._sock)
        try:
            while True:
                head = read(4)
                if len(head) < 4:
                    break
                if head == CONTROL_MAGIC:
                    frame = ControlFrame.decode(read_frame_after(read, head))
                    self._count(frame.token, frame.type)
                    try:
                        self.on_control(self, frame)
                    except Exception:  # noqa: BLE001 -- a bad message must not kill the link
                        log.exception("%s: handling %s failed", self.name, frame.type.name)
                elif head == COMMAND_MAGIC:
                    self._on_envelope(read_envelope(read, head))
                else:
                    raise ProtocolError(f"unexpected magic {head!r} on control link")
        except (MigrationError, OSError) as e:
            log.debug("%s reader stopped: %s", self.name, e)
        finally:
            self._mark_closed()

    def _on_envelope(self, frame: bytes) -> None:
        flag, corr, msg = decode_envelope(frame)
        if flag in (EnvelopeFlag.REPLY, EnvelopeFlag.ERROR):
            with self._cond:
                self._replies[corr] = (flag, msg)
                self._cond.notify_all()
            return
        threading.Thread(target=self._answer, args=(flag, corr, msg), daemon=True).start()

    def _answer(self, flag: EnvelopeFlag, corr: int, msg: CommandMessage) -> None:
        try:
            if self.on_command is None:
                raise ProtocolError(f"{self.name} does not accept {msg.opcode.name}")
            reply = self.on_command(self, msg)
            out = encode_envelope(EnvelopeFlag.REPLY, corr,
                                  reply or CommandMessage(msg.opcode, msg.target_subsystem, msg.token))
        except Exception as e:  # noqa: BLE001 -- reported back to the requester
            out = encode_envelope(EnvelopeFlag.ERROR, corr, CommandMessage(
                msg.opcode, msg.target_subsystem, msg.token, f"{type(e).__name__}: {e}".encode()))
        if flag is EnvelopeFlag.ONE_WAY:
            return
        try:
            self._write(out)
        except LinkDown:
            pass

    def _mark_closed(self) -> None:
        with self._cond:
            if self.closed:
                return
            self.closed = True
            self._cond.notify_all()
        if self.on_close is not None:
            try:
                self.on_close(self)
            except Exception:  # noqa: BLE001
                log.exception("%s close handler failed", self.name)

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()
        self._mark_closed()

    cut = close


# -- capability matching ------------------------------------------------------------------


def match_capabilities(local: list, remote: list) -> None:
    """Raise unless both (id, version, order_key) lists agree exactly."""
    mine = {c[0]: tuple(c) for c in local}
    theirs = {c[0]: tuple(c) for c in remote}
    for sid in sorted(set(mine) ^ set(theirs)):
        raise CapabilityMismatch(sid)
    for sid in sorted(mine):
        if mine[sid][1] != theirs[sid][1]:
            raise VersionMismatch(sid)
        if mine[sid][2] != theirs[sid][2]:
            raise CapabilityMismatch(sid)


def _reject_body(err: HandshakeRejected) -> dict:
    kind = {CapabilityMismatch: "capability", VersionMismatch: "version",
            RejectedByPolicy: "policy"}.get(type(err), "other")
    return {"reason": kind, "message": err.reason, "item": err.item}


def _rejection(body: dict) -> HandshakeRejected:
    item = body.get("item", "")
    kind = body.get("reason")
    if kind == "capability":
        return CapabilityMismatch(item)
    if kind == "version":
        return VersionMismatch(item)
    if kind == "policy":
        return RejectedByPolicy(item)
    return HandshakeRejected(body.get("message", "rejected"), item)


# -- residual dependencies ----------------------------------------------------------------


def resolve_residual_file_op(records: dict, request: dict) -> dict:
    """Run a forwarded file metadata operation against the source's record.

    ``records`` maps (token hex, source pid, fd) to the source's OpenFile.
    Operations: ``offset`` returns the offset, ``advance`` adds ``amount``.
    """
    key = (request["token"], request["pid"], request["fd"])
    f = records.get(key)
    if f is None:
        raise SourceGone(f"source no longer holds fd {request['fd']} of pid {request['pid']}")
    op = request.get("op")
    if op == "offset":
        return {"offset": f.offset}
    if op == "advance":
        amount = int(request.get("amount", 0))
        if amount < 0:
            raise ProtocolError("cannot advance a file offset backwards")
        f.offset += amount
        return {"offset": f.offset}
    raise ProtocolError(f"unknown residual file operation {op!r}")


# -- reports ---------------------------------------------------------------------------------


@dataclass
class Workload:
    """Seeded writer that keeps running on the source during pre-copy rounds."""

    steps: int = 4
    write_rate: int = 4
    seed: int = 0

    def round_seed(self, round_no: int) -> int:
        return self.seed * 1_000_003 + round_no


@dataclass
class PidReport:
    pid: int
    dest_pid: int | None = None
    state: str = "prepared"
    freeze_time: float = 0.0
    latency: float = 0.0
    bytes_pre_resume: int = 0
    bytes_post_resume: int = 0
    pages_pre_resume: int = 0
    pages_post_resume: int = 0
    map_entries: int = 0
    lazy_entries: int = 0
    region_bytes_on_wire: int = 0
    rounds: int = 0
    round_pages: list[list[int]] = field(default_factory=list)
    error: str | None = None


@dataclass
class MigrationReport:
    token: str
    request_id: int
    dest_request_id: int | None
    strategy: str
    negotiation_msgs: int
    handshake_time: float
    elapsed: float
    ok: bool
    processes: list[PidReport] = field(default_factory=list)
    error: str | None = None

    @property
    def bytes_pre_resume(self) -> int:
        return sum(p.bytes_pre_resume for p in self.processes)

    @property
    def bytes_post_resume(self) -> int:
        return sum(p.bytes_post_resume for p in self.processes)

    @property
    def region_bytes_on_wire(self) -> int:
        return sum(p.region_bytes_on_wire for p in self.processes)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["bytes_pre_resume"] = self.bytes_pre_resume
        out["bytes_post_resume"] = self.bytes_post_resume
        out["region_bytes_on_wire"] = self.region_bytes_on_wire
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


# -- source side -------------------------------------------------------------------------------


@dataclass(eq=False)
class _SourceEntry:
    pid: int
    event: EventContext
    process: GuestProcess
    channel: Channel | None = None
    endpoint: Any = None
    dest_pid: int | None = None
    resumed: threading.Event = field(default_factory=threading.Event)
    drained: threading.Event = field(default_factory=threading.Event)
    lazy_lock: threading.Lock = field(default_factory=threading.Lock)
    lazy_all: frozenset = frozenset()
    lazy_remaining: set = field(default_factory=set)
    quiesced_at: float | None = None
    resumed_at: float | None = None
    bytes_pre: int = 0
    pages_pre: int = 0
    bytes_post: int = 0
    pages_post: int = 0
    round_pages: list = field(default_factory=list)
    error: BaseException | None = None
    removed: bool = False


class Batch:
    """One coordinator request covering N processes bound to one token."""

    def __init__(self, coordinator: Coordinator, token: bytes, request_id: int, strategy: Strategy,
                 link: ControlLink, medium: str, workload: Workload | None, drain: str):
        self.coordinator = coordinator
        self.token = token
        self.request_id = request_id
        self.strategy = strategy
        self.link = link
        self.medium = medium
        self.workload = workload
        self.drain = drain
        self.entries: dict[int, _SourceEntry] = {}
        self.accept: dict | None = None
        self.submitted = time.monotonic()
        self.handshake_time = 0.0
        self.negotiation_msgs = 0
        self.error: BaseException | None = None
        self.aborting = threading.Event()
        self.finished = threading.Event()
        self.report: MigrationReport | None = None
        self._reply = threading.Event()
        self._reply_frame: ControlFrame | None = None
        self._workers: list[threading.Thread] = []
        self._lock = threading.Lock()

    # frames for this token arrive here, on the link's reader thread
    def on_control(self, frame: ControlFrame) -> None:
        if frame.type in (ControlType.ACCEPT, ControlType.REJECT):
            self._reply_frame = frame
            self._reply.set()
        elif frame.type is ControlType.RESUME_ACK:
            entry = self.entries.get(frame.body.get("pid"))
            if entry is not None:
                entry.dest_pid = frame.body.get("dest_pid")
                entry.resumed_at = time.monotonic()
                entry.resumed.set()

    def request_abort(self, error: BaseException) -> None:
        with self._lock:
            if self.error is None:
                self.error = error
        self.aborting.set()

    def on_link_closed(self) -> None:
        if not self.finished.is_set():
            self.request_abort(LinkDown("control link lost"))

    def wait_resumed(self, timeout: float = BATCH_TIMEOUT) -> bool:
        """Block until every process runs on the destination (or the batch fails)."""
        limit = time.monotonic() + timeout
        for entry in self.entries.values():
            while not entry.resumed.wait(0.02):
                if self.aborting.is_set() or self.finished.is_set() or time.monotonic() > limit:
                    return False
        return True

    def wait(self, timeout: float = BATCH_TIMEOUT) -> MigrationReport:
        return self.coordinator._complete(self, timeout)


class Coordinator:
    """Source-side driver of migrations to remote daemons."""

    def __init__(self, node: Node, *, transfer_slots: int = 1,
                 commit_timeout: float = DEFAULT_COMMIT_TIMEOUT,
                 buffer_size: int = DEFAULT_BUFFER_SIZE, window: int = DEFAULT_WINDOW,
                 deadline: float = DEFAULT_DEADLINE):
        self.node = node
        self.commit_timeout = commit_timeout
        self.buffer_size = buffer_size
        self.window = window
        self.deadline = deadline
        # processes frozen at the same time; the rest keep running until their turn
        self._slots = threading.BoundedSemaphore(max(1, transfer_slots))
        self._links: dict[Any, ControlLink] = {}
        self._lock = threading.Lock()
        self.batches: dict[bytes, Batch] = {}
        self.residuals: dict[tuple[str, int, int], Any] = {}
        self._status_waiters: dict[bytes, list] = {}
        self.on_boundary: Callable[[str, EventContext | None], None] | None = None

    # -- links --------------------------------------------------------------------------

    def connect(self, endpoint) -> ControlLink:
        key = id(endpoint) if isinstance(endpoint, Daemon) else _normalize_endpoint(endpoint)
        with self._lock:
            link = self._links.get(key)
            if link is not None and not link.closed:
                return link
            if isinstance(endpoint, Daemon):
                mine, theirs = socket.socketpair()
                endpoint.attach(theirs)
            else:
                host, port = key
                try:
                    mine = socket.create_connection((host, port), timeout=self.deadline)
                except OSError as e:
                    raise ConnectRefused(f"no daemon at {host}:{port}: {e}") from None
                mine.settimeout(None)
                mine.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            link = ControlLink(mine, self._on_control, self._on_command, self._on_link_closed,
                               name=f"coordinator-{self.node.name}", deadline=self.deadline)
            self._links[key] = link
            return link

    def links(self) -> list[ControlLink]:
        with self._lock:
            return list(self._links.values())

    def close(self) -> None:
        for link in self.links():
            link.close()
        self.residuals.clear()

    def _on_control(self, link: ControlLink, frame: ControlFrame) -> None:
        if frame.type is ControlType.STATUS_REPLY:
            waiter = self._status_waiters.get(frame.token)
            if waiter is not None:
                waiter.append(frame.body)
            return
        batch = self.batches.get(frame.token)
        if batch is not None:
            batch.on_control(frame)

    def _on_command(self, link: ControlLink, msg: CommandMessage) -> CommandMessage | None:
        if msg.opcode is Opcode.RESIDUAL_FILE_OP:
            request = json.loads(msg.payload)
            request["token"] = msg.token.hex()
            reply = resolve_residual_file_op(self.residuals, request)
            return CommandMessage(msg.opcode, msg.target_subsystem, msg.token, json.dumps(reply).encode())
        if msg.opcode is Opcode.ABORT:
            batch = self.batches.get(msg.token)
            if batch is not None:
                batch.request_abort(EventAborted("destination aborted the batch"))
            return None
        raise ProtocolError(f"coordinator does not handle {msg.opcode.name}")

    def _on_link_closed(self, link: ControlLink) -> None:
        for batch in list(self.batches.values()):
            if batch.link is link:
                batch.on_link_closed()

    def _hook(self, name: str, ev: EventContext | None = None) -> None:
        if self.on_boundary is not None:
            self.on_boundary(name, ev)

    def retire(self, token: bytes) -> None:
        """Forget forwarded resources of a finished batch; later requests get SourceGone."""
        key = token.hex()
        for k in [k for k in self.residuals if k[0] == key]:
            del self.residuals[k]

    # -- handshake ------------------------------------------------------------------------

    def handshake(self, endpoint, pids: list[int], strategy: Strategy | None = None, *,
                  quiesce: QuiesceMethod = QuiesceMethod.ASYNCHRONOUS,
                  exec_ctx: ExecCtx = ExecCtx.EXTERNAL, medium: str | None = None,
                  hooks: ProcessHooks | None = None, dedup: bool = True,
                  workload: Workload | None = None, drain: str = "auto") -> Batch:
        """Negotiate a batch: Offer, Accept (or Reject), then one FrameSetup per pid.

        Returns the prepared batch; :meth:`run` starts the transfer.
        """
        strategy = strategy or StopAndCopy()
        medium = medium or ("loopback" if isinstance(endpoint, Daemon) else "stream")
        spec = RequestSpec(EventKind.MIGRATE, list(pids), strategy, exec_ctx, quiesce, medium,
                           endpoint, hooks, dedup)
        request_id = self.node.core.submit_request(spec)
        request = self.node.core.request(request_id)
        events = {ev.pid: ev for ev in request.events}
        try:
            link = self.connect(endpoint)
        except MigrationError as e:
            self._fail_events(events.values(), e)
            raise
        token = new_token()
        batch = Batch(self, token, request_id, strategy, link, medium, workload, drain)
        batch.submitted = request.submitted
        for pid, ev in events.items():
            ev.token = token
            ev.on_step = self._event_hook
            proc = self.node.guests[pid]
            batch.entries[pid] = _SourceEntry(pid, ev, proc)
            for f in proc.file_table:
                if f.policy is ResourcePolicy.FORWARD_TO_SOURCE:
                    self.residuals[(token.hex(), pid, f.fd)] = f
        self.batches[token] = batch
        started = time.monotonic()
        try:
            self._hook("coord:offer")
            link.send(ControlType.OFFER, token, self._offer(batch, quiesce, exec_ctx))
            if not batch._reply.wait(self.deadline):
                raise Timeout("daemon never answered the offer")
            reply = batch._reply_frame
            assert reply is not None
            if reply.type is ControlType.REJECT:
                raise _rejection(reply.body)
            batch.accept = reply.body
            self._hook("coord:accept")
            for pid in pids:
                link.send(ControlType.FRAME_SETUP, token, {"pid": pid})
                self._hook("coord:frame-setup")
            batch.negotiation_msgs = link.message_count(token)
            batch.handshake_time = time.monotonic() - started
            for pid, entry in batch.entries.items():
                info = reply.body["pids"][str(pid)]
                entry.endpoint = info["endpoint"]
                entry.channel = self._open_data(batch, info["endpoint"])
                entry.event.channel = entry.channel
                entry.channel.command_handler = self._source_command(batch, entry)
        except BaseException as e:
            self._abandon(batch, e)
            raise
        return batch

    def _offer(self, batch: Batch, quiesce: QuiesceMethod, exec_ctx: ExecCtx) -> dict:
        manifest = []
        for pid, entry in batch.entries.items():
            proc = entry.process
            manifest.append({
                "pid": pid,
                "threads": len(proc.threads),
                "pages": len(proc.address_space.pages),
                "regions": [[r.region_id, proc.regions[r.region_id].length]
                            for r in proc.address_space.shared_refs],
                "files": [[f.fd, f.policy.value] for f in proc.file_table],
            })
        return {
            "version": PROTOCOL_VERSION,
            "page_size": self.node.page_size,
            "strategy": strategy_label(batch.strategy),
            "quiesce": quiesce.value,
            "exec_ctx": exec_ctx.value,
            "medium": batch.medium,
            "buffer_size": self.buffer_size,
            "window": self.window,
            "commit_timeout": self.commit_timeout,
            "drain": batch.drain,
            "capabilities": [list(c) for c in self.node.registry.capabilities()],
            "manifest": manifest,
        }

    def _open_data(self, batch: Batch, endpoint) -> Channel:
        opts = {"buffer_size": batch.accept.get("buffer_size", self.buffer_size),
                "window": self.window, "deadline": self.deadline}
        if batch.medium == "loopback":
            return self.node.media.open_channel("loopback", endpoint, Role.SENDER, **opts)
        host, port = endpoint
        return connect_stream(host, port, **opts)

    def _event_hook(self, ev: EventContext, name: str) -> None:
        self._hook(f"src:{name}", ev)

    def _fail_events(self, events, error: BaseException) -> None:
        for ev in events:
            self.node.core.fail(ev, error)

    def _abandon(self, batch: Batch, error: BaseException) -> None:
        batch.request_abort(error)
        self._abort_batch(batch, error)
        self._finalize(batch, error)

    # -- transfer -------------------------------------------------------------------------------

    def run(self, batch: Batch) -> Batch:
        for entry in batch.entries.values():
            kind = "guest" if entry.event.exec_ctx is ExecCtx.INTERNAL else "worker"
            t = threading.Thread(target=self._source_worker, args=(batch, entry), daemon=True,
                                 name=f"{kind}-{entry.pid}")
            batch._workers.append(t)
            t.start()
        return batch

    def start_migration(self, pids: list[int], endpoint, strategy: Strategy | None = None,
                        **kwargs) -> Batch:
        return self.run(self.handshake(endpoint, pids, strategy, **kwargs))

    def migrate(self, pids: list[int], endpoint, strategy: Strategy | None = None, *,
                timeout: float = BATCH_TIMEOUT, **kwargs) -> MigrationReport:
        """Migrate ``pids`` to the daemon at ``endpoint``; raises if the batch fails."""
        report = self.start_migration(pids, endpoint, strategy, **kwargs).wait(timeout)
        return report

    def _source_worker(self, batch: Batch, entry: _SourceEntry) -> None:
        ev, proc, chan = entry.event, entry.process, entry.channel
        core = self.node.core
        try:
            with self._slots:
                if batch.aborting.is_set():
                    raise EventAborted("batch aborted before transfer")
                core.start(ev)
                ev.process = proc
                ev.hooks.setup(ev, proc)
                strategy = batch.strategy
                if isinstance(strategy, PreCopy):
                    self._run_pre_copy(batch, entry)
                elif isinstance(strategy, PostCopyLazy):
                    self._run_lazy(batch, entry)
                else:
                    self._run_stop_and_copy(batch, entry)
                core.boundary(ev, "flush")
                chan.flush()
                ev.stamp("flushed")
                # nothing left to push: the destination's own watchdog covers the restore
                ev.watchdog.disarm()
                core.drain(ev)
                entry.bytes_pre = ev.stats["bytes"]
                entry.pages_pre = ev.stats["pages_sent"]
                limit = time.monotonic() + self.commit_timeout
                while not entry.resumed.wait(0.01):
                    if batch.aborting.is_set() or ev.abort_requested:
                        raise EventAborted(str(batch.error or "batch aborted"))
                    if chan.peer_aborted or chan.aborted:
                        raise EventAborted("destination aborted the event")
                    if time.monotonic() > limit:
                        raise Timeout("no resume acknowledgment from the destination")
                ev.stamp("resume-ack")
                ev.committed = True
        except BaseException as e:  # noqa: BLE001 -- funnels into the batch abort
            entry.error = e
            core.fail(ev, e)
            batch.request_abort(e)

    def _quiesce(self, batch: Batch, entry: _SourceEntry) -> None:
        ev = entry.event
        self.node.core.boundary(ev, "quiesce")
        entry.quiesced_at = time.monotonic()
        self.node.core.quiesce(entry.process, ev.quiesce)
        ev.stamp("quiesced")
        self.node.core.boundary(ev, "quiesced")

    def _run_stop_and_copy(self, batch: Batch, entry: _SourceEntry) -> None:
        ev = entry.event
        self._quiesce(batch, entry)
        ev.mem_mode = "full"
        self.node.core.checkpoint_sections(ev, entry.process, entry.channel)
        entry.round_pages.append(sorted(ev.sent_pages))

    def _run_pre_copy(self, batch: Batch, entry: _SourceEntry) -> None:
        """Warm rounds while the guest keeps running, then a frozen final delta.

        Round 1 sends every page. After each round the source waits for the
        destination's StepAck, then the guest runs; the pages it wrote form the
        next round. Rounds stop once the dirty set is at most the threshold or
        the round budget is spent.
        """
        ev, proc, chan = entry.event, entry.process, entry.channel
        core = self.node.core
        strategy: PreCopy = batch.strategy  # type: ignore[assignment]
        workload = batch.workload
        if "mem" in core.registry:
            round_no = 1
            while True:
                ev.mem_mode = "warm"
                ev.round_no = round_no
                before = len(ev.sent_pages)
                core.checkpoint_sections(ev, proc, chan, ["mem"], end_of_process=False)
                chan.flush()
                entry.round_pages.append(sorted(ev.sent_pages[before:]))
                core.boundary(ev, "round-ack")
                chan.wait_acked(self.commit_timeout)
                ev.watchdog.feed()
                ev.pass_no += 1
                dirty: set[int] = set()
                if workload is not None:
                    dirty = run_workload(proc, workload.steps, workload.write_rate,
                                         workload.round_seed(round_no))
                ev.watchdog.feed()
                if len(dirty) <= strategy.dirty_threshold or round_no >= strategy.max_rounds:
                    break
                round_no += 1
        ev.round_no = None
        ev.mem_mode = "delta"
        self._quiesce(batch, entry)
        before = len(ev.sent_pages)
        core.checkpoint_sections(ev, proc, chan)
        entry.round_pages.append(sorted(ev.sent_pages[before:]))

    def _run_lazy(self, batch: Batch, entry: _SourceEntry) -> None:
        ev = entry.event
        self._quiesce(batch, entry)
        ev.mem_mode = "lazy"
        self.node.core.checkpoint_sections(ev, entry.process, entry.channel)
        entry.round_pages.append(sorted(ev.sent_pages))
        with entry.lazy_lock:
            entry.lazy_all = frozenset(ev.lazy_pages)
            entry.lazy_remaining = set(ev.lazy_pages)
            if not entry.lazy_remaining:
                entry.drained.set()

    def _source_command(self, batch: Batch, entry: _SourceEntry):
        def handle(msg: CommandMessage) -> CommandMessage | None:
            if msg.opcode is Opcode.ABORT:
                entry.event.abort_requested = True
                batch.request_abort(EventAborted(f"destination aborted pid {entry.pid}"))
                return None
            if msg.opcode is Opcode.PAGE_PULL_REQUEST:
                return self._serve_pull(batch, entry, msg)
            raise ProtocolError(f"source does not handle {msg.opcode.name}")
        return handle

    def _serve_pull(self, batch: Batch, entry: _SourceEntry, msg: CommandMessage) -> CommandMessage:
        (n,) = _PULL_REQUEST.unpack(msg.payload)
        strategy = batch.strategy
        prefetch = strategy.prefetch if isinstance(strategy, PostCopyLazy) else 0
        with entry.lazy_lock:
            if n not in entry.lazy_all:
                raise ProtocolError(f"page {n} is not in the lazy page map of pid {entry.pid}")
            pages = [n]
            if prefetch:
                following = sorted(p for p in entry.lazy_remaining if p > n)
                pages.extend(following[:prefetch])
            parts = [_PULL_COUNT.pack(len(pages))]
            for p in pages:
                parts.append(_PULL_PAGE.pack(p) + entry.process.page_content(p))
            payload = b"".join(parts)
            entry.lazy_remaining.difference_update(pages)
            entry.pages_post += len(pages)
            entry.bytes_post += ENVELOPE_HEADER.size + len(payload) + CRC.size
            if not entry.lazy_remaining:
                entry.drained.set()
        return CommandMessage(Opcode.PAGE_PULL_REPLY, "mem", msg.token, payload)

    # -- commit / abort --------------------------------------------------------------------------

    def _complete(self, batch: Batch, timeout: float) -> MigrationReport:
        limit = time.monotonic() + timeout
        for t in batch._workers:
            t.join(max(0.0, limit - time.monotonic()))
            if t.is_alive():
                batch.request_abort(Timeout("batch did not finish in time"))
        entries = list(batch.entries.values())
        try:
            if batch.aborting.is_set() or not all(e.resumed.is_set() for e in entries):
                raise batch.error or EventAborted("batch aborted")
            for entry in entries:
                entry.process.transition(RunState.MIGRATING)
                entry.event.stamp("migrating")
            if isinstance(batch.strategy, PostCopyLazy):
                for entry in entries:
                    # the source copy stays authoritative until every page has moved
                    while not entry.drained.wait(0.01):
                        if batch.aborting.is_set() or entry.channel.peer_aborted:
                            raise batch.error or EventAborted("lazy drain interrupted")
                        if time.monotonic() > limit:
                            raise Timeout(f"pid {entry.pid} never finished draining")
            self._hook("coord:commit")
        except BaseException as e:  # noqa: BLE001
            self._abort_batch(batch, e)
            return self._finalize(batch, e)
        committed = []
        for entry in entries:
            try:
                batch.link.send(ControlType.REMOVED_CONFIRM, batch.token, {"pid": entry.pid})
                committed.append(entry)
            except LinkDown as e:
                batch.request_abort(e)
                break
        for entry in committed:
            self.node.remove(entry.pid)
            entry.removed = True
            self._retire_channel(entry.channel)
            self.node.core.finish(entry.event, EventState.DONE)
        if len(committed) != len(entries):
            self._abort_batch(batch, batch.error or LinkDown("commit interrupted"))
            return self._finalize(batch, batch.error)
        return self._finalize(batch, None)

    def _retire_channel(self, chan: Channel) -> None:
        """Close a committed data channel once the destination hangs up.

        The last page-pull reply may still be on its way out when the source
        commits, so a stream is only torn down after the peer closed it.
        """
        if not isinstance(chan, StreamChannel):
            chan.close()
            return

        def closer() -> None:
            limit = time.monotonic() + self.commit_timeout
            with chan._cond:
                while not chan._eof and time.monotonic() < limit:
                    chan._cond.wait(0.05)
            chan.close()

        threading.Thread(target=closer, daemon=True, name="retire-channel").start()

    def _abort_batch(self, batch: Batch, error: BaseException) -> None:
        """Every uncommitted source goes back to Running; the daemon drops its frames."""
        batch.aborting.set()
        core = self.node.core
        for entry in batch.entries.values():
            if entry.removed:
                continue
            ev = entry.event
            ev.abort_requested = True
            if entry.channel is not None:
                try:
                    entry.channel.command(CommandMessage(Opcode.ABORT, token=batch.token))
                except (MediumError, OSError):
                    pass
                entry.channel.abort()
            if not ev.finished:
                core.fail(ev, error)
            proc = entry.process
            if proc.run_state in (RunState.QUIESCED, RunState.MIGRATING):
                core.resume_source(proc)
        try:
            batch.link.command(CommandMessage(Opcode.ABORT, token=batch.token,
                                              payload=json.dumps({"reason": str(error)}).encode()))
        except (MigrationError, OSError):
            pass

    def _finalize(self, batch: Batch, error: BaseException | None) -> MigrationReport:
        entries = list(batch.entries.values())
        procs = []
        for entry in entries:
            ev = entry.event
            freeze = 0.0
            if entry.quiesced_at is not None and entry.resumed_at is not None:
                freeze = entry.resumed_at - entry.quiesced_at
            procs.append(PidReport(
                pid=entry.pid, dest_pid=entry.dest_pid, state=ev.state.value,
                freeze_time=freeze,
                latency=(entry.resumed_at - batch.submitted) if entry.resumed_at else 0.0,
                bytes_pre_resume=entry.bytes_pre, bytes_post_resume=entry.bytes_post,
                pages_pre_resume=entry.pages_pre, pages_post_resume=entry.pages_post,
                map_entries=ev.stats["map_entries"], lazy_entries=ev.stats["lazy_entries"],
                region_bytes_on_wire=ev.stats["region_bytes"],
                rounds=len(entry.round_pages), round_pages=entry.round_pages,
                error=f"{type(entry.error).__name__}: {entry.error}" if entry.error else None))
        ok = error is None and all(e.removed for e in entries)
        report = MigrationReport(
            token=batch.token.hex(), request_id=batch.request_id,
            dest_request_id=(batch.accept or {}).get("request_id"),
            strategy=strategy_label(batch.strategy), negotiation_msgs=batch.negotiation_msgs,
            handshake_time=batch.handshake_time, elapsed=time.monotonic() - batch.submitted,
            ok=ok, processes=procs,
            error=None if error is None else f"{type(error).__name__}: {error}")
        batch.report = report
        batch.finished.set()
        if not ok:
            self.retire(batch.token)
            raise MigrationFailed(report, error)
        return report

    def abort(self, token: bytes) -> None:
        """Abort a batch whose processes have not yet resumed on the destination."""
        batch = self.batches.get(token)
        if batch is None:
            raise NotFound(f"no batch {token.hex()}")
        if batch.finished.is_set() or any(e.resumed.is_set() for e in batch.entries.values()):
            raise AlreadyTerminal(f"batch {token.hex()} already resumed on the destination")
        batch.request_abort(EventAborted("aborted by request"))

    # -- status ------------------------------------------------------------------------------------

    def remote_status(self, endpoint, timeout: float | None = None) -> dict:
        link = self.connect(endpoint)
        probe = new_token()
        replies: list = []
        self._status_waiters[probe] = replies
        try:
            link.send(ControlType.STATUS_QUERY, probe, {})
            limit = time.monotonic() + (timeout or self.deadline)
            while not replies:
                if link.closed or time.monotonic() > limit:
                    raise Timeout("daemon did not answer the status query")
                time.sleep(0.005)
            return replies[0]
        finally:
            del self._status_waiters[probe]


class MigrationFailed(MigrationError):
    """A batch did not complete; every uncommitted source is Running again."""

    def __init__(self, report: MigrationReport, cause: BaseException | None):
        super().__init__(report.error or "migration failed")
        self.report = report
        self.cause = cause


def _normalize_endpoint(endpoint) -> tuple[str, int]:
    if isinstance(endpoint, str):
        host, _, port = endpoint.rpartition(":")
        return (host or "127.0.0.1", int(port))
    host, port = endpoint
    return (host, int(port))


# -- destination side ----------------------------------------------------------------------------


@dataclass(eq=False)
class _DestEntry:
    src_pid: int
    event: EventContext
    frame: GuestProcess
    endpoint: Any = None
    listener: socket.socket | None = None
    channel: Channel | None = None
    commit: threading.Event = field(default_factory=threading.Event)
    committed: bool = False
    aborted: bool = False
    pull_lock: threading.Lock = field(default_factory=threading.Lock)
    fault_pulls: int = 0
    drain_pulls: int = 0
    drain_requested: threading.Event = field(default_factory=threading.Event)
    thread: threading.Thread | None = None


@dataclass(eq=False)
class _DestBatch:
    token: bytes
    link: ControlLink
    offer: dict
    request_id: int
    strategy: Strategy
    slots: dict[int, dict] = field(default_factory=dict)
    entries: dict[int, _DestEntry] = field(default_factory=dict)
    aborted: bool = False


class Daemon:
    """Destination-side counterpart of the coordinator."""

    def __init__(self, node: Node, *, host: str = "127.0.0.1", data_port: int = 0,
                 media: tuple[str, ...] = ("loopback", "stream"),
                 policy: Callable[[dict], str | None] | None = None,
                 hooks: ProcessHooks | None = None, buffer_size: int = DEFAULT_BUFFER_SIZE):
        self.node = node
        self.host = host
        self.data_port = data_port
        self.media = media
        self.policy = policy
        self.hooks = hooks or ProcessHooks()
        self.buffer_size = buffer_size
        self.batches: dict[bytes, _DestBatch] = {}
        self.links: list[ControlLink] = []
        self.on_boundary: Callable[[str, EventContext | None], None] | None = None
        self._lock = threading.RLock()

    def attach(self, sock: socket.socket) -> ControlLink:
        link = ControlLink(sock, self._on_control, self._on_command, self._on_link_closed,
                           name=f"daemon-{self.node.name}")
        with self._lock:
            self.links.append(link)
        return link

    def close(self) -> None:
        for link in list(self.links):
            link.close()

    def capabilities(self) -> list[list]:
        return [list(c) for c in self.node.registry.capabilities()]

    def _hook(self, name: str, ev: EventContext | None = None) -> None:
        if self.on_boundary is not None:
            self.on_boundary(name, ev)

    def _event_hook(self, ev: EventContext, name: str) -> None:
        self._hook(f"dst:{name}", ev)

    # -- control frames ------------------------------------------------------------------------

    def _on_control(self, link: ControlLink, frame: ControlFrame) -> None:
        if frame.type is ControlType.OFFER:
            try:
                body = self._accept(link, frame)
            except HandshakeRejected as e:
                link.send(ControlType.REJECT, frame.token, _reject_body(e))
                return
            link.send(ControlType.ACCEPT, frame.token, body)
        elif frame.type is ControlType.FRAME_SETUP:
            self._frame_setup(frame.token, int(frame.body["pid"]))
        elif frame.type is ControlType.REMOVED_CONFIRM:
            batch = self.batches.get(frame.token)
            entry = batch.entries.get(int(frame.body["pid"])) if batch else None
            if entry is not None and not entry.aborted:
                entry.committed = True
                entry.commit.set()
        elif frame.type is ControlType.STATUS_QUERY:
            link.send(ControlType.STATUS_REPLY, frame.token, self.status())
        else:
            log.warning("daemon ignores %s", frame.type.name)

    def _accept(self, link: ControlLink, frame: ControlFrame) -> dict:
        offer = frame.body
        if offer.get("version") != PROTOCOL_VERSION:
            raise VersionMismatch(f"protocol {offer.get('version')}")
        if frame.token in self.batches:
            raise RejectedByPolicy("token already in use")
        if offer.get("page_size") != self.node.page_size:
            raise HandshakeRejected("page size mismatch",
                                    f"page_size {offer.get('page_size')} != {self.node.page_size}")
        match_capabilities(self.capabilities(), offer.get("capabilities", []))
        medium = offer.get("medium")
        if medium not in self.media:
            raise RejectedByPolicy(f"medium {medium}")
        if self.policy is not None:
            reason = self.policy(offer)
            if reason:
                raise RejectedByPolicy(reason)
        strategy = parse_strategy(offer.get("strategy", "stop-and-copy"))
        spec = RequestSpec(EventKind.MIGRATE, [], strategy, ExecCtx.EXTERNAL,
                           QuiesceMethod(offer.get("quiesce", "async")), medium, None, self.hooks)
        validate_combination(spec, self.node.media)
        request = self.node.core.new_request(spec)
        batch = _DestBatch(frame.token, link, offer, request.request_id, strategy)
        pids: dict[str, dict] = {}
        try:
            for i, item in enumerate(offer.get("manifest", [])):
                pid = int(item["pid"])
                if medium == "loopback":
                    endpoint: Any = f"{frame.token.hex()}/{pid}"
                    listener = None
                else:
                    listener = self._bind_data_port(i)
                    endpoint = [self.host, listener.getsockname()[1]]
                batch.slots[pid] = {"endpoint": endpoint, "listener": listener}
                pids[str(pid)] = {"endpoint": endpoint}
        except BaseException:
            for slot in batch.slots.values():
                if slot["listener"] is not None:
                    slot["listener"].close()
            raise
        with self._lock:
            self.batches[frame.token] = batch
        return {"request_id": request.request_id, "pids": pids,
                "buffer_size": min(int(offer.get("buffer_size", self.buffer_size)), self.buffer_size)}

    def _bind_data_port(self, index: int) -> socket.socket:
        if not self.data_port:
            return socket.create_server((self.host, 0))
        for port in range(self.data_port + index, self.data_port + index + 256):
            try:
                return socket.create_server((self.host, port))
            except OSError:
                continue
        raise RejectedByPolicy("no free data port")

    def _frame_setup(self, token: bytes, pid: int) -> None:
        batch = self.batches.get(token)
        if batch is None or batch.aborted:
            log.warning("frame setup for unknown or aborted batch %s", token.hex())
            return
        if pid in batch.entries or pid not in batch.slots:
            # a second restart for the same token and pid is refused
            log.warning("refusing duplicate frame setup for pid %d", pid)
            return
        slot = batch.slots[pid]
        core = self.node.core
        request = core.request(batch.request_id)
        frame = self.node.new_frame(int(batch.offer["page_size"]))
        ev = core.new_event(request, pid=frame.pid, is_source=False, process=frame)
        ev.token = token
        ev.on_step = self._event_hook
        entry = _DestEntry(pid, ev, frame, slot["endpoint"], slot["listener"])
        batch.entries[pid] = entry
        entry.thread = threading.Thread(target=self._dest_worker, args=(batch, entry), daemon=True,
                                        name=f"restart-{pid}")
        entry.thread.start()

    def _open_receiver(self, batch: _DestBatch, entry: _DestEntry) -> Channel:
        offer = batch.offer
        opts = {"buffer_size": int(offer.get("buffer_size", self.buffer_size)),
                "window": int(offer.get("window", DEFAULT_WINDOW))}
        if batch.offer["medium"] == "loopback":
            return self.node.media.open_channel("loopback", entry.endpoint, Role.RECEIVER, **opts)
        listener = entry.listener
        assert listener is not None
        listener.settimeout(float(offer.get("commit_timeout", DEFAULT_COMMIT_TIMEOUT)))
        try:
            sock, _ = listener.accept()
        except OSError:
            raise Timeout("source never opened the data channel") from None
        finally:
            listener.close()
        sock.settimeout(None)
        return StreamChannel(Role.RECEIVER, sock, **opts)

    def _dest_worker(self, batch: _DestBatch, entry: _DestEntry) -> None:
        core = self.node.core
        ev, frame = entry.event, entry.frame
        commit_timeout = float(batch.offer.get("commit_timeout", DEFAULT_COMMIT_TIMEOUT))
        try:
            chan = self._open_receiver(batch, entry)
            entry.channel = chan
            ev.channel = chan
            chan.command_handler = self._dest_command(batch, entry)
            if entry.aborted:
                raise EventAborted("batch aborted")
            source = ChunkSource(chan)
            # the event starts when data flows, so waiting for a transfer slot is not a stall
            source.prime(commit_timeout)
        except BaseException as e:  # noqa: BLE001
            core.fail(ev, e)
            return

        def ack_round(event: EventContext, round_no: int) -> None:
            chan.command(CommandMessage(Opcode.STEP_ACK, "mem", batch.token,
                                        _ROUND_ACK.pack(chan.stats.chunks_popped)))

        state = core.restart_worker(ev, frame, source, finish=False, on_round=ack_round)
        if state is not EventState.DRAINING:
            return
        try:
            lazy = isinstance(batch.strategy, PostCopyLazy)
            if lazy:
                frame.fault_handler = lambda n: self._pull(batch, entry, n, drain=False)
            core.boundary(ev, "resume-ack")
            batch.link.send(ControlType.RESUME_ACK, batch.token,
                            {"pid": entry.src_pid, "dest_pid": frame.pid})
            if lazy and batch.offer.get("drain", "auto") == "auto":
                entry.drain_requested.set()
            if lazy:
                self._drain_when_asked(batch, entry, commit_timeout)
            if not entry.commit.wait(commit_timeout) or not entry.committed:
                raise EventAborted("commit never arrived")
            frame.fault_handler = None
            chan.close()
            core.finish(ev, EventState.DONE)
            self.node.regions.forget_batch(ev.batch_key)
        except BaseException as e:  # noqa: BLE001
            frame.fault_handler = None
            core.fail(ev, e)

    def _drain_when_asked(self, batch: _DestBatch, entry: _DestEntry, timeout: float) -> None:
        limit = time.monotonic() + timeout
        while not entry.drain_requested.wait(0.01):
            if entry.aborted or entry.commit.is_set():
                return
            if time.monotonic() > limit:
                raise Timeout("drain never requested")
        for n in entry.frame.non_resident_pages():
            self._pull(batch, entry, n, drain=True)

    def drain(self, dest_pid: int) -> None:
        """Ask a lazily migrated process to pull its remaining pages now."""
        self._entry_for(dest_pid)[1].drain_requested.set()

    def _entry_for(self, dest_pid: int) -> tuple[_DestBatch, _DestEntry]:
        for batch in list(self.batches.values()):
            for entry in batch.entries.values():
                if entry.frame.pid == dest_pid:
                    return batch, entry
        raise NotFound(f"no migrated process with pid {dest_pid}")

    def entry_stats(self, dest_pid: int) -> dict:
        _, entry = self._entry_for(dest_pid)
        return {"fault_pulls": entry.fault_pulls, "drain_pulls": entry.drain_pulls,
                "state": entry.event.state.value, "src_pid": entry.src_pid}

    def _pull(self, batch: _DestBatch, entry: _DestEntry, n: int, drain: bool) -> None:
        frame = entry.frame
        self.node.core.boundary(entry.event, "page-pull")
        with entry.pull_lock:
            page = frame.address_space.pages.get(n)
            if page is None:
                raise ProtocolError(f"page {n} is not mapped")
            if page.resident:
                return
            chan = entry.channel
            try:
                if chan is None:
                    raise ChannelClosed("no data channel")
                reply = chan.command(CommandMessage(Opcode.PAGE_PULL_REQUEST, "mem", batch.token,
                                                    _PULL_REQUEST.pack(n)))
            except (ChannelClosed, Timeout, LinkDown) as e:
                err = SourceGone(f"page {n}: source unreachable ({e})")
                self._abort_entry(entry, err)
                raise err from None
            except MigrationError as e:
                self._abort_entry(entry, e)
                raise
            if drain:
                entry.drain_pulls += 1
            else:
                entry.fault_pulls += 1
            data = reply.payload if reply is not None else b""
            (count,) = _PULL_COUNT.unpack_from(data)
            pos = _PULL_COUNT.size
            size = frame.address_space.page_size
            for _ in range(count):
                (m,) = _PULL_PAGE.unpack_from(data, pos)
                pos += _PULL_PAGE.size
                content = data[pos:pos + size]
                pos += size
                current = frame.address_space.pages.get(m)
                if current is not None and not current.resident:
                    current.content = content
                    current.dirty = False
                    current.resident = True

    def _abort_entry(self, entry: _DestEntry, error: BaseException) -> None:
        entry.aborted = True
        entry.event.abort_requested = True
        if entry.event.error is None:
            entry.event.error = error
        entry.commit.set()

    def _dest_command(self, batch: _DestBatch, entry: _DestEntry):
        def handle(msg: CommandMessage) -> CommandMessage | None:
            if msg.opcode is Opcode.ABORT:
                self._abort_entry(entry, EventAborted("source aborted the event"))
                if entry.channel is not None:
                    entry.channel.abort()
                return None
            raise ProtocolError(f"destination does not handle {msg.opcode.name}")
        return handle

    def _on_command(self, link: ControlLink, msg: CommandMessage) -> CommandMessage | None:
        if msg.opcode is Opcode.ABORT:
            self.abort_batch(msg.token, EventAborted("coordinator aborted the batch"))
            return None
        raise ProtocolError(f"daemon does not handle {msg.opcode.name} on the control link")

    def abort_batch(self, token: bytes, error: BaseException) -> None:
        batch = self.batches.get(token)
        if batch is None:
            return
        batch.aborted = True
        for slot in batch.slots.values():
            if slot["listener"] is not None:
                slot["listener"].close()
        for entry in batch.entries.values():
            if entry.committed:
                continue
            self._abort_entry(entry, error)
            if entry.channel is not None:
                entry.channel.abort()
            if entry.listener is not None:
                entry.listener.close()
        for entry in batch.entries.values():
            if not entry.committed and entry.thread is not None:
                entry.thread.join(5.0)
        self.node.regions.forget_batch(("req", batch.request_id))

    def _on_link_closed(self, link: ControlLink) -> None:
        for token, batch in list(self.batches.items()):
            if batch.link is link and not all(e.committed for e in batch.entries.values()):
                threading.Thread(target=self.abort_batch,
                                 args=(token, LinkDown("coordinator link lost")), daemon=True).start()

    def wait_idle(self, timeout: float = 10.0) -> None:
        """Block until every destination worker has finished."""
        limit = time.monotonic() + timeout
        for batch in list(self.batches.values()):
            for entry in batch.entries.values():
                if entry.thread is not None:
                    entry.thread.join(max(0.0, limit - time.monotonic()))

    # -- residual dependencies ----------------------------------------------------------------

    def residual_file_op(self, dest_pid: int, fd: int, op: str, amount: int = 0) -> int:
        """Forward a metadata operation on a ForwardToSource file to the source node."""
        batch, entry = self._entry_for(dest_pid)
        f = entry.frame.file(fd)
        if f.policy is not ResourcePolicy.FORWARD_TO_SOURCE:
            raise ProtocolError(f"fd {fd} is not forwarded to the source")
        request = {"pid": entry.src_pid, "fd": fd, "op": op, "amount": amount}
        try:
            reply = batch.link.command(CommandMessage(Opcode.RESIDUAL_FILE_OP, "file", batch.token,
                                                      json.dumps(request).encode()))
        except (LinkDown, Timeout) as e:
            raise SourceGone(f"source unreachable: {e}") from None
        offset = int(json.loads(reply.payload)["offset"])
        f.offset = offset
        return offset

    # -- status ---------------------------------------------------------------------------------

    def status(self) -> dict:
        out = []
        for token, batch in list(self.batches.items()):
            out.append({
                "token": token.hex(), "request_id": batch.request_id,
                "strategy": strategy_label(batch.strategy),
                "processes": [{"src_pid": e.src_pid, "dest_pid": e.frame.pid,
                               "state": e.event.state.value, "committed": e.committed,
                               "fault_pulls": e.fault_pulls, "drain_pulls": e.drain_pulls}
                              for e in batch.entries.values()]})
        return {"node": self.node.name, "modules": [c[0] for c in self.capabilities()],
                "batches": out}


class DaemonServer:
    """Accepts coordinator connections on the control port."""

    def __init__(self, daemon: Daemon, host: str = "127.0.0.1", port: int = DEFAULT_CONTROL_PORT):
        self.daemon = daemon
        try:
            self._sock = socket.create_server((host, port))
        except OSError as e:
            raise PortBusy(f"cannot listen on {host}:{port}: {e}") from None
        self.host = host
        self.port = self._sock.getsockname()[1]
        self._stop = False
        self._thread = threading.Thread(target=self._accept_loop, daemon=True, name="daemon-accept")
        self._thread.start()

    @property
    def endpoint(self) -> tuple[str, int]:
        return (self.host, self.port)

    def _accept_loop(self) -> None:
        while not self._stop:
            try:
                sock, _ = self._sock.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self.daemon.attach(sock)

    def close(self) -> None:
        self._stop = True
        try:
            self._sock.close()
        except OSError:
            pass
        self.daemon.close()
