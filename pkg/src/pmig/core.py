"""Core control: nodes, per-process event contexts, workers and the watchdog.

A :class:`Node` owns guests, shared regions, a subsystem registry, the medium
manager and one :class:`CoreControl`. Every checkpoint/restart of one
process runs as an :class:`EventContext` with its own constructor/destructor
hooks and its own watchdog timer.
"""

from __future__ import annotations

import collections
import enum
import itertools
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable

from .errors import (AlreadyTerminal, Busy, ChecksumMismatch, EventFailed,
                     EventFrozen, GuestStateError, HookVeto, InvalidCombination, MediumError,
                     MigrationError, NotFound, ProtocolError, QuiesceTimeout, Timeout,
                     UnknownPid, UnknownSubsystem)
from .guest import (DEFAULT_PAGE_SIZE, AddressSpace, GuestProcess, GuestSpec, RunState,
                    SharedRegion, release_guest, spawn_guest)
from .medium import Channel, ChunkKind, ChunkSource, CommandMessage, MediumManager, Opcode, Role
from .strategy import (EventKind, ExecCtx, QuiesceMethod, StopAndCopy,
                       Strategy)
from .subsystems import (DEFAULT_BATCH_LIMIT, FaultOutcome, SharedResourceLedger, StepReport,
                         SubsystemRegistry, default_registry, emit)

log = logging.getLogger(__name__)

DEFAULT_WATCHDOG_PERIOD = 2.0
DEFAULT_QUIESCE_DEADLINE = 1.0


class EventState(enum.Enum):
    CREATED = "created"
    PREPARED = "prepared"
    RUNNING = "running"
    DRAINING = "draining"
    DONE = "done"
    FAILED = "failed"
    FROZEN = "frozen"


TERMINAL = frozenset({EventState.DONE, EventState.FAILED, EventState.FROZEN})
ACTIVE = frozenset({EventState.RUNNING, EventState.DRAINING})
_EVENT_TRANSITIONS = {
    EventState.CREATED: {EventState.PREPARED},
    EventState.PREPARED: {EventState.RUNNING, EventState.FAILED, EventState.FROZEN},
    EventState.RUNNING: {EventState.DRAINING, EventState.FAILED, EventState.FROZEN},
    EventState.DRAINING: {EventState.DONE, EventState.FAILED, EventState.FROZEN},
}


def _noop(*_args) -> None:
    return None


@dataclass
class ProcessHooks:
    """Per-process constructor/destructor.

    ``restart`` may return False to veto resuming the process.
    """

    setup: Callable[[Any, GuestProcess], None] = _noop
    restart: Callable[[Any, GuestProcess], bool | None] = _noop
    cleanup: Callable[[Any, GuestProcess, EventState], None] = _noop


@dataclass
class Watchdog:
    period: float
    last_progress: float = 0.0
    armed: bool = False

    def arm(self) -> None:
        self.last_progress = time.monotonic()
        self.armed = True

    def feed(self) -> None:
        self.last_progress = time.monotonic()

    def disarm(self) -> None:
        self.armed = False

    def expired(self, now: float) -> bool:
        return self.armed and now - self.last_progress > self.period


class EventAborted(MigrationError):
    pass


@dataclass(eq=False)
class EventContext:
    event_id: int
    request_id: int
    kind: EventKind
    strategy: Strategy
    exec_ctx: ExecCtx
    quiesce: QuiesceMethod
    node: "Node" = field(repr=False)
    pid: int = 0
    is_source: bool = True
    token: bytes | None = None
    hooks: ProcessHooks = field(default_factory=ProcessHooks)
    watchdog: Watchdog = field(default_factory=lambda: Watchdog(DEFAULT_WATCHDOG_PERIOD))
    state: EventState = EventState.CREATED
    batch_limit: int = DEFAULT_BATCH_LIMIT
    ledger: SharedResourceLedger | None = None
    batch_key: Any = None
    # per-subsystem bookkeeping used by the subsystem layer
    progress: dict[str, StepReport] = field(default_factory=dict)
    sequences: dict[str, int] = field(default_factory=dict)
    scratch: dict[str, Any] = field(default_factory=dict)
    pass_no: int = 0
    mem_mode: str = "full"
    round_no: int | None = None
    sent_pages: list[int] = field(default_factory=list)
    lazy_pages: set[int] = field(default_factory=set)
    awaiting_regions: set[str] = field(default_factory=set)
    residual_fds: list[int] = field(default_factory=list)
    stats: collections.Counter = field(default_factory=collections.Counter)
    timestamps: dict[str, float] = field(default_factory=dict)
    diagnostics: dict[str, str] = field(default_factory=dict)
    faults: list[tuple[str, str]] = field(default_factory=list)
    process: GuestProcess | None = field(default=None, repr=False)
    channel: Channel | None = field(default=None, repr=False)
    source: ChunkSource | None = field(default=None, repr=False)
    subsystems: list = field(default_factory=list, repr=False)
    error: BaseException | None = None
    abort_requested: bool = False
    committed: bool = False
    failing: bool = False
    finished: bool = False
    cleanup_calls: int = 0
    on_step: Callable[[Any, str], None] | None = field(default=None, repr=False)
    done: threading.Event = field(default_factory=threading.Event, repr=False)
    lock: threading.RLock = field(default_factory=threading.RLock, repr=False)

    # -- hooks used by subsystems ------------------------------------------------

    def account(self, chunk) -> None:
        self.stats["chunks"] += 1
        self.stats["bytes"] += chunk.wire_size
        self.stats[f"kind:{chunk.kind.name}"] += 1

    def count(self, name: str, n: int = 1) -> None:
        self.stats[name] += n

    def note_fault(self, subsystem_id: str, ref: Any) -> None:
        self.faults.append((subsystem_id, str(ref)))

    def local_offset(self, path: str) -> int:
        return self.node.local_files.get(path, 0)

    def attach_region(self, region_id: str, length: int, inline: bool) -> SharedRegion:
        return self.node.regions.attach(self.batch_key, region_id, length)

    def fill_region(self, region_id: str, offset: int, data: bytes) -> None:
        self.node.regions.fill(self.batch_key, region_id, offset, data)

    def wait_region(self, region_id: str) -> None:
        self.node.regions.wait(self.batch_key, region_id, self.watchdog.period * 2 + 5.0)

    # -- state --------------------------------------------------------------------

    @property
    def terminal(self) -> bool:
        return self.state in TERMINAL

    def stamp(self, name: str) -> float:
        now = time.monotonic()
        self.timestamps[name] = now
        return now

    def summary(self) -> dict[str, Any]:
        return {
            "event_id": self.event_id,
            "request_id": self.request_id,
            "pid": self.pid,
            "kind": self.kind.value,
            "state": self.state.value,
            "token": self.token.hex() if self.token else None,
            "progress": {sid: {"done": self.scratch[sid].done,
                               "total": max(self.scratch[sid].total, self.scratch[sid].done)}
                         for sid in self.progress if sid in self.scratch},
            "bytes_pushed": self.channel.stats.bytes_pushed if self.channel else 0,
            "bytes_popped": self.channel.stats.bytes_popped if self.channel else 0,
            "timestamps": dict(self.timestamps),
            "error": f"{type(self.error).__name__}: {self.error}" if self.error else None,
        }


class _Fill:
    def __init__(self, length: int) -> None:
        self.length = length
        self.offsets: set[int] = set()
        self.filled = 0
        self.ready = threading.Event()
        if length == 0:
            self.ready.set()


class RegionTable:
    """Shared regions on one node, plus per-batch fill tracking on restart."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.regions: dict[str, SharedRegion] = {}
        self._fills: dict[tuple[Any, str], _Fill] = {}
        self._restored: set[str] = set()

    def create(self, region_id: str, length: int, content: bytes | None = None) -> SharedRegion:
        with self._lock:
            if region_id in self.regions:
                raise GuestStateError(f"region {region_id!r} exists")
            region = self.regions[region_id] = SharedRegion.create(region_id, length, content)
            return region

    def get(self, region_id: str) -> SharedRegion:
        return self.regions[region_id]

    def __contains__(self, region_id: str) -> bool:
        return region_id in self.regions

    def _fill_state(self, key, region_id: str, length: int) -> _Fill:
        fill = self._fills.get((key, region_id))
        if fill is None:
            fill = self._fills[(key, region_id)] = _Fill(length)
        return fill

    def attach(self, key, region_id: str, length: int) -> SharedRegion:
        with self._lock:
            region = self.regions.get(region_id)
            if region is None or (region.length != length and region.refcount == 0):
                region = self.regions[region_id] = SharedRegion(region_id, length, bytearray(length))
                self._restored.add(region_id)
            elif region.length != length:
                raise ProtocolError(f"region {region_id!r} length {length} != local {region.length}")
            self._fill_state(key, region_id, length)
            return region

    def fill(self, key, region_id: str, offset: int, data: bytes) -> None:
        with self._lock:
            region = self.regions[region_id]
            if offset + len(data) > region.length:
                raise ProtocolError(f"region {region_id!r} slice outside region")
            region.content[offset:offset + len(data)] = data
            fill = self._fill_state(key, region_id, region.length)
            if offset not in fill.offsets:
                fill.offsets.add(offset)
                fill.filled += len(data)
            if fill.filled >= fill.length:
                fill.ready.set()

    def wait(self, key, region_id: str, timeout: float) -> None:
        with self._lock:
            fill = self._fill_state(key, region_id, self.regions[region_id].length)
        if not fill.ready.wait(timeout):
            raise Timeout(f"shared region {region_id!r} content never arrived")

    def forget_batch(self, key) -> None:
        with self._lock:
            for k in [k for k in self._fills if k[0] == key]:
                del self._fills[k]

    def drop_unreferenced(self) -> None:
        """Remove restored regions nobody maps any more."""
        with self._lock:
            for rid in [r for r in self._restored if self.regions.get(r) and self.regions[r].refcount == 0]:
                del self.regions[rid]
                self._restored.discard(rid)


@dataclass
class RequestSpec:
    kind: EventKind
    pids: list[int] = field(default_factory=list)
    strategy: Strategy = field(default_factory=StopAndCopy)
    exec_ctx: ExecCtx = ExecCtx.EXTERNAL
    quiesce: QuiesceMethod = QuiesceMethod.ASYNCHRONOUS
    medium: str = "loopback"
    endpoint: Any = None
    hooks: ProcessHooks | None = None
    dedup: bool = True


@dataclass
class Request:
    request_id: int
    spec: RequestSpec
    events: list[EventContext] = field(default_factory=list)
    submitted: float = field(default_factory=time.monotonic)


def validate_combination(spec: RequestSpec, media: MediumManager) -> None:
    """Reject request shapes that cannot work; the message names the rule."""
    desc = media.get(spec.medium)
    if spec.kind is EventKind.MIGRATE and spec.exec_ctx is ExecCtx.INTERNAL \
            and spec.quiesce is QuiesceMethod.ASYNCHRONOUS:
        raise InvalidCombination("internal execution context with asynchronous quiescing: "
                                 "a frozen process cannot drive its own event")
    if spec.kind is EventKind.RESTART and spec.exec_ctx is ExecCtx.INTERNAL:
        raise InvalidCombination("restart requires an external execution context")
    if not isinstance(spec.strategy, StopAndCopy):
        if spec.kind is not EventKind.MIGRATE:
            raise InvalidCombination(f"{spec.strategy.name} applies to migration only")
        if not desc.live:
            raise InvalidCombination(f"{spec.strategy.name} needs a live backchannel; "
                                     f"{spec.medium} is an offline medium")
    if spec.kind is EventKind.MIGRATE and not desc.live:
        raise InvalidCombination(f"migration needs a live medium, not {spec.medium}")


class CoreControl:
    """Event bookkeeping and the checkpoint/restart workers of one node."""

    def __init__(self, node: Node, *, watchdog_period: float = DEFAULT_WATCHDOG_PERIOD,
                 batch_limit: int = DEFAULT_BATCH_LIMIT,
                 quiesce_deadline: float = DEFAULT_QUIESCE_DEADLINE):
        self.node = node
        self.watchdog_period = watchdog_period
        self.batch_limit = batch_limit
        self.quiesce_deadline = quiesce_deadline
        self._lock = threading.RLock()
        self._request_ids = itertools.count(1)
        self._event_ids = itertools.count(1)
        self.requests: dict[int, Request] = {}
        self.events: dict[int, EventContext] = {}
        self._busy: set[int] = set()
        self._scanner: threading.Thread | None = None
        self._stop = threading.Event()
        node.registry.busy = self.registry_busy

    @property
    def registry(self) -> SubsystemRegistry:
        return self.node.registry

    def registry_busy(self) -> bool:
        return any(e.state is EventState.RUNNING for e in list(self.events.values()))

    # -- requests -------------------------------------------------------------------

    def new_request(self, spec: RequestSpec) -> Request:
        with self._lock:
            req = Request(next(self._request_ids), spec)
            self.requests[req.request_id] = req
            return req

    def new_event(self, request: Request, *, pid: int = 0, is_source: bool = True,
                  process: GuestProcess | None = None) -> EventContext:
        spec = request.spec
        with self._lock:
            ev = EventContext(
                event_id=next(self._event_ids), request_id=request.request_id, kind=spec.kind,
                strategy=spec.strategy, exec_ctx=spec.exec_ctx, quiesce=spec.quiesce,
                node=self.node, pid=pid, is_source=is_source,
                hooks=spec.hooks or ProcessHooks(), watchdog=Watchdog(self.watchdog_period),
                batch_limit=self.batch_limit, process=process)
            ev.subsystems = self.registry.ordered()
            ev.batch_key = ("req", request.request_id)
            self.events[ev.event_id] = ev
            request.events.append(ev)
            self._transition(ev, EventState.PREPARED)
            return ev

    def submit_request(self, spec: RequestSpec) -> int:
        """Single entry point for checkpoint, restart and migrate requests.

        Checkpoint and restart events start immediately (inline for the
        internal execution context, on a worker thread otherwise). Migrate
        events are only prepared; the protocol layer drives them.
        """
        validate_combination(spec, self.node.media)
        with self._lock:
            if spec.kind is not EventKind.RESTART:
                if not spec.pids:
                    raise UnknownPid("no pids given")
                for pid in spec.pids:
                    proc = self.node.guests.get(pid)
                    if proc is None or proc.run_state is RunState.REMOVED:
                        raise UnknownPid(f"no process with pid {pid}")
                    if pid in self._busy:
                        raise Busy(f"pid {pid} already has an active event")
                self._busy.update(spec.pids)
            request = self.new_request(spec)
            if spec.kind is EventKind.RESTART:
                events = [self.new_event(request, is_source=False)]
            else:
                events = [self.new_event(request, pid=pid, process=self.node.guests[pid])
                          for pid in spec.pids]
            if spec.kind is EventKind.MIGRATE and spec.dedup:
                ledger = SharedResourceLedger()
                for ev in events:
                    ev.ledger = ledger
        request.submitted = time.monotonic()
        if spec.kind is EventKind.MIGRATE:
            return request.request_id
        for ev in events:
            job = self._checkpoint_job if spec.kind is EventKind.CHECKPOINT else self._restart_job
            if spec.exec_ctx is ExecCtx.INTERNAL:
                job(ev, spec)
            else:
                threading.Thread(target=job, args=(ev, spec), daemon=True,
                                 name=f"event-{ev.event_id}").start()
        return request.request_id

    def _endpoint_for(self, spec: RequestSpec, pid: int):
        ep = spec.endpoint
        if spec.medium == "image-file" and isinstance(ep, (str, os.PathLike)):
            ep = os.fspath(ep)
            if "{pid}" in ep:
                return ep.format(pid=pid)
            if os.path.isdir(ep):
                return os.path.join(ep, f"pid{pid}.img")
        return ep

    def _checkpoint_job(self, ev: EventContext, spec: RequestSpec) -> None:
        process = ev.process
        assert process is not None
        try:
            channel = self.node.media.open_channel(spec.medium, self._endpoint_for(spec, ev.pid),
                                                   Role.SENDER)
        except MigrationError as e:
            self.fail(ev, e)
            return
        ev.channel = channel
        try:
            self.quiesce(process, ev.quiesce)
        except MigrationError as e:
            channel.abort()
            self.fail(ev, e)
            return
        ev.stamp("quiesced")
        if self.checkpoint_worker(ev, process, channel, finish=False) is EventState.DRAINING:
            channel.close()
            self.resume_source(process)
            self.finish(ev, EventState.DONE)

    def _restart_job(self, ev: EventContext, spec: RequestSpec) -> None:
        try:
            channel = self.node.media.open_channel(spec.medium, spec.endpoint, Role.RECEIVER)
        except MigrationError as e:
            self.fail(ev, e)
            return
        ev.channel = channel
        frame = self.node.new_frame(self.node.page_size)
        ev.pid = frame.pid
        self.restart_worker(ev, frame, ChunkSource(channel))
        channel.close()

    def wait(self, request_id: int, timeout: float | None = None) -> list[EventContext]:
        req = self.request(request_id)
        limit = None if timeout is None else time.monotonic() + timeout
        for ev in req.events:
            remaining = None if limit is None else max(0.0, limit - time.monotonic())
            if not ev.done.wait(remaining):
                raise Timeout(f"request {request_id} still running")
        return req.events

    def request(self, request_id: int) -> Request:
        try:
            return self.requests[request_id]
        except KeyError:
            raise NotFound(f"no request {request_id}") from None

    def event(self, event_id: int) -> EventContext:
        try:
            return self.events[event_id]
        except KeyError:
            raise NotFound(f"no event {event_id}") from None

    def query_status(self, event_id: int, subsystem_id: str):
        return self.registry.query_status(subsystem_id, self.event(event_id))

    def status(self, request_id: int) -> dict[str, Any]:
        req = self.request(request_id)
        return {"request_id": request_id, "kind": req.spec.kind.value,
                "events": [ev.summary() for ev in req.events]}

    # -- state machine --------------------------------------------------------------------

    def _transition(self, ev: EventContext, new: EventState) -> None:
        with ev.lock:
            if new not in _EVENT_TRANSITIONS.get(ev.state, ()):
                raise GuestStateError(f"event {ev.event_id}: {ev.state.value} -> {new.value}")
            ev.state = new
            ev.stamp(new.value)

    def start(self, ev: EventContext) -> None:
        with ev.lock:
            if ev.abort_requested or ev.terminal:
                raise EventAborted(f"event {ev.event_id} aborted before start")
            self._transition(ev, EventState.RUNNING)
            ev.watchdog.arm()

    def drain(self, ev: EventContext) -> None:
        with ev.lock:
            self.boundary(ev, "drain")
            self._transition(ev, EventState.DRAINING)

    def boundary(self, ev: EventContext, name: str) -> None:
        """A step boundary: injection point and abort/freeze check."""
        if ev.on_step is not None:
            ev.on_step(ev, name)
        if ev.state is EventState.FROZEN:
            raise EventFrozen(f"event {ev.event_id} frozen")
        if ev.abort_requested:
            raise EventAborted(f"event {ev.event_id} aborted")

    def finish(self, ev: EventContext, outcome: EventState, error: BaseException | None = None) -> None:
        """Move to a terminal state and run cleanup exactly once."""
        with ev.lock:
            if ev.finished:
                return
            ev.finished = True
            if error is not None and ev.error is None:
                ev.error = error
            if ev.state is not EventState.FROZEN and ev.state is not outcome:
                if outcome is EventState.DONE and ev.state is EventState.RUNNING:
                    self._transition(ev, EventState.DRAINING)
                self._transition(ev, outcome)
            ev.watchdog.disarm()
        try:
            ev.cleanup_calls += 1
            ev.hooks.cleanup(ev, ev.process, ev.state)
        except Exception:  # noqa: BLE001 -- a broken destructor must not wedge the node
            log.exception("cleanup hook failed for event %s", ev.event_id)
        finally:
            if ev.state is not EventState.DONE and ev.ledger is not None:
                ev.ledger.release(ev.event_id)
            with self._lock:
                self._busy.discard(ev.pid)
            ev.done.set()

    def fail(self, ev: EventContext, error: BaseException) -> EventState:
        """Failure path shared by all workers; returns the terminal state."""
        with ev.lock:
            if ev.finished or ev.failing:
                return ev.state
            ev.failing = True
            if ev.error is None:
                ev.error = error
            frozen = ev.state is EventState.FROZEN
            if not frozen and ev.state in _EVENT_TRANSITIONS and \
                    EventState.FAILED in _EVENT_TRANSITIONS[ev.state]:
                self._transition(ev, EventState.FAILED)
        for desc in ev.subsystems:
            if desc.subsystem_id in self.registry:
                text = self.registry.dump_diagnostics(desc.subsystem_id, ev, error)
                if text:
                    ev.diagnostics[desc.subsystem_id] = text
        self._notify_peer_abort(ev)
        if ev.is_source:
            if ev.process is not None and ev.process.run_state in (RunState.QUIESCED,
                                                                   RunState.MIGRATING):
                self.resume_source(ev.process)
        else:
            self.node.destroy_frame(ev.process)
        self.finish(ev, EventState.FROZEN if frozen else EventState.FAILED, error)
        return ev.state

    def _notify_peer_abort(self, ev: EventContext) -> None:
        chan = ev.channel
        if chan is None or not chan.supports_commands or chan.aborted or chan.peer_aborted:
            return
        try:
            chan.command(CommandMessage(Opcode.ABORT, token=ev.token or bytes(16)))
        except (MediumError, OSError):
            pass

    # -- quiescing -----------------------------------------------------------------------

    def quiesce(self, process: GuestProcess, method: QuiesceMethod,
                deadline: float | None = None) -> None:
        """Render the process inactive.

        Synchronous: every thread must enter the barrier; a thread that never
        yields makes this fail with QuiesceTimeout after ``deadline`` seconds.
        Asynchronous: the process is frozen from outside at its next safe point.
        """
        if process.run_state not in (RunState.RUNNING, RunState.RESUMED):
            raise GuestStateError(f"pid {process.pid} is {process.run_state.value}")
        deadline = self.quiesce_deadline if deadline is None else deadline
        if method is QuiesceMethod.SYNCHRONOUS:
            limit = time.monotonic() + deadline
            entered = []
            for t in process.threads:
                if t.stuck:
                    threading.Event().wait(max(0.0, limit - time.monotonic()))
                    for done in entered:
                        done.in_barrier = False
                    raise QuiesceTimeout(f"pid {process.pid} thread {t.tid} never reached the barrier")
                t.in_barrier = True
                process.barrier_entries += 1
                entered.append(t)
        process.transition(RunState.QUIESCED)

    @staticmethod
    def resume_source(process: GuestProcess) -> None:
        """Abort path: a quiesced source goes back to Running."""
        for t in process.threads:
            t.in_barrier = False
        if process.run_state in (RunState.QUIESCED, RunState.MIGRATING):
            process.transition(RunState.RUNNING)

    @staticmethod
    def resume_frame(frame: GuestProcess) -> None:
        for t in frame.threads:
            t.in_barrier = False
        frame.transition(RunState.RESUMED)

    # -- workers ------------------------------------------------------------------------------

    def checkpoint_subsystem(self, ev: EventContext, subsystem_id: str, process: GuestProcess,
                             sink) -> None:
        while True:
            self.boundary(ev, f"checkpoint:{subsystem_id}")
            report = self.registry.checkpoint_step(subsystem_id, ev, process, sink)
            ev.progress[subsystem_id] = report
            if report.progressed:
                ev.watchdog.feed()
            if report.done:
                return

    def checkpoint_sections(self, ev: EventContext, process: GuestProcess, sink,
                            subsystem_ids: list[str] | None = None, end_of_process: bool = True) -> None:
        ids = subsystem_ids if subsystem_ids is not None else [d.subsystem_id for d in ev.subsystems]
        for sid in ids:
            self.checkpoint_subsystem(ev, sid, process, sink)
            emit(ev, sink, sid, ChunkKind.END_OF_SUBSYSTEM)
            ev.watchdog.feed()
        if end_of_process:
            self.boundary(ev, "end-of-process")
            emit(ev, sink, "", ChunkKind.END_OF_PROCESS)

    def checkpoint_worker(self, ev: EventContext, process: GuestProcess, sink, *,
                          finish: bool = True, started: bool = False) -> EventState:
        """Export every registered subsystem of ``process`` to ``sink``.

        Leaves the event Draining when ``finish`` is false so the caller can
        wait for the peer before completing it.
        """
        try:
            if not started:
                self.start(ev)
                ev.process = process
                ev.hooks.setup(ev, process)
            self.checkpoint_sections(ev, process, sink)
            self.boundary(ev, "flush")
            sink.flush()
            ev.stamp("flushed")
            self.drain(ev)
            if finish:
                self.finish(ev, EventState.DONE)
            return ev.state
        except BaseException as e:  # noqa: BLE001 -- every failure funnels into one path
            return self.fail(ev, e)

    def restore_stream(self, ev: EventContext, frame: GuestProcess, source: ChunkSource,
                       on_round: Callable[[EventContext, int], None] | None = None) -> None:
        """Consume subsystem sections until EndOfProcess."""
        current = ev.subsystems[0].subsystem_id if ev.subsystems else None
        while True:
            self.boundary(ev, "restart:peek")
            try:
                chunk = source.peek()
            except ChecksumMismatch as e:
                if current is None or current not in self.registry:
                    raise
                if self.registry.get(current).ops.fault(ev, e) is not FaultOutcome.RECOVERED:
                    raise
                continue
            if chunk.kind is ChunkKind.END_OF_PROCESS:
                source.pop()
                return
            sid = chunk.subsystem_id
            if sid not in self.registry:
                raise UnknownSubsystem(sid)
            current = sid
            while True:
                self.boundary(ev, f"restart:{sid}")
                report = self.registry.restart_step(sid, ev, frame, source)
                ev.progress[sid] = report
                if report.progressed:
                    ev.watchdog.feed()
                if report.done:
                    break
            if ev.round_no is not None:
                if on_round is not None:
                    on_round(ev, ev.round_no)
                ev.round_no = None
                ev.pass_no += 1

    def restart_worker(self, ev: EventContext, frame: GuestProcess, source: ChunkSource, *,
                       finish: bool = True,
                       on_round: Callable[[EventContext, int], None] | None = None) -> EventState:
        """Rebuild ``frame`` from ``source``, run the restart hook, then resume it."""
        try:
            if ev.exec_ctx is not ExecCtx.EXTERNAL:
                raise InvalidCombination("restart requires an external execution context")
            self.start(ev)
            ev.process = frame
            ev.source = source
            ev.pid = frame.pid
            ev.hooks.setup(ev, frame)
            self.restore_stream(ev, frame, source, on_round)
            self.boundary(ev, "restart-hook")
            if ev.hooks.restart(ev, frame) is False:
                raise HookVeto(f"restart hook vetoed pid {frame.pid}")
            self.boundary(ev, "resume")
            self.resume_frame(frame)
            ev.stamp("resumed")
            self.drain(ev)
            if finish:
                self.finish(ev, EventState.DONE)
            return ev.state
        except BaseException as e:  # noqa: BLE001
            return self.fail(ev, e)

    # -- watchdog and abort ---------------------------------------------------------------

    def watchdog_scan(self) -> list[EventContext]:
        now = time.monotonic()
        frozen = []
        for ev in list(self.events.values()):
            with ev.lock:
                if ev.state in ACTIVE and ev.watchdog.expired(now):
                    ev.state = EventState.FROZEN
                    ev.stamp("frozen")
                    ev.watchdog.disarm()
                    frozen.append(ev)
        for ev in frozen:
            log.warning("event %s frozen: no progress for %.2fs", ev.event_id, ev.watchdog.period)
            if ev.channel is not None:
                ev.channel.abort()
        return frozen

    def start_scanner(self, interval: float | None = None) -> None:
        if self._scanner is not None:
            return
        interval = interval or max(0.01, self.watchdog_period / 4)

        def loop() -> None:
            while not self._stop.wait(interval):
                self.watchdog_scan()

        self._scanner = threading.Thread(target=loop, daemon=True, name="watchdog")
        self._scanner.start()

    def stop_scanner(self) -> None:
        self._stop.set()

    def abort_event(self, request_id: int) -> None:
        """Abort every live event of a request; sources return to Running."""
        req = self.request(request_id)
        live = [ev for ev in req.events if not ev.terminal and not ev.committed]
        if not live:
            raise AlreadyTerminal(f"request {request_id} already finished")
        for ev in live:
            with ev.lock:
                ev.abort_requested = True
                idle = ev.state is EventState.PREPARED
            if ev.channel is not None:
                self._notify_peer_abort(ev)
                ev.channel.abort()
            if idle:
                self.fail(ev, EventAborted(f"request {request_id} aborted"))


class Node:
    """One machine of the harness."""

    def __init__(self, name: str = "node", *, modules: list[str] | None = None,
                 page_size: int = DEFAULT_PAGE_SIZE, watchdog_period: float = DEFAULT_WATCHDOG_PERIOD,
                 batch_limit: int = DEFAULT_BATCH_LIMIT,
                 quiesce_deadline: float = DEFAULT_QUIESCE_DEADLINE,
                 media: MediumManager | None = None, scanner: bool = True):
        self.name = name
        self.page_size = page_size
        self.registry = default_registry(modules)
        self.media = media or MediumManager()
        self.regions = RegionTable()
        self.local_files: dict[str, int] = {}
        self.guests: dict[int, GuestProcess] = {}
        self._pids = itertools.count(1)
        self._lock = threading.Lock()
        self.core = CoreControl(self, watchdog_period=watchdog_period, batch_limit=batch_limit,
                                quiesce_deadline=quiesce_deadline)
        if scanner:
            self.core.start_scanner()

    def close(self) -> None:
        self.core.stop_scanner()

    def __enter__(self) -> Node:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def allocate_pid(self) -> int:
        with self._lock:
            return next(self._pids)

    def create_region(self, region_id: str, length: int, content: bytes | None = None) -> SharedRegion:
        return self.regions.create(region_id, length, content)

    def spawn(self, spec: GuestSpec) -> GuestProcess:
        proc = spawn_guest(spec, self.allocate_pid(), self.regions.regions)
        self.guests[proc.pid] = proc
        return proc

    def new_frame(self, page_size: int) -> GuestProcess:
        frame = GuestProcess(self.allocate_pid(), [], AddressSpace(page_size=page_size),
                             run_state=RunState.MIGRATING)
        self.guests[frame.pid] = frame
        return frame

    def destroy_frame(self, frame: GuestProcess | None) -> None:
        if frame is None or self.guests.get(frame.pid) is not frame:
            return
        del self.guests[frame.pid]
        release_guest(frame)
        self.regions.drop_unreferenced()

    def remove(self, pid: int) -> None:
        """Final migration step on the source: forget the process."""
        proc = self.guests[pid]
        proc.transition(RunState.REMOVED)
        release_guest(proc)

    def live_pids(self) -> list[int]:
        return sorted(p for p, g in self.guests.items() if g.run_state is not RunState.REMOVED)


def run_request(node: Node, spec: RequestSpec, timeout: float = 60.0) -> list[EventContext]:
    """Submit, wait, and raise if any event did not finish Done."""
    rid = node.core.submit_request(spec)
    events = node.core.wait(rid, timeout)
    for ev in events:
        if ev.state is EventState.FROZEN:
            raise EventFrozen(str(ev.error or f"event {ev.event_id} frozen")) from ev.error
        if ev.state is not EventState.DONE:
            err = ev.error
            if isinstance(err, MigrationError):
                raise err
            raise EventFailed(str(err)) from err
    return events
