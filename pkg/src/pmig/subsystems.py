"""Pluggable per-subsystem state handlers.

Every subsystem (built-in or third party) registers five callbacks:
``checkpoint``, ``restart``, ``fault``, ``status`` and ``dump``. Checkpoint and
restart are iterative: each call handles at most ``event.batch_limit``
entities and reports whether the subsystem is done.

Entity payload layouts (big-endian):

cpu, one entity per thread::

    tid u32 | flags u8 (bit 0: in barrier) | 32 x u64 registers

mem, entity payload starts with a tag byte::

    0 PAGE    tag | page u32 | page content
    1 MAP     tag | page u32                     zero-filled resident page
    2 LAZY    tag | first page u32 | count u32   run of non-resident pages, pulled on fault
    3 REGION  tag | region id 16 | offset u32 | region bytes
    4 ROUND   tag | round u32 | pages u32         pre-copy round header

mem SharedRef chunk (kind 2)::

    region id 16 | base page u32 | page count u32 | region length u32 | inline u8

file, one entity per open file::

    fd u32 | offset u64 | mode u8 | policy u8 | path length u16 | path
"""

from __future__ import annotations

import collections
import enum
import struct
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Protocol

from .errors import (ChecksumMismatch, DuplicateId, MediumError, NotFound, ProtocolError,
                     RegistryBusy, SubsystemFailure, UnknownSubsystem)
from .guest import (REGISTER_COUNT, FileMode, GuestProcess, OpenFile, Page, ResourcePolicy,
                    SharedRef, ThreadContext, zero_page)
from .medium import Chunk, ChunkKind, pad16, unpad16

DEFAULT_BATCH_LIMIT = 64


@dataclass
class StepReport:
    entities_processed: int
    done: bool
    progressed: bool


@dataclass
class ProgressSummary:
    entities_done: int
    entities_total_estimate: int


class FaultOutcome(enum.Enum):
    RECOVERED = "recovered"
    FAILED = "failed"


class Sink(Protocol):
    def pushdata(self, chunk: Chunk) -> None: ...


@dataclass
class SubsystemOps:
    checkpoint: Callable[[Any, GuestProcess, Sink], StepReport]
    restart: Callable[[Any, GuestProcess, Any], StepReport]
    fault: Callable[[Any, Any], FaultOutcome]
    status: Callable[[Any], ProgressSummary]
    dump: Callable[[Any, BaseException | None], str]


@dataclass(frozen=True)
class SubsystemDescriptor:
    subsystem_id: str
    version: int
    order_key: int
    ops: SubsystemOps = field(compare=False)

    def __post_init__(self) -> None:
        pad16(self.subsystem_id)

    @property
    def capability(self) -> tuple[str, int, int]:
        return (self.subsystem_id, self.version, self.order_key)


class EntityError(Exception):
    """A single entity could not be serialized or restored."""

    def __init__(self, entity_ref: Any, message: str):
        super().__init__(message)
        self.entity_ref = entity_ref


class SharedResourceLedger:
    """Decides, per migration batch, which event serializes each shared region."""

    IN_FLIGHT = "in-flight"
    DONE = "done"

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._owners: dict[str, list] = {}

    def claim(self, region_id: str, event_id: int) -> bool:
        """True when ``event_id`` now owns the region and must serialize its content."""
        with self._lock:
            entry = self._owners.get(region_id)
            if entry is None:
                self._owners[region_id] = [event_id, self.IN_FLIGHT]
                return True
            return False

    def complete(self, region_id: str, event_id: int) -> None:
        with self._lock:
            entry = self._owners.get(region_id)
            if entry and entry[0] == event_id:
                entry[1] = self.DONE

    def release(self, event_id: int) -> None:
        with self._lock:
            for rid in [r for r, (owner, _) in self._owners.items() if owner == event_id]:
                del self._owners[rid]

    def owner(self, region_id: str) -> tuple[int, str] | None:
        with self._lock:
            entry = self._owners.get(region_id)
            return tuple(entry) if entry else None

    def snapshot(self) -> dict[str, tuple[int, str]]:
        with self._lock:
            return {k: tuple(v) for k, v in self._owners.items()}


class SubsystemRegistry:
    """The node's set of registered subsystems.

    Register and unregister are refused while any event is running on the
    node; ``busy`` is wired up by the core control layer.
    """

    def __init__(self) -> None:
        self._lock = threading.RLock()
        self._subs: dict[str, SubsystemDescriptor] = {}
        self.version = 0
        self.busy: Callable[[], bool] = lambda: False

    def register(self, descriptor: SubsystemDescriptor) -> str:
        with self._lock:
            if descriptor.subsystem_id in self._subs:
                raise DuplicateId(f"subsystem {descriptor.subsystem_id!r} already registered")
            if self.busy():
                raise RegistryBusy("cannot insert a subsystem while events are running")
            self._subs[descriptor.subsystem_id] = descriptor
            self.version += 1
            return descriptor.subsystem_id

    def unregister(self, subsystem_id: str) -> None:
        with self._lock:
            if subsystem_id not in self._subs:
                raise NotFound(f"subsystem {subsystem_id!r} not registered")
            if self.busy():
                raise RegistryBusy("cannot remove a subsystem while events are running")
            del self._subs[subsystem_id]
            self.version += 1

    def get(self, subsystem_id: str) -> SubsystemDescriptor:
        try:
            return self._subs[subsystem_id]
        except KeyError:
            raise NotFound(f"subsystem {subsystem_id!r} not registered") from None

    def __contains__(self, subsystem_id: str) -> bool:
        return subsystem_id in self._subs

    def __len__(self) -> int:
        return len(self._subs)

    def ordered(self) -> list[SubsystemDescriptor]:
        with self._lock:
            return sorted(self._subs.values(), key=lambda d: (d.order_key, d.subsystem_id))

    def capabilities(self) -> list[tuple[str, int, int]]:
        return [d.capability for d in self.ordered()]

    # -- callback dispatch ----------------------------------------------------

    def checkpoint_step(self, subsystem_id: str, event, process: GuestProcess, sink: Sink) -> StepReport:
        ops = self.get(subsystem_id).ops
        try:
            return ops.checkpoint(event, process, sink)
        except EntityError as e:
            if ops.fault(event, e.entity_ref) is FaultOutcome.RECOVERED:
                try:
                    return ops.checkpoint(event, process, sink)
                except EntityError as again:
                    raise SubsystemFailure(f"{subsystem_id}: {again}") from again
            raise SubsystemFailure(f"{subsystem_id}: {e}") from e

    def restart_step(self, subsystem_id: str, event, process: GuestProcess, source) -> StepReport:
        if subsystem_id not in self._subs:
            raise UnknownSubsystem(subsystem_id)
        ops = self._subs[subsystem_id].ops
        while True:
            try:
                return ops.restart(event, process, source)
            except ChecksumMismatch as e:
                # fault() refuses a second attempt on the same position
                if ops.fault(event, e) is not FaultOutcome.RECOVERED:
                    raise
            except EntityError as e:
                if ops.fault(event, e.entity_ref) is not FaultOutcome.RECOVERED:
                    raise SubsystemFailure(f"{subsystem_id}: {e}") from e

    def query_status(self, subsystem_id: str, event) -> ProgressSummary:
        return self.get(subsystem_id).ops.status(event)

    def dump_diagnostics(self, subsystem_id: str, event, error: BaseException | None) -> str:
        try:
            return self.get(subsystem_id).ops.dump(event, error)
        except Exception as e:  # noqa: BLE001 -- diagnostics are best effort
            return f"[{subsystem_id}] dump failed: {e}"


def emit(event, sink: Sink, subsystem_id: str, kind: ChunkKind, payload: bytes = b"") -> Chunk:
    """Push one chunk, stamping the next sequence number for (event, subsystem)."""
    seq = event.sequences.get(subsystem_id, 0)
    chunk = Chunk(subsystem_id, kind, seq, payload)
    sink.pushdata(chunk)
    event.sequences[subsystem_id] = seq + 1
    event.account(chunk)
    return chunk


@dataclass
class _Progress:
    plan: collections.deque | None = None
    pass_no: int = -1
    finished_pass: int = -1
    done: int = 0
    total: int = 0
    expect_seq: int = 0
    last_entity: Any = None
    faults: set = field(default_factory=set)


class Subsystem:
    """Base class for iterative, plan-driven subsystems."""

    subsystem_id = ""
    version = 1
    order_key = 100

    def descriptor(self) -> SubsystemDescriptor:
        ops = SubsystemOps(self.checkpoint, self.restart, self.fault, self.status, self.dump)
        return SubsystemDescriptor(self.subsystem_id, self.version, self.order_key, ops)

    def progress(self, event) -> _Progress:
        st = event.scratch.get(self.subsystem_id)
        if st is None:
            st = event.scratch[self.subsystem_id] = _Progress()
        return st

    # hooks for subclasses
    def plan(self, event, process: GuestProcess) -> list:
        raise NotImplementedError

    def emit_item(self, event, process: GuestProcess, sink: Sink, item) -> int:
        """Emit chunks for one plan item; may return extra items to run next."""
        raise NotImplementedError

    def restore(self, event, process: GuestProcess, chunk: Chunk) -> None:
        raise NotImplementedError

    def finish_restore(self, event, process: GuestProcess) -> None:
        pass

    def _ensure_plan(self, event, process: GuestProcess) -> _Progress:
        st = self.progress(event)
        if st.plan is None or st.pass_no != event.pass_no:
            items = self.plan(event, process)
            st.plan = collections.deque(items)
            st.pass_no = event.pass_no
            st.total += len(items)
        return st

    def checkpoint(self, event, process: GuestProcess, sink: Sink) -> StepReport:
        st = self._ensure_plan(event, process)
        n = 0
        while st.plan and n < event.batch_limit:
            item = st.plan[0]
            extra = self.emit_item(event, process, sink, item)
            st.plan.popleft()
            if extra:
                st.plan.extendleft(reversed(extra))
                st.total += len(extra)
            n += 1
            st.done += 1
            st.last_entity = item
        return StepReport(n, done=not st.plan, progressed=n > 0)

    def restart(self, event, process: GuestProcess, source) -> StepReport:
        st = self.progress(event)
        if st.finished_pass == event.pass_no:
            return StepReport(0, True, False)
        n = 0
        while n < event.batch_limit:
            chunk = source.peek()
            if chunk.subsystem_id != self.subsystem_id:
                raise ProtocolError(f"{self.subsystem_id}: unexpected chunk for "
                                    f"{chunk.subsystem_id!r} before end marker")
            if chunk.sequence != st.expect_seq:
                raise ProtocolError(f"{self.subsystem_id}: sequence {chunk.sequence}, "
                                    f"expected {st.expect_seq}")
            source.pop()
            st.expect_seq += 1
            if chunk.kind is ChunkKind.END_OF_SUBSYSTEM:
                self.finish_restore(event, process)
                st.finished_pass = event.pass_no
                return StepReport(n, True, True)
            if chunk.kind is ChunkKind.END_OF_PROCESS:
                raise ProtocolError("EndOfProcess inside a subsystem section")
            self.restore(event, process, chunk)
            st.last_entity = chunk.sequence
            n += 1
            st.done += 1
        return StepReport(n, False, n > 0)

    def fault(self, event, entity_ref) -> FaultOutcome:
        """One recovery attempt per entity: a corrupted chunk is re-requested."""
        st = self.progress(event)
        key = ("crc", entity_ref.position) if isinstance(entity_ref, ChecksumMismatch) else entity_ref
        if key in st.faults:
            return FaultOutcome.FAILED
        st.faults.add(key)
        if isinstance(entity_ref, ChecksumMismatch) and entity_ref.position is not None:
            source = getattr(event, "source", None)
            if source is None:
                return FaultOutcome.FAILED
            try:
                source.recover(entity_ref.position)
            except (MediumError, OSError):
                return FaultOutcome.FAILED
            event.note_fault(self.subsystem_id, entity_ref)
            return FaultOutcome.RECOVERED
        return FaultOutcome.FAILED

    def status(self, event) -> ProgressSummary:
        st = self.progress(event)
        if st.plan is None and getattr(event, "process", None) is not None and event.is_source:
            return ProgressSummary(0, len(self.plan(event, event.process)))
        return ProgressSummary(st.done, max(st.total, st.done))

    def dump(self, event, error: BaseException | None) -> str:
        state = event.state.value
        if state not in ("failed", "frozen"):
            return ""
        st = self.progress(event)
        token = event.token.hex() if event.token else "-"
        lines = [f"[{self.subsystem_id}] event {event.event_id} token {token} {state}",
                 f"  entities done {st.done} of ~{max(st.total, st.done)}; "
                 f"last progressed entity {st.last_entity!r}"]
        if isinstance(error, ChecksumMismatch):
            lines.append(f"  checksum mismatch at chunk sequence {error.sequence}"
                         f" (position {error.position})")
        elif error is not None:
            lines.append(f"  error: {type(error).__name__}: {error}")
        return "\n".join(lines)


# -- cpu -----------------------------------------------------------------------------

_CPU = struct.Struct(f">IB{REGISTER_COUNT}Q")


class CpuSubsystem(Subsystem):
    subsystem_id = "cpu"
    order_key = 10

    def plan(self, event, process):
        if event.mem_mode == "warm":
            return []
        return list(range(len(process.threads)))

    def emit_item(self, event, process, sink, item):
        t = process.threads[item]
        emit(event, sink, self.subsystem_id, ChunkKind.ENTITY,
             _CPU.pack(t.tid, int(t.in_barrier), *t.registers))

    def restore(self, event, process, chunk):
        if len(chunk.payload) != _CPU.size:
            raise ProtocolError("cpu entity has wrong size")
        tid, flags, *regs = _CPU.unpack(chunk.payload)
        process.threads.append(ThreadContext(tid, list(regs), in_barrier=bool(flags & 1)))


# -- memory --------------------------------------------------------------------------

TAG_PAGE, TAG_MAP, TAG_LAZY, TAG_REGION, TAG_ROUND = range(5)
_PAGE_HEAD = struct.Struct(">BI")
_REGION_HEAD = struct.Struct(">B16sI")
_ROUND = struct.Struct(">BII")
_LAZY_RUN = struct.Struct(">BII")
_SHARED_REF = struct.Struct(">16sIIIB")
PAGE_ENTITY_OVERHEAD = _PAGE_HEAD.size


class MemorySubsystem(Subsystem):
    """Address space pages; a page is the unit entity.

    ``event.mem_mode`` selects what a pass sends: ``full`` (every page, zero
    pages as map entries), ``delta`` (dirty pages only), ``lazy`` (page map
    only, contents pulled later) or ``warm`` (a pre-copy round while the guest
    keeps running).
    """

    subsystem_id = "mem"
    order_key = 20

    def plan(self, event, process):
        space = process.address_space
        mode = event.mem_mode
        items: list = []
        if event.round_no is not None:
            items.append(("round", event.round_no))
        if mode == "delta" or (mode == "warm" and event.round_no and event.round_no > 1):
            items.extend(("page", n) for n in space.dirty_page_numbers())
        else:
            items.extend(("ref", ref) for ref in space.shared_refs)
            if mode == "lazy":
                items.extend(self._lazy_plan(space))
            else:
                items.extend(("page", n) for n in space.private_page_numbers())
        if items and items[0][0] == "round":
            items[0] = ("round", event.round_no, len(items) - 1)
        return items

    @staticmethod
    def _lazy_plan(space) -> list:
        # zero pages travel as map entries; the rest as runs of consecutive pages
        items: list = []
        zero = zero_page(space.page_size)
        first = count = 0
        for n in space.private_page_numbers():
            page = space.pages[n]
            if not page.dirty and page.content == zero:
                if count:
                    items.append(("lazy", first, count))
                    count = 0
                items.append(("page", n))
            elif count and n == first + count:
                count += 1
            else:
                if count:
                    items.append(("lazy", first, count))
                first, count = n, 1
        if count:
            items.append(("lazy", first, count))
        return items

    def emit_item(self, event, process, sink, item):
        kind = item[0]
        sid = self.subsystem_id
        space = process.address_space
        if kind == "page":
            n = item[1]
            page = space.pages[n]
            if not page.dirty and page.content == zero_page(space.page_size):
                emit(event, sink, sid, ChunkKind.ENTITY, _PAGE_HEAD.pack(TAG_MAP, n))
                event.count("map_entries")
            else:
                emit(event, sink, sid, ChunkKind.ENTITY, _PAGE_HEAD.pack(TAG_PAGE, n) + page.content)
                event.count("pages_sent")
                event.sent_pages.append(n)
            page.dirty = False
        elif kind == "lazy":
            _, first, count = item
            emit(event, sink, sid, ChunkKind.ENTITY, _LAZY_RUN.pack(TAG_LAZY, first, count))
            event.count("lazy_entries", count)
            event.lazy_pages.update(range(first, first + count))
        elif kind == "ref":
            ref: SharedRef = item[1]
            region = process.regions[ref.region_id]
            ledger = event.ledger
            inline = ledger is None or ledger.claim(ref.region_id, event.event_id)
            emit(event, sink, sid, ChunkKind.SHARED_REF, _SHARED_REF.pack(
                pad16(ref.region_id), ref.base_page, ref.page_count, region.length, int(inline)))
            if inline:
                step = space.page_size
                slices = [("region", ref.region_id, off) for off in range(0, region.length, step)]
                slices.append(("region-done", ref.region_id))
                return slices
        elif kind == "region":
            _, rid, off = item
            region = process.regions[rid]
            data = bytes(region.content[off:off + space.page_size])
            chunk = emit(event, sink, sid, ChunkKind.ENTITY,
                         _REGION_HEAD.pack(TAG_REGION, pad16(rid), off) + data)
            event.count("region_bytes", chunk.wire_size)
        elif kind == "region-done":
            if event.ledger is not None:
                event.ledger.complete(item[1], event.event_id)
        elif kind == "round":
            emit(event, sink, sid, ChunkKind.ENTITY, _ROUND.pack(TAG_ROUND, item[1], item[2]))
        return None

    def restore(self, event, process, chunk):
        space = process.address_space
        size = space.page_size
        if chunk.kind is ChunkKind.SHARED_REF:
            rid_raw, base, count, length, inline = _SHARED_REF.unpack(chunk.payload)
            rid = unpad16(rid_raw)
            region = event.attach_region(rid, length, bool(inline))
            process.regions[rid] = region
            region.refcount += 1
            space.shared_refs.append(SharedRef(rid, base, count))
            for i in range(count):
                space.pages[base + i] = Page(None, dirty=False, shared=(rid, i * size))
            if not inline:
                event.awaiting_regions.add(rid)
            return
        tag = chunk.payload[0] if chunk.payload else -1
        if tag in (TAG_PAGE, TAG_MAP):
            _, n = _PAGE_HEAD.unpack_from(chunk.payload)
            if tag == TAG_PAGE:
                content = chunk.payload[_PAGE_HEAD.size:]
                if len(content) != size:
                    raise ProtocolError(f"page {n}: {len(content)} bytes, page size is {size}")
                space.pages[n] = Page(content, dirty=False)
            else:
                space.pages[n] = Page(zero_page(size), dirty=False)
        elif tag == TAG_LAZY:
            if len(chunk.payload) != _LAZY_RUN.size:
                raise ProtocolError("lazy run entity has wrong size")
            _, first, count = _LAZY_RUN.unpack(chunk.payload)
            for n in range(first, first + count):
                space.pages[n] = Page(None, dirty=False, resident=False)
        elif tag == TAG_REGION:
            _, rid_raw, off = _REGION_HEAD.unpack_from(chunk.payload)
            event.fill_region(unpad16(rid_raw), off, chunk.payload[_REGION_HEAD.size:])
        elif tag == TAG_ROUND:
            _, round_no, _pages = _ROUND.unpack(chunk.payload)
            event.round_no = round_no
        else:
            raise ProtocolError(f"unknown mem entity tag {tag}")

    def finish_restore(self, event, process):
        for rid in sorted(event.awaiting_regions):
            event.wait_region(rid)
        event.awaiting_regions.clear()


# -- files -----------------------------------------------------------------------------

_FILE = struct.Struct(">IQBBH")
_MODES = list(FileMode)
_POLICIES = list(ResourcePolicy)


class FileSubsystem(Subsystem):
    """Open-file table. Each file follows its own resource policy."""

    subsystem_id = "file"
    order_key = 30

    def plan(self, event, process):
        if event.mem_mode == "warm":
            return []
        return [f.fd for f in sorted(process.file_table, key=lambda f: f.fd)]

    def emit_item(self, event, process, sink, item):
        f = process.file(item)
        path = f.path.encode()
        try:
            payload = _FILE.pack(f.fd, f.offset, _MODES.index(f.mode), _POLICIES.index(f.policy),
                                 len(path)) + path
        except struct.error as e:
            raise EntityError(("fd", f.fd), f"cannot serialize fd {f.fd}: {e}") from None
        emit(event, sink, self.subsystem_id, ChunkKind.ENTITY, payload)

    def restore(self, event, process, chunk):
        fd, offset, mode, policy, plen = _FILE.unpack_from(chunk.payload)
        path = chunk.payload[_FILE.size:_FILE.size + plen].decode()
        pol = _POLICIES[policy]
        if pol is ResourcePolicy.USE_LOCAL:
            offset = event.local_offset(path)
        elif pol is ResourcePolicy.FORWARD_TO_SOURCE:
            event.residual_fds.append(fd)
        process.file_table.append(OpenFile(fd, path, offset, _MODES[mode], pol))


# -- registry setup ----------------------------------------------------------------------

BUILTIN_SUBSYSTEMS: dict[str, type[Subsystem]] = {
    "cpu": CpuSubsystem,
    "mem": MemorySubsystem,
    "file": FileSubsystem,
}


def available_modules() -> dict[str, type[Subsystem]]:
    from .plugins import PLUGINS
    return {**BUILTIN_SUBSYSTEMS, **PLUGINS}


def default_registry(modules: list[str] | None = None) -> SubsystemRegistry:
    catalogue = available_modules()
    registry = SubsystemRegistry()
    for name in modules if modules is not None else ["cpu", "mem", "file"]:
        try:
            cls = catalogue[name]
        except KeyError:
            raise UnknownSubsystem(name) from None
        registry.register(cls().descriptor())
    return registry
