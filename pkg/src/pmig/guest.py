"""Simulated guest processes: the state every subsystem exports and imports.

A guest is not a real OS process. It carries threads with register files, a
paged address space (optionally mapping shared regions), a metadata-only
file table and a run state. All content is deterministic so that a migrated
process can be compared bit for bit with its source.
"""

from __future__ import annotations

import copy
import enum
import hashlib
import random
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

from .errors import GuestSpecError, GuestStateError, IncompleteState, PageFault

DEFAULT_PAGE_SIZE = 4096
MIN_PAGE_SIZE = 64
REGISTER_COUNT = 32
REG_PC = 0
REG_SP = 1
WORD_MASK = (1 << 64) - 1

_zero_pages: dict[int, bytes] = {}


def zero_page(page_size: int) -> bytes:
    page = _zero_pages.get(page_size)
    if page is None:
        page = _zero_pages[page_size] = bytes(page_size)
    return page


class RunState(enum.Enum):
    RUNNING = "running"
    QUIESCED = "quiesced"
    MIGRATING = "migrating"
    RESUMED = "resumed"
    REMOVED = "removed"


_TRANSITIONS = {
    RunState.RUNNING: {RunState.QUIESCED},
    RunState.QUIESCED: {RunState.MIGRATING, RunState.RUNNING, RunState.RESUMED},
    RunState.MIGRATING: {RunState.REMOVED, RunState.RESUMED, RunState.RUNNING},
    RunState.RESUMED: {RunState.QUIESCED},
    RunState.REMOVED: set(),
}


class FileMode(enum.Enum):
    READ = "r"
    WRITE = "w"
    READ_WRITE = "rw"


class ResourcePolicy(enum.Enum):
    """How a resource is handled while its process migrates."""

    USE_LOCAL = "local"  # ignore the source copy, resolve on the destination
    TRANSFER = "transfer"  # extract on the source, reinstate on the destination
    FORWARD_TO_SOURCE = "forward"  # keep on the source, forward operations back


@dataclass
class ThreadContext:
    tid: int
    registers: list[int]
    in_barrier: bool = False
    # simulation knob: a thread that never reaches a synchronous barrier
    stuck: bool = False

    def __post_init__(self) -> None:
        if len(self.registers) != REGISTER_COUNT:
            raise GuestSpecError(f"thread {self.tid}: expected {REGISTER_COUNT} registers")


@dataclass
class Page:
    content: bytes | None
    dirty: bool = True
    resident: bool = True
    # None for private pages, (region_id, byte offset) for shared ones
    shared: tuple[str, int] | None = None


@dataclass(frozen=True)
class SharedRef:
    region_id: str
    base_page: int
    page_count: int

    def pages(self) -> range:
        return range(self.base_page, self.base_page + self.page_count)


@dataclass
class SharedRegion:
    region_id: str
    length: int
    content: bytearray
    refcount: int = 0

    @classmethod
    def create(cls, region_id: str, length: int, fill: bytes | None = None) -> SharedRegion:
        if len(region_id.encode()) > 16:
            raise GuestSpecError(f"region id {region_id!r} longer than 16 bytes")
        if fill is None:
            fill = hashlib.shake_256(b"pmig-region:" + region_id.encode()).digest(length)
        if len(fill) != length:
            raise GuestSpecError("region content length mismatch")
        return cls(region_id, length, bytearray(fill))


@dataclass
class AddressSpace:
    page_size: int = DEFAULT_PAGE_SIZE
    pages: dict[int, Page] = field(default_factory=dict)
    shared_refs: list[SharedRef] = field(default_factory=list)

    def private_page_numbers(self) -> list[int]:
        return sorted(n for n, p in self.pages.items() if p.shared is None)

    def dirty_page_numbers(self) -> list[int]:
        return sorted(n for n, p in self.pages.items() if p.dirty and p.shared is None)


@dataclass
class OpenFile:
    fd: int
    path: str
    offset: int = 0
    mode: FileMode = FileMode.READ
    policy: ResourcePolicy = ResourcePolicy.TRANSFER


@dataclass
class GuestProcess:
    pid: int
    threads: list[ThreadContext]
    address_space: AddressSpace
    file_table: list[OpenFile] = field(default_factory=list)
    run_state: RunState = RunState.RUNNING
    # state owned by third-party subsystems, keyed by subsystem id
    module_state: dict[str, bytes] = field(default_factory=dict)
    # regions this process maps, shared by reference with the owning node
    regions: dict[str, SharedRegion] = field(default_factory=dict)
    fault_handler: Callable[[int], None] | None = field(default=None, repr=False, compare=False)
    barrier_entries: int = 0

    def transition(self, new: RunState) -> None:
        if new not in _TRANSITIONS[self.run_state]:
            raise GuestStateError(
                f"pid {self.pid}: illegal transition {self.run_state.value} -> {new.value}")
        self.run_state = new

    def file(self, fd: int) -> OpenFile:
        for f in self.file_table:
            if f.fd == fd:
                return f
        raise KeyError(fd)

    def page_content(self, page_number: int) -> bytes:
        page = self.address_space.pages[page_number]
        if not page.resident:
            raise PageFault(self.pid, page_number)
        if page.shared is not None:
            region_id, off = page.shared
            size = self.address_space.page_size
            return bytes(self.regions[region_id].content[off:off + size])
        assert page.content is not None
        return page.content

    def ensure_resident(self, page_number: int) -> Page:
        page = self.address_space.pages[page_number]
        if not page.resident:
            if self.fault_handler is None:
                raise PageFault(self.pid, page_number)
            self.fault_handler(page_number)
            if not page.resident:
                raise PageFault(self.pid, page_number)
        return page

    def read_page(self, page_number: int) -> bytes:
        self.ensure_resident(page_number)
        return self.page_content(page_number)

    def write_page(self, page_number: int, content: bytes) -> None:
        page = self.ensure_resident(page_number)
        if page.shared is not None:
            raise GuestStateError("shared pages are read-only to the workload")
        if len(content) != self.address_space.page_size:
            raise ValueError("page content has wrong size")
        page.content = content
        page.dirty = True

    def non_resident_pages(self) -> list[int]:
        return sorted(n for n, p in self.address_space.pages.items() if not p.resident)

    def clone(self) -> GuestProcess:
        """Detached deep copy, used as a comparison baseline.

        Shared regions are copied too, so mutating the clone never leaks into
        the original. The clone is not registered with any node.
        """
        dup = copy.copy(self)
        dup.threads = copy.deepcopy(self.threads)
        dup.address_space = copy.deepcopy(self.address_space)
        dup.file_table = copy.deepcopy(self.file_table)
        dup.module_state = dict(self.module_state)
        dup.regions = {k: copy.deepcopy(r) for k, r in self.regions.items()}
        dup.fault_handler = None
        return dup


@dataclass(frozen=True)
class SharedAttachment:
    region_id: str
    base_page: int
    page_count: int


@dataclass(frozen=True)
class FileSpec:
    fd: int
    path: str
    offset: int = 0
    mode: FileMode = FileMode.READ
    policy: ResourcePolicy = ResourcePolicy.TRANSFER


@dataclass
class GuestSpec:
    thread_count: int = 1
    address_space_size_bytes: int = 0
    page_size: int = DEFAULT_PAGE_SIZE
    shared_attachments: list[SharedAttachment] = field(default_factory=list)
    files: list[FileSpec] = field(default_factory=list)
    # False spawns untouched, zero-filled clean pages (no memory footprint)
    footprint: bool = True


def initial_page(pid: int, page_number: int, page_size: int) -> bytes:
    return hashlib.shake_256(b"pmig-page:" + struct.pack(">QQ", pid, page_number)).digest(page_size)


def initial_registers(pid: int, tid: int) -> list[int]:
    raw = hashlib.shake_256(b"pmig-regs:" + struct.pack(">QQ", pid, tid)).digest(8 * REGISTER_COUNT)
    return list(struct.unpack(f">{REGISTER_COUNT}Q", raw))


def _check_page_size(page_size: int) -> None:
    if page_size < MIN_PAGE_SIZE or page_size & (page_size - 1):
        raise GuestSpecError(f"page size {page_size} is not a power of two >= {MIN_PAGE_SIZE}")


def spawn_guest(spec: GuestSpec, pid: int,
                regions: Mapping[str, SharedRegion] | None = None) -> GuestProcess:
    """Build a Running guest from ``spec``; attached regions get their refcount bumped."""
    regions = regions or {}
    if pid <= 0:
        raise GuestSpecError("pid must be positive")
    if spec.thread_count < 1:
        raise GuestSpecError("a process needs at least one thread")
    _check_page_size(spec.page_size)
    size = spec.address_space_size_bytes
    if size < 0 or size % spec.page_size:
        raise GuestSpecError(f"address space size {size} is not a multiple of page size {spec.page_size}")
    n_pages = size // spec.page_size

    threads = [ThreadContext(tid, initial_registers(pid, tid)) for tid in range(1, spec.thread_count + 1)]
    space = AddressSpace(page_size=spec.page_size)
    attached: dict[str, SharedRegion] = {}
    claimed: set[int] = set()
    for att in spec.shared_attachments:
        region = regions.get(att.region_id)
        if region is None:
            raise GuestSpecError(f"unknown shared region {att.region_id!r}")
        if att.page_count < 1 or att.base_page < 0 or att.base_page + att.page_count > n_pages:
            raise GuestSpecError(f"shared mapping of {att.region_id!r} outside the address space")
        if att.page_count * spec.page_size > region.length:
            raise GuestSpecError(f"region {att.region_id!r} shorter than its mapping")
        span = set(range(att.base_page, att.base_page + att.page_count))
        if span & claimed or att.region_id in attached:
            raise GuestSpecError(f"overlapping shared mapping for {att.region_id!r}")
        claimed |= span
        attached[att.region_id] = region
        space.shared_refs.append(SharedRef(att.region_id, att.base_page, att.page_count))
        for i, n in enumerate(sorted(span)):
            space.pages[n] = Page(None, dirty=False, shared=(att.region_id, i * spec.page_size))

    for n in range(n_pages):
        if n in claimed:
            continue
        if spec.footprint:
            space.pages[n] = Page(initial_page(pid, n, spec.page_size), dirty=True)
        else:
            space.pages[n] = Page(zero_page(spec.page_size), dirty=False)

    files = []
    seen: set[int] = set()
    for fs in spec.files:
        if fs.fd < 0 or fs.fd in seen:
            raise GuestSpecError(f"bad or duplicate fd {fs.fd}")
        seen.add(fs.fd)
        files.append(OpenFile(fs.fd, fs.path, fs.offset, fs.mode, fs.policy))

    proc = GuestProcess(pid, threads, space, files, regions=attached)
    for region in attached.values():
        region.refcount += 1
    return proc


def release_guest(process: GuestProcess) -> None:
    """Drop the process's region references."""
    for region in process.regions.values():
        region.refcount -= 1
    process.regions = {}


def _stamp(content: bytes) -> tuple[int, bytes]:
    digest = hashlib.blake2b(content, digest_size=18).digest()
    return int.from_bytes(digest[:2], "big"), digest[2:]


def mutate_page(content: bytes) -> bytes:
    """Deterministic, content-dependent rewrite of one 16-byte slot."""
    slot, stamp = _stamp(content)
    off = (slot % (len(content) // 16)) * 16
    return content[:off] + stamp + content[off + 16:]


def workload_targets(process: GuestProcess) -> list[int]:
    return process.address_space.private_page_numbers()


def run_workload(process: GuestProcess, steps: int, write_rate: int, seed: int) -> set[int]:
    """Apply ``steps * write_rate`` seeded page writes; return the distinct pages written.

    Write targets are drawn uniformly (with replacement) from the sorted list of
    private page numbers using ``random.Random(seed).randrange``. Each step also
    advances the program counter of thread ``step % len(threads)``.
    """
    if process.run_state not in (RunState.RUNNING, RunState.RESUMED):
        raise GuestStateError(f"pid {process.pid} is {process.run_state.value}; cannot run")
    if steps < 0 or write_rate < 0:
        raise ValueError("steps and write_rate must be non-negative")
    rng = random.Random(seed)
    targets = workload_targets(process)
    written: set[int] = set()
    for step in range(steps):
        if targets:
            for _ in range(write_rate):
                n = targets[rng.randrange(len(targets))]
                process.ensure_resident(n)
                process.write_page(n, mutate_page(process.page_content(n)))
                written.add(n)
        thread = process.threads[step % len(process.threads)]
        thread.registers[REG_PC] = (thread.registers[REG_PC] + 1) & WORD_MASK
    return written


def canonical_bytes(process: GuestProcess, strict: bool = True) -> Iterable[bytes]:
    """Yield the canonical serialization used by :func:`snapshot_digest`."""
    space = process.address_space
    yield struct.pack(">4sII", b"PMGS", space.page_size, len(process.threads))
    for t in process.threads:
        yield struct.pack(f">I{REGISTER_COUNT}Q", t.tid, *t.registers)
    yield struct.pack(">I", len(space.pages))
    for n in sorted(space.pages):
        page = space.pages[n]
        if page.shared is not None:
            rid, off = page.shared
            yield struct.pack(">IB16sI", n, 1, rid.encode(), off)
        elif not page.resident:
            if strict:
                raise IncompleteState(f"pid {process.pid}: page {n} not resident")
            yield struct.pack(">IB", n, 2)
        else:
            assert page.content is not None
            yield struct.pack(">IB", n, 0)
            yield page.content
    for ref in sorted(space.shared_refs, key=lambda r: r.region_id):
        region = process.regions[ref.region_id]
        yield struct.pack(">16sIII", ref.region_id.encode(), ref.base_page, ref.page_count, region.length)
        yield bytes(region.content)
    yield struct.pack(">I", len(process.file_table))
    for f in sorted(process.file_table, key=lambda f: f.fd):
        # locally resolved files keep node-local offsets
        offset = 0 if f.policy is ResourcePolicy.USE_LOCAL else f.offset
        path = f.path.encode()
        yield struct.pack(f">IQ2s8sH{len(path)}s", f.fd, offset, f.mode.value.encode(),
                          f.policy.value.encode(), len(path), path)
    for key in sorted(process.module_state):
        value = process.module_state[key]
        yield struct.pack(f">16sI{len(value)}s", key.encode(), len(value), value)


def snapshot_digest(process: GuestProcess, strict: bool = True) -> str:
    """SHA-256 hex digest over the canonical state (pid excluded).

    With ``strict`` a process that still has non-resident pages raises
    :class:`IncompleteState`.
    """
    if process.run_state is RunState.REMOVED:
        raise GuestStateError(f"pid {process.pid} has been removed")
    h = hashlib.sha256()
    for part in canonical_bytes(process, strict):
        h.update(part)
    return h.hexdigest()
