"""Benchmark harness for the four measured scenarios.

Every run migrates freshly spawned guests between two in-process nodes (or
to a remote daemon) and yields one :class:`BenchResult` row. Byte columns are
deterministic for a fixed config; durations are wall clock.

CSV columns, in order: the :class:`BenchResult` fields.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import statistics
from dataclasses import dataclass, replace
from importlib import resources
from typing import Iterable, TextIO

from .config import WorkloadConfig, load_config, spawn_from_config
from .core import Node
from .guest import GuestSpec
from .medium import FRAME_OVERHEAD
from .proto import Coordinator, Daemon, MigrationReport, Workload, _normalize_endpoint
from .strategy import PostCopyLazy, StopAndCopy, Strategy
from .subsystems import PAGE_ENTITY_OVERHEAD

MIB = 1 << 20
SCENARIOS = ("fig3", "fig4", "fig5", "fig6")


@dataclass
class BenchResult:
    scenario: str
    n_processes: int
    address_space_bytes: int
    strategy: str
    latency: float
    freeze_time: float
    negotiation_msgs: int
    bytes_pre_resume: int
    bytes_post_resume: int
    region_bytes_on_wire: int
    variant: str = ""
    page_entries: int = 0
    dirty_bytes: int = 0


CSV_COLUMNS = [f.name for f in dataclasses.fields(BenchResult)]


def page_wire_size(page_size: int) -> int:
    """Bytes one transferred page costs on the wire: payload plus framing."""
    return page_size + FRAME_OVERHEAD + PAGE_ENTITY_OVERHEAD


def builtin_config(name: str) -> WorkloadConfig:
    text = resources.files("pmig.workloads").joinpath(f"{name}.ini").read_text()
    return load_config(text)


def migrate_fresh(config: WorkloadConfig, strategy: Strategy, *, dedup: bool = True,
                  endpoint=None, watchdog_period: float = 2.0) -> MigrationReport:
    """Spawn the config's processes on a new source node and migrate all of them."""
    page_size = config.guest.page_size
    with Node("bench-src", page_size=page_size, watchdog_period=watchdog_period) as src:
        dst = daemon = None
        if endpoint is None:
            dst = Node("bench-dst", page_size=page_size, watchdog_period=watchdog_period)
            daemon = Daemon(dst)
            endpoint = daemon
        coordinator = Coordinator(src)
        try:
            procs = spawn_from_config(src, config)
            workload = Workload(config.steps, config.write_rate, config.seed)
            return coordinator.migrate([p.pid for p in procs], endpoint, strategy,
                                       dedup=dedup, workload=workload)
        finally:
            coordinator.close()
            if daemon is not None:
                daemon.wait_idle()
                daemon.close()
                dst.close()


def _row(scenario: str, config: WorkloadConfig, report: MigrationReport, variant: str = "") -> BenchResult:
    procs = report.processes
    return BenchResult(
        scenario=scenario,
        n_processes=len(procs),
        address_space_bytes=config.guest.address_space_size_bytes,
        strategy=report.strategy,
        latency=max(p.latency for p in procs),
        freeze_time=statistics.fmean(p.freeze_time for p in procs),
        negotiation_msgs=report.negotiation_msgs,
        bytes_pre_resume=report.bytes_pre_resume,
        bytes_post_resume=report.bytes_post_resume,
        region_bytes_on_wire=report.region_bytes_on_wire,
        variant=variant,
        page_entries=sum(p.pages_pre_resume + p.map_entries + p.lazy_entries for p in procs),
        dirty_bytes=sum(p.pages_pre_resume for p in procs) * page_wire_size(config.guest.page_size))


def _sized(config: WorkloadConfig, size: int, footprint: bool = True, count: int | None = None) -> WorkloadConfig:
    guest: GuestSpec = replace(config.guest, address_space_size_bytes=size, footprint=footprint)
    return replace(config, guest=guest, count=config.count if count is None else count)


def fig3(sizes_mib: Iterable[int] = (1, 3, 5, 7, 9), config: WorkloadConfig | None = None,
         endpoint=None) -> list[BenchResult]:
    """Latency and bytes against address-space size, with and without footprint and laziness."""
    config = config or builtin_config("fig3")
    rows = []
    for footprint in (True, False):
        for strategy in (StopAndCopy(), PostCopyLazy()):
            for mib in sizes_mib:
                cfg = _sized(config, mib * MIB, footprint)
                report = migrate_fresh(cfg, strategy, endpoint=endpoint)
                rows.append(_row("fig3", cfg, report, "footprint" if footprint else "no-footprint"))
    return rows


def fig4(sizes_mib: Iterable[int] = (1, 3, 5, 7, 9), config: WorkloadConfig | None = None,
         endpoint=None) -> list[BenchResult]:
    """Split of the memory cost into page-table entries scanned and dirty-page bytes."""
    config = config or builtin_config("fig3")
    rows = []
    for footprint in (True, False):
        for mib in sizes_mib:
            cfg = _sized(config, mib * MIB, footprint)
            report = migrate_fresh(cfg, StopAndCopy(), endpoint=endpoint)
            rows.append(_row("fig4", cfg, report, "footprint" if footprint else "no-footprint"))
    return rows


def fig5(counts: Iterable[int] = range(1, 10), config: WorkloadConfig | None = None,
         endpoint=None) -> list[BenchResult]:
    """Negotiation messages and per-process freeze time against the process count."""
    config = config or builtin_config("fig5")
    rows = []
    for n in counts:
        cfg = replace(config, count=n)
        rows.append(_row("fig5", cfg, migrate_fresh(cfg, StopAndCopy(), endpoint=endpoint)))
    return rows


def fig6(counts: Iterable[int] = range(1, 10), config: WorkloadConfig | None = None,
         endpoint=None) -> list[BenchResult]:
    """Total bytes and elapsed time for processes sharing a region, dedup on and off."""
    config = config or builtin_config("fig6")
    rows = []
    for dedup in (True, False):
        for n in counts:
            cfg = replace(config, count=n)
            report = migrate_fresh(cfg, StopAndCopy(), dedup=dedup, endpoint=endpoint)
            rows.append(_row("fig6", cfg, report, "dedup" if dedup else "no-dedup"))
    return rows


RUNNERS = {"fig3": fig3, "fig4": fig4, "fig5": fig5, "fig6": fig6}


def run_scenario(name: str, *, config: WorkloadConfig | None = None, points: list[int] | None = None,
                 endpoint=None) -> list[BenchResult]:
    if name not in RUNNERS:
        raise ValueError(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}")
    if endpoint is not None and not hasattr(endpoint, "attach"):
        endpoint = _normalize_endpoint(endpoint)
    runner = RUNNERS[name]
    if points is None:
        return runner(config=config, endpoint=endpoint)
    return runner(points, config=config, endpoint=endpoint)


def write_csv(rows: Iterable[BenchResult], out: TextIO) -> None:
    writer = csv.DictWriter(out, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        d = dataclasses.asdict(row)
        d["latency"] = f"{row.latency:.6f}"
        d["freeze_time"] = f"{row.freeze_time:.6f}"
        writer.writerow(d)


def to_csv(rows: Iterable[BenchResult]) -> str:
    buf = io.StringIO()
    write_csv(rows, buf)
    return buf.getvalue()
