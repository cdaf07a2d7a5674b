"""Acceptance criteria 1-11, one test per criterion.

Each test prints a single ``criterion N PASS|FAIL`` line. Run with
``pytest tests/test_acceptance.py -v``.
"""

from __future__ import annotations

import random
import statistics
import threading
import time

import pytest

from helpers import event_for
from oracles import (frame, marker, pearson, precopy_rounds, region_chunks, stop_and_copy_bytes)
from pmig.core import EventState, Node, ProcessHooks
from pmig.errors import CapabilityMismatch, HandshakeRejected
from pmig import proto
from pmig.guest import (FileSpec, GuestSpec, ResourcePolicy, RunState, SharedAttachment, run_workload,
                        snapshot_digest)
from pmig.medium import LoopbackChannel, loopback_pair
from pmig.proto import Coordinator, Daemon, MigrationFailed, Workload
from pmig.strategy import PostCopyLazy, PreCopy, StopAndCopy

PAGE = 4096
MIB = 1 << 20
STRATEGIES = [StopAndCopy(), PreCopy(5, 16), PostCopyLazy()]
# one page on the wire: frame header and crc, entity head, payload
PAGE_ON_WIRE = frame(1 + 4 + PAGE)


class Env:
    """Fresh source and destination nodes joined by a loopback daemon."""

    def __init__(self, *, src_modules=None, dst_modules=None, dst_page_size=PAGE,
                 commit_timeout=30.0, deadline=5.0, watchdog_period=2.0):
        self.src = Node("src", modules=src_modules, watchdog_period=watchdog_period)
        self.dst = Node("dst", modules=dst_modules, page_size=dst_page_size,
                        watchdog_period=watchdog_period)
        self.daemon = Daemon(self.dst)
        self.coordinator = Coordinator(self.src, commit_timeout=commit_timeout, deadline=deadline)

    def close(self):
        self.coordinator.close()
        self.daemon.wait_idle()
        self.daemon.close()
        self.src.close()
        self.dst.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def timed(limit: float):
    started = time.monotonic()
    return lambda: (time.monotonic() - started, limit)


# -- 1 ------------------------------------------------------------------------------------


def test_criterion_01_fidelity(verdict):
    verdict.update(n=1, title="destination digest equals source digest at quiesce")
    clock = timed(10.0)
    checked = 0
    for pages in (0, 1, 256, 2304):
        for threads in (1, 8):
            for strategy in STRATEGIES:
                with Env() as env:
                    proc = env.src.spawn(GuestSpec(threads, pages * PAGE, PAGE))
                    at_quiesce = {}

                    def boundary(name, ev, at_quiesce=at_quiesce):
                        if name == "src:quiesced":
                            at_quiesce[ev.pid] = snapshot_digest(ev.process)

                    env.coordinator.on_boundary = boundary
                    report = env.coordinator.migrate([proc.pid], env.daemon, strategy,
                                                     workload=Workload(2, 3, pages))
                    env.daemon.wait_idle()
                    dest = env.dst.guests[report.processes[0].dest_pid]
                    assert dest.non_resident_pages() == []
                    assert snapshot_digest(dest) == at_quiesce[proc.pid], (pages, threads, strategy)
                    checked += 1
    elapsed, limit = clock()
    verdict["detail"] = f"{checked} cases in {elapsed:.2f}s"
    assert checked == 24
    assert elapsed < limit


# -- 2 ------------------------------------------------------------------------------------


def test_criterion_02_linearity(verdict):
    verdict.update(n=2, title="stop-and-copy bytes exactly linear, latency Pearson r >= 0.95")
    clock = timed(30.0)
    sizes = [1, 3, 5, 7, 9]
    nbytes, latency = [], []
    for mib in sizes:
        samples = []
        for _ in range(3):
            with Env() as env:
                proc = env.src.spawn(GuestSpec(1, mib * MIB, PAGE))
                report = env.coordinator.migrate([proc.pid], env.daemon, StopAndCopy())
            samples.append(report.processes[0].latency)
        nbytes.append(report.bytes_pre_resume)
        latency.append(statistics.median(samples))
    fixed = stop_and_copy_bytes(0, PAGE)
    r = pearson([float(s) for s in sizes], latency)
    elapsed, limit = clock()
    verdict["detail"] = f"r={r:.4f}, {elapsed:.1f}s"
    for mib, b in zip(sizes, nbytes):
        assert b == fixed + mib * 256 * PAGE_ON_WIRE
    assert r >= 0.95
    assert elapsed < limit


# -- 3 ------------------------------------------------------------------------------------


def test_criterion_03_footprint_gap(verdict):
    verdict.update(n=3, title="9 MiB clean guest sends <= 20% of a dirty one")
    results = {}
    for footprint in (True, False):
        with Env() as env:
            proc = env.src.spawn(GuestSpec(1, 9 * MIB, PAGE, footprint=footprint))
            results[footprint] = env.coordinator.migrate([proc.pid], env.daemon).bytes_pre_resume
    ratio = results[False] / results[True]
    verdict["detail"] = f"ratio={ratio:.4f}"
    assert ratio <= 0.20


# -- 4 ------------------------------------------------------------------------------------


def test_criterion_04_laziness(verdict):
    verdict.update(n=4, title="lazy sends no page before resume and freezes shorter")
    clock = timed(30.0)
    wins = 0
    trials = 20
    for seed in range(trials):
        rng = random.Random(seed)
        spec = GuestSpec(rng.randint(1, 4), rng.randint(256, 768) * PAGE, PAGE)
        freeze = {}
        for strategy in ([StopAndCopy(), PostCopyLazy()] if seed % 2 else [PostCopyLazy(), StopAndCopy()]):
            with Env() as env:
                proc = env.src.spawn(spec)
                report = env.coordinator.migrate([proc.pid], env.daemon, strategy)
            pr = report.processes[0]
            if isinstance(strategy, PostCopyLazy):
                assert pr.pages_pre_resume == 0
                assert pr.pages_post_resume == spec.address_space_size_bytes // PAGE
            freeze[strategy.name] = pr.freeze_time
        wins += freeze["lazy"] < freeze["stop-and-copy"]
    elapsed, limit = clock()
    verdict["detail"] = f"lazy faster in {wins}/{trials}, {elapsed:.1f}s"
    assert wins >= 0.95 * trials
    assert elapsed < limit


# -- 5 ------------------------------------------------------------------------------------


def test_criterion_05_pre_copy_oracle(verdict):
    verdict.update(n=5, title="pre-copy round sets equal the replayed dirty-tracking oracle")
    clock = timed(30.0)
    seeds = random.Random(2024).sample(range(10**6), 50)
    strategy = PreCopy(5, 4)
    pages = 64
    rounds_seen = []
    with Env() as env:
        for seed in seeds:
            proc = env.src.spawn(GuestSpec(1, pages * PAGE, PAGE))
            # write load varies with the seed so rounds both converge early and hit the cap
            workload = Workload(1 + seed % 3, 1 + seed % 4, seed)
            report = env.coordinator.migrate([proc.pid], env.daemon, strategy, workload=workload)
            got = report.processes[0].round_pages
            expected = precopy_rounds(list(range(pages)), workload.steps, workload.write_rate, seed,
                                      strategy.max_rounds, strategy.dirty_threshold)
            assert got == expected, seed
            rounds_seen.append(len(got))
    elapsed, limit = clock()
    verdict["detail"] = f"50 seeds, rounds {min(rounds_seen)}..{max(rounds_seen)}, {elapsed:.1f}s"
    assert elapsed < limit


# -- 6 ------------------------------------------------------------------------------------


def _shared_batch(n: int, dedup: bool):
    with Env() as env:
        env.src.create_region("shared0", MIB)
        spec = GuestSpec(1, MIB + 64 * PAGE, PAGE, [SharedAttachment("shared0", 0, 256)])
        procs = [env.src.spawn(spec) for _ in range(n)]
        return env.coordinator.migrate([p.pid for p in procs], env.daemon, dedup=dedup)


def test_criterion_06_shared_dedup(verdict):
    verdict.update(n=6, title="dedup saves exactly (N-1) region payloads, region sent once")
    clock = timed(20.0)
    payload = region_chunks(MIB, PAGE)
    savings = {}
    for n in (1, 9):
        on, off = _shared_batch(n, True), _shared_batch(n, False)
        savings[n] = off.bytes_pre_resume - on.bytes_pre_resume
        carriers = [p for p in on.processes if p.region_bytes_on_wire]
        assert len(carriers) == 1 and carriers[0].region_bytes_on_wire == payload
        assert off.region_bytes_on_wire == n * payload
    elapsed, limit = clock()
    verdict["detail"] = f"saving N=9 {savings[9]} B, N=1 {savings[1]} B, {elapsed:.1f}s"
    assert savings[9] == 8 * payload
    assert savings[1] == 0
    assert elapsed < limit


# -- 7 ------------------------------------------------------------------------------------


def test_criterion_07_negotiation(verdict):
    verdict.update(n=7, title="handshake messages = 2 + N")
    counts = []
    with Env() as env:
        for n in range(1, 10):
            procs = [env.src.spawn(GuestSpec(1, 4 * PAGE, PAGE)) for _ in range(n)]
            counts.append(env.coordinator.migrate([p.pid for p in procs], env.daemon).negotiation_msgs)
    verdict["detail"] = f"counts {counts}"
    assert counts == [2 + n for n in range(1, 10)]


# -- 8 ------------------------------------------------------------------------------------


def test_criterion_08_freeze_flatness(verdict):
    verdict.update(n=8, title="per-process freeze at N=9 <= 2x N=1")
    clock = timed(30.0)

    def mean_freeze(n: int) -> float:
        with Env() as env:
            procs = [env.src.spawn(GuestSpec(1, MIB, PAGE)) for _ in range(n)]
            report = env.coordinator.migrate([p.pid for p in procs], env.daemon)
        return statistics.fmean(p.freeze_time for p in report.processes)

    one = statistics.median(mean_freeze(1) for _ in range(5))
    nine = statistics.median(mean_freeze(9) for _ in range(5))
    elapsed, limit = clock()
    verdict["detail"] = f"N=1 {one * 1e3:.1f} ms, N=9 {nine * 1e3:.1f} ms, {elapsed:.1f}s"
    assert nine <= 2 * one
    assert elapsed < limit


# -- 9 ------------------------------------------------------------------------------------


def test_criterion_09_watchdog(verdict):
    verdict.update(n=9, title="stalled medium freezes within 2x period; 10 s progressing event survives")
    clock = timed(30.0)
    period = 0.5
    with Node("wd", watchdog_period=period, batch_limit=4) as node:
        slow_proc = node.spawn(GuestSpec(1, 256 * PAGE, PAGE))
        stuck_proc = node.spawn(GuestSpec(1, 256 * PAGE, PAGE))
        opts = {"window": 4, "buffer_size": 1, "backpressure_deadline": 120.0}
        slow_tx, slow_rx = loopback_pair(**opts)
        stuck_tx, _stuck_rx = loopback_pair(**opts)
        stop = threading.Event()

        def slow_reader():
            while not stop.is_set():
                try:
                    slow_rx.popdata(deadline=1.0)
                except Exception:  # noqa: BLE001 -- reader ends with the channel
                    return
                time.sleep(0.04)

        reader = threading.Thread(target=slow_reader, daemon=True)
        reader.start()
        ev_slow = event_for(node, pid=slow_proc.pid)
        ev_stuck = event_for(node, pid=stuck_proc.pid)
        for ev in (ev_slow, ev_stuck):
            ev.state = EventState.PREPARED
        ev_slow.channel, ev_stuck.channel = slow_tx, stuck_tx
        results = {}

        def run(name, ev, proc, chan):
            results[name] = node.core.checkpoint_worker(ev, proc, chan)

        workers = [threading.Thread(target=run, args=("slow", ev_slow, slow_proc, slow_tx)),
                   threading.Thread(target=run, args=("stuck", ev_stuck, stuck_proc, stuck_tx))]
        started = time.monotonic()
        for w in workers:
            w.start()
        for w in workers:
            w.join(25)
        stop.set()
        slow_duration = ev_slow.timestamps["done"] - started
        freeze_delay = ev_stuck.timestamps["frozen"] - ev_stuck.watchdog.last_progress
    elapsed, limit = clock()
    verdict["detail"] = (f"frozen {freeze_delay:.2f}s after last progress (period {period}s); "
                         f"slow event ran {slow_duration:.1f}s to {results.get('slow')}")
    assert results["stuck"] is EventState.FROZEN
    assert freeze_delay <= 2 * period
    assert results["slow"] is EventState.DONE
    assert slow_duration >= 10.0
    assert elapsed < limit


# -- 10 -----------------------------------------------------------------------------------


class Injector:
    """Arms one fault at the first hit of a named step boundary."""

    def __init__(self, env: Env, fault: str, target: str | None):
        self.env = env
        self.fault = fault
        self.target = target
        self.armed = False
        self.fired = False
        self.seen: list[str] = []
        self.channels: list = []
        env.coordinator.on_boundary = self.boundary
        env.daemon.on_boundary = self.boundary
        env.daemon.hooks = ProcessHooks(restart=self.restart_hook)
        open_data = env.coordinator._open_data

        def tapped(batch, endpoint):
            chan = open_data(batch, endpoint)
            chan.frame_hook = self.frame_hook
            self.channels.append(chan)
            return chan

        env.coordinator._open_data = tapped

    def boundary(self, name, ev):
        if name not in self.seen:
            self.seen.append(name)
        if name != self.target or self.armed:
            return
        self.armed = True
        if self.fault == "link-cut":
            self.fired = True
            for link in self.env.coordinator.links():
                link.cut()
            for chan in self.channels:
                if isinstance(chan, LoopbackChannel):
                    chan.cut()

    def frame_hook(self, position, raw, resend):
        if self.fault != "checksum" or not self.armed:
            return raw
        self.fired = True
        bad = bytearray(raw)
        bad[-1] ^= 0xFF
        return bytes(bad)

    def restart_hook(self, ev, frame):
        if self.fault == "veto" and self.armed:
            self.fired = True
            return False
        return True


def _spawn_batch(env: Env) -> list:
    env.src.create_region("shared0", 4 * PAGE)
    spec = GuestSpec(2, 12 * PAGE, PAGE, [SharedAttachment("shared0", 0, 4)],
                     files=[FileSpec(3, "/log", 10, policy=ResourcePolicy.FORWARD_TO_SOURCE)])
    return [env.src.spawn(spec) for _ in range(2)]


def _run_injection(strategy, fault: str, target: str | None):
    with Env(commit_timeout=3.0, deadline=2.0) as env:
        inj = Injector(env, fault, target)
        procs = _spawn_batch(env)
        # pre-copy guests keep running; shadow copies replay the same writes
        shadows = {p.pid: p.clone() for p in procs}
        real_workload = proto.run_workload

        def replayed(process, steps, rate, seed):
            run_workload(shadows[process.pid], steps, rate, seed)
            return real_workload(process, steps, rate, seed)

        proto.run_workload = replayed
        try:
            report = env.coordinator.migrate([p.pid for p in procs], env.daemon, strategy,
                                             workload=Workload(2, 2, 5), timeout=20)
            failed = False
        except MigrationFailed as e:
            report, failed = e.report, True
        except HandshakeRejected:
            report, failed = None, True
        finally:
            proto.run_workload = real_workload
        env.daemon.wait_idle()
        digests = {pid: snapshot_digest(shadow) for pid, shadow in shadows.items()}
        time.sleep(0.05)
        state = {
            "failed": failed,
            "fired": inj.fired,
            "seen": inj.seen,
            "src_running": all(p.run_state is RunState.RUNNING for p in procs),
            "src_digests": all(p.run_state is not RunState.REMOVED
                               and snapshot_digest(p) == digests[p.pid] for p in procs),
            "src_removed": sum(p.run_state is RunState.REMOVED for p in procs),
            "dst_residue": len(env.dst.guests) + len(env.dst.regions.regions),
            "dst_running": sum(g.run_state is RunState.RESUMED for g in env.dst.guests.values()),
            "report": report,
        }
    return state


def test_criterion_10_abort_safety(verdict):
    verdict.update(n=10, title="faults at every step boundary leave sources intact, no residue")
    clock = timed(60.0)
    combos = fired = 0
    problems = []
    for strategy in STRATEGIES:
        boundaries = _run_injection(strategy, "none", None)["seen"]
        assert len(boundaries) > 10
        for fault in ("link-cut", "checksum", "veto"):
            for target in boundaries:
                s = _run_injection(strategy, fault, target)
                combos += 1
                fired += s["fired"]
                if s["fired"]:
                    ok = (s["failed"] and s["src_running"] and s["src_digests"]
                          and s["src_removed"] == 0 and s["dst_residue"] == 0)
                else:
                    # the fault had nothing left to act on: the batch must commit cleanly
                    ok = not s["failed"] and s["src_removed"] == 2 and s["dst_running"] == 2
                    # only where no data frame or restart hook remains: the commit point, or a
                    # pull reply, which travels as a command envelope rather than a data frame
                    ok = ok and (target == "coord:commit"
                                 or (fault == "checksum" and target == "dst:page-pull"))
                if not ok:
                    problems.append((strategy.name, fault, target,
                                     {k: v for k, v in s.items() if k not in ("seen", "report")}))
    elapsed, limit = clock()
    verdict["detail"] = f"{combos} injections, {fired} fired, {len(problems)} unsafe, {elapsed:.1f}s"
    assert problems == []
    assert elapsed < limit


# -- 11 -----------------------------------------------------------------------------------


def test_criterion_11_capability_matching(verdict):
    verdict.update(n=11, title="mismatched modules or page size rejected, item named")
    named = []
    with Env(src_modules=["cpu", "mem", "file", "counter"], dst_modules=["cpu", "mem", "file"]) as env:
        proc = env.src.spawn(GuestSpec(1, 4 * PAGE, PAGE))
        with pytest.raises(MigrationFailed) as info:
            env.coordinator.migrate([proc.pid], env.daemon)
        err = info.value.cause
        assert isinstance(err, CapabilityMismatch) and err.item == "counter"
        assert "counter" in str(info.value)
        named.append(err.item)
        assert proc.run_state is RunState.RUNNING and env.dst.guests == {}
    with Env(dst_modules=["cpu", "mem"]) as env:
        proc = env.src.spawn(GuestSpec(1, 4 * PAGE, PAGE))
        with pytest.raises(MigrationFailed) as info:
            env.coordinator.migrate([proc.pid], env.daemon)
        assert isinstance(info.value.cause, CapabilityMismatch) and info.value.cause.item == "file"
        named.append(info.value.cause.item)
    with Env(dst_page_size=8192) as env:
        proc = env.src.spawn(GuestSpec(1, 4 * PAGE, PAGE))
        with pytest.raises(MigrationFailed) as info:
            env.coordinator.migrate([proc.pid], env.daemon)
        err = info.value.cause
        assert isinstance(err, HandshakeRejected) and "page" in err.reason
        assert "4096" in err.item and "8192" in err.item
        named.append(err.item)
        assert proc.run_state is RunState.RUNNING and env.dst.guests == {}
    verdict["detail"] = "; ".join(named)


def test_marker_size_sanity():
    # guards the shared oracle against silent edits
    assert marker() == 35 and PAGE_ON_WIRE == 4136
