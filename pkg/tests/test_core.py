from __future__ import annotations

import threading
import time

import pytest

from helpers import ListSink, event_for
from pmig.core import EventState, Node, ProcessHooks, RequestSpec, run_request
from pmig.errors import (AlreadyTerminal, Busy, EventFrozen, GuestStateError, HookVeto, InvalidCombination,
                         QuiesceTimeout, UnknownPid)
from pmig.guest import GuestSpec, RunState, snapshot_digest
from pmig.strategy import (EventKind, ExecCtx, PostCopyLazy, PreCopy, QuiesceMethod, StopAndCopy,
                           parse_strategy, strategy_label)

SPEC = GuestSpec(2, 8 * 4096, 4096)


def checkpoint_spec(pids, path, **kw):
    return RequestSpec(EventKind.CHECKPOINT, pids, medium="image-file", endpoint=str(path), **kw)


def restart_spec(path, **kw):
    return RequestSpec(EventKind.RESTART, medium="image-file", endpoint=str(path), **kw)


@pytest.mark.parametrize("kind,ctx,quiesce,strategy,medium,ok", [
    (EventKind.MIGRATE, ExecCtx.INTERNAL, QuiesceMethod.ASYNCHRONOUS, StopAndCopy(), "loopback", False),
    (EventKind.MIGRATE, ExecCtx.INTERNAL, QuiesceMethod.SYNCHRONOUS, StopAndCopy(), "loopback", True),
    (EventKind.MIGRATE, ExecCtx.EXTERNAL, QuiesceMethod.ASYNCHRONOUS, PostCopyLazy(), "image-file", False),
    (EventKind.MIGRATE, ExecCtx.EXTERNAL, QuiesceMethod.ASYNCHRONOUS, PreCopy(), "image-file", False),
    (EventKind.MIGRATE, ExecCtx.EXTERNAL, QuiesceMethod.ASYNCHRONOUS, StopAndCopy(), "image-file", False),
    (EventKind.MIGRATE, ExecCtx.EXTERNAL, QuiesceMethod.ASYNCHRONOUS, PostCopyLazy(), "stream", True),
    (EventKind.CHECKPOINT, ExecCtx.EXTERNAL, QuiesceMethod.ASYNCHRONOUS, PostCopyLazy(), "loopback", False),
    (EventKind.CHECKPOINT, ExecCtx.INTERNAL, QuiesceMethod.SYNCHRONOUS, StopAndCopy(), "image-file", True),
    (EventKind.RESTART, ExecCtx.INTERNAL, QuiesceMethod.SYNCHRONOUS, StopAndCopy(), "image-file", False),
])
def test_combination_rules(node, kind, ctx, quiesce, strategy, medium, ok):
    from pmig.core import validate_combination
    spec = RequestSpec(kind, [1], strategy, ctx, quiesce, medium)
    if ok:
        validate_combination(spec, node.media)
    else:
        with pytest.raises(InvalidCombination) as info:
            validate_combination(spec, node.media)
        assert info.value.rule


def test_invalid_combination_creates_no_event(node):
    proc = node.spawn(SPEC)
    with pytest.raises(InvalidCombination):
        node.core.submit_request(RequestSpec(EventKind.MIGRATE, [proc.pid], exec_ctx=ExecCtx.INTERNAL))
    assert node.core.events == {}


def test_unknown_pid_and_busy(node, tmp_path):
    with pytest.raises(UnknownPid):
        node.core.submit_request(checkpoint_spec([99], tmp_path / "x"))
    proc = node.spawn(SPEC)
    node.core.submit_request(RequestSpec(EventKind.MIGRATE, [proc.pid]))
    with pytest.raises(Busy):
        node.core.submit_request(checkpoint_spec([proc.pid], tmp_path / "x"))


def test_strategy_parsing():
    assert parse_strategy("stop-and-copy") == StopAndCopy()
    assert parse_strategy("pre-copy") == PreCopy(5, 16)
    assert parse_strategy("pre-copy:3:8") == PreCopy(3, 8)
    assert parse_strategy("lazy:2") == PostCopyLazy(2)
    assert [strategy_label(s) for s in (StopAndCopy(), PreCopy(), PostCopyLazy())] == \
        ["stop-and-copy", "pre-copy:5:16", "lazy:0"]
    for bad in ("teleport", "pre-copy:0", "lazy:-1"):
        with pytest.raises(ValueError):
            parse_strategy(bad)


@pytest.mark.parametrize("ctx,quiesce", [(ExecCtx.EXTERNAL, QuiesceMethod.ASYNCHRONOUS),
                                          (ExecCtx.INTERNAL, QuiesceMethod.SYNCHRONOUS),
                                          (ExecCtx.EXTERNAL, QuiesceMethod.SYNCHRONOUS)])
def test_checkpoint_then_restart(node, tmp_path, ctx, quiesce):
    proc = node.spawn(SPEC)
    digest = snapshot_digest(proc)
    [ev] = run_request(node, checkpoint_spec([proc.pid], tmp_path / "img", exec_ctx=ctx, quiesce=quiesce))
    assert ev.state is EventState.DONE
    assert proc.run_state is RunState.RUNNING
    if quiesce is QuiesceMethod.SYNCHRONOUS:
        assert proc.barrier_entries == len(proc.threads)
    [rev] = run_request(node, restart_spec(tmp_path / "img"))
    frame = node.guests[rev.pid]
    assert frame.run_state is RunState.RESUMED
    assert snapshot_digest(frame) == digest


def test_event_state_history(node, tmp_path):
    proc = node.spawn(SPEC)
    [ev] = run_request(node, checkpoint_spec([proc.pid], tmp_path / "img"))
    order = sorted(ev.timestamps, key=ev.timestamps.get)
    states = [s for s in order if s in {e.value for e in EventState}]
    assert states == ["prepared", "running", "draining", "done"]


def test_sync_quiesce_with_stuck_thread(node):
    proc = node.spawn(SPEC)
    proc.threads[1].stuck = True
    started = time.monotonic()
    with pytest.raises(QuiesceTimeout):
        node.core.quiesce(proc, QuiesceMethod.SYNCHRONOUS, deadline=0.1)
    assert time.monotonic() - started >= 0.1
    assert proc.run_state is RunState.RUNNING
    assert not any(t.in_barrier for t in proc.threads)


def test_async_quiesce_ignores_stuck_thread(node):
    proc = node.spawn(SPEC)
    proc.threads[0].stuck = True
    node.core.quiesce(proc, QuiesceMethod.ASYNCHRONOUS)
    assert proc.run_state is RunState.QUIESCED
    with pytest.raises(GuestStateError):
        node.core.quiesce(proc, QuiesceMethod.ASYNCHRONOUS)


def test_checkpoint_fails_cleanly_on_quiesce_timeout(tmp_path):
    with Node("n", quiesce_deadline=0.05) as node:
        proc = node.spawn(SPEC)
        proc.threads[0].stuck = True
        rid = node.core.submit_request(checkpoint_spec([proc.pid], tmp_path / "img",
                                                       quiesce=QuiesceMethod.SYNCHRONOUS))
        [ev] = node.core.wait(rid, 5)
        assert ev.state is EventState.FAILED
        assert isinstance(ev.error, QuiesceTimeout)
        assert proc.run_state is RunState.RUNNING


def test_hooks_run_once_each(node, tmp_path):
    calls = []
    hooks = ProcessHooks(setup=lambda ev, p: calls.append("setup"),
                         restart=lambda ev, p: calls.append("restart"),
                         cleanup=lambda ev, p, state: calls.append(("cleanup", state)))
    proc = node.spawn(SPEC)
    run_request(node, checkpoint_spec([proc.pid], tmp_path / "img", hooks=hooks))
    assert calls == ["setup", ("cleanup", EventState.DONE)]
    calls.clear()
    run_request(node, restart_spec(tmp_path / "img", hooks=hooks))
    assert calls == ["setup", "restart", ("cleanup", EventState.DONE)]


def test_restart_hook_veto_destroys_frame(node, tmp_path):
    proc = node.spawn(SPEC)
    run_request(node, checkpoint_spec([proc.pid], tmp_path / "img"))
    before = set(node.guests)
    with pytest.raises(HookVeto):
        run_request(node, restart_spec(tmp_path / "img", hooks=ProcessHooks(restart=lambda ev, p: False)))
    assert set(node.guests) == before


def test_cleanup_exception_does_not_wedge(node, tmp_path):
    def boom(ev, p, state):
        raise RuntimeError("broken destructor")
    proc = node.spawn(SPEC)
    [ev] = run_request(node, checkpoint_spec([proc.pid], tmp_path / "img", hooks=ProcessHooks(cleanup=boom)))
    assert ev.state is EventState.DONE and ev.cleanup_calls == 1


class StalledSink(ListSink):
    def __init__(self, release: threading.Event):
        super().__init__()
        self.release = release

    def pushdata(self, chunk):
        if len(self.chunks) >= 3:
            self.release.wait(5)
        super().pushdata(chunk)


def test_watchdog_freezes_stalled_event_only():
    with Node("n", watchdog_period=0.2, scanner=False) as node:
        stuck, fine = node.spawn(SPEC), node.spawn(SPEC)
        release = threading.Event()
        ev_stuck = event_for(node, pid=stuck.pid)
        ev_stuck.state = EventState.PREPARED  # let checkpoint_worker start it
        ev_fine = event_for(node, pid=fine.pid)
        ev_fine.state = EventState.PREPARED
        result = {}
        worker = threading.Thread(target=lambda: result.setdefault(
            "stuck", node.core.checkpoint_worker(ev_stuck, stuck, StalledSink(release))))
        worker.start()
        assert node.core.checkpoint_worker(ev_fine, fine, ListSink()) is EventState.DONE
        time.sleep(0.3)
        frozen = node.core.watchdog_scan()
        assert frozen == [ev_stuck]
        release.set()
        worker.join(5)
        assert result["stuck"] is EventState.FROZEN
        assert ev_stuck.cleanup_calls == 1
        assert ev_fine.state is EventState.DONE
        assert "frozen" in "".join(ev_stuck.diagnostics.values())


def test_frozen_request_raises(tmp_path):
    with Node("n", watchdog_period=0.1) as node:
        proc = node.spawn(SPEC)
        release = threading.Event()
        hooks = ProcessHooks(setup=lambda ev, p: release.wait(1))
        with pytest.raises(EventFrozen):
            run_request(node, checkpoint_spec([proc.pid], tmp_path / "img", hooks=hooks), timeout=5)
        assert proc.run_state is RunState.RUNNING


def test_abort_prepared_event(node):
    proc = node.spawn(SPEC)
    rid = node.core.submit_request(RequestSpec(EventKind.MIGRATE, [proc.pid]))
    node.core.abort_event(rid)
    [ev] = node.core.request(rid).events
    assert ev.state is EventState.FAILED
    assert proc.run_state is RunState.RUNNING
    with pytest.raises(AlreadyTerminal):
        node.core.abort_event(rid)


def test_events_are_isolated(node, tmp_path):
    a, b = node.spawn(SPEC), node.spawn(SPEC)
    b.threads[0].stuck = True
    node.core.quiesce_deadline = 0.05
    ra = node.core.submit_request(checkpoint_spec([a.pid], tmp_path / "a"))
    rb = node.core.submit_request(checkpoint_spec([b.pid], tmp_path / "b", quiesce=QuiesceMethod.SYNCHRONOUS))
    [ea], [eb] = node.core.wait(ra, 5), node.core.wait(rb, 5)
    assert ea.state is EventState.DONE
    assert eb.state is EventState.FAILED
    assert a.run_state is b.run_state is RunState.RUNNING


def test_status_summary(node, tmp_path):
    proc = node.spawn(SPEC)
    [ev] = run_request(node, checkpoint_spec([proc.pid], tmp_path / "img"))
    status = node.core.status(ev.request_id)
    assert status["kind"] == "checkpoint"
    [summary] = status["events"]
    assert summary["state"] == "done"
    assert summary["progress"]["mem"] == {"done": 8, "total": 8}
