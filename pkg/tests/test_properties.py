from __future__ import annotations

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from helpers import checkpoint_all, event_for, source_of
from oracles import precopy_rounds, replay_writes, same_state, stop_and_copy_bytes
from pmig.core import Node
from pmig.errors import ChecksumMismatch
from pmig.guest import FileSpec, GuestSpec, run_workload, snapshot_digest
from pmig.medium import Chunk, ChunkKind
from pmig.proto import Coordinator, Daemon, Workload
from pmig.strategy import EventKind, PostCopyLazy, PreCopy, StopAndCopy, parse_strategy, strategy_label

FAST = settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
SLOW = settings(max_examples=8, deadline=None, suppress_health_check=[HealthCheck.too_slow])

ids = st.text(st.characters(min_codepoint=97, max_codepoint=122), min_size=0, max_size=16)
chunks = st.builds(Chunk, ids, st.sampled_from(list(ChunkKind)), st.integers(0, 2**32 - 1),
                   st.binary(max_size=300))
paths = st.text(st.characters(min_codepoint=97, max_codepoint=122), min_size=1, max_size=20).map(
    lambda s: "/" + s)
specs = st.builds(
    lambda threads, pages, fds, footprint: GuestSpec(
        threads, pages * 4096, 4096, files=[FileSpec(i, p, off) for i, (p, off) in enumerate(fds)],
        footprint=footprint),
    st.integers(1, 4), st.integers(0, 24),
    st.lists(st.tuples(paths, st.integers(0, 2**40)), max_size=3), st.booleans())


@FAST
@given(chunks)
def test_chunk_round_trip(chunk):
    raw = chunk.encode()
    assert len(raw) == chunk.wire_size
    assert Chunk.decode(raw) == chunk


@FAST
@given(chunks, st.data())
def test_any_flipped_byte_is_detected(chunk, data):
    raw = bytearray(chunk.encode())
    i = data.draw(st.integers(0, len(raw) - 1))
    raw[i] ^= data.draw(st.integers(1, 255))
    with pytest.raises(ChecksumMismatch):
        Chunk.decode(bytes(raw))


@FAST
@given(specs)
def test_checkpoint_restart_identity(spec):
    with Node("p", scanner=False) as node:
        proc = node.spawn(spec)
        sink = checkpoint_all(node, proc)
        frame = node.new_frame(4096)
        ev = event_for(node, EventKind.RESTART, is_source=False, process=frame)
        node.core.restore_stream(ev, frame, source_of(sink.chunks))
        assert same_state(frame, proc)
        assert snapshot_digest(frame) == snapshot_digest(proc)


@FAST
@given(specs)
def test_stream_size_matches_oracle(spec):
    with Node("p", scanner=False) as node:
        proc = node.spawn(spec)
        sink = checkpoint_all(node, proc)
        pages = spec.address_space_size_bytes // 4096
        expected = stop_and_copy_bytes(pages, 4096, spec.thread_count, [f.path for f in spec.files],
                                       zero_pages=0 if spec.footprint else pages)
        assert sum(c.wire_size for c in sink.chunks) == expected


@FAST
@given(st.integers(1, 64), st.integers(0, 6), st.integers(0, 6), st.integers(0, 10**6))
def test_workload_writes_match_replay(pages, steps, rate, seed):
    with Node("p", scanner=False) as node:
        proc = node.spawn(GuestSpec(1, pages * 4096, 4096))
        dirty = run_workload(proc, steps, rate, seed)
        assert dirty == set(replay_writes(list(range(pages)), steps, rate, seed))


@FAST
@given(st.one_of(st.just(StopAndCopy()),
                 st.builds(PreCopy, st.integers(1, 50), st.integers(0, 500)),
                 st.builds(PostCopyLazy, st.integers(0, 64))))
def test_strategy_label_round_trip(strategy):
    assert parse_strategy(strategy_label(strategy)) == strategy


@SLOW
@given(st.integers(8, 48), st.integers(1, 4), st.integers(1, 4), st.integers(0, 10**6),
       st.integers(1, 5), st.integers(0, 12))
def test_pre_copy_rounds_match_oracle(pages, steps, rate, seed, rounds, threshold):
    src, dst = Node("s", scanner=False), Node("d", scanner=False)
    daemon, coordinator = Daemon(dst), Coordinator(src)
    try:
        proc = src.spawn(GuestSpec(1, pages * 4096, 4096))
        report = coordinator.migrate([proc.pid], daemon, PreCopy(rounds, threshold),
                                     workload=Workload(steps, rate, seed))
        expected = precopy_rounds(list(range(pages)), steps, rate, seed, rounds, threshold)
        assert report.processes[0].round_pages == expected
        frame = dst.guests[report.processes[0].dest_pid]
        assert same_state(frame, proc)
    finally:
        coordinator.close()
        daemon.wait_idle()
        daemon.close()
