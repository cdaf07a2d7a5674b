"""Small shared builders for tests."""

from __future__ import annotations

from pmig.core import EventContext, Node, RequestSpec
from pmig.medium import ChunkSource, loopback_pair
from pmig.strategy import EventKind


class ListSink:
    """Collects chunks; stands in for a channel's sender side."""

    def __init__(self):
        self.chunks = []

    def pushdata(self, chunk):
        self.chunks.append(chunk)

    def flush(self):
        pass

    def of(self, subsystem_id):
        return [c for c in self.chunks if c.subsystem_id == subsystem_id]


def event_for(node: Node, kind: EventKind = EventKind.CHECKPOINT, pid: int = 0,
              is_source: bool = True, process=None) -> EventContext:
    spec = RequestSpec(kind, [pid] if pid else [])
    request = node.core.new_request(spec)
    ev = node.core.new_event(request, pid=pid, is_source=is_source, process=process)
    node.core.start(ev)
    return ev


def source_of(chunks) -> ChunkSource:
    tx, rx = loopback_pair(window=None)
    for c in chunks:
        tx.pushdata(c)
    tx.close()
    return ChunkSource(rx)


def checkpoint_all(node: Node, proc, ev=None) -> ListSink:
    ev = ev or event_for(node, pid=proc.pid, process=proc)
    sink = ListSink()
    node.core.checkpoint_sections(ev, proc, sink)
    return sink
