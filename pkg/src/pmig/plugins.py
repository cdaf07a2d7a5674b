"""Third-party subsystems shipped as examples of the plugin contract."""

from __future__ import annotations

import struct

from .guest import GuestProcess
from .medium import ChunkKind
from .subsystems import Subsystem, emit

_COUNTER = struct.Struct(">Q")


class CounterSubsystem(Subsystem):
    """A per-process event counter kept outside the core process state.

    Processes without counter state contribute no entities, only the end
    marker.
    """

    subsystem_id = "counter"
    order_key = 40

    @staticmethod
    def bump(process: GuestProcess, by: int = 1) -> int:
        raw = process.module_state.get("counter")
        value = (_COUNTER.unpack(raw)[0] if raw else 0) + by
        process.module_state["counter"] = _COUNTER.pack(value)
        return value

    def plan(self, event, process):
        if event.mem_mode == "warm" or "counter" not in process.module_state:
            return []
        return ["value"]

    def emit_item(self, event, process, sink, item):
        emit(event, sink, self.subsystem_id, ChunkKind.ENTITY, process.module_state["counter"])

    def restore(self, event, process, chunk):
        _COUNTER.unpack(chunk.payload)
        process.module_state["counter"] = chunk.payload


PLUGINS = {"counter": CounterSubsystem}
