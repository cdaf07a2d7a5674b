"""A layered process checkpoint/restart and migration framework over simulated guests."""

from .core import EventContext, EventState, Node, ProcessHooks, RequestSpec, run_request
from .guest import GuestProcess, GuestSpec, ResourcePolicy, run_workload, snapshot_digest
from .proto import Coordinator, Daemon, DaemonServer, MigrationFailed, MigrationReport, Workload
from .strategy import EventKind, ExecCtx, PostCopyLazy, PreCopy, QuiesceMethod, StopAndCopy

__all__ = [
    "Coordinator", "Daemon", "DaemonServer", "EventContext", "EventKind", "EventState", "ExecCtx",
    "GuestProcess", "GuestSpec", "MigrationFailed", "MigrationReport", "Node", "PostCopyLazy",
    "PreCopy", "ProcessHooks", "QuiesceMethod", "RequestSpec", "ResourcePolicy", "StopAndCopy",
    "Workload", "run_request", "run_workload", "snapshot_digest",
]

__version__ = "0.1.0"
