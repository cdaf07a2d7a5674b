"""Exception hierarchy shared by every layer of the migration framework."""

from __future__ import annotations


class MigrationError(Exception):
    """Base class for all framework errors."""


# guest model

class GuestSpecError(MigrationError):
    pass


class GuestStateError(MigrationError):
    """Operation not legal in the process's current run state."""


class PageFault(MigrationError):
    def __init__(self, pid: int, page_number: int):
        super().__init__(f"page fault: pid {pid} page {page_number} not resident")
        self.pid = pid
        self.page_number = page_number


class IncompleteState(MigrationError):
    pass


# subsystem layer

class DuplicateId(MigrationError):
    pass


class NotFound(MigrationError):
    pass


class RegistryBusy(MigrationError):
    pass


class UnknownSubsystem(MigrationError):
    def __init__(self, subsystem_id: str):
        super().__init__(f"unknown subsystem {subsystem_id!r}")
        self.subsystem_id = subsystem_id


class SubsystemFailure(MigrationError):
    pass


# medium layer

class MediumError(MigrationError):
    pass


class ChannelClosed(MediumError):
    pass


class BackpressureTimeout(MediumError):
    pass


class Timeout(MediumError):
    pass


class TruncatedStream(MediumError):
    pass


class ChecksumMismatch(MediumError):
    def __init__(self, sequence: int, position: int | None = None):
        where = f" (channel position {position})" if position is not None else ""
        super().__init__(f"checksum mismatch at chunk sequence {sequence}{where}")
        self.sequence = sequence
        self.position = position


class ProtocolError(MediumError):
    pass


class UsageError(MediumError):
    """Wrong side of a simplex channel, or similar API misuse."""


class UnsupportedCommand(MediumError):
    pass


class ConnectRefused(MediumError):
    pass


class UnknownMedium(MigrationError):
    pass


# core control

class InvalidCombination(MigrationError):
    def __init__(self, rule: str):
        super().__init__(f"invalid combination: {rule}")
        self.rule = rule


class UnknownPid(MigrationError):
    pass


class Busy(MigrationError):
    pass


class QuiesceTimeout(MigrationError):
    pass


class AlreadyTerminal(MigrationError):
    pass


class HookVeto(MigrationError):
    pass


class EventFrozen(MigrationError):
    pass


class EventFailed(MigrationError):
    pass


# protocol

class HandshakeRejected(MigrationError):
    def __init__(self, reason: str, item: str = ""):
        super().__init__(reason if not item else f"{reason}: {item}")
        self.reason = reason
        self.item = item


class CapabilityMismatch(HandshakeRejected):
    def __init__(self, item: str):
        super().__init__("capability mismatch", item)


class VersionMismatch(HandshakeRejected):
    def __init__(self, item: str):
        super().__init__("version mismatch", item)


class RejectedByPolicy(HandshakeRejected):
    def __init__(self, item: str):
        super().__init__("rejected by policy", item)


class SourceGone(MigrationError):
    pass


class LinkDown(MediumError):
    """The node-pair control link is gone."""


class PortBusy(MigrationError):
    """A listening port is already taken."""
