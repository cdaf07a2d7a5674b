"""Migration strategies and the small enums shared by control and protocol code."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Union


class EventKind(enum.Enum):
    CHECKPOINT = "checkpoint"
    RESTART = "restart"
    MIGRATE = "migrate"


class ExecCtx(enum.Enum):
    INTERNAL = "internal"
    EXTERNAL = "external"


class QuiesceMethod(enum.Enum):
    SYNCHRONOUS = "sync"
    ASYNCHRONOUS = "async"


@dataclass(frozen=True)
class StopAndCopy:
    name = "stop-and-copy"
    live = False


@dataclass(frozen=True)
class PreCopy:
    max_rounds: int = 5
    dirty_threshold: int = 16
    name = "pre-copy"
    live = True

    def __post_init__(self) -> None:
        if self.max_rounds < 1:
            raise ValueError("pre-copy needs max_rounds >= 1")
        if self.dirty_threshold < 0:
            raise ValueError("dirty_threshold must be >= 0")


@dataclass(frozen=True)
class PostCopyLazy:
    prefetch: int = 0
    name = "lazy"
    live = True

    def __post_init__(self) -> None:
        if self.prefetch < 0:
            raise ValueError("prefetch must be >= 0")


Strategy = Union[StopAndCopy, PreCopy, PostCopyLazy]


def parse_strategy(text: str) -> Strategy:
    """``stop-and-copy``, ``pre-copy[:rounds[:threshold]]`` or ``lazy[:prefetch]``."""
    name, *args = text.strip().lower().split(":")
    nums = [int(a) for a in args]
    if name in ("stop-and-copy", "stop", "sac"):
        return StopAndCopy()
    if name in ("pre-copy", "precopy"):
        return PreCopy(*nums)
    if name in ("lazy", "post-copy", "postcopy"):
        return PostCopyLazy(*nums)
    raise ValueError(f"unknown strategy {text!r}")


def strategy_label(strategy: Strategy) -> str:
    if isinstance(strategy, PreCopy):
        return f"pre-copy:{strategy.max_rounds}:{strategy.dirty_threshold}"
    if isinstance(strategy, PostCopyLazy):
        return f"lazy:{strategy.prefetch}"
    return "stop-and-copy"
