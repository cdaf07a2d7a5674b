"""Declarative workload configs (INI) for the CLI and the benchmark.

Schema::

    [guest]
    threads = 2              ; threads per process, >= 1
    address_space = 1MiB     ; bytes; suffixes KiB, MiB, GiB accepted
    page_size = 4096
    footprint = true         ; false spawns clean zero pages
    count = 1                ; identical processes to spawn

    [region:<id>]            ; a shared region, attached by every process
    length = 1MiB
    base_page = 0            ; first page of the mapping
    pages = 256              ; mapped page count (default: length / page_size)

    [file:<fd>]
    path = /data/log
    offset = 0
    mode = r | w | rw
    policy = local | transfer | forward

    [workload]
    steps = 4
    write_rate = 4
    seed = 0
"""

from __future__ import annotations

import configparser
import os
import re
from dataclasses import dataclass, field

from .errors import GuestSpecError
from .guest import DEFAULT_PAGE_SIZE, FileMode, FileSpec, GuestSpec, ResourcePolicy, SharedAttachment

_SIZE = re.compile(r"^\s*(\d+)\s*([KMG]i?B?|B)?\s*$", re.IGNORECASE)
_UNITS = {"": 1, "b": 1, "k": 1 << 10, "m": 1 << 20, "g": 1 << 30}


def parse_size(text: str | int) -> int:
    """``4096``, ``64KiB``, ``1MiB``, ``2G`` -> bytes (binary multiples)."""
    if isinstance(text, int):
        return text
    m = _SIZE.match(text)
    if m is None:
        raise GuestSpecError(f"bad size {text!r}")
    unit = (m.group(2) or "").lower()[:1]
    return int(m.group(1)) * _UNITS[unit]


@dataclass
class RegionSpec:
    region_id: str
    length: int
    base_page: int = 0
    pages: int | None = None


@dataclass
class WorkloadConfig:
    guest: GuestSpec
    count: int = 1
    regions: list[RegionSpec] = field(default_factory=list)
    steps: int = 4
    write_rate: int = 4
    seed: int = 0


def load_config(source: str | os.PathLike) -> WorkloadConfig:
    """Read a config from a path, or from INI text when given a string containing a newline."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    if isinstance(source, str) and "\n" in source:
        parser.read_string(source)
    else:
        path = os.fspath(source)
        if not os.path.exists(path):
            raise GuestSpecError(f"no config file {path}")
        parser.read(path)
    return parse_config(parser)


def parse_config(parser: configparser.ConfigParser) -> WorkloadConfig:
    g = parser["guest"] if parser.has_section("guest") else {}
    page_size = parse_size(g.get("page_size", str(DEFAULT_PAGE_SIZE)))
    regions: list[RegionSpec] = []
    files: list[FileSpec] = []
    for name in parser.sections():
        sec = parser[name]
        if name.startswith("region:"):
            length = parse_size(sec.get("length", "0"))
            pages = sec.get("pages")
            regions.append(RegionSpec(name.split(":", 1)[1], length, sec.getint("base_page", 0),
                                      int(pages) if pages else None))
        elif name.startswith("file:"):
            try:
                files.append(FileSpec(int(name.split(":", 1)[1]), sec.get("path", ""),
                                      sec.getint("offset", 0), FileMode(sec.get("mode", "r")),
                                      ResourcePolicy(sec.get("policy", "transfer"))))
            except ValueError as e:
                raise GuestSpecError(f"[{name}]: {e}") from None
        elif name not in ("guest", "workload"):
            raise GuestSpecError(f"unknown config section [{name}]")
    attachments = [SharedAttachment(r.region_id, r.base_page,
                                    r.pages if r.pages is not None else r.length // page_size)
                   for r in regions]
    try:
        spec = GuestSpec(
            thread_count=int(g.get("threads", "1")),
            address_space_size_bytes=parse_size(g.get("address_space", "0")),
            page_size=page_size,
            shared_attachments=attachments,
            files=files,
            footprint=str(g.get("footprint", "true")).lower() in ("1", "true", "yes", "on"))
        count = int(g.get("count", "1"))
        w = parser["workload"] if parser.has_section("workload") else {}
        steps, rate, seed = int(w.get("steps", "4")), int(w.get("write_rate", "4")), int(w.get("seed", "0"))
    except ValueError as e:
        raise GuestSpecError(str(e)) from None
    if count < 1:
        raise GuestSpecError("count must be >= 1")
    return WorkloadConfig(spec, count, regions, steps, rate, seed)


def spawn_from_config(node, config: WorkloadConfig) -> list:
    """Create the config's regions on ``node`` (if missing) and spawn its processes."""
    for r in config.regions:
        if r.region_id not in node.regions:
            node.create_region(r.region_id, r.length)
    return [node.spawn(config.guest) for _ in range(config.count)]
