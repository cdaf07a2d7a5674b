"""Transfer media: framed, checksummed chunks over pluggable transports.

Wire format of a data chunk (all integers big-endian)::

    offset  size  field
    0       4     magic "PMCK"
    4       2     version (u16)
    6       16    subsystem id, UTF-8, zero padded
    22      1     kind: 1 Entity, 2 SharedRef, 3 EndOfSubsystem, 4 EndOfProcess
    23      4     sequence (u32), per (event, subsystem), starts at 0
    27      4     payload length (u32)
    31      n     payload
    31+n    4     CRC-32 over bytes [0, 31+n)

Commands travel on the reverse path of a channel, wrapped in an envelope::

    "PMCM" | flags u8 | correlation u32 | opcode u8 | target subsystem 16 |
    token 16 | payload length u32 | payload | CRC-32

flags: 0 one-way, 1 request, 2 reply, 3 error reply (payload is UTF-8 text).

An image file is ``b"PMIMG1\\n"`` followed by the chunk stream, terminated by
an EndOfProcess chunk.
"""

from __future__ import annotations

import collections
import enum
import itertools
import logging
import os
import socket
import struct
import threading
import time
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterator

from .errors import (BackpressureTimeout, ChannelClosed, ChecksumMismatch, ConnectRefused,
                     MediumError, ProtocolError, Timeout, TruncatedStream, UnknownMedium,
                     UnsupportedCommand, UsageError)

log = logging.getLogger(__name__)

CHUNK_MAGIC = b"PMCK"
CONTROL_MAGIC = b"PMCT"
COMMAND_MAGIC = b"PMCM"
IMAGE_MAGIC = b"PMIMG1\n"
WIRE_VERSION = 1

CHUNK_HEADER = struct.Struct(">4sH16sBII")
CRC = struct.Struct(">I")
FRAME_OVERHEAD = CHUNK_HEADER.size + CRC.size
MAX_PAYLOAD = 64 << 20

ENVELOPE_HEADER = struct.Struct(">4sBIB16s16sI")

DEFAULT_BUFFER_SIZE = 64 * 1024
DEFAULT_WINDOW = 32
DEFAULT_DEADLINE = 5.0
DEFAULT_DATA_PORT = 7142


class ChunkKind(enum.IntEnum):
    ENTITY = 1
    SHARED_REF = 2
    END_OF_SUBSYSTEM = 3
    END_OF_PROCESS = 4


class Opcode(enum.IntEnum):
    STEP_ACK = 1
    SET_BUFFER_SIZE = 2
    PAGE_PULL_REQUEST = 3
    PAGE_PULL_REPLY = 4
    RESEND_REQUEST = 5
    RESIDUAL_FILE_OP = 6
    ABORT = 7


ONE_WAY_OPCODES = {Opcode.STEP_ACK, Opcode.SET_BUFFER_SIZE, Opcode.ABORT}


class Role(enum.Enum):
    SENDER = "sender"
    RECEIVER = "receiver"


def pad16(name: str | bytes) -> bytes:
    raw = name.encode() if isinstance(name, str) else name
    if len(raw) > 16:
        raise ValueError(f"identifier {raw!r} longer than 16 bytes")
    return raw.ljust(16, b"\0")


def unpad16(raw: bytes) -> str:
    return raw.rstrip(b"\0").decode()


@dataclass(frozen=True)
class Chunk:
    subsystem_id: str
    kind: ChunkKind
    sequence: int
    payload: bytes = b""
    version: int = WIRE_VERSION
    magic: bytes = CHUNK_MAGIC

    def encode(self) -> bytes:
        head = CHUNK_HEADER.pack(self.magic, self.version, pad16(self.subsystem_id),
                                 int(self.kind), self.sequence, len(self.payload))
        body = head + self.payload
        return body + CRC.pack(zlib.crc32(body))

    @property
    def wire_size(self) -> int:
        return FRAME_OVERHEAD + len(self.payload)

    @classmethod
    def decode(cls, frame: bytes, position: int | None = None,
               magic: bytes = CHUNK_MAGIC) -> Chunk:
        if len(frame) < FRAME_OVERHEAD:
            raise TruncatedStream("frame shorter than header")
        mg, version, sid, kind, seq, plen = CHUNK_HEADER.unpack_from(frame)
        if len(frame) != FRAME_OVERHEAD + plen:
            raise ChecksumMismatch(seq, position)
        (crc,) = CRC.unpack_from(frame, len(frame) - CRC.size)
        if zlib.crc32(memoryview(frame)[:-CRC.size]) != crc:
            raise ChecksumMismatch(seq, position)
        if mg != magic:
            raise ProtocolError(f"bad magic {mg!r}")
        if version != WIRE_VERSION:
            raise ProtocolError(f"unsupported wire version {version}")
        try:
            kind = ChunkKind(kind) if magic == CHUNK_MAGIC else kind
        except ValueError:
            raise ProtocolError(f"unknown chunk kind {kind}") from None
        return cls(unpad16(sid), kind, seq, bytes(frame[CHUNK_HEADER.size:-CRC.size]), version, mg)


def read_frame(read_exact: Callable[[int], bytes]) -> bytes:
    """Read one PMCK/PMCT frame given a function returning exactly n bytes (or fewer at EOF)."""
    head = read_exact(CHUNK_HEADER.size)
    if not head:
        raise EOFError
    if len(head) < CHUNK_HEADER.size:
        raise TruncatedStream("stream ended inside a chunk header")
    plen = CHUNK_HEADER.unpack(head)[5]
    if plen > MAX_PAYLOAD:
        raise ProtocolError(f"payload length {plen} exceeds limit")
    rest = read_exact(plen + CRC.size)
    if len(rest) < plen + CRC.size:
        raise TruncatedStream("stream ended inside a chunk")
    return head + rest


def read_frame_after(read_exact: Callable[[int], bytes], head4: bytes) -> bytes:
    """Like :func:`read_frame` when the 4 magic bytes were already consumed."""
    rest = read_exact(CHUNK_HEADER.size - 4)
    if len(rest) < CHUNK_HEADER.size - 4:
        raise TruncatedStream("stream ended inside a chunk header")
    head = head4 + rest
    plen = CHUNK_HEADER.unpack(head)[5]
    if plen > MAX_PAYLOAD:
        raise ProtocolError(f"payload length {plen} exceeds limit")
    tail = read_exact(plen + CRC.size)
    if len(tail) < plen + CRC.size:
        raise TruncatedStream("stream ended inside a chunk")
    return head + tail


@dataclass(frozen=True)
class CommandMessage:
    opcode: Opcode
    target_subsystem: str = ""
    token: bytes = bytes(16)
    payload: bytes = b""


class EnvelopeFlag(enum.IntEnum):
    ONE_WAY = 0
    REQUEST = 1
    REPLY = 2
    ERROR = 3


def encode_envelope(flag: EnvelopeFlag, corr: int, msg: CommandMessage) -> bytes:
    body = ENVELOPE_HEADER.pack(COMMAND_MAGIC, int(flag), corr, int(msg.opcode),
                                pad16(msg.target_subsystem), msg.token, len(msg.payload)) + msg.payload
    return body + CRC.pack(zlib.crc32(body))


def decode_envelope(frame: bytes) -> tuple[EnvelopeFlag, int, CommandMessage]:
    if len(frame) < ENVELOPE_HEADER.size + CRC.size:
        raise ProtocolError("short command frame")
    magic, flag, corr, opcode, target, token, plen = ENVELOPE_HEADER.unpack_from(frame)
    if magic != COMMAND_MAGIC or len(frame) != ENVELOPE_HEADER.size + plen + CRC.size:
        raise ProtocolError("malformed command frame")
    (crc,) = CRC.unpack_from(frame, len(frame) - CRC.size)
    if zlib.crc32(memoryview(frame)[:-CRC.size]) != crc:
        raise ProtocolError("command frame checksum mismatch")
    try:
        op = Opcode(opcode)
        fl = EnvelopeFlag(flag)
    except ValueError:
        raise ProtocolError(f"unknown opcode {opcode}") from None
    payload = bytes(frame[ENVELOPE_HEADER.size:-CRC.size])
    return fl, corr, CommandMessage(op, unpad16(target), token, payload)


def read_envelope(read_exact: Callable[[int], bytes], head4: bytes) -> bytes:
    rest = read_exact(ENVELOPE_HEADER.size - 4)
    if len(rest) < ENVELOPE_HEADER.size - 4:
        raise TruncatedStream("stream ended inside a command header")
    plen = ENVELOPE_HEADER.unpack(head4 + rest)[6]
    if plen > MAX_PAYLOAD:
        raise ProtocolError("command payload too large")
    tail = read_exact(plen + CRC.size)
    if len(tail) < plen + CRC.size:
        raise TruncatedStream("stream ended inside a command")
    return head4 + rest + tail


@dataclass
class ChannelStats:
    chunks_pushed: int = 0
    bytes_pushed: int = 0
    chunks_popped: int = 0
    bytes_popped: int = 0
    commands_sent: int = 0
    commands_received: int = 0
    acks_received: int = 0
    max_in_flight: int = 0
    by_kind: collections.Counter = field(default_factory=collections.Counter)


# called with (position, frame, is_resend); returns the bytes to put on the wire
FrameHook = Callable[[int, bytes, bool], bytes]
CommandHandler = Callable[[CommandMessage], "CommandMessage | None"]


class Channel:
    """One endpoint of a simplex data path plus its duplex command path.

    Subclasses provide the transport primitives ``_transmit``, ``_receive``,
    ``_send_command`` and ``_sync``.
    """

    medium_id = "abstract"
    supports_commands = True

    def __init__(self, role: Role, *, buffer_size: int = DEFAULT_BUFFER_SIZE,
                 window: int | None = DEFAULT_WINDOW, deadline: float = DEFAULT_DEADLINE,
                 backpressure_deadline: float | None = None, retain: bool = True):
        self.role = role
        self.buffer_size = buffer_size
        self.window = window
        self.deadline = deadline
        self.backpressure_deadline = deadline if backpressure_deadline is None else backpressure_deadline
        self.stats = ChannelStats()
        self.command_handler: CommandHandler | None = None
        self.frame_hook: FrameHook | None = None
        self.closed = False
        self.aborted = False
        self.peer_aborted = False
        self.end_seen = False
        self._retain = retain and role is Role.SENDER
        self._retained: dict[int, bytes] = {}
        self._pending: list[bytes] = []
        self._pending_bytes = 0
        self._next_position = 0
        self._transmitted = 0
        self._acked = 0
        self._popped = 0
        self._ack_every = max(1, (window or 2) // 2)
        self._cond = threading.Condition()
        self._corr = itertools.count(1)

    # -- transport primitives -------------------------------------------------

    def _transmit(self, frames: list[bytes]) -> None:
        raise NotImplementedError

    def _receive(self, deadline: float | None) -> bytes | None:
        """Next raw frame; None when the peer closed cleanly. Raise Timeout on deadline."""
        raise NotImplementedError

    def _send_command(self, flag: EnvelopeFlag, msg: CommandMessage) -> CommandMessage | None:
        raise UnsupportedCommand(f"{self.medium_id} medium has no command path")

    def _sync(self) -> None:
        pass

    # -- data path and commands -----------------------------------------------

    def pushdata(self, chunk: Chunk) -> None:
        self._check_open()
        if self.role is not Role.SENDER:
            raise UsageError("pushdata on the receiving side of a simplex channel")
        frame = chunk.encode()
        position = self._next_position
        self._next_position += 1
        if self._retain:
            self._retained[position] = frame
        if self.frame_hook is not None:
            frame = self.frame_hook(position, frame, False)
        self._pending.append(frame)
        self._pending_bytes += len(frame)
        self.stats.chunks_pushed += 1
        self.stats.bytes_pushed += chunk.wire_size
        self.stats.by_kind[chunk.kind] += 1
        if self._pending_bytes >= self.buffer_size:
            self._drain()

    def popdata(self, deadline: float | None = None) -> Chunk:
        frame = self.popframe(deadline)
        return self.decode(frame, self._popped - 1)

    def popframe(self, deadline: float | None = None) -> bytes:
        if self.role is not Role.RECEIVER:
            raise UsageError("popdata on the sending side of a simplex channel")
        if self.closed or self.aborted:
            raise ChannelClosed(f"{self.medium_id} channel closed")
        wait = self.deadline if deadline is None else deadline
        frame = self._receive(None if wait is None else time.monotonic() + wait)
        if frame is None:
            if self.end_seen:
                raise ChannelClosed("stream finished")
            raise TruncatedStream("peer closed before EndOfProcess")
        self._popped += 1
        self.stats.chunks_popped += 1
        self.stats.bytes_popped += len(frame)
        if self.window and self._popped % self._ack_every == 0:
            self._ack()
        if len(frame) > 22 and frame[22] == ChunkKind.END_OF_PROCESS:
            self.end_seen = True
        return frame

    def decode(self, frame: bytes, position: int) -> Chunk:
        return Chunk.decode(frame, position)

    def command(self, message: CommandMessage) -> CommandMessage | None:
        self._check_open(allow_closed_data=True)
        self.stats.commands_sent += 1
        flag = EnvelopeFlag.ONE_WAY if message.opcode in ONE_WAY_OPCODES else EnvelopeFlag.REQUEST
        return self._send_command(flag, message)

    def flush(self) -> None:
        self._check_open()
        if self.role is Role.SENDER:
            self._drain()
        self._sync()

    # -- lifecycle --------------------------------------------------------------

    def close(self) -> None:
        if self.closed:
            return
        if self.role is Role.SENDER and not self.aborted:
            try:
                self._drain()
                self._sync()
            except MediumError:
                pass
        self.closed = True
        with self._cond:
            self._cond.notify_all()
        self._close_transport()

    def abort(self) -> None:
        """Tear the channel down and wake any blocked caller."""
        self.aborted = True
        with self._cond:
            self._cond.notify_all()
        self._close_transport()

    def _close_transport(self) -> None:
        pass

    def _check_open(self, allow_closed_data: bool = False) -> None:
        if self.aborted or (self.closed and not allow_closed_data):
            raise ChannelClosed(f"{self.medium_id} channel closed")

    # -- flow control and recovery ------------------------------------------------

    @property
    def in_flight(self) -> int:
        return self._transmitted - self._acked

    def set_buffer_size(self, size: int) -> None:
        if size < 1:
            raise ValueError("buffer size must be positive")
        self.buffer_size = size

    def _drain(self) -> None:
        while self._pending:
            if self.window:
                limit = time.monotonic() + self.backpressure_deadline
                with self._cond:
                    while self.in_flight >= self.window:
                        if self.aborted or self.closed:
                            raise ChannelClosed("channel closed while waiting for acks")
                        remaining = limit - time.monotonic()
                        if remaining <= 0:
                            raise BackpressureTimeout(
                                f"{self.in_flight} chunks unacknowledged for {self.backpressure_deadline}s")
                        self._cond.wait(min(remaining, 0.05))
                room = self.window - self.in_flight
            else:
                room = len(self._pending)
            batch, self._pending = self._pending[:room], self._pending[room:]
            self._pending_bytes -= sum(map(len, batch))
            self._transmit(batch)
            self._transmitted += len(batch)
            self.stats.max_in_flight = max(self.stats.max_in_flight, self.in_flight)

    def _ack(self) -> None:
        try:
            self._send_command(EnvelopeFlag.ONE_WAY, CommandMessage(
                Opcode.STEP_ACK, payload=struct.pack(">Q", self._popped)))
        except (UnsupportedCommand, ChannelClosed):
            pass

    def wait_acked(self, timeout: float | None = None) -> None:
        """Block until the peer has acknowledged every transmitted chunk."""
        limit = time.monotonic() + (self.deadline if timeout is None else timeout)
        with self._cond:
            while self._acked < self._transmitted:
                if self.aborted or self.peer_aborted or self.closed:
                    raise ChannelClosed("channel closed while waiting for acks")
                remaining = limit - time.monotonic()
                if remaining <= 0:
                    raise Timeout(f"{self._transmitted - self._acked} chunks never acknowledged")
                self._cond.wait(min(remaining, 0.05))

    def request_resend(self, position: int) -> Chunk:
        reply = self.command(CommandMessage(Opcode.RESEND_REQUEST, payload=struct.pack(">Q", position)))
        if reply is None:
            raise ProtocolError("empty resend reply")
        return Chunk.decode(reply.payload, position)

    def handle_command(self, flag: EnvelopeFlag, msg: CommandMessage) -> CommandMessage | None:
        """Process a command arriving from the peer endpoint."""
        self.stats.commands_received += 1
        op = msg.opcode
        if op is Opcode.STEP_ACK:
            (count,) = struct.unpack(">Q", msg.payload)
            with self._cond:
                self._acked = max(self._acked, count)
                self.stats.acks_received += 1
                self._cond.notify_all()
            return None
        if op is Opcode.SET_BUFFER_SIZE:
            (size,) = struct.unpack(">I", msg.payload)
            self.set_buffer_size(size)
            return None
        if op is Opcode.RESEND_REQUEST and self.role is Role.SENDER:
            (position,) = struct.unpack(">Q", msg.payload)
            frame = self._retained.get(position)
            if frame is None:
                raise ProtocolError(f"chunk at position {position} not retained")
            if self.frame_hook is not None:
                frame = self.frame_hook(position, frame, True)
            return CommandMessage(Opcode.RESEND_REQUEST, msg.target_subsystem, msg.token, frame)
        if op is Opcode.ABORT:
            self.peer_aborted = True
            if self.command_handler is not None:
                self.command_handler(msg)
            with self._cond:
                self._cond.notify_all()
            return None
        if self.command_handler is None:
            raise ProtocolError(f"no handler for {op.name}")
        return self.command_handler(msg)


# -- loopback ----------------------------------------------------------------------


class _Pipe:
    def __init__(self) -> None:
        self.frames: collections.deque[bytes] = collections.deque()
        self.cond = threading.Condition()
        self.sender_closed = False
        self.broken = False
        self.ends: dict[Role, LoopbackChannel] = {}


class LoopbackChannel(Channel):
    """In-process medium; frames move through a shared deque."""

    medium_id = "loopback"

    def __init__(self, role: Role, pipe: _Pipe, **opts):
        super().__init__(role, **opts)
        self._pipe = pipe
        pipe.ends[role] = self

    @property
    def peer(self) -> LoopbackChannel | None:
        other = Role.RECEIVER if self.role is Role.SENDER else Role.SENDER
        return self._pipe.ends.get(other)

    def _transmit(self, frames: list[bytes]) -> None:
        pipe = self._pipe
        with pipe.cond:
            if pipe.broken:
                raise ChannelClosed("loopback link is down")
            pipe.frames.extend(frames)
            pipe.cond.notify_all()

    def _receive(self, deadline: float | None) -> bytes | None:
        pipe = self._pipe
        with pipe.cond:
            while not pipe.frames:
                if pipe.broken or self.aborted:
                    raise ChannelClosed("loopback link is down")
                if pipe.sender_closed:
                    return None
                if deadline is None:
                    pipe.cond.wait(0.1)
                    continue
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise Timeout("no chunk before deadline")
                pipe.cond.wait(min(remaining, 0.1))
            return pipe.frames.popleft()

    def _send_command(self, flag: EnvelopeFlag, msg: CommandMessage) -> CommandMessage | None:
        peer = self.peer
        if peer is None or self._pipe.broken or peer.aborted:
            raise ChannelClosed("loopback peer unavailable")
        # round-trip through the byte encoding so both media share one path
        fl, _, decoded = decode_envelope(encode_envelope(flag, 0, msg))
        reply = peer.handle_command(fl, decoded)
        if fl is EnvelopeFlag.ONE_WAY or reply is None:
            return None
        return decode_envelope(encode_envelope(EnvelopeFlag.REPLY, 0, reply))[2]

    def _close_transport(self) -> None:
        pipe = self._pipe
        with pipe.cond:
            if self.aborted:
                pipe.broken = True
            if self.role is Role.SENDER:
                pipe.sender_closed = True
            pipe.cond.notify_all()

    def cut(self) -> None:
        """Simulate a link failure affecting both ends."""
        with self._pipe.cond:
            self._pipe.broken = True
            self._pipe.cond.notify_all()
        for end in list(self._pipe.ends.values()):
            with end._cond:
                end._cond.notify_all()


def loopback_pair(**opts) -> tuple[LoopbackChannel, LoopbackChannel]:
    pipe = _Pipe()
    return LoopbackChannel(Role.SENDER, pipe, **opts), LoopbackChannel(Role.RECEIVER, pipe, **opts)


# -- image file ----------------------------------------------------------------------


class ImageFileChannel(Channel):
    """Offline checkpoint image; there is no peer, hence no command path."""

    medium_id = "image-file"
    supports_commands = False

    def __init__(self, role: Role, path: str | os.PathLike, **opts):
        opts.setdefault("window", None)
        opts["window"] = None
        super().__init__(role, **opts)
        self.path = os.fspath(path)
        if role is Role.SENDER:
            self._fh = open(self.path, "wb")
            self._fh.write(IMAGE_MAGIC)
            self._fh.flush()
        else:
            try:
                self._fh = open(self.path, "rb")
            except FileNotFoundError:
                raise MediumError(f"no image at {self.path}") from None
            if self._fh.read(len(IMAGE_MAGIC)) != IMAGE_MAGIC:
                self._fh.close()
                raise ProtocolError(f"{self.path} is not a PMIMG1 image")

    def _transmit(self, frames: list[bytes]) -> None:
        self._fh.writelines(frames)

    def _sync(self) -> None:
        if self.role is Role.SENDER:
            self._fh.flush()
            os.fsync(self._fh.fileno())

    def _receive(self, deadline: float | None) -> bytes | None:
        try:
            return read_frame(self._fh.read)
        except EOFError:
            return None

    def _send_command(self, flag: EnvelopeFlag, msg: CommandMessage) -> CommandMessage | None:
        if msg.opcode is Opcode.SET_BUFFER_SIZE:
            (size,) = struct.unpack(">I", msg.payload)
            self.set_buffer_size(size)
            return None
        raise UnsupportedCommand(f"image-file medium does not support {msg.opcode.name}")

    def _close_transport(self) -> None:
        if not self._fh.closed:
            self._fh.close()


# -- TCP stream ------------------------------------------------------------------------


def recv_exact(sock: socket.socket) -> Callable[[int], bytes]:
    def read(n: int) -> bytes:
        parts = []
        while n:
            try:
                data = sock.recv(n)
            except OSError:
                data = b""
            if not data:
                break
            parts.append(data)
            n -= len(data)
        return b"".join(parts)
    return read


class StreamChannel(Channel):
    """TCP stream medium. A reader thread demultiplexes chunks and commands."""

    medium_id = "stream"

    def __init__(self, role: Role, sock: socket.socket, **opts):
        super().__init__(role, **opts)
        self._sock = sock
        self._send_lock = threading.Lock()
        self._inbound: collections.deque[bytes] = collections.deque()
        self._eof = False
        self._replies: dict[int, tuple[EnvelopeFlag, CommandMessage]] = {}
        self._reader = threading.Thread(target=self._read_loop, daemon=True,
                                        name=f"stream-{role.value}")
        self._reader.start()

    def _sendall(self, data: bytes) -> None:
        try:
            with self._send_lock:
                self._sock.sendall(data)
        except OSError as e:
            raise ChannelClosed(f"stream write failed: {e}") from None

    def _transmit(self, frames: list[bytes]) -> None:
        self._sendall(b"".join(frames))

    def _read_loop(self) -> None:
        read = recv_exact(self._sock)
        try:
            while True:
                head = read(4)
                if len(head) < 4:
                    break
                if head == COMMAND_MAGIC:
                    frame = read_envelope(read, head)
                    self._on_envelope(frame)
                    continue
                if head != CHUNK_MAGIC:
                    raise ProtocolError(f"unexpected magic {head!r} on stream")
                frame = read_frame_after(read, head)
                with self._cond:
                    self._inbound.append(frame)
                    self._cond.notify_all()
        except (MediumError, OSError) as e:
            log.debug("stream reader stopped: %s", e)
        finally:
            with self._cond:
                self._eof = True
                self._cond.notify_all()

    def _on_envelope(self, frame: bytes) -> None:
        flag, corr, msg = decode_envelope(frame)
        if flag in (EnvelopeFlag.REPLY, EnvelopeFlag.ERROR):
            with self._cond:
                self._replies[corr] = (flag, msg)
                self._cond.notify_all()
            return
        if flag is EnvelopeFlag.ONE_WAY:
            try:
                self.handle_command(flag, msg)
            except Exception as e:  # noqa: BLE001 -- one-way commands have nobody to report to
                log.warning("one-way command %s failed: %s", msg.opcode.name, e)
            return
        threading.Thread(target=self._answer, args=(corr, msg), daemon=True).start()

    def _answer(self, corr: int, msg: CommandMessage) -> None:
        try:
            reply = self.handle_command(EnvelopeFlag.REQUEST, msg)
            if reply is None:
                reply = CommandMessage(msg.opcode, msg.target_subsystem, msg.token)
            frame = encode_envelope(EnvelopeFlag.REPLY, corr, reply)
        except Exception as e:  # noqa: BLE001 -- propagated to the requester as an error reply
            frame = encode_envelope(EnvelopeFlag.ERROR, corr, CommandMessage(
                msg.opcode, msg.target_subsystem, msg.token, f"{type(e).__name__}: {e}".encode()))
        try:
            self._sendall(frame)
        except ChannelClosed:
            pass

    def _receive(self, deadline: float | None) -> bytes | None:
        with self._cond:
            while not self._inbound:
                if self.aborted:
                    raise ChannelClosed("stream aborted")
                if self._eof:
                    return None
                if deadline is None:
                    self._cond.wait(0.1)
                    continue
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise Timeout("no chunk before deadline")
                self._cond.wait(min(remaining, 0.1))
            return self._inbound.popleft()

    def _send_command(self, flag: EnvelopeFlag, msg: CommandMessage) -> CommandMessage | None:
        corr = next(self._corr)
        self._sendall(encode_envelope(flag, corr, msg))
        if flag is EnvelopeFlag.ONE_WAY:
            return None
        limit = time.monotonic() + self.deadline
        with self._cond:
            while corr not in self._replies:
                if self._eof or self.aborted:
                    raise ChannelClosed("stream closed awaiting reply")
                remaining = limit - time.monotonic()
                if remaining <= 0:
                    raise Timeout(f"no reply to {msg.opcode.name}")
                self._cond.wait(min(remaining, 0.1))
            rflag, reply = self._replies.pop(corr)
        if rflag is EnvelopeFlag.ERROR:
            raise ProtocolError(reply.payload.decode(errors="replace"))
        return reply

    def _close_transport(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()

    def close(self) -> None:
        if self.role is Role.SENDER and not self.aborted and not self.closed:
            super().close()
            return
        super().close()


def connect_stream(host: str, port: int, hello: bytes = b"", timeout: float = DEFAULT_DEADLINE,
                   **opts) -> StreamChannel:
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except OSError as e:
        raise ConnectRefused(f"cannot connect to {host}:{port}: {e}") from None
    sock.settimeout(None)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    if hello:
        sock.sendall(hello)
    return StreamChannel(Role.SENDER, sock, **opts)


def accept_stream(host: str, port: int, timeout: float = DEFAULT_DEADLINE, **opts) -> StreamChannel:
    """Listen on (host, port) for a single sender and return the receiving end."""
    with socket.create_server((host, port), reuse_port=False) as server:
        server.settimeout(timeout)
        try:
            sock, _ = server.accept()
        except socket.timeout:
            raise Timeout(f"no sender connected to {host}:{port}") from None
    sock.settimeout(None)
    return StreamChannel(Role.RECEIVER, sock, **opts)


# -- medium manager -----------------------------------------------------------------------


@dataclass
class MediumDescriptor:
    medium_id: str
    opener: Callable[..., Channel]
    buffer_size: int = DEFAULT_BUFFER_SIZE
    live: bool = True  # has a live peer and command path


class LoopbackHub:
    """Rendezvous for loopback endpoints by name."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._pipes: dict[str, _Pipe] = {}

    def open(self, name: str, role: Role, **opts) -> LoopbackChannel:
        with self._lock:
            pipe = self._pipes.get(name)
            if pipe is None:
                pipe = self._pipes[name] = _Pipe()
            if role in pipe.ends:
                raise UsageError(f"loopback endpoint {name!r} already has a {role.value}")
            chan = LoopbackChannel(role, pipe, **opts)
            if len(pipe.ends) == 2:
                del self._pipes[name]
            return chan


# nodes living in one process meet here, so loopback links can join them
SHARED_HUB = LoopbackHub()


class MediumManager:
    """Registry of transfer media available on a node."""

    def __init__(self, hub: LoopbackHub | None = None) -> None:
        self._media: dict[str, MediumDescriptor] = {}
        self.hub = hub or SHARED_HUB
        self.register(MediumDescriptor("loopback", self._open_loopback))
        self.register(MediumDescriptor("image-file", self._open_image, live=False))
        self.register(MediumDescriptor("stream", self._open_stream))

    def register(self, descriptor: MediumDescriptor) -> None:
        self._media[descriptor.medium_id] = descriptor

    def unregister(self, medium_id: str) -> None:
        self._media.pop(medium_id, None)

    def get(self, medium_id: str) -> MediumDescriptor:
        try:
            return self._media[medium_id]
        except KeyError:
            raise UnknownMedium(f"unknown medium {medium_id!r}") from None

    def ids(self) -> list[str]:
        return sorted(self._media)

    def open_channel(self, medium_id: str, endpoint, role: Role, **opts) -> Channel:
        desc = self.get(medium_id)
        opts.setdefault("buffer_size", desc.buffer_size)
        return desc.opener(endpoint, role, **opts)

    def _open_loopback(self, endpoint: str, role: Role, **opts) -> Channel:
        return self.hub.open(str(endpoint), role, **opts)

    @staticmethod
    def _open_image(endpoint, role: Role, **opts) -> Channel:
        return ImageFileChannel(role, endpoint, **opts)

    @staticmethod
    def _open_stream(endpoint, role: Role, **opts) -> Channel:
        host, port = endpoint
        if role is Role.SENDER:
            hello = opts.pop("hello", b"")
            return connect_stream(host, port, hello, **opts)
        return accept_stream(host, port, **opts)


class ChunkSource:
    """Peekable reader over a receiving channel."""

    def __init__(self, channel: Channel):
        self.channel = channel
        self._peeked: Chunk | None = None
        self._raw: bytes | None = None
        self.position = -1

    def prime(self, deadline: float | None = None) -> None:
        """Wait for the first frame without decoding it."""
        if self._peeked is None and self._raw is None:
            self._raw = self.channel.popframe(deadline)

    def peek(self, deadline: float | None = None) -> Chunk:
        if self._peeked is None:
            frame = self._raw if self._raw is not None else self.channel.popframe(deadline)
            self._raw = None
            self.position += 1
            self._peeked = self.channel.decode(frame, self.position)
        return self._peeked

    def pop(self, deadline: float | None = None) -> Chunk:
        chunk = self.peek(deadline)
        self._peeked = None
        return chunk

    def recover(self, position: int) -> Chunk:
        """Replace a corrupted chunk by asking the sender to resend it."""
        chunk = self.channel.request_resend(position)
        self._peeked = chunk
        return chunk

    def __iter__(self) -> Iterator[Chunk]:
        while True:
            try:
                yield self.pop()
            except ChannelClosed:
                return
