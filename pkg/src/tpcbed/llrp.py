"""Framed binary control protocol between controller and reader.

A reduced reader-control vocabulary over one simple framing:

    offset  size  field
    0       1     protocol version, always 1
    1       2     message type, big-endian
    3       4     message id, big-endian
    7       4     frame length in bytes including this 11-byte header
    11      ...   payload, length - 11 bytes

All integers are big-endian, EPCs travel as 12 raw bytes, strings as a
u16 byte length followed by UTF-8.  RSSI values travel as signed
milli-dBm so frames round-trip bit-exactly.  The full payload layouts
live in docs/wire-format.md, which is the normative description; the
codec here and the golden fixtures in the test suite follow it.

``decode`` is total: any byte string either yields a message or raises
``DecodeError`` with a specific kind, never anything else.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

PROTOCOL_VERSION = 1
HEADER_LEN = 11
MAX_PAYLOAD = 2**32 - 12  # largest payload whose frame length fits in u32
EPC_LEN = 12


class MsgType(enum.IntEnum):
    GET_CAPABILITIES = 1
    CAPABILITIES_RESPONSE = 2
    ADD_ROSPEC = 3
    ADD_ACCESSSPEC = 4
    START_ROSPEC = 5
    STOP_ROSPEC = 6
    RO_ACCESS_REPORT = 7
    KEEPALIVE = 8
    KEEPALIVE_ACK = 9
    ERROR = 10
    SUCCESS = 11


class ErrorCode(enum.IntEnum):
    MALFORMED = 1
    UNKNOWN_ROSPEC = 2
    UNKNOWN_ACCESSSPEC = 3
    BUSY = 4
    BAD_STATE = 5
    UNKNOWN_ANTENNA = 6


class DecodeErrorKind(enum.Enum):
    SHORT_HEADER = "short-header"
    BAD_VERSION = "bad-version"
    LENGTH_MISMATCH = "length-mismatch"
    UNKNOWN_TYPE = "unknown-type"
    MALFORMED_PAYLOAD = "malformed-payload"


class DecodeError(ValueError):
    def __init__(self, kind: DecodeErrorKind, detail: str = ""):
        super().__init__(f"{kind.value}: {detail}" if detail else kind.value)
        self.kind = kind


class EncodeError(ValueError):
    pass


# -- access operation payloads ------------------------------------------


class OpKind(enum.IntEnum):
    READ = 0
    BLOCK_WRITE = 1
    GOTO_BIOS = 2
    CHECKSUM = 3
    COMMIT = 4


@dataclass(frozen=True)
class ReadOp:
    start_address: int
    word_count: int


@dataclass(frozen=True)
class BlockWriteOp:
    start_address: int
    words: tuple[int, ...]


@dataclass(frozen=True)
class GotoBiosOp:
    pass


@dataclass(frozen=True)
class ChecksumOp:
    start_address: int
    byte_length: int


@dataclass(frozen=True)
class CommitOp:
    """Activates a staged image: per-segment checksums plus behavior flags."""

    segments: tuple[tuple[int, int, int], ...]  # (start, byte_length, checksum)
    obeys_goto_bios: bool = True
    responds_to_inventory: bool = True


AccessOp = ReadOp | BlockWriteOp | GotoBiosOp | ChecksumOp | CommitOp


# -- messages -------------------------------------------------------------


@dataclass(frozen=True)
class GetCapabilities:
    msg_id: int


@dataclass(frozen=True)
class CapabilitiesResponse:
    msg_id: int
    model: str
    antenna_ids: tuple[int, ...]


@dataclass(frozen=True)
class AddROSpec:
    msg_id: int
    rospec_id: int
    antenna_ids: tuple[int, ...]
    duration_ms: int
    report_trigger: str = "end"  # "end" | "periodic"
    report_interval_ms: int = 0


@dataclass(frozen=True)
class AddAccessSpec:
    msg_id: int
    accessspec_id: int
    target_epc: bytes
    antenna_ids: tuple[int, ...]  # empty means pick the best link
    max_retries: int
    ops: tuple[AccessOp, ...]


@dataclass(frozen=True)
class StartROSpec:
    msg_id: int
    rospec_id: int


@dataclass(frozen=True)
class StopROSpec:
    msg_id: int
    rospec_id: int


@dataclass(frozen=True)
class TagReportEntry:
    epc: bytes
    antenna_id: int
    read_count: int
    mean_rssi_mdbm: int
    last_rssi_mdbm: int
    first_seen_ms: int
    last_seen_ms: int


@dataclass(frozen=True)
class AccessResultEntry:
    op_kind: int
    epc: bytes
    success: bool
    attempts: int
    data: tuple[int, ...] = ()
    detail: str = ""  # tag nack reason, empty when none


@dataclass(frozen=True)
class ROAccessReport:
    msg_id: int
    tag_reports: tuple[TagReportEntry, ...] = ()
    access_results: tuple[AccessResultEntry, ...] = ()


@dataclass(frozen=True)
class Keepalive:
    msg_id: int


@dataclass(frozen=True)
class KeepaliveAck:
    msg_id: int


@dataclass(frozen=True)
class ErrorMessage:
    msg_id: int
    code: int
    text: str


@dataclass(frozen=True)
class SuccessMessage:
    msg_id: int


Message = (
    GetCapabilities
    | CapabilitiesResponse
    | AddROSpec
    | AddAccessSpec
    | StartROSpec
    | StopROSpec
    | ROAccessReport
    | Keepalive
    | KeepaliveAck
    | ErrorMessage
    | SuccessMessage
)


# -- encoding --------------------------------------------------------------


def _pack_str(text: str) -> bytes:
    raw = text.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise EncodeError("string too long for u16 length prefix")
    return struct.pack(">H", len(raw)) + raw


def _pack_epc(epc: bytes) -> bytes:
    if len(epc) != EPC_LEN:
        raise EncodeError(f"EPC must be {EPC_LEN} bytes, got {len(epc)}")
    return bytes(epc)


def _pack_antennas(ids: tuple[int, ...]) -> bytes:
    if len(ids) > 0xFF:
        raise EncodeError("too many antenna ids")
    return struct.pack(">B", len(ids)) + bytes(ids)


def _pack_op(op: AccessOp) -> bytes:
    if isinstance(op, ReadOp):
        return struct.pack(">BHH", OpKind.READ, op.start_address, op.word_count)
    if isinstance(op, BlockWriteOp):
        return struct.pack(
            ">BHH", OpKind.BLOCK_WRITE, op.start_address, len(op.words)
        ) + struct.pack(f">{len(op.words)}H", *op.words)
    if isinstance(op, GotoBiosOp):
        return struct.pack(">B", OpKind.GOTO_BIOS)
    if isinstance(op, ChecksumOp):
        return struct.pack(">BHH", OpKind.CHECKSUM, op.start_address, op.byte_length)
    if isinstance(op, CommitOp):
        flags = (1 if op.obeys_goto_bios else 0) | (
            2 if op.responds_to_inventory else 0
        )
        out = struct.pack(">BBH", OpKind.COMMIT, flags, len(op.segments))
        for start, length, checksum in op.segments:
            out += struct.pack(">HHH", start, length, checksum)
        return out
    raise EncodeError(f"unknown access op {op!r}")


def _payload_of(msg: Message) -> tuple[MsgType, bytes]:
    if isinstance(msg, GetCapabilities):
        return MsgType.GET_CAPABILITIES, b""
    if isinstance(msg, CapabilitiesResponse):
        return (
            MsgType.CAPABILITIES_RESPONSE,
            _pack_antennas(msg.antenna_ids) + _pack_str(msg.model),
        )
    if isinstance(msg, AddROSpec):
        trigger = {"end": 0, "periodic": 1}.get(msg.report_trigger)
        if trigger is None:
            raise EncodeError(f"unknown report trigger {msg.report_trigger!r}")
        return (
            MsgType.ADD_ROSPEC,
            struct.pack(">I", msg.rospec_id)
            + _pack_antennas(msg.antenna_ids)
            + struct.pack(">IBI", msg.duration_ms, trigger, msg.report_interval_ms),
        )
    if isinstance(msg, AddAccessSpec):
        out = struct.pack(">I", msg.accessspec_id) + _pack_epc(msg.target_epc)
        out += _pack_antennas(msg.antenna_ids)
        out += struct.pack(">HH", msg.max_retries, len(msg.ops))
        for op in msg.ops:
            out += _pack_op(op)
        return MsgType.ADD_ACCESSSPEC, out
    if isinstance(msg, StartROSpec):
        return MsgType.START_ROSPEC, struct.pack(">I", msg.rospec_id)
    if isinstance(msg, StopROSpec):
        return MsgType.STOP_ROSPEC, struct.pack(">I", msg.rospec_id)
    if isinstance(msg, ROAccessReport):
        out = struct.pack(">H", len(msg.tag_reports))
        for entry in msg.tag_reports:
            out += _pack_epc(entry.epc)
            out += struct.pack(
                ">BIiiQQ",
                entry.antenna_id,
                entry.read_count,
                entry.mean_rssi_mdbm,
                entry.last_rssi_mdbm,
                entry.first_seen_ms,
                entry.last_seen_ms,
            )
        out += struct.pack(">H", len(msg.access_results))
        for result in msg.access_results:
            out += struct.pack(">B", result.op_kind)
            out += _pack_epc(result.epc)
            out += struct.pack(">BIH", 1 if result.success else 0, result.attempts,
                               len(result.data))
            out += struct.pack(f">{len(result.data)}H", *result.data)
            out += _pack_str(result.detail)
        return MsgType.RO_ACCESS_REPORT, out
    if isinstance(msg, Keepalive):
        return MsgType.KEEPALIVE, b""
    if isinstance(msg, KeepaliveAck):
        return MsgType.KEEPALIVE_ACK, b""
    if isinstance(msg, ErrorMessage):
        return MsgType.ERROR, struct.pack(">H", msg.code) + _pack_str(msg.text)
    if isinstance(msg, SuccessMessage):
        return MsgType.SUCCESS, b""
    raise EncodeError(f"cannot encode {type(msg).__name__}")


def encode(msg: Message) -> bytes:
    """Serialize a message to one frame.  Deterministic: same message, same bytes."""
    msg_type, payload = _payload_of(msg)
    if len(payload) > MAX_PAYLOAD:
        raise EncodeError("payload too large for the u32 frame length")
    if not 0 <= msg.msg_id <= 0xFFFFFFFF:
        raise EncodeError("msg_id must fit in u32")
    header = struct.pack(
        ">BHII", PROTOCOL_VERSION, msg_type, msg.msg_id, HEADER_LEN + len(payload)
    )
    return header + payload


# -- decoding --------------------------------------------------------------


class _Cursor:
    """Forward-only payload reader raising MALFORMED_PAYLOAD on shortfall."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DecodeError(DecodeErrorKind.MALFORMED_PAYLOAD, "payload truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self.take(8))[0]

    def i32(self) -> int:
        return struct.unpack(">i", self.take(4))[0]

    def words(self, n: int) -> tuple[int, ...]:
        return struct.unpack(f">{n}H", self.take(2 * n))

    def text(self) -> str:
        raw = self.take(self.u16())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise DecodeError(DecodeErrorKind.MALFORMED_PAYLOAD, "bad utf-8") from None

    def antennas(self) -> tuple[int, ...]:
        return tuple(self.take(self.u8()))

    def finish(self) -> None:
        if self.pos != len(self.data):
            raise DecodeError(
                DecodeErrorKind.MALFORMED_PAYLOAD,
                f"{len(self.data) - self.pos} trailing payload bytes",
            )


def _parse_op(cur: _Cursor) -> AccessOp:
    kind = cur.u8()
    if kind == OpKind.READ:
        return ReadOp(cur.u16(), cur.u16())
    if kind == OpKind.BLOCK_WRITE:
        start = cur.u16()
        return BlockWriteOp(start, cur.words(cur.u16()))
    if kind == OpKind.GOTO_BIOS:
        return GotoBiosOp()
    if kind == OpKind.CHECKSUM:
        return ChecksumOp(cur.u16(), cur.u16())
    if kind == OpKind.COMMIT:
        flags = cur.u8()
        segments = tuple(
            (cur.u16(), cur.u16(), cur.u16()) for _ in range(cur.u16())
        )
        return CommitOp(segments, bool(flags & 1), bool(flags & 2))
    raise DecodeError(DecodeErrorKind.MALFORMED_PAYLOAD, f"unknown op kind {kind}")


def _parse_payload(msg_type: int, msg_id: int, cur: _Cursor) -> Message:
    if msg_type == MsgType.GET_CAPABILITIES:
        return GetCapabilities(msg_id)
    if msg_type == MsgType.CAPABILITIES_RESPONSE:
        return CapabilitiesResponse(msg_id, antenna_ids=cur.antennas(), model=cur.text())
    if msg_type == MsgType.ADD_ROSPEC:
        rospec_id = cur.u32()
        antenna_ids = cur.antennas()
        duration = cur.u32()
        trigger = cur.u8()
        interval = cur.u32()
        if trigger not in (0, 1):
            raise DecodeError(
                DecodeErrorKind.MALFORMED_PAYLOAD, f"unknown trigger {trigger}"
            )
        return AddROSpec(
            msg_id,
            rospec_id,
            antenna_ids,
            duration,
            "end" if trigger == 0 else "periodic",
            interval,
        )
    if msg_type == MsgType.ADD_ACCESSSPEC:
        spec_id = cur.u32()
        epc = cur.take(EPC_LEN)
        antenna_ids = cur.antennas()
        max_retries = cur.u16()
        ops = tuple(_parse_op(cur) for _ in range(cur.u16()))
        return AddAccessSpec(msg_id, spec_id, epc, antenna_ids, max_retries, ops)
    if msg_type == MsgType.START_ROSPEC:
        return StartROSpec(msg_id, cur.u32())
    if msg_type == MsgType.STOP_ROSPEC:
        return StopROSpec(msg_id, cur.u32())
    if msg_type == MsgType.RO_ACCESS_REPORT:
        tag_reports = []
        for _ in range(cur.u16()):
            epc = cur.take(EPC_LEN)
            tag_reports.append(
                TagReportEntry(
                    epc=epc,
                    antenna_id=cur.u8(),
                    read_count=cur.u32(),
                    mean_rssi_mdbm=cur.i32(),
                    last_rssi_mdbm=cur.i32(),
                    first_seen_ms=cur.u64(),
                    last_seen_ms=cur.u64(),
                )
            )
        access_results = []
        for _ in range(cur.u16()):
            op_kind = cur.u8()
            epc = cur.take(EPC_LEN)
            success = cur.u8() != 0
            attempts = cur.u32()
            data = cur.words(cur.u16())
            detail = cur.text()
            access_results.append(
                AccessResultEntry(op_kind, epc, success, attempts, data, detail)
            )
        return ROAccessReport(msg_id, tuple(tag_reports), tuple(access_results))
    if msg_type == MsgType.KEEPALIVE:
        return Keepalive(msg_id)
    if msg_type == MsgType.KEEPALIVE_ACK:
        return KeepaliveAck(msg_id)
    if msg_type == MsgType.ERROR:
        return ErrorMessage(msg_id, code=cur.u16(), text=cur.text())
    if msg_type == MsgType.SUCCESS:
        return SuccessMessage(msg_id)
    raise DecodeError(DecodeErrorKind.UNKNOWN_TYPE, f"message type {msg_type}")


def _parse_header(data: bytes) -> tuple[int, int, int]:
    """Returns (msg_type, msg_id, frame_length) after version/shape checks."""
    if len(data) < HEADER_LEN:
        raise DecodeError(
            DecodeErrorKind.SHORT_HEADER, f"{len(data)} bytes, need {HEADER_LEN}"
        )
    version, msg_type, msg_id, length = struct.unpack(">BHII", data[:HEADER_LEN])
    if version != PROTOCOL_VERSION:
        raise DecodeError(DecodeErrorKind.BAD_VERSION, f"version {version}")
    if length < HEADER_LEN:
        raise DecodeError(
            DecodeErrorKind.LENGTH_MISMATCH, f"declared length {length} < header"
        )
    return msg_type, msg_id, length


def decode(data: bytes) -> Message:
    """Decode exactly one frame; the declared length must match the input.

    Error kinds, in checking order: short-header, bad-version,
    length-mismatch, unknown-type, malformed-payload.
    """
    msg_type, msg_id, length = _parse_header(data)
    if length != len(data):
        raise DecodeError(
            DecodeErrorKind.LENGTH_MISMATCH,
            f"declared {length}, got {len(data)} bytes",
        )
    if msg_type not in MsgType._value2member_map_:
        raise DecodeError(DecodeErrorKind.UNKNOWN_TYPE, f"message type {msg_type}")
    cur = _Cursor(data[HEADER_LEN:])
    msg = _parse_payload(msg_type, msg_id, cur)
    cur.finish()
    return msg


class FrameStream:
    """Incremental decoder for back-to-back frames on a byte stream.

    ``feed`` buffers bytes and returns everything that completed: decoded
    messages, or DecodeError instances for frames that were well-framed
    but undecodable (unknown type, bad payload) so a server can answer
    them and keep the connection.  Framing-level corruption (bad version,
    impossible length) raises, because frame boundaries are lost then.
    """

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Message | DecodeError]:
        self._buf.extend(data)
        out: list[Message | DecodeError] = []
        while len(self._buf) >= HEADER_LEN:
            _, _, length = _parse_header(bytes(self._buf[:HEADER_LEN]))
            if len(self._buf) < length:
                break
            frame = bytes(self._buf[:length])
            del self._buf[:length]  # consume exactly the declared frame
            try:
                out.append(decode(frame))
            except DecodeError as err:
                out.append(err)
        return out

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)
