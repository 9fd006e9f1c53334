"""Binary wire protocol for the frame-streaming service.

Every message is a fixed 10-byte header followed by the payload::

    magic    4 bytes  0x43 0x43 0x52 0x31 ("CCR1")
    version  u8       always 1
    msg_type u8       see MSG_* constants
    length   u32 LE   payload byte count

All integers are little endian. Payload layouts:

FRAME::

    frame_id u64, timestamp_us u64, width u32, height u32, encoding u8,
    pixel data (RAW_RGB8: exactly width*height*3 bytes, row major; JPEG:
    a complete JPEG stream)

DETECTIONS::

    frame_id u64, fallback_used u8, stage1_us u32, stage2_us u32,
    total_us u32, count u16, then per detection:
    class_id u16, confidence f32, cx f32, cy f32, w f32, h f32
    (box is full-frame normalized)

STATS_RESP::

    frames_received u64, frames_processed u64, frames_dropped u64,
    fps f64, then p50/p95/p99 f64 for stage1, stage2 and total latency
    (microseconds), 104 bytes total

ERROR::

    code u16, message_length u16, utf-8 message

PING/PONG carry an arbitrary payload that PONG echoes back; STATS_REQ is
empty.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .errors import ProtocolError

MAGIC = b"CCR1"
VERSION = 1

MSG_FRAME = 1
MSG_DETECTIONS = 2
MSG_PING = 3
MSG_PONG = 4
MSG_STATS_REQ = 5
MSG_STATS_RESP = 6
MSG_ERROR = 7

MESSAGE_TYPES = frozenset(
    [MSG_FRAME, MSG_DETECTIONS, MSG_PING, MSG_PONG, MSG_STATS_REQ, MSG_STATS_RESP, MSG_ERROR]
)

ENC_RAW_RGB8 = 0
ENC_JPEG = 1

ERR_BAD_MAGIC = 1
ERR_BAD_VERSION = 2
ERR_UNKNOWN_TYPE = 3
ERR_OVERSIZED = 4
ERR_MALFORMED = 5
ERR_INTERNAL = 6

DEFAULT_MAX_PAYLOAD = 32 * 1024 * 1024

_HEADER = struct.Struct("<4sBBI")
_FRAME_HEAD = struct.Struct("<QQIIB")
_DETS_HEAD = struct.Struct("<QBIIIH")
_DET_RECORD = struct.Struct("<Hfffff")
_STATS = struct.Struct("<QQQ10d")
_ERROR_HEAD = struct.Struct("<HH")

HEADER_SIZE = _HEADER.size


@dataclass(frozen=True)
class FramePayload:
    frame_id: int
    timestamp_us: int
    width: int
    height: int
    encoding: int
    data: bytes

    def __post_init__(self):
        if self.encoding == ENC_RAW_RGB8 and len(self.data) != self.width * self.height * 3:
            raise ProtocolError(
                f"RAW_RGB8 length {len(self.data)} != {self.width}x{self.height}x3"
            )


@dataclass(frozen=True)
class DetectionRecord:
    class_id: int
    confidence: float
    cx: float
    cy: float
    w: float
    h: float


@dataclass(frozen=True)
class DetectionsPayload:
    frame_id: int
    fallback_used: bool
    stage1_us: int
    stage2_us: int
    total_us: int
    detections: tuple[DetectionRecord, ...]


@dataclass(frozen=True)
class StatsPayload:
    frames_received: int
    frames_processed: int
    frames_dropped: int
    fps: float
    stage1_p50: float
    stage1_p95: float
    stage1_p99: float
    stage2_p50: float
    stage2_p95: float
    stage2_p99: float
    total_p50: float
    total_p95: float
    total_p99: float


@dataclass(frozen=True)
class ErrorPayload:
    code: int
    message: str


def encode_message(msg_type: int, payload: bytes = b"") -> bytes:
    return _HEADER.pack(MAGIC, VERSION, msg_type, len(payload)) + payload


def decode_header(header: bytes) -> tuple[int, int]:
    """Returns (msg_type, payload_len). Raises ProtocolError on bad magic/version."""
    if len(header) != HEADER_SIZE:
        raise ProtocolError(f"short header: {len(header)} bytes")
    magic, version, msg_type, length = _HEADER.unpack(header)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic: {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported protocol version: {version}")
    return msg_type, length


def encode_frame(p: FramePayload) -> bytes:
    head = _FRAME_HEAD.pack(p.frame_id, p.timestamp_us, p.width, p.height, p.encoding)
    return head + p.data


def decode_frame(payload: bytes) -> FramePayload:
    if len(payload) < _FRAME_HEAD.size:
        raise ProtocolError(f"FRAME payload too short: {len(payload)} bytes")
    frame_id, ts, width, height, encoding = _FRAME_HEAD.unpack_from(payload)
    data = payload[_FRAME_HEAD.size:]
    if encoding not in (ENC_RAW_RGB8, ENC_JPEG):
        raise ProtocolError(f"unknown frame encoding: {encoding}")
    return FramePayload(frame_id, ts, width, height, encoding, data)


def encode_detections(p: DetectionsPayload) -> bytes:
    parts = [
        _DETS_HEAD.pack(
            p.frame_id,
            1 if p.fallback_used else 0,
            p.stage1_us,
            p.stage2_us,
            p.total_us,
            len(p.detections),
        )
    ]
    for d in p.detections:
        parts.append(_DET_RECORD.pack(d.class_id, d.confidence, d.cx, d.cy, d.w, d.h))
    return b"".join(parts)


def decode_detections(payload: bytes) -> DetectionsPayload:
    if len(payload) < _DETS_HEAD.size:
        raise ProtocolError(f"DETECTIONS payload too short: {len(payload)} bytes")
    frame_id, fallback, s1, s2, total, count = _DETS_HEAD.unpack_from(payload)
    expected = _DETS_HEAD.size + count * _DET_RECORD.size
    if len(payload) != expected:
        raise ProtocolError(
            f"DETECTIONS payload length {len(payload)} != expected {expected} for count {count}"
        )
    records = []
    for i in range(count):
        offset = _DETS_HEAD.size + i * _DET_RECORD.size
        class_id, conf, cx, cy, w, h = _DET_RECORD.unpack_from(payload, offset)
        records.append(DetectionRecord(class_id, conf, cx, cy, w, h))
    return DetectionsPayload(frame_id, bool(fallback), s1, s2, total, tuple(records))


def encode_stats(p: StatsPayload) -> bytes:
    return _STATS.pack(
        p.frames_received,
        p.frames_processed,
        p.frames_dropped,
        p.fps,
        p.stage1_p50,
        p.stage1_p95,
        p.stage1_p99,
        p.stage2_p50,
        p.stage2_p95,
        p.stage2_p99,
        p.total_p50,
        p.total_p95,
        p.total_p99,
    )


def decode_stats(payload: bytes) -> StatsPayload:
    if len(payload) != _STATS.size:
        raise ProtocolError(f"STATS_RESP payload must be {_STATS.size} bytes, got {len(payload)}")
    return StatsPayload(*_STATS.unpack(payload))


def encode_error(p: ErrorPayload) -> bytes:
    msg = p.message.encode("utf-8")
    return _ERROR_HEAD.pack(p.code, len(msg)) + msg


def decode_error(payload: bytes) -> ErrorPayload:
    if len(payload) < _ERROR_HEAD.size:
        raise ProtocolError(f"ERROR payload too short: {len(payload)} bytes")
    code, msg_len = _ERROR_HEAD.unpack_from(payload)
    msg = payload[_ERROR_HEAD.size:]
    if len(msg) != msg_len:
        raise ProtocolError(f"ERROR message length {len(msg)} != declared {msg_len}")
    return ErrorPayload(code, msg.decode("utf-8"))


def read_exact(read, n: int) -> bytes:
    """Read exactly n bytes with a recv-like callable; ProtocolError on EOF."""
    chunks = []
    remaining = n
    while remaining > 0:
        chunk = read(remaining)
        if not chunk:
            raise ProtocolError(f"stream ended with {remaining} of {n} bytes unread")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_message(
    read, max_payload: int = DEFAULT_MAX_PAYLOAD, eof_ok: bool = False
) -> tuple[int, bytes] | None:
    """Read one framed message; raises ProtocolError on framing problems.

    With eof_ok=True a stream that ends cleanly between messages yields
    None instead of an error.
    """
    first = read(HEADER_SIZE)
    if not first:
        if eof_ok:
            return None
        raise ProtocolError("stream ended before header")
    header = first if len(first) == HEADER_SIZE else first + read_exact(read, HEADER_SIZE - len(first))
    msg_type, length = decode_header(header)
    if length > max_payload:
        raise ProtocolError(f"payload of {length} bytes exceeds cap {max_payload}")
    payload = read_exact(read, length) if length else b""
    return msg_type, payload
