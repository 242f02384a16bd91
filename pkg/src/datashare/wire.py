"""Length-prefixed binary framing shared by the server, clients and tokens.

A frame is ``len(4, BE) || opcode(1) || fields``, where ``len`` counts the
opcode and fields, and every field is ``len(4, BE) || bytes``.  Responses use
opcode ``0x80 | request opcode`` and carry a status byte as their first field.
"""
import struct
from enum import IntEnum

MAX_FRAME = 16 * 1024 * 1024
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")


class Op(IntEnum):
    BB_BROADCAST = 0x01
    BB_READ = 0x02
    PH_PUT = 0x03
    PH_GET = 0x04
    MONITOR = 0x05


RESPONSE = 0x80


class Status(IntEnum):
    OK = 0
    NOT_FOUND = 1
    COLLISION = 2
    BAD_LENGTH = 3
    OVERSIZE = 4
    MALFORMED = 5


class MonitorKind(IntEnum):
    BULK = 0
    FEED = 1


class FrameError(ValueError):
    pass


def u32(n):
    return _U32.pack(n)


def u64(n):
    return _U64.pack(n)


def read_u64(b):
    if len(b) != 8:
        raise FrameError("expected 8-byte integer")
    return _U64.unpack(b)[0]


def pack_fields(fields):
    out = []
    for f in fields:
        out.append(_U32.pack(len(f)))
        out.append(bytes(f))
    return b"".join(out)


def unpack_fields(data, expected=None):
    fields = []
    pos = 0
    n = len(data)
    while pos < n:
        if pos + 4 > n:
            raise FrameError("truncated field length")
        (ln,) = _U32.unpack_from(data, pos)
        pos += 4
        if pos + ln > n:
            raise FrameError("truncated field")
        fields.append(bytes(data[pos:pos + ln]))
        pos += ln
    if expected is not None and len(fields) != expected:
        raise FrameError(f"expected {expected} fields, got {len(fields)}")
    return fields


def encode_frame(opcode, fields=()):
    body = bytes([opcode]) + pack_fields(fields)
    return _U32.pack(len(body)) + body


def decode_body(body):
    if not body:
        raise FrameError("empty frame")
    return body[0], unpack_fields(body[1:])


def decode_frame(frame):
    if len(frame) < 5:
        raise FrameError("short frame")
    (ln,) = _U32.unpack_from(frame)
    if ln != len(frame) - 4:
        raise FrameError("frame length mismatch")
    return decode_body(frame[4:])


def response(op, status, fields=()):
    return encode_frame(RESPONSE | int(op), [bytes([int(status)]), *fields])


def split_response(op, frame_op, fields):
    if frame_op != RESPONSE | int(op):
        raise FrameError(f"unexpected response opcode {frame_op:#x}")
    if not fields or len(fields[0]) != 1:
        raise FrameError("response missing status")
    return Status(fields[0][0]), fields[1:]


async def read_frame(reader, max_frame=MAX_FRAME):
    """Read one frame body from an asyncio StreamReader; None on clean EOF."""
    import asyncio
    try:
        head = await reader.readexactly(4)
    except asyncio.IncompleteReadError as e:
        if not e.partial:
            return None
        raise FrameError("truncated frame header") from None
    (ln,) = _U32.unpack(head)
    if ln == 0 or ln > max_frame:
        raise FrameError(f"bad frame length {ln}")
    return await reader.readexactly(ln)


def recv_exact(sock, n):
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("connection closed")
        buf += chunk
    return bytes(buf)


def recv_frame(sock, max_frame=MAX_FRAME):
    (ln,) = _U32.unpack(recv_exact(sock, 4))
    if ln == 0 or ln > max_frame:
        raise FrameError(f"bad frame length {ln}")
    return recv_exact(sock, ln)
