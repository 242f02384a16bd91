import pytest
from hypothesis import given, strategies as st

from datashare import wire
from datashare.wire import FrameError, Op, Status


@given(st.integers(0, 255), st.lists(st.binary(max_size=64), max_size=6))
def test_frame_roundtrip(op, fields):
    frame = wire.encode_frame(op, fields)
    assert wire.decode_frame(frame) == (op, fields)


def test_frame_layout():
    frame = wire.encode_frame(Op.PH_GET, [b"ab"])
    assert frame == b"\x00\x00\x00\x07" + b"\x04" + b"\x00\x00\x00\x02ab"


def test_truncated_frames():
    frame = wire.encode_frame(Op.PH_PUT, [b"x" * 32, b"y" * 10])
    for cut in (1, 3, 4, 8, len(frame) - 1):
        with pytest.raises(FrameError):
            wire.decode_frame(frame[:cut])
    with pytest.raises(FrameError):
        wire.decode_body(b"")
    # field length points past the end
    with pytest.raises(FrameError):
        wire.unpack_fields(b"\x00\x00\x00\x09abc")
    with pytest.raises(FrameError):
        wire.unpack_fields(b"\x00\x00")


def test_unpack_expected_count():
    data = wire.pack_fields([b"a", b"b"])
    assert wire.unpack_fields(data, 2) == [b"a", b"b"]
    with pytest.raises(FrameError):
        wire.unpack_fields(data, 3)


def test_response_split():
    frame = wire.response(Op.PH_GET, Status.NOT_FOUND)
    op, fields = wire.decode_frame(frame)
    assert op == 0x84
    st_, rest = wire.split_response(Op.PH_GET, op, fields)
    assert st_ is Status.NOT_FOUND and rest == []
    with pytest.raises(FrameError):
        wire.split_response(Op.PH_PUT, op, fields)
    with pytest.raises(FrameError):
        wire.split_response(Op.PH_GET, op, [])


def test_u64():
    assert wire.read_u64(wire.u64(2**63 + 5)) == 2**63 + 5
    with pytest.raises(FrameError):
        wire.read_u64(b"\x00" * 7)
