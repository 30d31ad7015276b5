import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vfladmm.transport.wire import (HEADER_SIZE, FrameBuffer, IncompleteFrame, Kind, Message, ProtocolError,
                                    decode, decode_prefix, encode)

floats = st.floats(allow_nan=True, allow_infinity=True, width=64)


def test_shutdown_is_header_only():
    frame = encode(Message(Kind.SHUTDOWN, 0))
    assert len(frame) == HEADER_SIZE == 14
    assert frame[:2] == b"VA" and frame[2] == 1 and frame[3] == Kind.SHUTDOWN
    assert struct.unpack_from("<I", frame, 10)[0] == 0


def test_push_share_two_values():
    msg = Message(Kind.PUSH_SHARE, 3, 1, (np.array([1.0, -1.0]),))
    frame = encode(msg)
    assert struct.unpack_from("<I", frame, 10)[0] == 16
    assert struct.unpack_from("<I", frame, 4)[0] == 3
    assert struct.unpack_from("<H", frame, 8)[0] == 1
    assert frame[14:] == np.array([1.0, -1.0], dtype="<f8").tobytes()
    back = decode(frame)
    assert back == msg and encode(back) == frame


@given(kind=st.sampled_from([Kind.REGISTER, Kind.ACK, Kind.PUSH_SHARE]),
       it=st.integers(0, 2**32 - 1), pid=st.integers(0, 2**16 - 1),
       vals=st.lists(floats, max_size=40))
def test_round_trip_bitwise(kind, it, pid, vals):
    msg = Message(kind, it, pid, (np.array(vals, dtype=float),))
    frame = encode(msg)
    back = decode(frame)
    assert back == msg
    assert back.payload[0].tobytes() == msg.payload[0].tobytes()
    assert (len(frame) - HEADER_SIZE) % 8 == 0


@given(n=st.integers(0, 30), it=st.integers(0, 100), data=st.data())
def test_broadcast_round_trip(n, it, data):
    a = np.array(data.draw(st.lists(floats, min_size=n, max_size=n)), dtype=float)
    y = np.array(data.draw(st.lists(floats, min_size=n, max_size=n)), dtype=float)
    msg = Message(Kind.BROADCAST, it, 0, (a, y))
    back = decode(encode(msg))
    assert back == msg
    assert back.payload[0].tobytes() == a.tobytes() and back.payload[1].tobytes() == y.tobytes()


@given(blob=st.binary(max_size=200))
def test_fuzz_random_bytes(blob):
    try:
        msg, used = decode_prefix(blob)
    except (ProtocolError, IncompleteFrame):
        return
    assert isinstance(msg, Message) and HEADER_SIZE <= used <= len(blob)


@given(flips=st.lists(st.tuples(st.integers(0, 10_000), st.integers(0, 255)), min_size=1, max_size=6),
       cut=st.integers(0, 80))
def test_fuzz_mutated_frames(flips, cut):
    frame = bytearray(encode(Message(Kind.BROADCAST, 7, 0, (np.arange(2.0), np.arange(2.0) + 5))))
    for pos, val in flips:
        frame[pos % len(frame)] = val
    frame = bytes(frame[:cut]) if cut < len(frame) else bytes(frame)
    try:
        msg, _ = decode_prefix(frame)
    except (ProtocolError, IncompleteFrame):
        return
    assert isinstance(msg, Message)
    assert len(msg.payload) == 2 and msg.payload[0].size == msg.payload[1].size


def _header(magic=b"VA", version=1, kind=4, it=0, pid=0, length=0):
    return struct.pack("<2sBBIHI", magic, version, kind, it, pid, length)


@pytest.mark.parametrize("frame,match", [
    (_header(magic=b"XA"), "magic"),
    (_header(version=2), "version"),
    (_header(kind=9), "kind"),
    (_header(length=12) + bytes(12), "multiple of 8"),
    (_header(kind=Kind.SHUTDOWN, length=8) + bytes(8), "empty payload"),
    (_header(kind=Kind.BROADCAST, length=8) + bytes(8), "two equal"),
])
def test_protocol_errors(frame, match):
    with pytest.raises(ProtocolError, match=match):
        decode(frame)


def test_bad_magic_detected_early():
    with pytest.raises(ProtocolError):
        decode_prefix(b"X")


def test_truncated_frame_is_incomplete():
    frame = encode(Message(Kind.PUSH_SHARE, 1, 0, (np.ones(3),)))
    for cut in (0, 5, HEADER_SIZE, len(frame) - 1):
        with pytest.raises(IncompleteFrame):
            decode_prefix(frame[:cut])
    with pytest.raises(IncompleteFrame) as info:
        decode_prefix(frame[:HEADER_SIZE + 1])
    assert info.value.needed == len(frame)


def test_trailing_bytes_rejected():
    with pytest.raises(ProtocolError, match="trailing"):
        decode(encode(Message(Kind.SHUTDOWN, 0)) + b"\x00")


def test_message_validation():
    with pytest.raises(ProtocolError):
        Message(Kind.BROADCAST, 0, 0, (np.ones(2),))
    with pytest.raises(ProtocolError):
        Message(Kind.BROADCAST, 0, 0, (np.ones(2), np.ones(3)))
    with pytest.raises(ProtocolError):
        Message(Kind.SHUTDOWN, 2**32)
    with pytest.raises(ProtocolError):
        Message(Kind.SHUTDOWN, 0, 2**16)
    m = Message(Kind.PUSH_SHARE, 0, 0, (np.ones(2),))
    with pytest.raises(ValueError):
        m.payload[0][0] = 5.0


def test_frame_buffer_byte_by_byte():
    msgs = [Message(Kind.REGISTER, 0, 2, (np.array([5.0, 3.0]),)),
            Message(Kind.PUSH_SHARE, 1, 2, (np.linspace(0, 1, 5),)),
            Message(Kind.SHUTDOWN, 2)]
    stream = b"".join(encode(m) for m in msgs)
    buf = FrameBuffer()
    out = []
    for b in stream:
        buf.feed(bytes([b]))
        m = buf.pop()
        if m is not None:
            out.append(m)
    assert out == msgs and len(buf) == 0
