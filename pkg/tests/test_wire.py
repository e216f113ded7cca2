import math
import struct

import numpy as np
import pytest

from panoteleop import wire
from panoteleop.wire import (
    Ack,
    Attach,
    Control,
    ControlAck,
    DeviceEntry,
    DeviceList,
    ErrorMsg,
    Frame,
    Hello,
    LengthError,
    ListDevices,
    BadMagicError,
    BadVersionError,
    Ping,
    Pong,
    SetProfile,
    StreamDecoder,
    UnknownTypeError,
    WireError,
    decode_message,
    encode_message,
    frame_append_stage,
    frame_peek_seq,
)

GOLDEN_CONTROL_HEADER = bytes.fromhex("52 54 56 41 01 06 00 00 20 00 00 00".replace(" ", ""))


def test_golden_minimal_control_bytes():
    # hand-assembled from the byte layout:
    #   magic 0x41565452 LE -> 52 54 56 41, version 01, type 06,
    #   flags 0000, payload_len 32 -> 20 00 00 00
    # payload: device_id=1, seq=1, everything else zero
    msg = Control(device_id=1, seq=1, t_send_ns=0)
    raw = encode_message(msg)
    assert raw[:12] == GOLDEN_CONTROL_HEADER
    expected_payload = (
        struct.pack("<I", 1) + struct.pack("<Q", 1) + struct.pack("<Q", 0)
        + struct.pack("<f", 0.0) + struct.pack("<f", 0.0)
        + struct.pack("<H", 0) + struct.pack("<H", 0)
    )
    assert raw[12:] == expected_payload
    assert len(raw) == 44
    # independently decoded back to identical fields
    back = decode_message(raw)
    assert back == Control(device_id=1, seq=1, t_send_ns=0)


def _random_frame(rng) -> Frame:
    n_stages = int(rng.integers(0, 5))
    base = int(rng.integers(0, 1_000_000))
    stages = []
    for i in range(n_stages):
        base += int(rng.integers(1, 1000))
        stages.append((int(rng.integers(1, 9)), base))
    return Frame(
        device_id=int(rng.integers(0, 2 ** 32)),
        seq=int(rng.integers(0, 2 ** 63)),
        t_capture_ns=int(rng.integers(0, 2 ** 63)),
        stages=stages,
        codec=int(rng.integers(0, 2)),
        width=int(rng.integers(1, 2 ** 16)),
        height=int(rng.integers(1, 2 ** 16)),
        data=rng.integers(0, 256, int(rng.integers(0, 256))).astype(np.uint8).tobytes(),
    )


def test_round_trip_1000_random_frames_bit_identical():
    rng = np.random.default_rng(13)
    for _ in range(1000):
        msg = _random_frame(rng)
        raw = encode_message(msg)
        back = decode_message(raw)
        assert back == msg
        assert encode_message(back) == raw


def test_round_trip_all_message_types():
    msgs = [
        Hello(role=0, node_id=7, name="robot-a"),
        Ack(ack_type=wire.T_HELLO, value=7),
        ListDevices(),
        DeviceList([DeviceEntry(1, 1, "a"), DeviceEntry(2, 0, "b")]),
        Control(3, 9, 12345, 0.5, -0.25, wire.CTRL_FLAG_ESTOP, b"arm:grip"),
        Attach(device_id=3),
        ErrorMsg(code=wire.E_UNKNOWN_DEVICE, message="no such device"),
        Ping(client_id=5, token=99, t_send_ns=123, header_flags=wire.HDR_FLAG_TO_DEVICE),
        Pong(client_id=5, token=99, t_echo_ns=123, t_peer_ns=456),
        ControlAck(device_id=3, control_seq=9, t_apply_ns=777),
        SetProfile(160.0, 5.0, 0.0, 42, "office"),
    ]
    for msg in msgs:
        assert decode_message(encode_message(msg)) == msg


def test_truncated_buffer_raises_length_error():
    raw = encode_message(Control(1, 1, 0))
    for cut in (0, 5, 11, 12, 20, len(raw) - 1):
        with pytest.raises(LengthError):
            decode_message(raw[:cut])


def test_bad_magic_version_type_distinct_errors():
    raw = bytearray(encode_message(ListDevices()))
    bad_magic = bytes([0xFF]) + bytes(raw[1:])
    with pytest.raises(BadMagicError):
        decode_message(bad_magic)
    bad_version = bytes(raw[:4]) + bytes([9]) + bytes(raw[5:])
    with pytest.raises(BadVersionError):
        decode_message(bad_version)
    bad_type = bytes(raw[:5]) + bytes([0xEE]) + bytes(raw[6:])
    with pytest.raises(UnknownTypeError):
        decode_message(bad_type)


def test_control_rejects_non_finite():
    with pytest.raises(WireError):
        encode_message(Control(1, 1, 0, linear_mps=math.nan))
    with pytest.raises(WireError):
        encode_message(Control(1, 1, 0, angular_radps=math.inf))


def test_frame_stage_stamps_must_be_sorted():
    f = Frame(1, 1, 0, [(1, 100), (2, 50)], 0, 4, 4, b"")
    with pytest.raises(WireError):
        encode_message(f)


def test_stream_decoder_arbitrary_chunking():
    rng = np.random.default_rng(29)
    msgs = [_random_frame(rng) for _ in range(40)]
    msgs += [Ping(1, i, i * 10) for i in range(10)]
    blob = b"".join(encode_message(m) for m in msgs)

    for chunk_seed in range(5):
        crng = np.random.default_rng(chunk_seed)
        dec = StreamDecoder()
        got = []
        i = 0
        while i < len(blob):
            n = int(crng.integers(1, 4096))
            got.extend(dec.feed(blob[i:i + n]))
            i += n
        assert got == msgs
        assert dec.pending_bytes == 0


def test_stream_decoder_raw_preserves_bytes():
    msgs = [encode_message(Ping(1, i, i)) for i in range(5)]
    blob = b"".join(msgs)
    dec = StreamDecoder()
    assert dec.feed_raw(blob) == msgs


def test_frame_append_stage_matches_full_decode():
    rng = np.random.default_rng(31)
    for _ in range(50):
        f = _random_frame(rng)
        raw = encode_message(f)
        t_new = (f.stages[-1][1] + 5) if f.stages else 12345
        spliced = frame_append_stage(raw, wire.STAGE_RELAY_FORWARDED, t_new)
        back = decode_message(spliced)
        assert back.stages == f.stages + [(wire.STAGE_RELAY_FORWARDED, t_new)]
        assert back.data == f.data
        assert back.seq == f.seq
        assert frame_peek_seq(spliced) == f.seq


def test_message_counter_increments():
    before = wire.messages_encoded()
    encode_message(ListDevices())
    assert wire.messages_encoded() == before + 1
