"""Bit-exact wire protocol framing.

Every message is a 12-byte little-endian header followed by a typed
payload:

    magic u32 = 0x41565452, version u8 = 1, type u8, flags u16,
    payload_len u32

Messages are self-delimiting, so any concatenation of valid messages
parses back to the same sequence regardless of chunk boundaries.
"""

from __future__ import annotations

import math
import struct
import threading
from dataclasses import dataclass, field

MAGIC = 0x41565452
VERSION = 1

HEADER = struct.Struct("<IBBHI")
HEADER_LEN = HEADER.size            # 12
MAX_PAYLOAD = 64 * 1024 * 1024

# message types
T_HELLO = 0x01
T_ACK = 0x02
T_LIST_DEVICES = 0x03
T_DEVICE_LIST = 0x04
T_FRAME = 0x05
T_CONTROL = 0x06
T_ATTACH = 0x07
T_ERROR = 0x08
T_PING = 0x09
T_PONG = 0x0A
T_CONTROL_ACK = 0x0B
T_SET_PROFILE = 0x0C

# header flag bits
HDR_FLAG_TO_DEVICE = 0x0001         # on PING: route to the attached device
HDR_FLAG_STAGE_ERROR = 0x0002       # on FRAME: processing stage could not decode

# roles in HELLO
ROLE_DEVICE = 0
ROLE_CLIENT = 1

# device status in DEVICE_LIST
STATUS_ONLINE = 1
STATUS_OFFLINE = 0

# error codes
E_DUPLICATE_DEVICE_ID = 0x01
E_UNKNOWN_DEVICE = 0x02
E_NOT_ATTACHED = 0x03
E_NO_AUTHORITY = 0x04
E_BAD_REQUEST = 0x05

# control payload flag bits
CTRL_FLAG_ESTOP = 0x0001

# pipeline stage ids carried in FRAME stage stamps
STAGE_CAPTURE = 1
STAGE_STITCH_DONE = 2
STAGE_ENCODE_DONE = 3
STAGE_SENT = 4
STAGE_RELAY_FORWARDED = 5
STAGE_CLIENT_RECEIVED = 6
STAGE_DECODED = 7
STAGE_DISPLAYED = 8

STAGE_ORDER = (STAGE_CAPTURE, STAGE_STITCH_DONE, STAGE_ENCODE_DONE, STAGE_SENT,
               STAGE_RELAY_FORWARDED, STAGE_CLIENT_RECEIVED, STAGE_DECODED,
               STAGE_DISPLAYED)

STAGE_NAMES = {
    STAGE_CAPTURE: "capture",
    STAGE_STITCH_DONE: "stitch_done",
    STAGE_ENCODE_DONE: "encode_done",
    STAGE_SENT: "sent",
    STAGE_RELAY_FORWARDED: "relay_forwarded",
    STAGE_CLIENT_RECEIVED: "client_received",
    STAGE_DECODED: "decoded",
    STAGE_DISPLAYED: "displayed",
}


class WireError(ValueError):
    """Base class for framing violations."""


class BadMagicError(WireError):
    pass


class BadVersionError(WireError):
    pass


class LengthError(WireError):
    """Truncated buffer or inconsistent declared lengths."""


class UnknownTypeError(WireError):
    pass


_counter_lock = threading.Lock()
_messages_encoded = 0


def messages_encoded() -> int:
    """Process-wide count of encode_message calls (probe for the
    zero-transport-traffic properties)."""
    return _messages_encoded


def _bump_counter() -> None:
    global _messages_encoded
    with _counter_lock:
        _messages_encoded += 1


def _name_bytes(name: str) -> bytes:
    raw = name.encode("utf-8")
    if len(raw) > 255:
        raise WireError("name longer than 255 bytes")
    return bytes([len(raw)]) + raw


def _read_name(buf: memoryview, off: int) -> tuple[str, int]:
    if off >= len(buf):
        raise LengthError("truncated name")
    n = buf[off]
    off += 1
    if off + n > len(buf):
        raise LengthError("truncated name")
    return bytes(buf[off:off + n]).decode("utf-8"), off + n


@dataclass
class Hello:
    role: int
    node_id: int
    name: str = ""
    header_flags: int = 0
    TYPE = T_HELLO
    _S = struct.Struct("<BI")

    def encode_payload(self) -> bytes:
        return self._S.pack(self.role, self.node_id) + _name_bytes(self.name)

    @classmethod
    def from_payload(cls, buf: memoryview, flags: int) -> "Hello":
        if len(buf) < cls._S.size:
            raise LengthError("hello payload truncated")
        role, node_id = cls._S.unpack_from(buf)
        name, off = _read_name(buf, cls._S.size)
        if off != len(buf):
            raise LengthError("hello payload trailing bytes")
        return cls(role, node_id, name, flags)


@dataclass
class Ack:
    ack_type: int
    value: int = 0
    header_flags: int = 0
    TYPE = T_ACK
    _S = struct.Struct("<BI")

    def encode_payload(self) -> bytes:
        return self._S.pack(self.ack_type, self.value)

    @classmethod
    def from_payload(cls, buf: memoryview, flags: int) -> "Ack":
        if len(buf) != cls._S.size:
            raise LengthError("ack payload size mismatch")
        return cls(*cls._S.unpack_from(buf), header_flags=flags)


@dataclass
class ListDevices:
    header_flags: int = 0
    TYPE = T_LIST_DEVICES

    def encode_payload(self) -> bytes:
        return b""

    @classmethod
    def from_payload(cls, buf: memoryview, flags: int) -> "ListDevices":
        if len(buf) != 0:
            raise LengthError("list_devices payload must be empty")
        return cls(flags)


@dataclass
class DeviceEntry:
    device_id: int
    status: int
    name: str = ""


@dataclass
class DeviceList:
    entries: list[DeviceEntry] = field(default_factory=list)
    header_flags: int = 0
    TYPE = T_DEVICE_LIST
    _E = struct.Struct("<IB")

    def encode_payload(self) -> bytes:
        out = [struct.pack("<H", len(self.entries))]
        for e in self.entries:
            out.append(self._E.pack(e.device_id, e.status))
            out.append(_name_bytes(e.name))
        return b"".join(out)

    @classmethod
    def from_payload(cls, buf: memoryview, flags: int) -> "DeviceList":
        if len(buf) < 2:
            raise LengthError("device_list payload truncated")
        (count,) = struct.unpack_from("<H", buf)
        off = 2
        entries = []
        for _ in range(count):
            if off + cls._E.size > len(buf):
                raise LengthError("device_list entry truncated")
            device_id, status = cls._E.unpack_from(buf, off)
            name, off = _read_name(buf, off + cls._E.size)
            entries.append(DeviceEntry(device_id, status, name))
        if off != len(buf):
            raise LengthError("device_list trailing bytes")
        return cls(entries, flags)


@dataclass
class Frame:
    device_id: int
    seq: int
    t_capture_ns: int
    stages: list[tuple[int, int]]
    codec: int
    width: int
    height: int
    data: bytes
    header_flags: int = 0
    TYPE = T_FRAME
    _HEAD = struct.Struct("<IQQB")
    _STAGE = struct.Struct("<BQ")
    _TAIL = struct.Struct("<BHHI")

    def encode_payload(self) -> bytes:
        if len(self.stages) > 255:
            raise WireError("too many stage stamps")
        ts = [t for _, t in self.stages]
        if ts != sorted(ts):
            raise WireError("stage stamps must be sorted by time")
        out = [self._HEAD.pack(self.device_id, self.seq, self.t_capture_ns, len(self.stages))]
        for sid, t in self.stages:
            out.append(self._STAGE.pack(sid, t))
        out.append(self._TAIL.pack(self.codec, self.width, self.height, len(self.data)))
        out.append(self.data)
        return b"".join(out)

    @classmethod
    def from_payload(cls, buf: memoryview, flags: int) -> "Frame":
        if len(buf) < cls._HEAD.size:
            raise LengthError("frame payload truncated")
        device_id, seq, t_capture, n_stages = cls._HEAD.unpack_from(buf)
        off = cls._HEAD.size
        stages = []
        for _ in range(n_stages):
            if off + cls._STAGE.size > len(buf):
                raise LengthError("frame stages truncated")
            stages.append(cls._STAGE.unpack_from(buf, off))
            off += cls._STAGE.size
        if off + cls._TAIL.size > len(buf):
            raise LengthError("frame tail truncated")
        codec, width, height, data_len = cls._TAIL.unpack_from(buf, off)
        off += cls._TAIL.size
        if off + data_len != len(buf):
            raise LengthError("frame data length mismatch")
        ts = [t for _, t in stages]
        if ts != sorted(ts):
            raise WireError("frame stage stamps unsorted")
        return cls(device_id, seq, t_capture, stages, codec, width, height,
                   bytes(buf[off:]), flags)


@dataclass
class Control:
    device_id: int
    seq: int
    t_send_ns: int
    linear_mps: float = 0.0
    angular_radps: float = 0.0
    flags: int = 0
    opaque: bytes = b""
    header_flags: int = 0
    TYPE = T_CONTROL
    _S = struct.Struct("<IQQffHH")

    @property
    def estop(self) -> bool:
        return bool(self.flags & CTRL_FLAG_ESTOP)

    def encode_payload(self) -> bytes:
        if not (math.isfinite(self.linear_mps) and math.isfinite(self.angular_radps)):
            raise WireError("control floats must be finite")
        return self._S.pack(self.device_id, self.seq, self.t_send_ns,
                            self.linear_mps, self.angular_radps, self.flags,
                            len(self.opaque)) + self.opaque

    @classmethod
    def from_payload(cls, buf: memoryview, flags: int) -> "Control":
        if len(buf) < cls._S.size:
            raise LengthError("control payload truncated")
        device_id, seq, t_send, lin, ang, cflags, opaque_len = cls._S.unpack_from(buf)
        if cls._S.size + opaque_len != len(buf):
            raise LengthError("control opaque length mismatch")
        if not (math.isfinite(lin) and math.isfinite(ang)):
            raise WireError("control floats must be finite")
        return cls(device_id, seq, t_send, lin, ang, cflags,
                   bytes(buf[cls._S.size:]), flags)


@dataclass
class Attach:
    device_id: int
    header_flags: int = 0
    TYPE = T_ATTACH
    _S = struct.Struct("<I")

    def encode_payload(self) -> bytes:
        return self._S.pack(self.device_id)

    @classmethod
    def from_payload(cls, buf: memoryview, flags: int) -> "Attach":
        if len(buf) != cls._S.size:
            raise LengthError("attach payload size mismatch")
        return cls(cls._S.unpack_from(buf)[0], flags)


@dataclass
class ErrorMsg:
    code: int
    message: str = ""
    header_flags: int = 0
    TYPE = T_ERROR

    def encode_payload(self) -> bytes:
        raw = self.message.encode("utf-8")
        return struct.pack("<HH", self.code, len(raw)) + raw

    @classmethod
    def from_payload(cls, buf: memoryview, flags: int) -> "ErrorMsg":
        if len(buf) < 4:
            raise LengthError("error payload truncated")
        code, msg_len = struct.unpack_from("<HH", buf)
        if 4 + msg_len != len(buf):
            raise LengthError("error message length mismatch")
        return cls(code, bytes(buf[4:]).decode("utf-8"), flags)


@dataclass
class Ping:
    client_id: int
    token: int
    t_send_ns: int
    header_flags: int = 0
    TYPE = T_PING
    _S = struct.Struct("<IIQ")

    def encode_payload(self) -> bytes:
        return self._S.pack(self.client_id, self.token, self.t_send_ns)

    @classmethod
    def from_payload(cls, buf: memoryview, flags: int) -> "Ping":
        if len(buf) != cls._S.size:
            raise LengthError("ping payload size mismatch")
        return cls(*cls._S.unpack_from(buf), header_flags=flags)


@dataclass
class Pong:
    client_id: int
    token: int
    t_echo_ns: int
    t_peer_ns: int
    header_flags: int = 0
    TYPE = T_PONG
    _S = struct.Struct("<IIQQ")

    def encode_payload(self) -> bytes:
        return self._S.pack(self.client_id, self.token, self.t_echo_ns, self.t_peer_ns)

    @classmethod
    def from_payload(cls, buf: memoryview, flags: int) -> "Pong":
        if len(buf) != cls._S.size:
            raise LengthError("pong payload size mismatch")
        return cls(*cls._S.unpack_from(buf), header_flags=flags)


@dataclass
class ControlAck:
    device_id: int
    control_seq: int
    t_apply_ns: int
    header_flags: int = 0
    TYPE = T_CONTROL_ACK
    _S = struct.Struct("<IQQ")

    def encode_payload(self) -> bytes:
        return self._S.pack(self.device_id, self.control_seq, self.t_apply_ns)

    @classmethod
    def from_payload(cls, buf: memoryview, flags: int) -> "ControlAck":
        if len(buf) != cls._S.size:
            raise LengthError("control_ack payload size mismatch")
        return cls(*cls._S.unpack_from(buf), header_flags=flags)


@dataclass
class SetProfile:
    base_delay_ms: float = 0.0
    jitter_stddev_ms: float = 0.0
    bandwidth_kbps: float = 0.0
    seed: int = 0
    name: str = ""
    header_flags: int = 0
    TYPE = T_SET_PROFILE
    _S = struct.Struct("<fffQ")

    def encode_payload(self) -> bytes:
        return self._S.pack(self.base_delay_ms, self.jitter_stddev_ms,
                            self.bandwidth_kbps, self.seed) + _name_bytes(self.name)

    @classmethod
    def from_payload(cls, buf: memoryview, flags: int) -> "SetProfile":
        if len(buf) < cls._S.size:
            raise LengthError("set_profile payload truncated")
        base, jitter, bw, seed = cls._S.unpack_from(buf)
        name, off = _read_name(buf, cls._S.size)
        if off != len(buf):
            raise LengthError("set_profile trailing bytes")
        return cls(base, jitter, bw, seed, name, flags)


_TYPES = {
    cls.TYPE: cls
    for cls in (Hello, Ack, ListDevices, DeviceList, Frame, Control, Attach,
                ErrorMsg, Ping, Pong, ControlAck, SetProfile)
}

WireMessage = (Hello | Ack | ListDevices | DeviceList | Frame | Control
               | Attach | ErrorMsg | Ping | Pong | ControlAck | SetProfile)


def encode_message(msg) -> bytes:
    payload = msg.encode_payload()
    if len(payload) > MAX_PAYLOAD:
        raise WireError("payload too large")
    _bump_counter()
    return HEADER.pack(MAGIC, VERSION, msg.TYPE, msg.header_flags, len(payload)) + payload


def decode_header(buf: bytes | memoryview) -> tuple[int, int, int]:
    """Validate a header and return (type, flags, payload_len)."""
    if len(buf) < HEADER_LEN:
        raise LengthError("buffer shorter than header")
    magic, version, mtype, flags, payload_len = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic 0x{magic:08x}")
    if version != VERSION:
        raise BadVersionError(f"unsupported version {version}")
    if payload_len > MAX_PAYLOAD:
        raise LengthError("declared payload too large")
    return mtype, flags, payload_len


def decode_message(buf: bytes | memoryview) -> WireMessage:
    """Decode exactly one message; trailing bytes are an error."""
    mtype, flags, payload_len = decode_header(buf)
    if len(buf) != HEADER_LEN + payload_len:
        raise LengthError("buffer length does not match declared payload")
    cls = _TYPES.get(mtype)
    if cls is None:
        raise UnknownTypeError(f"unknown message type 0x{mtype:02x}")
    return cls.from_payload(memoryview(buf)[HEADER_LEN:], flags)


class StreamDecoder:
    """Incremental decoder for a byte stream of concatenated messages."""

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[WireMessage]:
        self._buf.extend(data)
        out = []
        while True:
            if len(self._buf) < HEADER_LEN:
                break
            mtype, flags, payload_len = decode_header(self._buf)
            total = HEADER_LEN + payload_len
            if len(self._buf) < total:
                break
            chunk = bytes(self._buf[:total])
            del self._buf[:total]
            out.append(decode_message(chunk))
        return out

    def feed_raw(self, data: bytes) -> list[bytes]:
        """Like feed but returns undecoded message byte strings."""
        self._buf.extend(data)
        out = []
        while True:
            if len(self._buf) < HEADER_LEN:
                break
            _, _, payload_len = decode_header(self._buf)
            total = HEADER_LEN + payload_len
            if len(self._buf) < total:
                break
            out.append(bytes(self._buf[:total]))
            del self._buf[:total]
        return out

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)


_FRAME_FIXED = Frame._HEAD.size          # 21: device_id, seq, t_capture, n_stages
_STAGE_SIZE = Frame._STAGE.size          # 9


def frame_append_stage(message: bytes, stage_id: int, t_ns: int) -> bytes:
    """Append one stage stamp to an encoded FRAME without decoding pixels.

    The forwarding path must stay cheap, so this splices 9 bytes into the
    stage list and fixes up the two affected length fields.
    """
    mtype, flags, payload_len = decode_header(message)
    if mtype != T_FRAME:
        raise WireError("not a FRAME message")
    n_off = HEADER_LEN + _FRAME_FIXED - 1
    n_stages = message[n_off]
    if n_stages >= 255:
        raise WireError("stage list full")
    insert_at = HEADER_LEN + _FRAME_FIXED + n_stages * _STAGE_SIZE
    new_header = HEADER.pack(MAGIC, VERSION, T_FRAME, flags, payload_len + _STAGE_SIZE)
    return b"".join([
        new_header,
        message[HEADER_LEN:n_off],
        bytes([n_stages + 1]),
        message[n_off + 1:insert_at],
        Frame._STAGE.pack(stage_id, t_ns),
        message[insert_at:],
    ])


def frame_peek_seq(message: bytes) -> int:
    """Sequence number of an encoded FRAME, without full decode."""
    return struct.unpack_from("<Q", message, HEADER_LEN + 4)[0]


def set_header_flag(message: bytes, bit: int) -> bytes:
    """Return the message with a header flag bit set."""
    magic, version, mtype, flags, payload_len = HEADER.unpack_from(message)
    return HEADER.pack(magic, version, mtype, flags | bit, payload_len) + message[HEADER_LEN:]
