"""The cloud relay: registry, frame/control forwarding, processing
stages, recording, and playback.

Routing model: devices stream FRAMEs in, clients ATTACH to one device at
a time and receive its frames. Controls flow the other way; when several
clients attach to one device the most recent attacher holds control and
the rest are view-only.

Impairment is configured per client session (SET_PROFILE) and applies to
the data plane only: FRAMEs on the way to that client and its CONTROLs
on the way to the device. Signaling (acks, lists, errors, pings) is
never impaired.
"""

from __future__ import annotations

import logging
import random
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import wire
from .codec import CodecError, decode_frame, encode_frame
from .netem import ImpairmentTimeline, NetworkProfile

log = logging.getLogger(__name__)

RECORDING_MAGIC = b"AVTRREC1"
_REC_ENTRY = struct.Struct("<QI")

STALE_TIMEOUT_S = 10.0
CLIENT_QUEUE_FRAMES = 32


# ---------------------------------------------------------------------------
# processing stages

class ProcessingStage:
    """Per-frame transform hook on the relay's forwarding path."""

    name = "noop"
    delay_s = 0.0
    needs_decode = False

    def transform(self, frame: wire.Frame) -> wire.Frame:
        return frame


class NoopStage(ProcessingStage):
    pass


class FixedDelayStage(ProcessingStage):
    needs_decode = False

    def __init__(self, delay_ms: float):
        self.name = f"fixed_delay:{delay_ms:g}"
        self.delay_s = delay_ms / 1000.0


class AnnotateStage(ProcessingStage):
    """Draws a fixed-position rectangle, standing in for detection overlays."""

    needs_decode = True

    def __init__(self, x_frac=0.60, y_frac=0.42, w_frac=0.15, h_frac=0.20,
                 color=(255, 40, 40), thickness_px=4):
        self.name = "annotate"
        self.rect = (x_frac, y_frac, w_frac, h_frac)
        self.color = color
        self.thickness = thickness_px

    def transform(self, frame: wire.Frame) -> wire.Frame:
        pixels = decode_frame(frame.data, frame.codec)
        h, w = pixels.shape[:2]
        x0 = int(self.rect[0] * w)
        y0 = int(self.rect[1] * h)
        x1 = min(w, x0 + int(self.rect[2] * w))
        y1 = min(h, y0 + int(self.rect[3] * h))
        t = self.thickness
        color = np.array(self.color, dtype=np.uint8)
        pixels[y0:y0 + t, x0:x1] = color
        pixels[y1 - t:y1, x0:x1] = color
        pixels[y0:y1, x0:x0 + t] = color
        pixels[y0:y1, x1 - t:x1] = color
        data = encode_frame(pixels, frame.codec)
        return wire.Frame(frame.device_id, frame.seq, frame.t_capture_ns,
                          list(frame.stages), frame.codec, frame.width,
                          frame.height, data, frame.header_flags)


def parse_stage(spec: str) -> ProcessingStage:
    """Parse a --stage argument: noop | fixed_delay:<ms> | annotate."""
    if spec == "noop":
        return NoopStage()
    if spec == "annotate":
        return AnnotateStage()
    if spec.startswith("fixed_delay:"):
        return FixedDelayStage(float(spec.split(":", 1)[1]))
    raise ValueError(f"unknown stage {spec!r}")


# ---------------------------------------------------------------------------
# recording

class RecordingWriter:
    """Length-prefixed message log with relay receive timestamps."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._f = open(self.path, "wb")
        self._f.write(RECORDING_MAGIC)
        self._lock = threading.Lock()

    def write(self, recv_t_ns: int, raw: bytes) -> None:
        with self._lock:
            self._f.write(_REC_ENTRY.pack(recv_t_ns, len(raw)))
            self._f.write(raw)

    def close(self) -> None:
        with self._lock:
            self._f.close()


def load_recording(path: str | Path) -> tuple[list[tuple[int, bytes]], str | None]:
    """Read a recording; returns (entries, error). A corrupt or truncated
    file yields every entry up to the damage plus an error string."""
    raw = Path(path).read_bytes()
    if raw[:8] != RECORDING_MAGIC:
        return [], "bad recording magic"
    entries = []
    off = 8
    while off < len(raw):
        if off + _REC_ENTRY.size > len(raw):
            return entries, "truncated entry header"
        recv_t, length = _REC_ENTRY.unpack_from(raw, off)
        off += _REC_ENTRY.size
        if off + length > len(raw):
            return entries, "truncated entry body"
        body = raw[off:off + length]
        off += length
        try:
            wire.decode_header(body)
        except wire.WireError:
            return entries, "corrupt message in recording"
        entries.append((recv_t, body))
    return entries, None


def replay_recording(path: str | Path, relay_addr: tuple[str, int], device_id: int,
                     name: str = "replay", start_delay_s: float = 0.0) -> tuple[int, str | None]:
    """Stream a recording's frames back to a relay as a device, pacing
    messages by their original receive-time gaps.

    start_delay_s holds off the first frame after registration so
    clients get a chance to attach.
    """
    entries, error = load_recording(path)
    frames = [(t, raw) for t, raw in entries
              if wire.decode_header(raw)[0] == wire.T_FRAME]
    sent = 0
    if not frames:
        return 0, error or "recording holds no frames"
    sock = socket.create_connection(relay_addr, timeout=5.0)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    try:
        sock.sendall(wire.encode_message(wire.Hello(wire.ROLE_DEVICE, device_id, name)))
        if start_delay_s > 0:
            time.sleep(start_delay_s)
        t_start = time.monotonic_ns()
        first_ts = frames[0][0]
        for recv_t, raw in frames:
            target = t_start + (recv_t - first_ts)
            while True:
                delta = (target - time.monotonic_ns()) / 1e9
                if delta <= 0:
                    break
                time.sleep(min(delta, 0.05))
            sock.sendall(raw)
            sent += 1
    finally:
        sock.close()
    return sent, error


# ---------------------------------------------------------------------------
# per-connection sender with signaling and data lanes

class MessageSender:
    """Owns all writes to one socket.

    Two lanes: signaling is sent immediately; data goes through an
    optional impairment timeline and a bounded latest-wins queue. Each
    lane has its own thread; a lock keeps messages atomic on the wire.
    """

    def __init__(self, sock: socket.socket, label: str = "",
                 data_queue_limit: int = CLIENT_QUEUE_FRAMES):
        self._sock = sock
        self._label = label
        self._limit = data_queue_limit
        self._lock = threading.Lock()          # socket write lock
        self._cond = threading.Condition()
        self._signal: list[bytes] = []
        self._data: list[tuple[bytes, float]] = []   # (raw, not_before_s)
        self._timeline: ImpairmentTimeline | None = None
        self._stop = False
        self.dropped_frames = 0
        self._threads = [
            threading.Thread(target=self._signal_loop, name=f"snd-sig-{label}", daemon=True),
            threading.Thread(target=self._data_loop, name=f"snd-dat-{label}", daemon=True),
        ]
        for t in self._threads:
            t.start()

    def set_timeline(self, timeline: ImpairmentTimeline | None) -> None:
        with self._cond:
            self._timeline = timeline

    def send_signal(self, raw: bytes) -> None:
        with self._cond:
            if self._stop:
                return
            self._signal.append(raw)
            self._cond.notify_all()

    def send_data(self, raw: bytes, not_before_s: float = 0.0) -> None:
        with self._cond:
            if self._stop:
                return
            if len(self._data) >= self._limit:
                self._data.pop(0)              # latest wins
                self.dropped_frames += 1
            self._data.append((raw, not_before_s))
            self._cond.notify_all()

    def stop(self) -> None:
        with self._cond:
            self._stop = True
            self._cond.notify_all()

    def _write(self, raw: bytes) -> bool:
        try:
            with self._lock:
                self._sock.sendall(raw)
            return True
        except OSError:
            return False

    def _signal_loop(self) -> None:
        while True:
            with self._cond:
                while not self._signal and not self._stop:
                    self._cond.wait()
                if self._stop and not self._signal:
                    return
                raw = self._signal.pop(0)
            if not self._write(raw):
                return

    def _data_loop(self) -> None:
        while True:
            with self._cond:
                while not self._data and not self._stop:
                    self._cond.wait()
                if self._stop:
                    return
                raw, not_before = self._data.pop(0)
                timeline = self._timeline
            now = time.monotonic()
            t_send = max(now, not_before)
            t_deliver = timeline.schedule(t_send, len(raw)) if timeline else t_send
            while True:
                delta = t_deliver - time.monotonic()
                if delta <= 0:
                    break
                with self._cond:
                    if self._stop:
                        return
                time.sleep(min(delta, 0.05))
            if not self._write(raw):
                return


# ---------------------------------------------------------------------------
# relay proper

@dataclass
class _DeviceEntry:
    device_id: int
    name: str = ""
    conn: "_Conn | None" = None
    last_seen_ns: int = 0
    watchers: set[int] = field(default_factory=set)     # client ids
    controller: int | None = None


@dataclass
class _ClientState:
    client_id: int
    name: str = ""
    conn: "_Conn | None" = None
    attached: int | None = None
    profile: NetworkProfile = NetworkProfile()
    profile_seed: int = 0
    uplink: ImpairmentTimeline | None = None


class _Conn:
    def __init__(self, sock: socket.socket, addr, label: str,
                 data_queue_limit: int = CLIENT_QUEUE_FRAMES):
        self.sock = sock
        self.addr = addr
        self.sender = MessageSender(sock, label, data_queue_limit)
        self.role: int | None = None
        self.node_id: int | None = None
        self.alive = True

    def close(self) -> None:
        self.alive = False
        self.sender.stop()
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class RelayServer:
    """Threaded TCP relay for devices and clients."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0,
                 stage: ProcessingStage | None = None,
                 record_dir: str | Path | None = None,
                 stale_timeout_s: float = STALE_TIMEOUT_S):
        self.host = host
        self.port = port
        self.stage = stage or NoopStage()
        self.stale_timeout_s = stale_timeout_s
        self._record_dir = Path(record_dir) if record_dir else None
        self.recording_path: Path | None = None
        self._recorder: RecordingWriter | None = None

        self._listener: socket.socket | None = None
        self._accept_thread: threading.Thread | None = None
        self._conns: set[_Conn] = set()
        self._devices: dict[int, _DeviceEntry] = {}
        self._clients: dict[int, _ClientState] = {}
        self._lock = threading.RLock()
        self._stopping = False

    # -- lifecycle ------------------------------------------------------

    def start(self) -> tuple[str, int]:
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((self.host, self.port))
        self._listener.listen(16)
        self.port = self._listener.getsockname()[1]
        if self._record_dir is not None:
            self._record_dir.mkdir(parents=True, exist_ok=True)
            stamp = time.strftime("%Y%m%d-%H%M%S")
            self.recording_path = self._record_dir / f"recording-{stamp}-{self.port}.avtr"
            self._recorder = RecordingWriter(self.recording_path)
        self._accept_thread = threading.Thread(target=self._accept_loop,
                                               name="relay-accept", daemon=True)
        self._accept_thread.start()
        log.info("relay listening on %s:%d", self.host, self.port)
        return (self.host, self.port)

    @property
    def address(self) -> tuple[str, int]:
        return (self.host, self.port)

    def stop(self) -> None:
        self._stopping = True
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
        with self._lock:
            conns = list(self._conns)
        for conn in conns:
            conn.close()
        if self._accept_thread is not None:
            self._accept_thread.join(timeout=2.0)
        if self._recorder is not None:
            self._recorder.close()

    def now_ns(self) -> int:
        return time.monotonic_ns()

    # -- accept / read --------------------------------------------------

    def _accept_loop(self) -> None:
        while not self._stopping:
            try:
                sock, addr = self._listener.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn = _Conn(sock, addr, f"{addr[1]}")
            with self._lock:
                self._conns.add(conn)
            threading.Thread(target=self._reader_loop, args=(conn,),
                             name=f"relay-read-{addr[1]}", daemon=True).start()

    def _reader_loop(self, conn: _Conn) -> None:
        dec = wire.StreamDecoder()
        try:
            while True:
                data = conn.sock.recv(1 << 16)
                if not data:
                    break
                for raw in dec.feed_raw(data):
                    self._dispatch(conn, raw)
        except OSError:
            pass
        except wire.WireError as exc:
            log.error("relay: protocol error from %s: %s", conn.addr, exc)
        finally:
            self._drop_conn(conn)

    def _drop_conn(self, conn: _Conn) -> None:
        with self._lock:
            self._conns.discard(conn)
            if conn.role == wire.ROLE_DEVICE and conn.node_id is not None:
                entry = self._devices.get(conn.node_id)
                if entry is not None and entry.conn is conn:
                    entry.conn = None
            if conn.role == wire.ROLE_CLIENT and conn.node_id is not None:
                state = self._clients.get(conn.node_id)
                if state is not None and state.conn is conn:
                    self._detach_locked(state)
                    del self._clients[conn.node_id]
        conn.close()

    # -- dispatch ---------------------------------------------------------

    def _dispatch(self, conn: _Conn, raw: bytes) -> None:
        mtype, flags, _ = wire.decode_header(raw)
        if mtype == wire.T_FRAME and conn.role == wire.ROLE_DEVICE:
            self._handle_frame(conn, raw)
        elif mtype == wire.T_HELLO:
            self._handle_hello(conn, wire.decode_message(raw))
        elif mtype == wire.T_PONG and conn.role == wire.ROLE_DEVICE:
            pong = wire.decode_message(raw)
            with self._lock:
                state = self._clients.get(pong.client_id)
            if state is not None and state.conn is not None:
                state.conn.sender.send_signal(raw)
        elif mtype == wire.T_CONTROL_ACK and conn.role == wire.ROLE_DEVICE:
            with self._lock:
                entry = self._devices.get(conn.node_id)
                controller = self._clients.get(entry.controller) if entry and entry.controller is not None else None
            if controller is not None and controller.conn is not None:
                controller.conn.sender.send_signal(raw)
        elif conn.role == wire.ROLE_CLIENT:
            self._dispatch_client(conn, mtype, flags, raw)
        else:
            self._send_error(conn, wire.E_BAD_REQUEST, f"unexpected type 0x{mtype:02x}")

    def _handle_hello(self, conn: _Conn, hello: wire.Hello) -> None:
        with self._lock:
            if hello.role == wire.ROLE_DEVICE:
                entry = self._devices.get(hello.node_id)
                if entry is not None and entry.conn is not None and entry.conn.alive:
                    self._send_error(conn, wire.E_DUPLICATE_DEVICE_ID,
                                     f"device {hello.node_id} already registered")
                    return
                if entry is None:
                    entry = _DeviceEntry(hello.node_id)
                    self._devices[hello.node_id] = entry
                entry.name = hello.name
                entry.conn = conn
                entry.last_seen_ns = self.now_ns()
                conn.role = wire.ROLE_DEVICE
                conn.node_id = hello.node_id
                controller = (self._clients.get(entry.controller)
                              if entry.controller is not None else None)
                conn.sender.set_timeline(controller.uplink if controller else None)
            else:
                if hello.node_id in self._clients:
                    self._send_error(conn, wire.E_BAD_REQUEST,
                                     f"client {hello.node_id} already connected")
                    return
                self._clients[hello.node_id] = _ClientState(
                    client_id=hello.node_id, name=hello.name, conn=conn)
                conn.role = wire.ROLE_CLIENT
                conn.node_id = hello.node_id
            conn.sender.send_signal(wire.encode_message(
                wire.Ack(wire.T_HELLO, hello.node_id)))

    def _dispatch_client(self, conn: _Conn, mtype: int, flags: int, raw: bytes) -> None:
        state = self._clients.get(conn.node_id)
        if state is None:
            self._send_error(conn, wire.E_BAD_REQUEST, "hello first")
            return
        if mtype == wire.T_LIST_DEVICES:
            conn.sender.send_signal(wire.encode_message(self._device_list()))
        elif mtype == wire.T_ATTACH:
            self._handle_attach(conn, state, wire.decode_message(raw))
        elif mtype == wire.T_CONTROL:
            self._handle_control(conn, state, raw)
        elif mtype == wire.T_PING:
            self._handle_ping(conn, state, flags, raw)
        elif mtype == wire.T_SET_PROFILE:
            self._handle_set_profile(conn, state, wire.decode_message(raw))
        else:
            self._send_error(conn, wire.E_BAD_REQUEST, f"unexpected type 0x{mtype:02x}")

    def _device_list(self) -> wire.DeviceList:
        now = self.now_ns()
        entries = []
        with self._lock:
            for entry in sorted(self._devices.values(), key=lambda e: e.device_id):
                fresh = (now - entry.last_seen_ns) < self.stale_timeout_s * 1e9
                online = entry.conn is not None and entry.conn.alive and fresh
                entries.append(wire.DeviceEntry(
                    entry.device_id,
                    wire.STATUS_ONLINE if online else wire.STATUS_OFFLINE,
                    entry.name))
        return wire.DeviceList(entries)

    def _handle_attach(self, conn: _Conn, state: _ClientState, msg: wire.Attach) -> None:
        with self._lock:
            entry = self._devices.get(msg.device_id)
            if entry is None:
                self._send_error(conn, wire.E_UNKNOWN_DEVICE,
                                 f"unknown device {msg.device_id}")
                return
            self._detach_locked(state)
            state.attached = msg.device_id
            entry.watchers.add(state.client_id)
            entry.controller = state.client_id      # most recent attacher drives
            if entry.conn is not None:
                entry.conn.sender.set_timeline(state.uplink)
        conn.sender.send_signal(wire.encode_message(wire.Ack(wire.T_ATTACH, msg.device_id)))

    def _detach_locked(self, state: _ClientState) -> None:
        if state.attached is None:
            return
        entry = self._devices.get(state.attached)
        if entry is not None:
            entry.watchers.discard(state.client_id)
            if entry.controller == state.client_id:
                entry.controller = max(entry.watchers) if entry.watchers else None
                if entry.conn is not None:
                    nxt = (self._clients.get(entry.controller)
                           if entry.controller is not None else None)
                    entry.conn.sender.set_timeline(nxt.uplink if nxt else None)
        state.attached = None

    def _handle_control(self, conn: _Conn, state: _ClientState, raw: bytes) -> None:
        msg = wire.decode_message(raw)
        with self._lock:
            if state.attached != msg.device_id:
                self._send_error(conn, wire.E_NOT_ATTACHED,
                                 f"not attached to device {msg.device_id}")
                return
            entry = self._devices.get(msg.device_id)
            if entry is None or entry.conn is None:
                self._send_error(conn, wire.E_UNKNOWN_DEVICE, "device offline")
                return
            if entry.controller != state.client_id:
                self._send_error(conn, wire.E_NO_AUTHORITY, "view-only session")
                return
            target = entry.conn
        target.sender.send_data(raw)

    def _handle_ping(self, conn: _Conn, state: _ClientState, flags: int, raw: bytes) -> None:
        if flags & wire.HDR_FLAG_TO_DEVICE:
            with self._lock:
                entry = self._devices.get(state.attached) if state.attached else None
                target = entry.conn if entry else None
            if target is None:
                self._send_error(conn, wire.E_UNKNOWN_DEVICE, "no attached device")
                return
            target.sender.send_signal(raw)
        else:
            ping = wire.decode_message(raw)
            pong = wire.Pong(ping.client_id, ping.token, ping.t_send_ns, self.now_ns())
            conn.sender.send_signal(wire.encode_message(pong))

    def _handle_set_profile(self, conn: _Conn, state: _ClientState,
                            msg: wire.SetProfile) -> None:
        profile = NetworkProfile(msg.name or "custom", msg.base_delay_ms,
                                 msg.jitter_stddev_ms, msg.bandwidth_kbps)
        with self._lock:
            state.profile = profile
            state.profile_seed = msg.seed
            if profile.is_noop:
                conn.sender.set_timeline(None)
                state.uplink = None
            else:
                conn.sender.set_timeline(
                    ImpairmentTimeline(profile, random.Random(msg.seed)))
                state.uplink = ImpairmentTimeline(profile, random.Random(msg.seed + 1))
            if state.attached is not None:
                entry = self._devices.get(state.attached)
                if entry is not None and entry.controller == state.client_id \
                        and entry.conn is not None:
                    entry.conn.sender.set_timeline(state.uplink)
        conn.sender.send_signal(wire.encode_message(wire.Ack(wire.T_SET_PROFILE)))

    def _handle_frame(self, conn: _Conn, raw: bytes) -> None:
        recv_t = self.now_ns()
        if self._recorder is not None:
            self._recorder.write(recv_t, raw)
        with self._lock:
            entry = self._devices.get(conn.node_id)
            if entry is None:
                return
            entry.last_seen_ns = recv_t
            watchers = [self._clients.get(cid) for cid in entry.watchers]

        stage = self.stage
        not_before = 0.0
        if stage.needs_decode:
            try:
                frame = wire.decode_message(raw)
                frame = stage.transform(frame)
                frame.stages.append((wire.STAGE_RELAY_FORWARDED, self.now_ns()))
                out = wire.encode_message(frame)
            except (CodecError, wire.WireError) as exc:
                log.warning("relay: stage %s failed (%s); forwarding unmodified",
                            stage.name, exc)
                out = wire.set_header_flag(
                    wire.frame_append_stage(raw, wire.STAGE_RELAY_FORWARDED, recv_t),
                    wire.HDR_FLAG_STAGE_ERROR)
        else:
            forward_ns = recv_t + int(stage.delay_s * 1e9)
            out = wire.frame_append_stage(raw, wire.STAGE_RELAY_FORWARDED, forward_ns)
            if stage.delay_s > 0:
                not_before = time.monotonic() + stage.delay_s

        for state in watchers:
            if state is not None and state.conn is not None:
                state.conn.sender.send_data(out, not_before)

    def _send_error(self, conn: _Conn, code: int, message: str) -> None:
        conn.sender.send_signal(wire.encode_message(wire.ErrorMsg(code, message)))

    # introspection used by tests and the CLI status line
    def device_ids(self) -> list[int]:
        with self._lock:
            return sorted(self._devices)
