"""Headless operator-side session: attach, receive frames, render views.

This is the Python counterpart of the browser console, used by the
latency harness and tests. View rendering is purely local and sends
nothing on the wire; the outbound message counter exists to prove it.
"""

from __future__ import annotations

import logging
import queue
import socket
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import wire
from .codec import CodecError, decode_frame
from .netem import NetworkProfile
from .projection import ViewPose, render_view

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT_S = 5.0


class RelayError(RuntimeError):
    def __init__(self, code: int, message: str):
        super().__init__(f"relay error 0x{code:02x}: {message}")
        self.code = code


@dataclass
class ReceivedFrame:
    pixels: np.ndarray
    seq: int
    device_id: int
    t_capture_ns: int
    codec: int
    header_flags: int
    stages: list[tuple[int, int]] = field(default_factory=list)
    recv_ns: int = 0
    decoded_ns: int = 0


class ClientSession:
    def __init__(self, relay_addr: tuple[str, int], client_id: int, name: str = "",
                 connect_timeout_s: float = DEFAULT_TIMEOUT_S):
        self.relay_addr = relay_addr
        self.client_id = client_id
        self.name = name or f"client-{client_id}"
        self._connect_timeout = connect_timeout_s
        self._sock: socket.socket | None = None
        self._send_lock = threading.Lock()
        self._reader: threading.Thread | None = None
        self._stop = threading.Event()

        self.messages_sent = 0
        self.frames_received = 0
        self.decode_failures = 0
        self.attached_device: int | None = None

        self._frame_cond = threading.Condition()
        self.latest_frame: ReceivedFrame | None = None

        self._ack_q: queue.Queue = queue.Queue()
        self._err_q: queue.Queue = queue.Queue()
        self._list_q: queue.Queue = queue.Queue()
        self._pong_q: queue.Queue = queue.Queue()
        self._ctrl_seq = 0
        self._ping_token = 0
        self.control_sends: dict[int, int] = {}
        self.control_acks: dict[int, tuple[int, int]] = {}
        self._ack_cond = threading.Condition()

    # -- plumbing -------------------------------------------------------

    def now_ns(self) -> int:
        return time.monotonic_ns()

    def connect(self) -> "ClientSession":
        sock = socket.create_connection(self.relay_addr, timeout=self._connect_timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.settimeout(None)
        self._sock = sock
        self._stop.clear()
        self._reader = threading.Thread(target=self._reader_loop,
                                        name=f"client-{self.client_id}-reader", daemon=True)
        self._reader.start()
        self._send(wire.Hello(wire.ROLE_CLIENT, self.client_id, self.name))
        self._expect_ack(wire.T_HELLO)
        return self

    def close(self) -> None:
        self._stop.set()
        if self._sock is not None:
            try:
                self._sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self._sock.close()
        if self._reader is not None:
            self._reader.join(timeout=2.0)

    def _send(self, msg) -> None:
        raw = wire.encode_message(msg)
        with self._send_lock:
            if self._sock is None:
                raise ConnectionError("not connected")
            self._sock.sendall(raw)
            self.messages_sent += 1

    def _expect_ack(self, ack_type: int, timeout: float = DEFAULT_TIMEOUT_S) -> int:
        deadline = time.monotonic() + timeout
        while True:
            try:
                err = self._err_q.get_nowait()
                raise RelayError(err.code, err.message)
            except queue.Empty:
                pass
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise TimeoutError(f"no ack for type 0x{ack_type:02x}")
            try:
                ack = self._ack_q.get(timeout=min(remaining, 0.05))
            except queue.Empty:
                continue
            if ack.ack_type == ack_type:
                return ack.value

    def _reader_loop(self) -> None:
        dec = wire.StreamDecoder()
        sock = self._sock
        while not self._stop.is_set():
            try:
                data = sock.recv(1 << 16)
            except OSError:
                return
            if not data:
                return
            try:
                msgs = dec.feed(data)
            except wire.WireError as exc:
                log.error("client %d: protocol error: %s", self.client_id, exc)
                return
            for msg in msgs:
                self._handle(msg)

    def _handle(self, msg) -> None:
        if isinstance(msg, wire.Frame):
            self._handle_frame(msg)
        elif isinstance(msg, wire.Ack):
            self._ack_q.put(msg)
        elif isinstance(msg, wire.ErrorMsg):
            log.warning("client %d: %s", self.client_id, msg)
            self._err_q.put(msg)
        elif isinstance(msg, wire.DeviceList):
            self._list_q.put(msg)
        elif isinstance(msg, wire.Pong):
            self._pong_q.put((msg, self.now_ns()))
        elif isinstance(msg, wire.ControlAck):
            with self._ack_cond:
                self.control_acks[msg.control_seq] = (msg.t_apply_ns, self.now_ns())
                self._ack_cond.notify_all()

    def _handle_frame(self, msg: wire.Frame) -> None:
        recv_ns = self.now_ns()
        try:
            pixels = decode_frame(msg.data, msg.codec)
        except CodecError:
            self.decode_failures += 1
            return                              # keep the last good frame
        decoded_ns = self.now_ns()
        frame = ReceivedFrame(
            pixels=pixels, seq=msg.seq, device_id=msg.device_id,
            t_capture_ns=msg.t_capture_ns, codec=msg.codec,
            header_flags=msg.header_flags,
            stages=list(msg.stages) + [(wire.STAGE_CLIENT_RECEIVED, recv_ns),
                                       (wire.STAGE_DECODED, decoded_ns)],
            recv_ns=recv_ns, decoded_ns=decoded_ns)
        with self._frame_cond:
            self.latest_frame = frame
            self.frames_received += 1
            self._frame_cond.notify_all()

    # -- session operations ----------------------------------------------

    def list_devices(self, timeout: float = DEFAULT_TIMEOUT_S) -> list[wire.DeviceEntry]:
        self._send(wire.ListDevices())
        try:
            return self._list_q.get(timeout=timeout).entries
        except queue.Empty:
            raise TimeoutError("no device list from relay") from None

    def attach(self, device_id: int, timeout: float = DEFAULT_TIMEOUT_S) -> None:
        self._send(wire.Attach(device_id))
        self._expect_ack(wire.T_ATTACH, timeout)
        self.attached_device = device_id

    def set_profile(self, profile: NetworkProfile, seed: int = 0,
                    timeout: float = DEFAULT_TIMEOUT_S) -> None:
        self._send(wire.SetProfile(profile.base_delay_ms, profile.jitter_stddev_ms,
                                   profile.bandwidth_kbps, seed, profile.name))
        self._expect_ack(wire.T_SET_PROFILE, timeout)

    def send_control(self, linear: float = 0.0, angular: float = 0.0,
                     estop: bool = False, opaque: bytes = b"",
                     device_id: int | None = None) -> int:
        target = device_id if device_id is not None else self.attached_device
        if target is None:
            raise RuntimeError("attach to a device before sending controls")
        self._ctrl_seq += 1
        seq = self._ctrl_seq
        t_send = self.now_ns()
        flags = wire.CTRL_FLAG_ESTOP if estop else 0
        self.control_sends[seq] = t_send
        self._send(wire.Control(target, seq, t_send, linear, angular, flags, opaque))
        return seq

    def wait_control_ack(self, seq: int, timeout: float = DEFAULT_TIMEOUT_S) -> tuple[int, int]:
        deadline = time.monotonic() + timeout
        with self._ack_cond:
            while seq not in self.control_acks:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise TimeoutError(f"no ack for control {seq}")
                self._ack_cond.wait(remaining)
            return self.control_acks[seq]

    def ping(self, to_device: bool = False,
             timeout: float = DEFAULT_TIMEOUT_S) -> tuple[int, int, int]:
        """One round trip. Returns (t_send_ns, t_peer_ns, t_recv_ns)."""
        self._ping_token += 1
        token = self._ping_token
        while True:                       # drain stale pongs
            try:
                self._pong_q.get_nowait()
            except queue.Empty:
                break
        flags = wire.HDR_FLAG_TO_DEVICE if to_device else 0
        t0 = self.now_ns()
        self._send(wire.Ping(self.client_id, token, t0, header_flags=flags))
        deadline = time.monotonic() + timeout
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise TimeoutError("no pong")
            try:
                pong, t1 = self._pong_q.get(timeout=remaining)
            except queue.Empty:
                continue
            if pong.token == token:
                return (t0, pong.t_peer_ns, t1)

    def wait_frame(self, after_seq: int | None = None,
                   timeout: float = DEFAULT_TIMEOUT_S) -> ReceivedFrame:
        """Block until a frame newer than after_seq arrives."""
        deadline = time.monotonic() + timeout
        with self._frame_cond:
            while True:
                f = self.latest_frame
                if f is not None and (after_seq is None or f.seq > after_seq):
                    return f
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise TimeoutError("no frame from relay")
                self._frame_cond.wait(remaining)

    def render(self, frame: ReceivedFrame, pose: ViewPose, fov_rad: float,
               out_w: int, out_h: int) -> tuple[np.ndarray, int]:
        """Render a viewport locally; stamps the frame as displayed.

        Returns (viewport, t_display_ns). No network traffic results.
        """
        view = render_view(frame.pixels, pose, fov_rad, out_w, out_h)
        t_display = self.now_ns()
        frame.stages.append((wire.STAGE_DISPLAYED, t_display))
        return view, t_display

    def render_cached(self, frame: ReceivedFrame,
                      renderer) -> tuple[np.ndarray, int]:
        """Like render but through a precomputed ViewportRenderer."""
        view = renderer.render(frame.pixels)
        t_display = self.now_ns()
        frame.stages.append((wire.STAGE_DISPLAYED, t_display))
        return view, t_display
