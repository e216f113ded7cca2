"""The device terminal: a drivable simulated robot streaming panoramas.

Two loops share the device: a fast kinematics loop (default 100 Hz) that
applies drive commands and integrates motion, and a frame loop at the
configured fps that renders six fisheye views, stitches, watermarks,
encodes, and ships FRAME messages to the relay.

The device clock is nanoseconds since session start. Frame capture
timestamps are the nominal tick instants (k * interval), which makes
frame content a pure function of seed, calibration, and the applied
command log; wall-clock noise only enters the later stage stamps.
"""

from __future__ import annotations

import csv
import logging
import math
import socket
import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import wire
from .calibration import RigCalibration
from .codec import encode_frame
from .netem import NetworkProfile
from .scene import FisheyeRenderer, RigRenderer, SceneEnvironment
from .stitching import StitchMap, build_stitch_map, compute_gains, stitch
from .watermark import embed_watermark
from .projection import wrap_angle

log = logging.getLogger(__name__)

MAX_LINEAR_MPS = 2.0
MAX_ANGULAR_RADPS = 2.0
KINEMATICS_HZ = 100


@dataclass(frozen=True)
class DeviceState:
    x_m: float = 0.0
    y_m: float = 0.0
    heading_rad: float = 0.0
    linear_mps: float = 0.0
    angular_radps: float = 0.0
    sim_time_ns: int = 0


def step_kinematics(state: DeviceState, linear_mps: float, angular_radps: float,
                    dt_s: float) -> DeviceState:
    """Advance a unicycle model by dt using the exact arc solution.

    Straight-line limit applies when |angular| < 1e-9. Raises ValueError
    for non-finite commands or nonpositive dt; callers that must keep
    running validate the command first and leave the state unchanged.
    """
    if not (math.isfinite(linear_mps) and math.isfinite(angular_radps)):
        raise ValueError("non-finite command")
    if not (dt_s > 0):
        raise ValueError("dt must be positive")
    v = max(-MAX_LINEAR_MPS, min(MAX_LINEAR_MPS, linear_mps))
    w = max(-MAX_ANGULAR_RADPS, min(MAX_ANGULAR_RADPS, angular_radps))
    th = state.heading_rad
    if abs(w) < 1e-9:
        x = state.x_m + v * math.cos(th) * dt_s
        y = state.y_m + v * math.sin(th) * dt_s
        new_th = th
    else:
        r = v / w
        new_th = th + w * dt_s
        x = state.x_m + r * (math.sin(new_th) - math.sin(th))
        y = state.y_m - r * (math.cos(new_th) - math.cos(th))
    return replace(state, x_m=x, y_m=y, heading_rad=wrap_angle(new_th),
                   linear_mps=v, angular_radps=w,
                   sim_time_ns=state.sim_time_ns + int(round(dt_s * 1e9)))


def save_trajectory(rows, path: str | Path) -> None:
    """Write (t_ns, x_m, y_m, heading_rad) rows as CSV."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t_ns", "x_m", "y_m", "heading_rad"])
        for t_ns, x, y, heading in rows:
            w.writerow([t_ns, repr(x), repr(y), repr(heading)])


def load_command_log(path: str | Path) -> dict[int, tuple[float, float, int]]:
    """Read a scripted command log: tick_index -> (linear, angular, flags)."""
    out = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out[int(row["tick"])] = (float(row["linear_mps"]),
                                     float(row["angular_radps"]),
                                     int(row["flags"]))
    return out


def save_command_log(entries, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["tick", "linear_mps", "angular_radps", "flags"])
        for tick, lin, ang, flags in entries:
            w.writerow([tick, repr(lin), repr(ang), flags])


class DeviceSim:
    """Simulated robot device streaming stitched panoramas to a relay.

    State is owned by the kinematics thread; inbound controls land in a
    queue drained at each tick. The frame loop reads state snapshots.
    """

    def __init__(self, relay_addr: tuple[str, int], device_id: int,
                 calib: RigCalibration, scene: SceneEnvironment,
                 fps: float = 10.0, codec: int = 0, quality: int = 8,
                 pano_w: int = 1024, pano_h: int = 512,
                 name: str = "", kinematics_hz: float = KINEMATICS_HZ,
                 max_frames: int | None = None,
                 scripted_commands: dict[int, tuple[float, float, int]] | None = None,
                 clock_offset_ns: int = 0, connect_timeout_s: float = 5.0,
                 stitch_map: StitchMap | None = None):
        self.relay_addr = relay_addr
        self.device_id = device_id
        self.calib = calib
        self.scene = scene
        self.fps = fps
        self.codec = codec
        self.quality = quality
        self.pano_w = pano_w
        self.pano_h = pano_h
        self.name = name or f"device-{device_id}"
        self.kin_dt_s = 1.0 / kinematics_hz
        self.max_frames = max_frames
        self.scripted = scripted_commands
        self._clock_offset = clock_offset_ns
        self._connect_timeout = connect_timeout_s

        self._rig_renderer = RigRenderer([FisheyeRenderer(intr, pose) for intr, pose in calib])
        self._smap: StitchMap = stitch_map if stitch_map is not None \
            else build_stitch_map(calib, pano_w, pano_h)
        self._gains: np.ndarray | None = None

        self._state = DeviceState()
        self._state_lock = threading.Lock()
        self._ctrl_queue: list[wire.Control] = []
        self._ctrl_lock = threading.Lock()

        self.trajectory: list[tuple[int, float, float, float]] = []
        self.command_log: list[tuple[int, float, float, int]] = []
        self.frames_sent = 0
        self.controls_applied = 0
        self.reconnects = 0

        self._sock: socket.socket | None = None
        self._send_lock = threading.Lock()
        self._epoch_ns = 0
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._connected = threading.Event()

    # -- clock ---------------------------------------------------------

    def now_ns(self) -> int:
        """Device clock: nanoseconds since session start."""
        return time.monotonic_ns() - self._epoch_ns + self._clock_offset

    # -- lifecycle -----------------------------------------------------

    def start(self) -> None:
        self._epoch_ns = time.monotonic_ns()
        self._stop.clear()
        self._connect(initial=True)
        self._threads = [
            threading.Thread(target=self._kinematics_loop, name="dev-kin", daemon=True),
            threading.Thread(target=self._frame_loop, name="dev-frames", daemon=True),
            threading.Thread(target=self._reader_loop, name="dev-reader", daemon=True),
        ]
        for t in self._threads:
            t.start()

    def stop(self) -> None:
        self._stop.set()
        sock = self._sock
        if sock is not None:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()
        for t in self._threads:
            t.join(timeout=5.0)

    def join(self, timeout: float | None = None) -> None:
        frame_thread = self._threads[1] if len(self._threads) > 1 else None
        if frame_thread is not None:
            frame_thread.join(timeout)

    @property
    def state(self) -> DeviceState:
        with self._state_lock:
            return self._state

    # -- networking ----------------------------------------------------

    def _connect(self, initial: bool = False) -> bool:
        backoff = 0.2
        deadline = time.monotonic() + self._connect_timeout
        while not self._stop.is_set():
            try:
                sock = socket.create_connection(self.relay_addr, timeout=2.0)
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                sock.settimeout(None)
                with self._send_lock:
                    self._sock = sock
                self._send(wire.encode_message(
                    wire.Hello(wire.ROLE_DEVICE, self.device_id, self.name)))
                self._connected.set()
                if not initial:
                    self.reconnects += 1
                return True
            except OSError as exc:
                if initial and time.monotonic() > deadline:
                    raise ConnectionError(f"cannot reach relay at {self.relay_addr}") from exc
                log.warning("device %d: connect failed (%s), retrying", self.device_id, exc)
                self._stop.wait(backoff)
                backoff = min(backoff * 2, 5.0)
        return False

    def _send(self, raw: bytes) -> None:
        with self._send_lock:
            sock = self._sock
            if sock is None:
                raise OSError("not connected")
            sock.sendall(raw)

    def _handle_disconnect(self) -> None:
        self._connected.clear()
        with self._send_lock:
            if self._sock is not None:
                try:
                    self._sock.close()
                except OSError:
                    pass
                self._sock = None
        if not self._stop.is_set():
            self._connect()

    def _reader_loop(self) -> None:
        dec = wire.StreamDecoder()
        while not self._stop.is_set():
            sock = self._sock
            if sock is None:
                self._connected.wait(timeout=0.2)
                continue
            try:
                data = sock.recv(65536)
            except OSError:
                data = b""
            if not data:
                if self._stop.is_set():
                    return
                self._handle_disconnect()
                dec = wire.StreamDecoder()
                continue
            try:
                msgs = dec.feed(data)
            except wire.WireError as exc:
                log.error("device %d: protocol error: %s", self.device_id, exc)
                self._handle_disconnect()
                dec = wire.StreamDecoder()
                continue
            for msg in msgs:
                if isinstance(msg, wire.Control):
                    if not (math.isfinite(msg.linear_mps) and math.isfinite(msg.angular_radps)):
                        log.error("device %d: rejecting non-finite control", self.device_id)
                        continue
                    with self._ctrl_lock:
                        self._ctrl_queue.append(msg)
                elif isinstance(msg, wire.Ping):
                    pong = wire.Pong(msg.client_id, msg.token, msg.t_send_ns, self.now_ns())
                    try:
                        self._send(wire.encode_message(pong))
                    except OSError:
                        pass

    # -- kinematics loop -------------------------------------------------

    def _kinematics_loop(self) -> None:
        tick = 0
        interval_ns = int(round(self.kin_dt_s * 1e9))
        while not self._stop.is_set():
            target_ns = (tick + 1) * interval_ns
            self._sleep_until(target_ns)
            if self._stop.is_set():
                return
            tick += 1
            applied: list[wire.Control] = []
            if self.scripted is not None:
                cmd = self.scripted.get(tick)
                if cmd is not None:
                    lin, ang, flags = cmd
                    self._apply_command(tick, lin, ang, flags)
            else:
                with self._ctrl_lock:
                    pending = self._ctrl_queue
                    self._ctrl_queue = []
                for msg in pending:
                    lin, ang = msg.linear_mps, msg.angular_radps
                    if msg.estop:
                        lin = ang = 0.0
                    self._apply_command(tick, lin, ang, msg.flags)
                    applied.append(msg)
            with self._state_lock:
                st = self._state
                st = step_kinematics(st, st.linear_mps, st.angular_radps, self.kin_dt_s)
                st = replace(st, sim_time_ns=tick * interval_ns)
                self._state = st
                self.trajectory.append((st.sim_time_ns, st.x_m, st.y_m, st.heading_rad))
            t_apply = self.now_ns()
            for msg in applied:
                ack = wire.ControlAck(self.device_id, msg.seq, t_apply)
                try:
                    self._send(wire.encode_message(ack))
                except OSError:
                    pass

    def _apply_command(self, tick: int, lin: float, ang: float, flags: int) -> None:
        lin = max(-MAX_LINEAR_MPS, min(MAX_LINEAR_MPS, lin))
        ang = max(-MAX_ANGULAR_RADPS, min(MAX_ANGULAR_RADPS, ang))
        with self._state_lock:
            self._state = replace(self._state, linear_mps=lin, angular_radps=ang)
        self.command_log.append((tick, lin, ang, flags))
        self.controls_applied += 1

    def _sleep_until(self, target_device_ns: int) -> None:
        while not self._stop.is_set():
            delta = (target_device_ns - self.now_ns()) / 1e9
            if delta <= 0:
                return
            self._stop.wait(min(delta, 0.05))

    # -- frame loop ------------------------------------------------------

    def _frame_loop(self) -> None:
        interval_ns = int(round(1e9 / self.fps))
        slot = 0
        seq = 0
        while not self._stop.is_set():
            slot += 1
            target_ns = slot * interval_ns
            behind = self.now_ns() - target_ns
            if behind > interval_ns:
                # missed the slot entirely: skip it, do not queue backlog
                slot += int(behind // interval_ns)
                continue
            self._sleep_until(target_ns)
            if self._stop.is_set():
                return
            t_nominal = slot * interval_ns
            st = self.state
            frames = self._rig_renderer.render(
                self.scene, np.array([st.x_m, st.y_m, 0.5]), st.heading_rad)
            if self._gains is None:
                self._gains = compute_gains(frames, self._smap)
            pano = stitch(frames, self._smap, gains=self._gains)
            t_stitch = self.now_ns()
            embed_watermark(pano, t_nominal, seq)
            payload = encode_frame(pano, self.codec, self.quality)
            t_encode = self.now_ns()
            msg = wire.Frame(
                device_id=self.device_id, seq=seq, t_capture_ns=t_nominal,
                stages=[(wire.STAGE_CAPTURE, t_nominal),
                        (wire.STAGE_STITCH_DONE, t_stitch),
                        (wire.STAGE_ENCODE_DONE, t_encode),
                        (wire.STAGE_SENT, self.now_ns())],
                codec=self.codec, width=self.pano_w, height=self.pano_h,
                data=payload)
            try:
                self._send(wire.encode_message(msg))
                self.frames_sent += 1
                seq += 1
            except OSError:
                log.warning("device %d: send failed, reconnecting", self.device_id)
                self._handle_disconnect()
            if self.max_frames is not None and seq >= self.max_frames:
                return

    # -- persistence -----------------------------------------------------

    def save_trajectory(self, path: str | Path) -> None:
        with self._state_lock:
            rows = list(self.trajectory)
        save_trajectory(rows, path)

    def save_command_log(self, path: str | Path) -> None:
        save_command_log(list(self.command_log), path)
