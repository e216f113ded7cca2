"""Event-to-eye latency measurement.

The harness reproduces the screenshot-a-clock protocol at desk scale: a
machine-readable timestamp watermark rides the pixels from capture
through encode, relay, decode, and viewport render; at each sampling
instant the harness renders an inspection view of the newest frame,
reads T1 out of the rendered pixels, and takes T2 as the render
completion time. Per-frame stage stamps decompose each sample into a
stage budget.

Device and relay clocks live in different domains, so samples are
corrected by PING/PONG midpoint offsets (min-RTT filtered).
"""

from __future__ import annotations

import json
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import wire
from .client import ClientSession
from .watermark import (
    INSPECT_FOV_RAD,
    INSPECT_VIEW_H,
    INSPECT_VIEW_W,
    extract_watermark_from_view,
    watermark_view_pose,
)


def trimmed_stats(samples) -> tuple[float, float]:
    """Mean and population stddev after dropping exactly one highest and
    one lowest sample. Requires at least 3 samples."""
    if len(samples) < 3:
        raise ValueError("need at least 3 samples")
    rest = sorted(samples)[1:-1]
    mean = statistics.fmean(rest)
    stddev = statistics.pstdev(rest)
    return (mean, stddev)


@dataclass
class OffsetEstimate:
    """Peer clock minus local clock, from PING/PONG midpoints."""

    offset_ns: float
    uncertainty_ns: float
    min_rtt_ns: int
    n_used: int


def estimate_clock_offset(round_trips) -> OffsetEstimate:
    """Estimate peer-local clock offset from (t0, t_peer, t1) triples.

    Keeps the quarter of round trips with the smallest RTT; the midpoint
    estimate is unbiased under symmetric path delay and biased by at
    most half the delay asymmetry otherwise.
    """
    if not round_trips:
        raise ValueError("no round trips")
    scored = sorted(((t1 - t0, t_peer - (t0 + t1) / 2.0)
                     for t0, t_peer, t1 in round_trips), key=lambda p: p[0])
    keep = max(1, len(scored) // 4)
    kept = scored[:keep]
    offsets = [o for _, o in kept]
    offset = statistics.median(offsets)
    spread = statistics.pstdev(offsets) if len(offsets) > 1 else 0.0
    min_rtt = scored[0][0]
    uncertainty = max(min_rtt / 2.0, spread)
    return OffsetEstimate(offset, uncertainty, int(min_rtt), keep)


def calibrate_clock_offset(session: ClientSession, target: str = "device",
                           n: int = 32) -> OffsetEstimate:
    """Measure the clock offset to the attached device or to the relay."""
    to_device = target == "device"
    trips = []
    for _ in range(n):
        trips.append(session.ping(to_device=to_device))
    return estimate_clock_offset(trips)


@dataclass
class StageInterval:
    from_stage: str
    to_stage: str
    duration_ns: int
    merged: bool = False


def budget_decompose(stages, t_display_ns: int,
                     offsets: dict[int, float] | None = None) -> list[StageInterval]:
    """Successive stage durations in the local clock domain.

    offsets maps stage id to (stamping clock - local clock); stamps are
    converted before differencing so the intervals telescope exactly to
    t_display - t_capture. Missing canonical stages produce a merged,
    flagged interval.
    """
    offsets = offsets or {}
    present = {sid: t - offsets.get(sid, 0.0) for sid, t in stages}
    if wire.STAGE_DISPLAYED not in present:
        present[wire.STAGE_DISPLAYED] = t_display_ns - offsets.get(wire.STAGE_DISPLAYED, 0.0)
    out = []
    prev_id = None
    skipped = 0
    for sid in wire.STAGE_ORDER:
        if sid not in present:
            skipped += 1
            continue
        if prev_id is not None:
            out.append(StageInterval(
                from_stage=wire.STAGE_NAMES[prev_id],
                to_stage=wire.STAGE_NAMES[sid],
                duration_ns=int(round(present[sid] - present[prev_id])),
                merged=skipped > 0))
        prev_id = sid
        skipped = 0
    return out


@dataclass
class LatencyReport:
    location: str
    samples_s: list[float]
    trimmed_mean_s: float
    stddev_s: float
    stage_budget_s: dict[str, float] = field(default_factory=dict)
    retries: int = 0
    device_offset_ns: float = 0.0
    relay_offset_ns: float = 0.0


def measure_event_to_eye(session: ClientSession, n_samples: int = 12,
                         interval_s: float = 5.0, label: str = "",
                         frame_timeout_s: float = 10.0) -> LatencyReport:
    """Sample event-to-eye latency every interval_s seconds.

    At each instant: wait for the next frame arrival, render the
    inspection viewport, extract the watermark timestamp T1 from the
    rendered pixels, and record the render completion time T2. A failed
    extraction resamples the following frame and counts a retry.
    """
    from .projection import ViewportRenderer

    first = session.wait_frame(timeout=frame_timeout_s)
    pano_h, pano_w = first.pixels.shape[:2]
    pose = watermark_view_pose(pano_w, pano_h)
    renderer = ViewportRenderer(pose, INSPECT_FOV_RAD, INSPECT_VIEW_W,
                                INSPECT_VIEW_H, pano_w, pano_h)

    dev = calibrate_clock_offset(session, "device")
    rel = calibrate_clock_offset(session, "relay")
    offsets = {
        wire.STAGE_CAPTURE: dev.offset_ns,
        wire.STAGE_STITCH_DONE: dev.offset_ns,
        wire.STAGE_ENCODE_DONE: dev.offset_ns,
        wire.STAGE_SENT: dev.offset_ns,
        wire.STAGE_RELAY_FORWARDED: rel.offset_ns,
    }

    samples = []
    budget_acc: dict[str, list[float]] = {}
    retries = 0
    t0 = time.monotonic()
    for k in range(1, n_samples + 1):
        target = t0 + k * interval_s
        while True:
            delta = target - time.monotonic()
            if delta <= 0:
                break
            time.sleep(min(delta, 0.2))
        cur = session.latest_frame
        after = cur.seq if cur is not None else None
        frame = session.wait_frame(after_seq=after, timeout=frame_timeout_s)
        while True:
            view, t_display = session.render_cached(frame, renderer)
            wm = extract_watermark_from_view(view, pose, INSPECT_FOV_RAD, pano_w, pano_h)
            if wm is not None:
                break
            retries += 1
            if retries > n_samples * 20:
                raise RuntimeError("watermark extraction keeps failing")
            frame = session.wait_frame(after_seq=frame.seq, timeout=frame_timeout_s)
        t1_device, _ = wm
        t1_local = t1_device - dev.offset_ns
        samples.append((t_display - t1_local) / 1e9)
        for iv in budget_decompose(frame.stages, t_display, offsets):
            key = f"{iv.from_stage}->{iv.to_stage}"
            budget_acc.setdefault(key, []).append(iv.duration_ns / 1e9)

    mean, stddev = trimmed_stats(samples)
    budget = {k: statistics.fmean(v) for k, v in budget_acc.items()}
    return LatencyReport(location=label, samples_s=samples, trimmed_mean_s=mean,
                         stddev_s=stddev, stage_budget_s=budget, retries=retries,
                         device_offset_ns=dev.offset_ns, relay_offset_ns=rel.offset_ns)


@dataclass
class ControlLatencyReport:
    samples_s: list[float]
    mean_s: float
    max_s: float


def measure_control_latency(session: ClientSession, n: int = 100,
                            rate_hz: float = 50.0, linear_mps: float = 0.05,
                            estop_every: int | None = None) -> ControlLatencyReport:
    """Client-send to kinematics-apply latency over n commands.

    Uses the device's CONTROL_ACK apply stamps, converted by the
    calibrated clock offset.
    """
    dev = calibrate_clock_offset(session, "device")
    gap = 1.0 / rate_hz
    samples = []
    for i in range(n):
        estop = estop_every is not None and i % estop_every == estop_every - 1
        seq = session.send_control(0.0 if estop else linear_mps, 0.0, estop=estop)
        t_apply_dev, _ = session.wait_control_ack(seq, timeout=5.0)
        t_send = session.control_sends[seq]
        samples.append(((t_apply_dev - dev.offset_ns) - t_send) / 1e9)
        time.sleep(gap)
    session.send_control(0.0, 0.0)
    return ControlLatencyReport(samples, statistics.fmean(samples), max(samples))


def write_report(reports: list[LatencyReport], path: str | Path,
                 location: str | None = None) -> dict:
    """Write the measurement report JSON: one entry per test run plus
    the cross-run average, mirroring a per-location results table."""
    doc = {
        "location": location if location is not None else (reports[0].location if reports else ""),
        "tests": [
            {
                "samples_s": r.samples_s,
                "trimmed_mean_s": r.trimmed_mean_s,
                "stddev_s": r.stddev_s,
                "stage_budget_s": r.stage_budget_s,
                "retries": r.retries,
            }
            for r in reports
        ],
        "average_s": statistics.fmean(r.trimmed_mean_s for r in reports) if reports else math.nan,
    }
    Path(path).write_text(json.dumps(doc, indent=2))
    return doc
