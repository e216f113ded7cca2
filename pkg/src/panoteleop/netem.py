"""Network impairment: delay, jitter, and bandwidth emulation.

Delivery time for a message entering a link at t_send is

    t_deliver = max(previous t_deliver,
                    t_send + base_delay + jitter + serialization_time)

so ordering is always preserved and nothing arrives earlier than the
base one-way delay. Jitter is Gaussian, clamped at zero. Bandwidth is a
token bucket (burst = two 64 KiB link units) that starts empty, so a
first oversized message pays its full serialization time.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path

BURST_BYTES = 2 * 64 * 1024


@dataclass(frozen=True)
class NetworkProfile:
    name: str = "none"
    base_delay_ms: float = 0.0
    jitter_stddev_ms: float = 0.0
    bandwidth_kbps: float = 0.0     # 0 = unlimited

    def __post_init__(self) -> None:
        if self.base_delay_ms < 0 or self.jitter_stddev_ms < 0 or self.bandwidth_kbps < 0:
            raise ValueError("profile parameters must be nonnegative")

    @property
    def is_noop(self) -> bool:
        return (self.base_delay_ms == 0 and self.jitter_stddev_ms == 0
                and self.bandwidth_kbps == 0)


# Named presets modeling the lab/office/outdoor regimes. These are
# calibration inputs for experiments, not measured claims; bandwidth is
# left unlimited because raw desk-scale frames exceed a real uplink and
# the cap machinery is exercised through explicit profiles.
PRESETS = {
    "none": NetworkProfile("none", 0.0, 0.0, 0.0),
    "office": NetworkProfile("office", 160.0, 10.0, 0.0),
    "laboratory": NetworkProfile("laboratory", 205.0, 15.0, 0.0),
    "outdoor": NetworkProfile("outdoor", 370.0, 25.0, 0.0),
}


def load_profile(spec: str | Path) -> NetworkProfile:
    """Resolve a preset name or a JSON profile file."""
    if isinstance(spec, str) and spec in PRESETS:
        return PRESETS[spec]
    data = json.loads(Path(spec).read_text())
    return NetworkProfile(
        name=data.get("name", Path(spec).stem),
        base_delay_ms=float(data.get("base_delay_ms", 0.0)),
        jitter_stddev_ms=float(data.get("jitter_stddev_ms", 0.0)),
        bandwidth_kbps=float(data.get("bandwidth_kbps", 0.0)),
    )


def save_profile(profile: NetworkProfile, path: str | Path) -> None:
    Path(path).write_text(json.dumps({
        "name": profile.name,
        "base_delay_ms": profile.base_delay_ms,
        "jitter_stddev_ms": profile.jitter_stddev_ms,
        "bandwidth_kbps": profile.bandwidth_kbps,
    }, indent=2))


class ImpairmentTimeline:
    """Delivery schedule for one direction of one link.

    Single owner: callers must feed sends in nondecreasing t_send order.
    """

    def __init__(self, profile: NetworkProfile, rng: random.Random | None = None):
        self.profile = profile
        self._rng = rng or random.Random(0)
        self._prev_deliver = float("-inf")
        self._tokens = 0.0          # bucket starts empty
        self._t_last: float | None = None

    def schedule(self, t_send_s: float, n_bytes: int) -> float:
        """Delivery time in seconds for a message of n_bytes sent at t_send_s."""
        p = self.profile
        ser = 0.0
        if p.bandwidth_kbps > 0:
            rate = p.bandwidth_kbps * 1000.0 / 8.0      # bytes per second
            if self._t_last is not None:
                self._tokens = min(BURST_BYTES,
                                   self._tokens + max(0.0, t_send_s - self._t_last) * rate)
            self._t_last = t_send_s
            # balance may go negative: queued messages accumulate
            # serialization debt that drains at the link rate
            self._tokens -= n_bytes
            if self._tokens < 0:
                ser = -self._tokens / rate
        jitter = 0.0
        if p.jitter_stddev_ms > 0:
            jitter = max(0.0, self._rng.gauss(0.0, p.jitter_stddev_ms / 1000.0))
        t = t_send_s + p.base_delay_ms / 1000.0 + jitter + ser
        self._prev_deliver = max(self._prev_deliver, t)
        return self._prev_deliver


def impair(events, profile: NetworkProfile, rng: random.Random | None = None):
    """Map a stream of (t_send_s, payload) to (t_deliver_s, payload).

    payload may be bytes or an integer byte count.
    """
    tl = ImpairmentTimeline(profile, rng)
    out = []
    for t_send, payload in events:
        size = payload if isinstance(payload, int) else len(payload)
        out.append((tl.schedule(t_send, size), payload))
    return out
