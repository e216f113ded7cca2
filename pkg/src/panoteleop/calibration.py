"""Six-camera rig calibration: construction, validation, JSON file format.

Calibration files store angles in degrees:

    {"cameras": [{"yaw_deg": ..., "pitch_deg": ..., "roll_deg": ...,
                  "f_px_per_rad": ..., "cx": ..., "cy": ...,
                  "width": ..., "height": ..., "fov_deg": ...}, ...]}
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

from .projection import CameraPoseInRig, FisheyeIntrinsics

RIG_SIZE = 6


@dataclass(frozen=True)
class RigCalibration:
    """Ordered set of six (intrinsics, pose) pairs forming the camera ring."""

    cameras: tuple[tuple[FisheyeIntrinsics, CameraPoseInRig], ...]

    def __post_init__(self) -> None:
        if len(self.cameras) != RIG_SIZE:
            raise ValueError(f"rig must have exactly {RIG_SIZE} cameras, got {len(self.cameras)}")

    def __iter__(self):
        return iter(self.cameras)

    def __getitem__(self, i: int) -> tuple[FisheyeIntrinsics, CameraPoseInRig]:
        return self.cameras[i]

    def with_pose_corrections(self, corrections) -> "RigCalibration":
        """New calibration with per-camera (dyaw, dpitch, droll) added."""
        cams = []
        for (intr, pose), (dy, dp, dr) in zip(self.cameras, corrections):
            cams.append((intr, CameraPoseInRig(pose.yaw_rad + dy,
                                               pose.pitch_rad + dp,
                                               pose.roll_rad + dr)))
        return RigCalibration(tuple(cams))


def default_rig(width: int = 320, height: int = 320, f_px_per_rad: float = 145.0,
                fov_deg: float = 120.0) -> RigCalibration:
    """Evenly spaced horizontal ring: yaw k*60 degrees, pitch = roll = 0."""
    intr = FisheyeIntrinsics(
        width_px=width, height_px=height, f_px_per_rad=f_px_per_rad,
        cx_px=(width - 1) / 2.0, cy_px=(height - 1) / 2.0,
        fov_rad=math.radians(fov_deg),
    )
    cams = tuple(
        (intr, CameraPoseInRig(yaw_rad=k * math.pi / 3.0, pitch_rad=0.0, roll_rad=0.0))
        for k in range(RIG_SIZE)
    )
    return RigCalibration(cams)


def save_calibration(calib: RigCalibration, path: str | Path) -> None:
    entries = []
    for intr, pose in calib:
        entries.append({
            "yaw_deg": math.degrees(pose.yaw_rad),
            "pitch_deg": math.degrees(pose.pitch_rad),
            "roll_deg": math.degrees(pose.roll_rad),
            "f_px_per_rad": intr.f_px_per_rad,
            "cx": intr.cx_px,
            "cy": intr.cy_px,
            "width": intr.width_px,
            "height": intr.height_px,
            "fov_deg": math.degrees(intr.fov_rad),
        })
    Path(path).write_text(json.dumps({"cameras": entries}, indent=2))


def load_calibration(path: str | Path) -> RigCalibration:
    data = json.loads(Path(path).read_text())
    entries = data.get("cameras")
    if not isinstance(entries, list):
        raise ValueError("calibration file missing 'cameras' list")
    cams = []
    for e in entries:
        intr = FisheyeIntrinsics(
            width_px=int(e["width"]), height_px=int(e["height"]),
            f_px_per_rad=float(e["f_px_per_rad"]),
            cx_px=float(e["cx"]), cy_px=float(e["cy"]),
            fov_rad=math.radians(float(e["fov_deg"])),
        )
        pose = CameraPoseInRig(
            yaw_rad=math.radians(float(e["yaw_deg"])),
            pitch_rad=math.radians(float(e["pitch_deg"])),
            roll_rad=math.radians(float(e["roll_deg"])),
        )
        cams.append((intr, pose))
    return RigCalibration(tuple(cams))
