"""Synthetic world for the simulated device.

The world is an equirectangular environment map at infinity, optionally
augmented with a flat ground grid and textured billboards at finite
distance. Camera views are rendered by unprojecting pixel rays and
sampling the scene, which keeps the device pipeline's capture stage real
without physical hardware.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import cv2
import numpy as np

from .projection import (
    FisheyeIntrinsics,
    CameraPoseInRig,
    bilinear_gather,
    direction_to_equirect_many,
    fisheye_unproject_grid,
    round_half_up,
)

RIG_HEIGHT_M = 0.5


@dataclass
class Billboard:
    """Textured rectangle facing whatever direction its edges define."""

    center_m: np.ndarray
    right_m: np.ndarray
    down_m: np.ndarray
    texture: np.ndarray

    def __post_init__(self) -> None:
        self.center_m = np.asarray(self.center_m, dtype=np.float64)
        self.right_m = np.asarray(self.right_m, dtype=np.float64)
        self.down_m = np.asarray(self.down_m, dtype=np.float64)


@dataclass
class GroundPlane:
    """z = 0 plane with a meter grid that fades into the horizon."""

    grid_pitch_m: float = 1.0
    line_halfwidth_m: float = 0.06
    fade_distance_m: float = 40.0
    base_color: tuple = (96, 116, 96)
    line_color: tuple = (200, 200, 210)


@dataclass
class SceneEnvironment:
    env_map: np.ndarray
    billboards: list[Billboard] = field(default_factory=list)
    ground: GroundPlane | None = None

    def __post_init__(self) -> None:
        h, w = self.env_map.shape[:2]
        if w != 2 * h:
            raise ValueError("environment map width must be 2x height")

    @property
    def has_finite_geometry(self) -> bool:
        return bool(self.billboards) or self.ground is not None

    def sample_env(self, dirs: np.ndarray) -> np.ndarray:
        """Sample the infinity map along unit directions (world frame)."""
        h, w = self.env_map.shape[:2]
        u, v = direction_to_equirect_many(dirs)
        return bilinear_gather(self.env_map, u * w - 0.5, v * h - 0.5, wrap_u=True)

    def sample_rays(self, origin_m: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Color along each ray: nearest finite hit, else the infinity map."""
        d = np.asarray(dirs, dtype=np.float64)
        shape = d.shape[:-1]
        flat = d.reshape(-1, 3)
        out = self.sample_env(flat)
        if not self.has_finite_geometry:
            return out.reshape(shape + (3,))

        origin = np.asarray(origin_m, dtype=np.float64)
        best_t = np.full(flat.shape[0], np.inf)

        if self.ground is not None and origin[2] > 0:
            g = self.ground
            dz = flat[:, 2]
            with np.errstate(divide="ignore"):
                t = np.where(dz < -1e-9, -origin[2] / dz, np.inf)
            hit = np.isfinite(t)
            if hit.any():
                px = origin[0] + t[hit] * flat[hit, 0]
                py = origin[1] + t[hit] * flat[hit, 1]
                dist = t[hit]
                fx = np.abs(px - np.round(px / g.grid_pitch_m) * g.grid_pitch_m)
                fy = np.abs(py - np.round(py / g.grid_pitch_m) * g.grid_pitch_m)
                on_line = (fx < g.line_halfwidth_m) | (fy < g.line_halfwidth_m)
                color = np.where(on_line[:, None], np.array(g.line_color, dtype=np.float64),
                                 np.array(g.base_color, dtype=np.float64))
                alpha = np.clip(1.0 - dist / g.fade_distance_m, 0.0, 1.0)[:, None]
                out[hit] = alpha * color + (1.0 - alpha) * out[hit]
                best_t[hit] = np.where(alpha[:, 0] > 0, dist, np.inf)

        for bb in self.billboards:
            normal = np.cross(bb.right_m, bb.down_m)
            nn = np.linalg.norm(normal)
            if nn < 1e-12:
                continue
            normal = normal / nn
            denom = flat @ normal
            with np.errstate(divide="ignore", invalid="ignore"):
                t = np.where(np.abs(denom) > 1e-9,
                             ((bb.center_m - origin) @ normal) / denom, np.inf)
            cand = (t > 1e-6) & (t < best_t)
            if not cand.any():
                continue
            pts = origin + t[cand, None] * flat[cand]
            rel = pts - bb.center_m
            a = rel @ bb.right_m / (bb.right_m @ bb.right_m)
            b = rel @ bb.down_m / (bb.down_m @ bb.down_m)
            inside = (np.abs(a) <= 1.0) & (np.abs(b) <= 1.0)
            if not inside.any():
                continue
            th, tw = bb.texture.shape[:2]
            xs = (a[inside] + 1.0) / 2.0 * tw - 0.5
            ys = (b[inside] + 1.0) / 2.0 * th - 0.5
            tex = bilinear_gather(bb.texture, xs, ys)
            idx = np.flatnonzero(cand)[inside]
            out[idx] = tex
            best_t[idx] = t[idx]

        return out.reshape(shape + (3,))


def synthetic_environment(seed: int, width: int = 2048, height: int = 1024) -> np.ndarray:
    """Seeded environment map: smooth bands plus blobs and blocks.

    Content is mostly low-frequency (kind to double resampling) with
    enough distinct structure for feature detection. Blobs wrap
    horizontally so the map is seamless at u = 0.
    """
    rng = np.random.default_rng(seed)
    v = np.linspace(0.0, 1.0, height)[:, None]
    u = np.linspace(0.0, 1.0, width, endpoint=False)[None, :]

    img = np.zeros((height, width, 3), dtype=np.float64)
    sky = np.array([115.0, 150.0, 205.0])
    horizon = np.array([190.0, 185.0, 160.0])
    ground = np.array([95.0, 110.0, 90.0])
    band = np.clip((v - 0.35) / 0.3, 0.0, 1.0)
    img += (1 - band)[..., None] * (sky + (horizon - sky) * np.clip(v / 0.5, 0, 1)[..., None])
    img += band[..., None] * (horizon + (ground - horizon) * band[..., None])

    # large-scale azimuthal variation, period-1 in u so the seam is clean
    for k in (1, 2, 3):
        phase = rng.uniform(0, 2 * math.pi)
        amp = rng.uniform(6, 16)
        img += amp * np.sin(2 * math.pi * k * u + phase)[..., None] * np.array([1.0, 0.8, 0.6])

    for _ in range(40):
        bu = rng.uniform(0, 1)
        bv = rng.uniform(0.15, 0.85)
        sigma_u = rng.uniform(0.008, 0.05)
        sigma_v = sigma_u * rng.uniform(0.7, 1.4)
        color = rng.uniform(-80, 80, 3)
        du = (u - bu + 0.5) % 1.0 - 0.5
        g = np.exp(-0.5 * ((du / sigma_u) ** 2 + ((v - bv) / sigma_v) ** 2))
        img += g[..., None] * color

    lo, hi = max(4, height // 42), max(8, height // 11)
    for _ in range(25):
        w_px = int(rng.uniform(lo, hi))
        h_px = int(rng.uniform(lo, hi))
        x0 = int(rng.uniform(0, width - w_px))
        y0 = int(rng.uniform(0.2 * height, 0.8 * height - h_px))
        color = rng.uniform(30, 225, 3)
        img[y0:y0 + h_px, x0:x0 + w_px] = color

    img = np.clip(img, 0, 255).astype(np.uint8)

    # speckle layer: small high-contrast spots give feature detectors
    # something to latch onto; duplicated at +-width so the seam wraps
    n_spots = max(60, width * height // 1800)
    r_lo, r_hi = max(2, height // 170), max(4, height // 40)
    for _ in range(n_spots):
        cx = int(rng.uniform(0, width))
        cy = int(rng.uniform(0.18 * height, 0.82 * height))
        radius = int(rng.uniform(r_lo, r_hi))
        color = tuple(int(c) for c in rng.uniform(0, 255, 3))
        round_shape = rng.random() < 0.5
        for ox in (-width, 0, width):
            if round_shape:
                cv2.circle(img, (cx + ox, cy), radius, color, -1, lineType=cv2.LINE_AA)
            else:
                cv2.rectangle(img, (cx + ox - radius, cy - radius),
                              (cx + ox + radius, cy + radius), color, -1)

    return cv2.GaussianBlur(img, (0, 0), sigmaX=1.0, borderType=cv2.BORDER_WRAP)


class FisheyeRenderer:
    """Renders one camera's fisheye view of a scene.

    Pixel-ray unprojection is precomputed per camera. For infinity-only
    scenes a device heading change is a pure u-shift in map sampling, so
    per-frame work reduces to one shifted bilinear gather.
    """

    def __init__(self, intr: FisheyeIntrinsics, pose: CameraPoseInRig):
        self.intr = intr
        self.pose = pose
        dirs, valid = fisheye_unproject_grid(intr)
        self._valid = valid
        self._dirs_rig = dirs.reshape(-1, 3) @ pose.rotation_rig_from_cam().T
        u0, v0 = direction_to_equirect_many(self._dirs_rig)
        self._u0 = u0
        self._v0 = v0

    def render(self, scene: SceneEnvironment, position_m: np.ndarray,
               heading_rad: float) -> np.ndarray:
        h, w = self.intr.height_px, self.intr.width_px
        if scene.has_finite_geometry:
            c, s = math.cos(heading_rad), math.sin(heading_rad)
            rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
            world = self._dirs_rig @ rz.T
            colors = scene.sample_rays(np.asarray(position_m, dtype=np.float64), world)
        else:
            eh, ew = scene.env_map.shape[:2]
            xs = (self._u0 + heading_rad / (2 * math.pi)) * ew - 0.5
            ys = self._v0 * eh - 0.5
            colors = bilinear_gather(scene.env_map, xs, ys, wrap_u=True)
        out = np.zeros((h * w, 3), dtype=np.uint8)
        vmask = self._valid.reshape(-1)
        out[vmask] = np.clip(round_half_up(colors[vmask]), 0, 255).astype(np.uint8)
        return out.reshape(h, w, 3)


class RigRenderer:
    """Renders all six cameras at once.

    For infinity-only scenes the per-camera sample coordinates are
    precomputed and concatenated, so a whole rig render is one shifted
    bilinear gather over the environment map.
    """

    def __init__(self, renderers: list[FisheyeRenderer]):
        self.renderers = renderers
        self._u0 = np.concatenate([r._u0 for r in renderers])
        self._v0 = np.concatenate([r._v0 for r in renderers])
        self._valid = np.concatenate([r._valid.reshape(-1) for r in renderers])
        self._sizes = [(r.intr.height_px, r.intr.width_px) for r in renderers]
        self._splits = np.cumsum([h * w for h, w in self._sizes])[:-1]

    def render(self, scene: SceneEnvironment, position_m: np.ndarray,
               heading_rad: float) -> list[np.ndarray]:
        if scene.has_finite_geometry:
            return [r.render(scene, position_m, heading_rad) for r in self.renderers]
        eh, ew = scene.env_map.shape[:2]
        xs = (self._u0 + heading_rad / (2 * math.pi)) * ew - 0.5
        ys = self._v0 * eh - 0.5
        colors = bilinear_gather(scene.env_map, xs, ys, wrap_u=True)
        flat = np.zeros((len(self._u0), 3), dtype=np.uint8)
        flat[self._valid] = np.clip(round_half_up(colors[self._valid]), 0, 255).astype(np.uint8)
        return [chunk.reshape(h, w, 3)
                for chunk, (h, w) in zip(np.split(flat, self._splits), self._sizes)]


def render_panorama(scene: SceneEnvironment, position_m: np.ndarray, heading_rad: float,
                    pano_w: int, pano_h: int) -> np.ndarray:
    """Directly render the equirectangular panorama seen from a device pose.

    Samples the scene along the direction of every panorama pixel. This
    is the ground-truth image the capture-and-stitch pipeline tries to
    reproduce.
    """
    from .projection import equirect_to_direction_many

    u = (np.arange(pano_w, dtype=np.float64) + 0.5) / pano_w
    v = (np.arange(pano_h, dtype=np.float64) + 0.5) / pano_h
    uu, vv = np.meshgrid(u, v)
    dirs = equirect_to_direction_many(uu, vv)
    c, s = math.cos(heading_rad), math.sin(heading_rad)
    rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    world = dirs.reshape(-1, 3) @ rz.T
    colors = scene.sample_rays(np.asarray(position_m, dtype=np.float64), world)
    out = np.clip(round_half_up(colors), 0, 255).astype(np.uint8)
    return out.reshape(pano_h, pano_w, 3)
