"""Pure geometry: fisheye camera model, equirectangular panorama mapping,
and perspective viewport rendering.

Conventions used throughout the package:

  - Rig / world frame: x forward, y left, z up (right-handed).
  - Camera optical frame: x right, y down, z along the optical axis.
    This matches image pixel axes (x right, y down).
  - Equirectangular panorama: u in [0, 1) maps yaw in [-pi, pi),
    v in [0, 1] maps pitch from +pi/2 (top row) down to -pi/2.
    Pixel (i, j) covers u = (i + 0.5) / W, v = (j + 0.5) / H.
  - Fisheye lens: equidistant model, radius = f_px_per_rad * theta where
    theta is the angle from the optical axis.

All functions are pure and safe to call from multiple threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

WORLD_UP = np.array([0.0, 0.0, 1.0])

_UNIT_TOL = 1e-9
_POLE_EPS = 1e-12


def wrap_angle(a: float) -> float:
    """Normalize an angle to (-pi, pi]."""
    a = math.fmod(a, 2.0 * math.pi)
    if a > math.pi:
        a -= 2.0 * math.pi
    elif a <= -math.pi:
        a += 2.0 * math.pi
    return a


@dataclass(frozen=True)
class FisheyeIntrinsics:
    """Equidistant fisheye camera model.

    The image circle (radius f_px_per_rad * fov_rad / 2 around the
    principal point) must fit inside the image bounds.
    """

    width_px: int
    height_px: int
    f_px_per_rad: float
    cx_px: float
    cy_px: float
    fov_rad: float

    def __post_init__(self) -> None:
        if self.width_px <= 0 or self.height_px <= 0:
            raise ValueError("image dimensions must be positive")
        if self.f_px_per_rad <= 0:
            raise ValueError("f_px_per_rad must be positive")
        if not (0.0 < self.fov_rad <= math.pi):
            raise ValueError("fov_rad must be in (0, pi]")
        r = self.image_circle_radius_px
        if (self.cx_px - r < -0.5 or self.cx_px + r > self.width_px - 0.5
                or self.cy_px - r < -0.5 or self.cy_px + r > self.height_px - 0.5):
            raise ValueError("image circle does not fit inside image bounds")

    @property
    def image_circle_radius_px(self) -> float:
        return self.f_px_per_rad * self.fov_rad / 2.0


@dataclass(frozen=True)
class CameraPoseInRig:
    """Orientation of one camera within the rig (rotation rig -> camera)."""

    yaw_rad: float
    pitch_rad: float
    roll_rad: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "yaw_rad", wrap_angle(self.yaw_rad))
        object.__setattr__(self, "pitch_rad", wrap_angle(self.pitch_rad))
        object.__setattr__(self, "roll_rad", wrap_angle(self.roll_rad))

    def rotation_rig_from_cam(self) -> np.ndarray:
        return rotation_rig_from_cam(self.yaw_rad, self.pitch_rad, self.roll_rad)


@dataclass(frozen=True)
class ViewPose:
    """Operator view orientation in the rig frame."""

    yaw_rad: float = 0.0
    pitch_rad: float = 0.0
    roll_rad: float = 0.0

    def __post_init__(self) -> None:
        if not (-math.pi / 2 <= self.pitch_rad <= math.pi / 2):
            raise ValueError("pitch_rad must be in [-pi/2, pi/2]")

    def rotation_rig_from_cam(self) -> np.ndarray:
        return rotation_rig_from_cam(self.yaw_rad, self.pitch_rad, self.roll_rad)


def rotation_rig_from_cam(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """Rotation matrix mapping camera-frame vectors into the rig frame.

    The optical axis points at (yaw, pitch); roll spins the image about
    the optical axis. Columns of the returned matrix are the camera's
    x (right), y (down), z (forward) axes expressed in rig coordinates.
    """
    cp, sp = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    forward = np.array([cp * cy, cp * sy, sp])
    # Right-handed basis with "up" disambiguating the roll-free frame.
    # Degenerate only when the optical axis is vertical; nudge to keep a
    # stable basis there.
    right = np.cross(forward, WORLD_UP)
    n = np.linalg.norm(right)
    if n < 1e-12:
        right = np.array([math.sin(yaw), -math.cos(yaw), 0.0])
    else:
        right = right / n
    down = np.cross(forward, right)
    cr, sr = math.cos(roll), math.sin(roll)
    right_r = cr * right + sr * down
    down_r = -sr * right + cr * down
    return np.column_stack([right_r, down_r, forward])


def _check_unit(direction: np.ndarray) -> np.ndarray:
    d = np.asarray(direction, dtype=np.float64).reshape(3)
    if abs(np.linalg.norm(d) - 1.0) > _UNIT_TOL:
        raise ValueError("direction must be a unit vector")
    return d


def fisheye_project(direction: np.ndarray, intr: FisheyeIntrinsics) -> tuple[float, float] | None:
    """Project a unit direction (camera frame) to pixel coordinates.

    Returns None when the ray falls outside the lens field of view.
    Raises ValueError for non-unit input.
    """
    d = _check_unit(direction)
    theta = math.acos(min(1.0, max(-1.0, d[2])))
    if theta > intr.fov_rad / 2.0 + 1e-12:
        return None
    r = intr.f_px_per_rad * theta
    phi = math.atan2(d[1], d[0])
    return (intr.cx_px + r * math.cos(phi), intr.cy_px + r * math.sin(phi))


def fisheye_project_many(dirs: np.ndarray, intr: FisheyeIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized fisheye projection.

    Args:
        dirs: (N, 3) unit directions in the camera frame.

    Returns:
        xy: (N, 2) pixel coordinates (valid entries only are meaningful).
        valid: (N,) bool mask, True where theta <= fov/2.
    """
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    theta = np.arccos(np.clip(d[:, 2], -1.0, 1.0))
    valid = theta <= intr.fov_rad / 2.0 + 1e-12
    r = intr.f_px_per_rad * theta
    phi = np.arctan2(d[:, 1], d[:, 0])
    xy = np.column_stack([intr.cx_px + r * np.cos(phi), intr.cy_px + r * np.sin(phi)])
    return xy, valid


def fisheye_unproject(pixel: tuple[float, float], intr: FisheyeIntrinsics) -> np.ndarray | None:
    """Inverse of fisheye_project. Returns None outside the image circle."""
    dx = pixel[0] - intr.cx_px
    dy = pixel[1] - intr.cy_px
    r = math.hypot(dx, dy)
    theta = r / intr.f_px_per_rad
    if theta > intr.fov_rad / 2.0 + 1e-12:
        return None
    if r < 1e-15:
        return np.array([0.0, 0.0, 1.0])
    s = math.sin(theta) / r
    return np.array([dx * s, dy * s, math.cos(theta)])


def fisheye_unproject_grid(intr: FisheyeIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Unproject every pixel center of a fisheye image.

    Returns:
        dirs: (H, W, 3) unit directions in the camera frame (garbage where
            invalid).
        valid: (H, W) bool mask, True inside the image circle.
    """
    xs = np.arange(intr.width_px, dtype=np.float64) - intr.cx_px
    ys = np.arange(intr.height_px, dtype=np.float64) - intr.cy_px
    dx, dy = np.meshgrid(xs, ys)
    r = np.hypot(dx, dy)
    theta = r / intr.f_px_per_rad
    valid = theta <= intr.fov_rad / 2.0 + 1e-12
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(r > 1e-15, np.sin(theta) / np.maximum(r, 1e-15), 0.0)
    dirs = np.stack([dx * s, dy * s, np.cos(theta)], axis=-1)
    dirs[r <= 1e-15] = (0.0, 0.0, 1.0)
    return dirs, valid


def equirect_to_direction(u: float, v: float) -> np.ndarray:
    """Map normalized panorama coordinates to a unit direction in the rig frame."""
    yaw = u * 2.0 * math.pi - math.pi
    pitch = math.pi / 2.0 - v * math.pi
    cp = math.cos(pitch)
    return np.array([cp * math.cos(yaw), cp * math.sin(yaw), math.sin(pitch)])


def direction_to_equirect(direction: np.ndarray) -> tuple[float, float]:
    """Map a unit direction to normalized panorama coordinates.

    At the poles (|pitch| = pi/2) u is 0 by convention.
    """
    d = _check_unit(direction)
    z = min(1.0, max(-1.0, d[2]))
    pitch = math.asin(z)
    if 1.0 - abs(z) < _POLE_EPS:
        u = 0.0
    else:
        yaw = math.atan2(d[1], d[0])
        u = (yaw + math.pi) / (2.0 * math.pi) % 1.0
    v = (math.pi / 2.0 - pitch) / math.pi
    return (u, v)


def equirect_to_direction_many(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    yaw = u * (2.0 * np.pi) - np.pi
    pitch = np.pi / 2.0 - v * np.pi
    cp = np.cos(pitch)
    return np.stack([cp * np.cos(yaw), cp * np.sin(yaw), np.sin(pitch)], axis=-1)


def direction_to_equirect_many(dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = np.asarray(dirs, dtype=np.float64)
    z = np.clip(d[..., 2], -1.0, 1.0)
    pitch = np.arcsin(z)
    yaw = np.arctan2(d[..., 1], d[..., 0])
    u = ((yaw + np.pi) / (2.0 * np.pi)) % 1.0
    u = np.where(1.0 - np.abs(z) < _POLE_EPS, 0.0, u)
    v = (np.pi / 2.0 - pitch) / np.pi
    return u, v


def round_half_up(values: np.ndarray) -> np.ndarray:
    """Round to nearest integer, halves away from zero toward +inf.

    Channel values are nonnegative here, so floor(x + 0.5) is the
    "half-up" rule used for all pixel output in this package.
    """
    return np.floor(np.asarray(values) + 0.5)


def bilinear_gather(image: np.ndarray, xs: np.ndarray, ys: np.ndarray,
                    wrap_u: bool = False) -> np.ndarray:
    """Sample an image at fractional pixel coordinates, vectorized.

    x wraps around horizontally when wrap_u is True (panoramas) and is
    clamped otherwise; y is always clamped at the top/bottom rows.
    Returns float64 samples of shape xs.shape + (channels,) for color
    images or xs.shape for single-channel ones. No rounding is applied.
    """
    img = np.asarray(image)
    h, w = img.shape[:2]
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if wrap_u:
        xs = np.mod(xs, w)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    x1 = x0 + 1
    y1 = y0 + 1
    if wrap_u:
        x0 = np.mod(x0, w)
        x1 = np.mod(x1, w)
    else:
        x0 = np.clip(x0, 0, w - 1)
        x1 = np.clip(x1, 0, w - 1)
    y0 = np.clip(y0, 0, h - 1)
    y1 = np.clip(y1, 0, h - 1)

    # gather first, convert only the gathered values (converting the
    # whole image is ruinous for large maps sampled sparsely)
    flat = img.reshape(h * w, -1)
    i00 = y0 * w + x0
    i01 = y0 * w + x1
    i10 = y1 * w + x0
    i11 = y1 * w + x1
    fxe, fye = fx[..., None], fy[..., None]
    top = flat[i00].astype(np.float64) * (1.0 - fxe) + flat[i01].astype(np.float64) * fxe
    bot = flat[i10].astype(np.float64) * (1.0 - fxe) + flat[i11].astype(np.float64) * fxe
    out = top * (1.0 - fye) + bot * fye
    if img.ndim == 2:
        return out.reshape(xs.shape)
    return out.reshape(xs.shape + (img.shape[2],))


def sample_bilinear(image: np.ndarray, x: float, y: float, wrap_u: bool = False):
    """Sample one pixel value with bilinear interpolation.

    The result is rounded half-up to integer channel values; use
    bilinear_gather for unrounded batch sampling.
    """
    img = np.asarray(image)
    if img.size == 0:
        raise ValueError("image is empty")
    val = bilinear_gather(img, np.array([x]), np.array([y]), wrap_u=wrap_u)[0]
    rounded = round_half_up(val)
    if np.isscalar(rounded) or rounded.ndim == 0:
        return int(rounded)
    return rounded.astype(np.int64)


def view_ray_grid(fov_rad: float, out_w: int, out_h: int) -> np.ndarray:
    """Unit rays through each viewport pixel center, in the view frame.

    fov_rad is the horizontal field of view across the full width.
    """
    if out_w <= 0 or out_h <= 0:
        raise ValueError("viewport dimensions must be positive")
    if not (0.0 < fov_rad < math.pi):
        raise ValueError("fov_rad must be in (0, pi)")
    f = (out_w / 2.0) / math.tan(fov_rad / 2.0)
    cx = (out_w - 1) / 2.0
    cy = (out_h - 1) / 2.0
    px = (np.arange(out_w, dtype=np.float64) - cx) / f
    py = (np.arange(out_h, dtype=np.float64) - cy) / f
    gx, gy = np.meshgrid(px, py)
    rays = np.stack([gx, gy, np.ones_like(gx)], axis=-1)
    rays /= np.linalg.norm(rays, axis=-1, keepdims=True)
    return rays


def view_sample_coords(pose: ViewPose, fov_rad: float, out_w: int, out_h: int,
                       pano_w: int, pano_h: int) -> tuple[np.ndarray, np.ndarray]:
    """Panorama pixel coordinates sampled by each viewport pixel.

    Exposed separately from render_view so the coordinate mapping can be
    checked exactly, before any interpolation.
    """
    rays = view_ray_grid(fov_rad, out_w, out_h)
    rot = pose.rotation_rig_from_cam()
    world = rays @ rot.T
    u, v = direction_to_equirect_many(world)
    xs = u * pano_w - 0.5
    ys = v * pano_h - 0.5
    return xs, ys


def render_view(pano: np.ndarray, pose: ViewPose, fov_rad: float,
                out_w: int, out_h: int) -> np.ndarray:
    """Render a pinhole viewport from an equirectangular panorama.

    Purely local: samples the panorama with bilinear interpolation
    (horizontal wrap, vertical clamp) and never touches any transport.
    """
    pano = np.asarray(pano)
    xs, ys = view_sample_coords(pose, fov_rad, out_w, out_h,
                                pano.shape[1], pano.shape[0])
    out = bilinear_gather(pano, xs, ys, wrap_u=True)
    return np.clip(round_half_up(out), 0, 255).astype(np.uint8)


class ViewportRenderer:
    """render_view with the sample coordinates precomputed.

    Worth it when the pose is fixed across many frames (the latency
    harness's inspection view, a console with an idle camera).
    """

    def __init__(self, pose: ViewPose, fov_rad: float, out_w: int, out_h: int,
                 pano_w: int, pano_h: int):
        self.pose = pose
        self.fov_rad = fov_rad
        self.out_w = out_w
        self.out_h = out_h
        self.pano_w = pano_w
        self.pano_h = pano_h
        self.xs, self.ys = view_sample_coords(pose, fov_rad, out_w, out_h, pano_w, pano_h)

    def render(self, pano: np.ndarray) -> np.ndarray:
        if pano.shape[:2] != (self.pano_h, self.pano_w):
            raise ValueError("panorama size does not match precomputed coords")
        out = bilinear_gather(pano, self.xs, self.ys, wrap_u=True)
        return np.clip(round_half_up(out), 0, 255).astype(np.uint8)


def angular_distance(d1: np.ndarray, d2: np.ndarray) -> float:
    """Angle in radians between two directions."""
    a = np.asarray(d1, dtype=np.float64)
    b = np.asarray(d2, dtype=np.float64)
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    return float(np.arccos(np.clip(np.dot(a, b), -1.0, 1.0)))
