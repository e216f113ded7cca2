"""Fisheye-to-panorama stitching.

A StitchMap is precomputed from rig calibration: for every panorama
pixel it stores which cameras see that direction and with what blend
weight (linear feather by angular distance to each camera's field-of-view
edge, normalized to sum to 1). Per-frame stitching is then a handful of
vectorized gathers, cheap enough for a live pipeline.

Feature-based seam refinement estimates small per-camera orientation
corrections from matched keypoints in overlap regions and rebuilds the
map; it runs at session start or on demand, not per frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import cv2
import numpy as np
from scipy import sparse

from .calibration import RIG_SIZE, RigCalibration
from .projection import (
    CameraPoseInRig,
    equirect_to_direction_many,
    fisheye_unproject,
    round_half_up,
    wrap_angle,
)

FILL_VALUE = 128          # mid-gray for uncovered pixels
RATIO_TEST = 0.75
MAX_CORRECTION_RAD = 0.1  # sanity bound on any single correction
MIN_MATCHES_PER_SEAM = 4
_GEOM_GATE_RAD = 0.06     # drop matches grossly inconsistent with calibration
# Sub-pixel keypoint localization carries a systematic bias of a couple
# of milliradians between differently-warped views; fitted corrections
# below this floor are measurement artifacts and are not applied.
CORRECTION_DEADBAND_RAD = 0.004


@dataclass
class _Layer:
    """One camera's contribution: fused blend x bilinear gather plan."""

    pano_idx: np.ndarray      # flat panorama indices this camera covers
    src_idx: np.ndarray       # (4, n) flat source-pixel indices
    weights: np.ndarray       # (4, n) blend weight x bilinear weight


@dataclass
class StitchMap:
    pano_w: int
    pano_h: int
    frame_sizes: list[tuple[int, int]]
    layers: list[_Layer]
    covered: np.ndarray         # (pano_h, pano_w) bool
    blend_weights: np.ndarray   # (6, pano_h, pano_w) float32, pre-bilinear
    contributors: np.ndarray    # (pano_h, pano_w) uint8 count
    matrix: sparse.csr_matrix | None = None      # (pano px, sum of cam px)
    frame_offsets: list[int] | None = None       # camera slices into the matrix columns


def build_stitch_map(calib: RigCalibration, pano_w: int, pano_h: int) -> StitchMap:
    """Precompute the per-pixel camera lookup for a panorama size.

    Every panorama pixel direction is projected into every camera; the
    cameras whose field of view contains it contribute with a weight
    proportional to the angular margin to their fov edge.
    """
    if pano_w != 2 * pano_h:
        raise ValueError("panorama width must be 2x height")

    u = (np.arange(pano_w, dtype=np.float64) + 0.5) / pano_w
    v = (np.arange(pano_h, dtype=np.float64) + 0.5) / pano_h
    uu, vv = np.meshgrid(u, v)
    dirs = equirect_to_direction_many(uu, vv).reshape(-1, 3)
    n_px = dirs.shape[0]

    margins = np.zeros((RIG_SIZE, n_px), dtype=np.float64)
    coords = []
    for k, (intr, pose) in enumerate(calib):
        d_cam = dirs @ pose.rotation_rig_from_cam()   # rig -> camera frame
        theta = np.arccos(np.clip(d_cam[:, 2], -1.0, 1.0))
        margin = intr.fov_rad / 2.0 - theta
        margins[k] = np.maximum(margin, 0.0)
        r = intr.f_px_per_rad * theta
        phi = np.arctan2(d_cam[:, 1], d_cam[:, 0])
        coords.append((intr.cx_px + r * np.cos(phi), intr.cy_px + r * np.sin(phi)))

    total = margins.sum(axis=0)
    covered_flat = total > 0
    contributors = (margins > 0).sum(axis=0).astype(np.uint8)

    layers = []
    blend = np.zeros((RIG_SIZE, n_px), dtype=np.float32)
    for k, (intr, _) in enumerate(calib):
        sel = margins[k] > 0
        w_blend = np.zeros(n_px)
        w_blend[sel] = margins[k][sel] / total[sel]
        blend[k] = w_blend.astype(np.float32)
        idx = np.flatnonzero(sel)
        xs, ys = coords[k][0][idx], coords[k][1][idx]
        x0 = np.clip(np.floor(xs).astype(np.int64), 0, intr.width_px - 1)
        y0 = np.clip(np.floor(ys).astype(np.int64), 0, intr.height_px - 1)
        x1 = np.minimum(x0 + 1, intr.width_px - 1)
        y1 = np.minimum(y0 + 1, intr.height_px - 1)
        fx = np.clip(xs - x0, 0.0, 1.0)
        fy = np.clip(ys - y0, 0.0, 1.0)
        wb = w_blend[idx]
        src_idx = np.stack([y0 * intr.width_px + x0, y0 * intr.width_px + x1,
                            y1 * intr.width_px + x0, y1 * intr.width_px + x1])
        weights = np.stack([wb * (1 - fx) * (1 - fy), wb * fx * (1 - fy),
                            wb * (1 - fx) * fy, wb * fx * fy]).astype(np.float32)
        layers.append(_Layer(pano_idx=idx.astype(np.int64),
                             src_idx=src_idx.astype(np.int64),
                             weights=weights))

    # fuse all layers into one sparse blend matrix: stitching becomes a
    # single CSR matmul against the stacked camera pixels
    offsets = [0]
    for intr, _ in calib:
        offsets.append(offsets[-1] + intr.width_px * intr.height_px)
    rows, cols, vals = [], [], []
    for k, layer in enumerate(layers):
        for tap in range(4):
            rows.append(layer.pano_idx)
            cols.append(layer.src_idx[tap] + offsets[k])
            vals.append(layer.weights[tap])
    matrix = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_px, offsets[-1]), dtype=np.float32)

    return StitchMap(
        pano_w=pano_w, pano_h=pano_h,
        frame_sizes=[(intr.width_px, intr.height_px) for intr, _ in calib],
        layers=layers,
        covered=covered_flat.reshape(pano_h, pano_w),
        blend_weights=blend.reshape(RIG_SIZE, pano_h, pano_w),
        contributors=contributors.reshape(pano_h, pano_w),
        matrix=matrix,
        frame_offsets=offsets,
    )


def _check_frames(frames, smap: StitchMap) -> None:
    if len(frames) != RIG_SIZE:
        raise ValueError(f"expected {RIG_SIZE} frames, got {len(frames)}")
    for k, f in enumerate(frames):
        if f is None:
            raise ValueError(f"frame {k} missing")
        w, h = smap.frame_sizes[k]
        if f.shape[:2] != (h, w):
            raise ValueError(f"frame {k} is {f.shape[1]}x{f.shape[0]}, map expects {w}x{h}")


def stitch(frames, smap: StitchMap, gains: np.ndarray | None = None) -> np.ndarray:
    """Blend six fisheye frames into one equirectangular panorama.

    Deterministic: identical inputs produce bit-identical output.
    Uncovered pixels are filled with mid-gray.
    """
    _check_frames(frames, smap)
    stacked = np.empty((smap.frame_offsets[-1], 3), dtype=np.float32)
    for k, f in enumerate(frames):
        block = f.reshape(-1, 3).astype(np.float32)
        if gains is not None:
            block = block * gains[k].astype(np.float32)
        stacked[smap.frame_offsets[k]:smap.frame_offsets[k + 1]] = block
    acc = smap.matrix @ stacked
    out = np.clip(round_half_up(acc), 0, 255).astype(np.uint8)
    out[~smap.covered.reshape(-1)] = FILL_VALUE
    return out.reshape(smap.pano_h, smap.pano_w, 3)


def compute_gains(frames, smap: StitchMap, clip_range=(0.5, 2.0)) -> np.ndarray:
    """Per-camera, per-channel gain equalization from overlap-region means.

    In overlap regions every camera sees the same scene, so differing
    means indicate exposure/white-balance mismatch; each camera is scaled
    toward the cross-camera average. Returns a (6, 3) gain array.
    """
    _check_frames(frames, smap)
    overlap = (smap.contributors >= 2).reshape(-1)
    means = np.zeros((RIG_SIZE, 3))
    for k, layer in enumerate(smap.layers):
        sel = overlap[layer.pano_idx]
        if sel.sum() < 16:
            means[k] = np.nan
            continue
        src = frames[k].reshape(-1, 3).astype(np.float64)
        # plain bilinear sample of this camera at its overlap pixels
        wsum = layer.weights[:, sel].sum(axis=0)
        vals = sum(src[layer.src_idx[i][sel]] * layer.weights[i][sel][:, None] for i in range(4))
        means[k] = (vals / wsum[:, None]).mean(axis=0)
    valid = ~np.isnan(means[:, 0])
    if valid.sum() < 2:
        return np.ones((RIG_SIZE, 3))
    target = means[valid].mean(axis=0)
    gains = np.ones((RIG_SIZE, 3))
    gains[valid] = target / np.maximum(means[valid], 1e-6)
    return np.clip(gains, clip_range[0], clip_range[1])


@dataclass
class Match:
    xa: float
    ya: float
    xb: float
    yb: float
    score: float


def detect_and_match(image_a: np.ndarray, image_b: np.ndarray,
                     ratio: float = RATIO_TEST) -> list[Match]:
    """Scale/rotation-robust keypoint matches between two images.

    SIFT keypoints with descriptor nearest-neighbor matching under a
    ratio test. Returns an empty list for featureless inputs.
    """
    if image_a.size == 0 or image_b.size == 0:
        raise ValueError("images must be non-empty")
    sift = cv2.SIFT_create()
    gray_a = cv2.cvtColor(image_a, cv2.COLOR_RGB2GRAY) if image_a.ndim == 3 else image_a
    gray_b = cv2.cvtColor(image_b, cv2.COLOR_RGB2GRAY) if image_b.ndim == 3 else image_b
    kp_a, des_a = sift.detectAndCompute(gray_a, None)
    kp_b, des_b = sift.detectAndCompute(gray_b, None)
    if des_a is None or des_b is None or len(kp_a) < 2 or len(kp_b) < 2:
        return []
    matcher = cv2.BFMatcher(cv2.NORM_L2)
    out = []
    for pair in matcher.knnMatch(des_a, des_b, k=2):
        if len(pair) < 2:
            continue
        best, second = pair
        if best.distance < ratio * second.distance:
            pa = kp_a[best.queryIdx].pt
            pb = kp_b[best.trainIdx].pt
            out.append(Match(pa[0], pa[1], pb[0], pb[1], float(best.distance)))
    return out


@dataclass
class SeamAdjustment:
    """Per-camera (yaw, pitch, roll) corrections, added to calibration."""

    corrections: np.ndarray                 # (6, 3) radians
    status: str = "ok"                      # ok | insufficient_matches | not_improved
    residual_before_rad: float = 0.0
    residual_after_rad: float = 0.0

    @classmethod
    def identity(cls, status: str = "ok") -> "SeamAdjustment":
        return cls(corrections=np.zeros((RIG_SIZE, 3)), status=status)


def _rotation_to_ypr(rot: np.ndarray) -> tuple[float, float, float]:
    """Invert rotation_rig_from_cam back to (yaw, pitch, roll)."""
    fwd = rot[:, 2]
    yaw = math.atan2(fwd[1], fwd[0])
    pitch = math.asin(np.clip(fwd[2], -1.0, 1.0))
    free = CameraPoseInRig(yaw, pitch, 0.0).rotation_rig_from_cam()
    cos_r = float(rot[:, 0] @ free[:, 0])
    sin_r = float(rot[:, 0] @ free[:, 1])
    return yaw, pitch, math.atan2(sin_r, cos_r)


def _world_dirs(calib_rots, cam_dirs, cam_indices) -> np.ndarray:
    out = np.empty_like(cam_dirs)
    for k in range(RIG_SIZE):
        sel = cam_indices == k
        if sel.any():
            out[sel] = cam_dirs[sel] @ calib_rots[k].T
    return out


def match_directions(calib: RigCalibration,
                     pair_matches: dict[tuple[int, int], list[Match]]):
    """Convert pixel matches to per-camera unit directions, gated for
    gross inconsistency with the calibrated geometry."""
    cam_i, cam_j, di, dj = [], [], [], []
    rots = [pose.rotation_rig_from_cam() for _, pose in calib]
    for (i, j), matches in pair_matches.items():
        intr_i, _ = calib[i]
        intr_j, _ = calib[j]
        for m in matches:
            a = fisheye_unproject((m.xa, m.ya), intr_i)
            b = fisheye_unproject((m.xb, m.yb), intr_j)
            if a is None or b is None:
                continue
            wa = rots[i] @ a
            wb = rots[j] @ b
            if math.acos(np.clip(wa @ wb, -1, 1)) > _GEOM_GATE_RAD:
                continue
            cam_i.append(i)
            cam_j.append(j)
            di.append(a)
            dj.append(b)
    return (np.array(cam_i, dtype=np.int64), np.array(cam_j, dtype=np.int64),
            np.array(di, dtype=np.float64).reshape(-1, 3),
            np.array(dj, dtype=np.float64).reshape(-1, 3))


def refine_seams(frames, calib: RigCalibration,
                 pair_matches: dict[tuple[int, int], list[Match]],
                 pano_w: int, pano_h: int) -> tuple[SeamAdjustment, StitchMap, RigCalibration]:
    """Estimate per-camera orientation corrections from seam matches.

    Least squares over small-angle rotation parameters, iterated a few
    times; the gauge (a global rig rotation moves nothing observable) is
    fixed by zeroing the per-axis median correction. Falls back to the
    identity adjustment when matches are insufficient or the refit does
    not improve the residual.
    """
    usable = {k: v for k, v in pair_matches.items() if len(v) >= MIN_MATCHES_PER_SEAM}
    if not usable:
        adj = SeamAdjustment.identity("insufficient_matches")
        return adj, build_stitch_map(calib, pano_w, pano_h), calib

    cam_i, cam_j, di, dj = match_directions(calib, usable)
    if len(cam_i) < MIN_MATCHES_PER_SEAM:
        adj = SeamAdjustment.identity("insufficient_matches")
        return adj, build_stitch_map(calib, pano_w, pano_h), calib

    base_rots = [pose.rotation_rig_from_cam() for _, pose in calib]
    rots = [r.copy() for r in base_rots]

    def residual(rot_list) -> float:
        wi = _world_dirs(rot_list, di, cam_i)
        wj = _world_dirs(rot_list, dj, cam_j)
        dots = np.clip((wi * wj).sum(axis=1), -1.0, 1.0)
        return float(np.arccos(dots).mean())

    res_before = residual(rots)
    n = len(cam_i)
    damping = 0.5   # suppresses soft modes (e.g. all cameras tilting together)
    for _ in range(3):
        wi = _world_dirs(rots, di, cam_i)
        wj = _world_dirs(rots, dj, cam_j)
        a = np.zeros((3 * n + 3 * RIG_SIZE, 3 * RIG_SIZE))
        b = np.zeros(3 * n + 3 * RIG_SIZE)
        b[:3 * n] = (wj - wi).reshape(-1)
        rows = np.arange(3 * n).reshape(n, 3)
        for idx in range(n):
            a[rows[idx], 3 * cam_i[idx]: 3 * cam_i[idx] + 3] = -_skew(wi[idx])
            a[rows[idx], 3 * cam_j[idx]: 3 * cam_j[idx] + 3] = _skew(wj[idx])
        a[3 * n:] = damping * np.eye(3 * RIG_SIZE)
        delta, *_ = np.linalg.lstsq(a, b, rcond=None)
        delta = delta.reshape(RIG_SIZE, 3)
        delta -= np.median(delta, axis=0)   # gauge: most cameras are right
        for k in range(RIG_SIZE):
            rot_mat, _ = cv2.Rodrigues(delta[k])
            rots[k] = rot_mat @ rots[k]

    corrections = np.zeros((RIG_SIZE, 3))
    new_cams = []
    for k, (intr, pose) in enumerate(calib):
        yaw, pitch, roll = _rotation_to_ypr(rots[k])
        corr = np.array([wrap_angle(yaw - pose.yaw_rad),
                         wrap_angle(pitch - pose.pitch_rad),
                         wrap_angle(roll - pose.roll_rad)])
        if np.abs(corr).max() < CORRECTION_DEADBAND_RAD:
            corr = np.zeros(3)
            new_cams.append((intr, pose))
            rots[k] = base_rots[k]
        else:
            new_cams.append((intr, CameraPoseInRig(yaw, pitch, roll)))
        corrections[k] = corr

    res_after = residual(rots)
    if res_after > res_before:
        adj = SeamAdjustment.identity("not_improved")
        adj.residual_before_rad = res_before
        adj.residual_after_rad = res_before
        return adj, build_stitch_map(calib, pano_w, pano_h), calib

    if np.abs(corrections).max() > MAX_CORRECTION_RAD:
        adj = SeamAdjustment.identity("not_improved")
        adj.residual_before_rad = res_before
        adj.residual_after_rad = res_before
        return adj, build_stitch_map(calib, pano_w, pano_h), calib

    new_calib = RigCalibration(tuple(new_cams))
    adj = SeamAdjustment(corrections=corrections, status="ok",
                         residual_before_rad=res_before,
                         residual_after_rad=res_after)
    return adj, build_stitch_map(new_calib, pano_w, pano_h), new_calib


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def adjacent_pair_matches(frames, calib: RigCalibration) -> dict[tuple[int, int], list[Match]]:
    """Run feature matching between each adjacent camera pair in the ring."""
    out = {}
    for i in range(RIG_SIZE):
        j = (i + 1) % RIG_SIZE
        out[(i, j)] = detect_and_match(frames[i], frames[j])
    return out


def max_covered_pitch_rad(calib: RigCalibration) -> float:
    """Largest |pitch| covered at every azimuth by the camera ring.

    For a level ring with fov f and adjacent yaw gap g the worst azimuth
    sits halfway between cameras: cos(theta) = cos(pitch) * cos(g / 2)
    must stay within cos(f / 2).
    """
    fovs = [intr.fov_rad for intr, _ in calib]
    yaws = sorted(pose.yaw_rad for _, pose in calib)
    gaps = [(yaws[(i + 1) % len(yaws)] - yaws[i]) % (2 * math.pi) for i in range(len(yaws))]
    worst = 0.0
    for i, gap in enumerate(gaps):
        f = min(fovs[i], fovs[(i + 1) % len(fovs)])
        ratio = math.cos(f / 2.0) / math.cos(gap / 2.0)
        if ratio >= 1.0:
            return 0.0
        worst = max(worst, ratio)
    return math.acos(worst) if worst > 0 else math.pi / 2
