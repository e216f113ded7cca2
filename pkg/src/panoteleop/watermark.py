"""Machine-readable timestamp watermark burned into panorama pixels.

The watermark is the measurement harness's stand-in for a wall clock
held in front of the camera: it carries the capture timestamp through
every pixel-processing stage so the far end can recover event time T1
from received (and re-rendered) pixels.

Layout: 96 bits = 64-bit timestamp (ns) + 16-bit sequence + CRC-16
(CCITT-FALSE, poly 0x1021, init 0xFFFF) over the preceding 10 bytes.
Cells are 8x8 px, black = 0 / white = 1, MSB-first row-major in a
12-column x 8-row grid at the panorama's top-left corner, surrounded by
a one-cell white quiet border.
"""

from __future__ import annotations

import binascii
import math

import numpy as np

from .projection import ViewPose, equirect_to_direction_many

WM_COLS = 12
WM_ROWS = 8
CELL_PX = 8
BORDER_CELLS = 1
REGION_W = (WM_COLS + 2 * BORDER_CELLS) * CELL_PX   # 112
REGION_H = (WM_ROWS + 2 * BORDER_CELLS) * CELL_PX   # 80

_THRESHOLD = 128.0
_BORDER_MIN_MEAN = 160.0


def crc16_ccitt_false(data: bytes) -> int:
    """CRC-16/CCITT-FALSE (poly 0x1021, init 0xFFFF, no reflection)."""
    return binascii.crc_hqx(data, 0xFFFF)


def _payload_bits(t_ns: int, seq: int) -> np.ndarray:
    body = int(t_ns).to_bytes(8, "big") + (int(seq) & 0xFFFF).to_bytes(2, "big")
    full = body + crc16_ccitt_false(body).to_bytes(2, "big")
    return np.unpackbits(np.frombuffer(full, dtype=np.uint8))


def embed_watermark(pixels: np.ndarray, t_ns: int, seq: int) -> np.ndarray:
    """Burn (t_ns, seq) into the top-left corner of an RGB image, in place."""
    h, w = pixels.shape[:2]
    if h < REGION_H or w < REGION_W:
        raise ValueError("image too small for watermark region")
    bits = _payload_bits(t_ns, seq)
    region = pixels[:REGION_H, :REGION_W]
    region[:] = 255
    cells = bits.reshape(WM_ROWS, WM_COLS)
    b = BORDER_CELLS * CELL_PX
    for r in range(WM_ROWS):
        ys = b + r * CELL_PX
        row = cells[r]
        for c in range(WM_COLS):
            if not row[c]:
                xs = b + c * CELL_PX
                region[ys:ys + CELL_PX, xs:xs + CELL_PX] = 0
    return pixels


def _bits_to_fields(bits: np.ndarray) -> tuple[int, int] | None:
    data = np.packbits(bits.astype(np.uint8)).tobytes()
    body, crc = data[:10], data[10:12]
    if crc16_ccitt_false(body) != int.from_bytes(crc, "big"):
        return None
    t_ns = int.from_bytes(body[:8], "big")
    seq = int.from_bytes(body[8:10], "big")
    return (t_ns, seq)


def extract_watermark(pixels: np.ndarray) -> tuple[int, int] | None:
    """Recover (t_ns, seq) from panorama pixels, or None on failure.

    Cells are thresholded at the mid-gray mean; failure means the quiet
    border is missing (geometry mismatch) or the CRC does not check out.
    """
    h, w = pixels.shape[:2]
    if h < REGION_H or w < REGION_W:
        return None
    region = np.asarray(pixels[:REGION_H, :REGION_W], dtype=np.float64)
    if region.ndim == 3:
        region = region.mean(axis=2)
    cell_means = region.reshape(REGION_H // CELL_PX, CELL_PX,
                                REGION_W // CELL_PX, CELL_PX).mean(axis=(1, 3))
    border = np.concatenate([
        cell_means[0, :], cell_means[-1, :],
        cell_means[1:-1, 0], cell_means[1:-1, -1],
    ])
    if border.min() < _BORDER_MIN_MEAN:
        return None
    data_cells = cell_means[BORDER_CELLS:BORDER_CELLS + WM_ROWS,
                            BORDER_CELLS:BORDER_CELLS + WM_COLS]
    bits = (data_cells >= _THRESHOLD).astype(np.uint8).reshape(-1)
    return _bits_to_fields(bits)


# Inspection view aimed at the watermark block. The block sits next to
# the panorama's zenith pole, so cells shrink azimuthally in any
# perspective render; this fov/size pair keeps the narrowest cell a few
# pixels wide.
INSPECT_FOV_RAD = math.radians(36)
INSPECT_VIEW_W = 512
INSPECT_VIEW_H = 512


def watermark_view_pose(pano_w: int, pano_h: int) -> ViewPose:
    """View orientation whose center looks at the watermark block."""
    u = (REGION_W / 2.0) / pano_w
    v = (REGION_H / 2.0) / pano_h
    yaw = u * 2.0 * math.pi - math.pi
    pitch = math.pi / 2.0 - v * math.pi
    return ViewPose(yaw_rad=yaw, pitch_rad=pitch, roll_rad=0.0)


def _cell_sample_view_coords(pose: ViewPose, fov_rad: float, view_w: int, view_h: int,
                             pano_w: int, pano_h: int) -> np.ndarray | None:
    """Viewport coordinates of a 3x3 grid of inset points per cell.

    Sampling points are chosen inside each cell in panorama space (25%,
    50%, 75% of the cell extent) so view-space blur near the pole cannot
    pull in neighboring cells. Returns (n_cells, 9, 2) float coords or
    None when any point falls outside or behind the viewport.
    """
    n_rows = WM_ROWS + 2 * BORDER_CELLS
    n_cols = WM_COLS + 2 * BORDER_CELLS
    cy, cx = np.meshgrid(np.arange(n_rows), np.arange(n_cols), indexing="ij")
    off = np.array([0.25, 0.5, 0.75]) * CELL_PX
    ox, oy = np.meshgrid(off, off)
    px = cx.reshape(-1, 1) * CELL_PX + ox.reshape(1, 9)
    py = cy.reshape(-1, 1) * CELL_PX + oy.reshape(1, 9)
    u = px / pano_w
    v = py / pano_h
    dirs = equirect_to_direction_many(u, v)
    cam = dirs @ pose.rotation_rig_from_cam()   # R^T applied row-wise
    if (cam[..., 2] <= 1e-6).any():
        return None
    f = (view_w / 2.0) / math.tan(fov_rad / 2.0)
    x = (view_w - 1) / 2.0 + f * cam[..., 0] / cam[..., 2]
    y = (view_h - 1) / 2.0 + f * cam[..., 1] / cam[..., 2]
    if (x < 1).any() or (x > view_w - 2).any() or (y < 1).any() or (y > view_h - 2).any():
        return None
    return np.stack([x, y], axis=-1)


def extract_watermark_from_view(view: np.ndarray, pose: ViewPose, fov_rad: float,
                                pano_w: int, pano_h: int) -> tuple[int, int] | None:
    """Recover (t_ns, seq) from a rendered perspective viewport.

    The watermark grid geometry is known protocol state, so each cell is
    sampled through the view mapping; this reads the timestamp from the
    post-render pixel path. The CRC is the final integrity authority.
    """
    from .projection import bilinear_gather

    view_h, view_w = view.shape[:2]
    coords = _cell_sample_view_coords(pose, fov_rad, view_w, view_h, pano_w, pano_h)
    if coords is None:
        return None
    img = np.asarray(view, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=2)
    samples = bilinear_gather(img, coords[..., 0], coords[..., 1]).mean(axis=1)

    n_rows = WM_ROWS + 2 * BORDER_CELLS
    n_cols = WM_COLS + 2 * BORDER_CELLS
    grid = samples.reshape(n_rows, n_cols)
    border = np.concatenate([grid[0, :], grid[-1, :], grid[1:-1, 0], grid[1:-1, -1]])
    # pole-adjacent border cells blur into neighboring panorama content,
    # so the geometry gate is softer here than in pano-space extraction
    if border.mean() < _BORDER_MIN_MEAN or (border >= _THRESHOLD).mean() < 0.9:
        return None
    bits = (grid[1:-1, 1:-1] >= _THRESHOLD).astype(np.uint8).reshape(-1)
    return _bits_to_fields(bits)
