"""Frame payload codecs.

Two codecs stand in for a hardware video encoder while preserving the
encode/decode pipeline stages and their latency contribution:

  RAW (id 0):   row-major RGB bytes, lossless.
  BLOCK (id 1): 8x8 block mean plus per-block quantized residuals with a
                quality parameter q in [1..8] bits per residual sample.
                Round-trip per-pixel error is bounded by 2**(8 - q);
                constant blocks reconstruct exactly.
"""

from __future__ import annotations

import struct

import numpy as np

from .projection import round_half_up

CODEC_RAW = 0
CODEC_BLOCK = 1

_BLOCK = 8
_RAW_HEADER = struct.Struct("<HH")
_BLOCK_HEADER = struct.Struct("<HHB")


class CodecError(ValueError):
    """Unknown codec id, malformed or truncated payload."""


def _as_rgb(pixels: np.ndarray) -> np.ndarray:
    img = np.asarray(pixels)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise CodecError("expected (H, W, 3) uint8 pixels")
    return img


def encode_frame(pixels: np.ndarray, codec: int, quality: int = 8) -> bytes:
    if codec == CODEC_RAW:
        return _encode_raw(_as_rgb(pixels))
    if codec == CODEC_BLOCK:
        return _encode_block(_as_rgb(pixels), quality)
    raise CodecError(f"unknown codec id {codec}")


def decode_frame(payload: bytes, codec: int) -> np.ndarray:
    if codec == CODEC_RAW:
        return _decode_raw(payload)
    if codec == CODEC_BLOCK:
        return _decode_block(payload)
    raise CodecError(f"unknown codec id {codec}")


def _encode_raw(img: np.ndarray) -> bytes:
    h, w = img.shape[:2]
    return _RAW_HEADER.pack(w, h) + img.tobytes()


def _decode_raw(payload: bytes) -> np.ndarray:
    if len(payload) < _RAW_HEADER.size:
        raise CodecError("raw payload truncated")
    w, h = _RAW_HEADER.unpack_from(payload)
    data = payload[_RAW_HEADER.size:]
    if len(data) != w * h * 3:
        raise CodecError("raw payload length mismatch")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()


def _to_blocks(img: np.ndarray) -> tuple[np.ndarray, int, int]:
    """Pad to 8x8 multiples and reshape to (n_blocks * 3, 64) int16 rows."""
    h, w = img.shape[:2]
    ph = (-h) % _BLOCK
    pw = (-w) % _BLOCK
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="edge")
    hh, ww = img.shape[:2]
    nby, nbx = hh // _BLOCK, ww // _BLOCK
    blocks = (img.reshape(nby, _BLOCK, nbx, _BLOCK, 3)
              .transpose(0, 2, 4, 1, 3)
              .reshape(nby * nbx * 3, _BLOCK * _BLOCK)
              .astype(np.int16))
    return blocks, nby, nbx


def _from_blocks(rows: np.ndarray, nby: int, nbx: int, h: int, w: int) -> np.ndarray:
    img = (rows.reshape(nby, nbx, 3, _BLOCK, _BLOCK)
           .transpose(0, 3, 1, 4, 2)
           .reshape(nby * _BLOCK, nbx * _BLOCK, 3))
    return img[:h, :w].copy()


def _encode_block(img: np.ndarray, quality: int) -> bytes:
    if not (1 <= quality <= 8):
        raise CodecError("quality must be in [1, 8]")
    h, w = img.shape[:2]
    rows, nby, nbx = _to_blocks(img)
    means = round_half_up(rows.mean(axis=1)).astype(np.int16)
    resid = rows - means[:, None]
    scales = np.abs(resid).max(axis=1).astype(np.int64)

    # mid-rise quantizer over [-a, a] in integer arithmetic:
    # k = floor((r + a) * 2^q / (2a)), clamped to [0, 2^q - 1]
    levels = 1 << quality
    a = scales[:, None]
    num = (resid.astype(np.int64) + a) << quality
    with np.errstate(divide="ignore", invalid="ignore"):
        codes = np.where(a > 0, num // np.maximum(2 * a, 1), 0)
    codes = np.clip(codes, 0, levels - 1).astype(np.uint8)

    shifts = np.arange(quality - 1, -1, -1, dtype=np.uint8)
    bits = (codes[..., None] >> shifts) & 1
    packed = np.packbits(bits.reshape(-1).astype(np.uint8))

    return (_BLOCK_HEADER.pack(w, h, quality)
            + means.astype(np.uint8).tobytes()
            + scales.astype(np.uint8).tobytes()
            + packed.tobytes())


def _decode_block(payload: bytes) -> np.ndarray:
    if len(payload) < _BLOCK_HEADER.size:
        raise CodecError("block payload truncated")
    w, h, quality = _BLOCK_HEADER.unpack_from(payload)
    if not (1 <= quality <= 8):
        raise CodecError("corrupt block payload quality")
    nby = (h + _BLOCK - 1) // _BLOCK
    nbx = (w + _BLOCK - 1) // _BLOCK
    n_rows = nby * nbx * 3
    code_bytes = n_rows * _BLOCK * _BLOCK * quality // 8
    expected = _BLOCK_HEADER.size + 2 * n_rows + code_bytes
    if len(payload) != expected:
        raise CodecError("block payload length mismatch")

    off = _BLOCK_HEADER.size
    means = np.frombuffer(payload, dtype=np.uint8, count=n_rows, offset=off).astype(np.float64)
    off += n_rows
    scales = np.frombuffer(payload, dtype=np.uint8, count=n_rows, offset=off).astype(np.float64)
    off += n_rows
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8, offset=off))
    bits = bits[:n_rows * _BLOCK * _BLOCK * quality].reshape(-1, quality)
    shifts = np.arange(quality - 1, -1, -1)
    codes = (bits.astype(np.int64) << shifts).sum(axis=1).reshape(n_rows, _BLOCK * _BLOCK)

    a = scales[:, None]
    step = 2.0 * a / (1 << quality)
    resid = np.where(a > 0, -a + (codes + 0.5) * step, 0.0)
    rows = np.clip(round_half_up(means[:, None] + resid), 0, 255).astype(np.uint8)
    return _from_blocks(rows, nby, nbx, h, w)
