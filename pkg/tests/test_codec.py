import numpy as np
import pytest

from panoteleop.codec import CODEC_BLOCK, CODEC_RAW, CodecError, decode_frame, encode_frame


def _random_image(rng, h=48, w=64):
    return rng.integers(0, 256, (h, w, 3)).astype(np.uint8)


def test_raw_round_trip_bit_identical():
    rng = np.random.default_rng(1)
    img = _random_image(rng)
    out = decode_frame(encode_frame(img, CODEC_RAW), CODEC_RAW)
    assert np.array_equal(out, img)


def test_raw_truncated_payload_errors():
    rng = np.random.default_rng(2)
    payload = encode_frame(_random_image(rng), CODEC_RAW)
    with pytest.raises(CodecError):
        decode_frame(payload[:-7], CODEC_RAW)


def test_unknown_codec_id_errors():
    img = np.zeros((8, 8, 3), dtype=np.uint8)
    with pytest.raises(CodecError):
        encode_frame(img, 9)
    with pytest.raises(CodecError):
        decode_frame(b"\x00" * 16, 9)


def test_block_constant_image_lossless():
    for value in (0, 77, 128, 255):
        img = np.full((32, 40, 3), value, dtype=np.uint8)
        for q in (1, 4, 8):
            out = decode_frame(encode_frame(img, CODEC_BLOCK, quality=q), CODEC_BLOCK)
            assert np.array_equal(out, img)


@pytest.mark.parametrize("q", list(range(1, 9)))
def test_block_error_bound_random_images(q):
    rng = np.random.default_rng(100 + q)
    bound = 2 ** (8 - q)
    for _ in range(8):
        img = _random_image(rng, h=40, w=56)
        out = decode_frame(encode_frame(img, CODEC_BLOCK, quality=q), CODEC_BLOCK)
        err = np.abs(out.astype(np.int16) - img.astype(np.int16)).max()
        assert err <= bound


def test_block_q8_error_at_most_one():
    rng = np.random.default_rng(9)
    for _ in range(20):
        img = _random_image(rng)
        out = decode_frame(encode_frame(img, CODEC_BLOCK, quality=8), CODEC_BLOCK)
        err = np.abs(out.astype(np.int16) - img.astype(np.int16)).max()
        assert err <= 1


def test_block_adversarial_extremes():
    # one bright outlier per block maximizes residual magnitude
    img = np.zeros((16, 16, 3), dtype=np.uint8)
    img[::8, ::8] = 255
    for q in (1, 2, 8):
        out = decode_frame(encode_frame(img, CODEC_BLOCK, quality=q), CODEC_BLOCK)
        err = np.abs(out.astype(np.int16) - img.astype(np.int16)).max()
        assert err <= 2 ** (8 - q)


def test_block_non_multiple_dimensions():
    rng = np.random.default_rng(3)
    img = _random_image(rng, h=37, w=51)
    out = decode_frame(encode_frame(img, CODEC_BLOCK, quality=8), CODEC_BLOCK)
    assert out.shape == img.shape
    assert np.abs(out.astype(np.int16) - img.astype(np.int16)).max() <= 1


def test_block_truncated_payload_errors():
    img = np.zeros((16, 16, 3), dtype=np.uint8)
    payload = encode_frame(img, CODEC_BLOCK, quality=4)
    with pytest.raises(CodecError):
        decode_frame(payload[:-1], CODEC_BLOCK)
    with pytest.raises(CodecError):
        decode_frame(payload[:4], CODEC_BLOCK)


def test_block_bad_quality_rejected():
    img = np.zeros((8, 8, 3), dtype=np.uint8)
    with pytest.raises(CodecError):
        encode_frame(img, CODEC_BLOCK, quality=0)
    with pytest.raises(CodecError):
        encode_frame(img, CODEC_BLOCK, quality=9)
