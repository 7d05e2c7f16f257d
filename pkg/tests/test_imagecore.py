import struct
import zlib

import cv2
import numpy as np
import pytest

from gvsr import imagecore
from gvsr.imagecore import (
    bicubic_resize,
    center_crop,
    check_image,
    crop_border,
    crop_to_multiple,
    load_png,
    make_lr,
    save_png,
    to_grayscale,
)

# 2x upscale of the ramp [0, 1, 2, 3] with half-pixel centers, replicate
# borders, a = -0.5. Worked by hand from the kernel weights; the interior
# values land exactly on the source coordinate because the kernel
# reproduces linear functions.
RAMP_2X = [-0.0703125, 0.1796875, 0.7265625, 1.25, 1.75, 2.2734375, 2.8203125, 3.0703125]


def test_cubic_kernel_values():
    k = imagecore._cubic_kernel
    assert k(0.0) == 1.0
    assert k(1.0) == 0.0
    assert k(2.0) == 0.0
    assert k(0.5) == 0.5625
    assert k(1.5) == -0.0625
    assert k(-0.5) == k(0.5)


def test_bicubic_ramp_oracle():
    ramp = np.arange(4.0)[None, None, :].repeat(4, axis=1)  # (1, 4, 4)
    out = bicubic_resize(ramp, 4, 8)
    np.testing.assert_allclose(out[0, 0], RAMP_2X, rtol=0, atol=1e-15)
    # Same weights on every row, and the transposed image resamples the
    # same way along the other axis.
    np.testing.assert_allclose(out[0], np.tile(RAMP_2X, (4, 1)), rtol=0, atol=1e-15)
    out_t = bicubic_resize(ramp.transpose(0, 2, 1), 8, 4)
    np.testing.assert_allclose(out_t[0, :, 0], RAMP_2X, rtol=0, atol=1e-15)


def test_bicubic_identity_is_exact(rng):
    img = rng.uniform(0, 1, (3, 7, 5))
    np.testing.assert_array_equal(bicubic_resize(img, 7, 5), img)


def test_bicubic_preserves_constants(rng):
    img = np.full((1, 6, 9), 0.37)
    out = bicubic_resize(img, 13, 4)
    np.testing.assert_allclose(out, 0.37, rtol=0, atol=1e-14)


def test_bicubic_downscale_shape_and_range(rng):
    img = rng.uniform(0, 1, (3, 32, 48))
    out = bicubic_resize(img, 16, 24)
    assert out.shape == (3, 16, 24)
    # Cubic overshoot exists but is bounded by the kernel's L1 norm.
    assert out.min() > -0.2 and out.max() < 1.2


def test_bicubic_rejects_empty_target(rng):
    with pytest.raises(ValueError):
        bicubic_resize(rng.uniform(0, 1, (1, 4, 4)), 0, 4)


def test_save_load_roundtrip(tmp_path, rng):
    img = rng.uniform(0, 1, (3, 17, 23))
    path = tmp_path / "rt.png"
    save_png(img, path)
    back = load_png(path)
    assert back.shape == img.shape
    assert back.dtype == imagecore.DTYPE
    assert np.abs(back - img).max() <= 1.0 / 510.0 + 1e-12


def test_quantization_rounds_half_up(tmp_path):
    img = np.full((1, 4, 4), 0.5)
    path = tmp_path / "half.png"
    save_png(img, path)
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    assert raw.min() == raw.max() == 128  # 0.5 * 255 + 0.5 floors to 128
    assert float(load_png(path)[0, 0, 0]) == 128.0 / 255.0


def test_save_clamps_out_of_range(tmp_path):
    img = np.array([[[-0.5, 2.0]]])
    path = tmp_path / "clamp.png"
    save_png(img, path)
    back = load_png(path)
    assert float(back[0, 0, 0]) == 0.0
    assert float(back[0, 0, 1]) == 1.0


def test_grayscale_png_loads_single_channel(tmp_path, rng):
    img = rng.uniform(0, 1, (1, 8, 8))
    path = tmp_path / "gray.png"
    save_png(img, path)
    back = load_png(path)
    assert back.shape == (1, 8, 8)
    assert np.abs(back - img).max() <= 1.0 / 510.0 + 1e-12


def test_sixteen_bit_png_full_precision(tmp_path):
    vals = np.array([[0, 1, 1000], [30000, 65534, 65535]], dtype=np.uint16)
    path = tmp_path / "deep.png"
    assert cv2.imwrite(str(path), vals)
    back = load_png(path)
    np.testing.assert_allclose(back[0], vals / 65535.0, rtol=0, atol=1e-12)


def test_rgba_alpha_dropped(tmp_path):
    rgba = np.zeros((5, 5, 4), dtype=np.uint8)
    rgba[:, :, 2] = 255  # red in BGRA order
    rgba[:, :, 3] = 7
    path = tmp_path / "rgba.png"
    assert cv2.imwrite(str(path), rgba)
    back = load_png(path)
    assert back.shape == (3, 5, 5)
    assert back[0].min() == 1.0 and back[1].max() == 0.0


def test_palette_png_rejected(tmp_path):
    # Hand-built header: the loader must refuse color type 3 outright
    # rather than let the codec silently expand the palette.
    ihdr = struct.pack(">IIBBBBB", 2, 2, 8, 3, 0, 0, 0)
    chunk = struct.pack(">I", len(ihdr)) + b"IHDR" + ihdr
    chunk += struct.pack(">I", zlib.crc32(b"IHDR" + ihdr))
    path = tmp_path / "pal.png"
    path.write_bytes(b"\x89PNG\r\n\x1a\n" + chunk)
    with pytest.raises(OSError, match="palette"):
        load_png(path)


def test_low_bit_depth_rejected(tmp_path):
    ihdr = struct.pack(">IIBBBBB", 2, 2, 1, 0, 0, 0, 0)
    chunk = struct.pack(">I", len(ihdr)) + b"IHDR" + ihdr
    chunk += struct.pack(">I", zlib.crc32(b"IHDR" + ihdr))
    path = tmp_path / "bits.png"
    path.write_bytes(b"\x89PNG\r\n\x1a\n" + chunk)
    with pytest.raises(OSError, match="bit depth"):
        load_png(path)


def test_load_errors(tmp_path):
    with pytest.raises(OSError):
        load_png(tmp_path / "missing.png")
    junk = tmp_path / "junk.png"
    junk.write_bytes(b"definitely not a png")
    with pytest.raises(OSError, match="not a PNG"):
        load_png(junk)


def test_check_image_rejects_bad_layouts():
    with pytest.raises(ValueError):
        check_image(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        check_image(np.zeros((2, 4, 4)))
    img = np.zeros((3, 4, 4))
    assert check_image(img) is not None


def test_grayscale_weights():
    red = np.zeros((3, 2, 2))
    red[0] = 1.0
    assert float(to_grayscale(red)[0, 0, 0]) == 0.299
    gray = np.full((1, 2, 2), 0.42)
    out = to_grayscale(gray)
    np.testing.assert_array_equal(out, gray)
    out[0, 0, 0] = 9.0  # must be a copy
    assert gray[0, 0, 0] == 0.42


def test_grayscale_unit_sum(rng):
    flat = np.full((3, 3, 3), 0.6)
    np.testing.assert_allclose(to_grayscale(flat), 0.6, rtol=0, atol=1e-15)


def test_center_crop_and_multiple():
    img = np.arange(36.0).reshape(1, 6, 6)
    out = center_crop(img, 2, 4)
    np.testing.assert_array_equal(out, img[:, 2:4, 1:5])
    out = crop_to_multiple(np.zeros((1, 7, 9)), 4)
    assert out.shape == (1, 4, 8)
    with pytest.raises(ValueError):
        center_crop(img, 8, 2)
    with pytest.raises(ValueError):
        crop_to_multiple(np.zeros((1, 3, 3)), 4)


def test_crop_border():
    img = np.arange(25.0).reshape(1, 5, 5)
    np.testing.assert_array_equal(crop_border(img, 1), img[:, 1:4, 1:4])
    np.testing.assert_array_equal(crop_border(img, 0), img)
    with pytest.raises(ValueError):
        crop_border(img, 3)
    with pytest.raises(ValueError):
        crop_border(img, -1)


def test_make_lr(rng):
    hr = rng.uniform(0, 1, (3, 33, 47))
    lr = make_lr(hr, 2)
    assert lr.shape == (3, 16, 23)
    with pytest.raises(ValueError):
        make_lr(hr, 1)
    with pytest.raises(ValueError):
        make_lr(hr, 2.5)
