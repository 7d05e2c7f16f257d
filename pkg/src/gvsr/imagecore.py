"""Planar float images: PNG I/O, color conversion, bicubic resampling.

An image is a numpy array of shape (channels, height, width) with samples
nominally in [0, 1] and 1 (gray) or 3 (RGB) channels. Every function returns
a new array; inputs are never mutated, so values are safe to share across
threads.
"""

import os
import struct

import cv2
import numpy as np

# Build-wide scalar type. Double by default so the analytic-gradient checks
# hold at 1e-6; export GVSR_PRECISION=single before import for a faster
# single-precision build.
DTYPE = np.float32 if os.environ.get("GVSR_PRECISION") == "single" else np.float64

# BT.601 luma coefficients.
GRAY_WEIGHTS = (0.299, 0.587, 0.114)

# Catmull-Rom cubic parameter.
CUBIC_A = -0.5

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def check_image(img, name="image"):
    """Validate the (c, h, w) planar layout; return the array unchanged."""
    img = np.asarray(img)
    if img.ndim != 3:
        raise ValueError(f"{name}: expected a (channels, height, width) array, got shape {img.shape}")
    if img.shape[0] not in (1, 3):
        raise ValueError(f"{name}: channel count must be 1 or 3, got {img.shape[0]}")
    return img


def _read_ihdr(path):
    """Return (bit_depth, color_type) from a PNG header."""
    try:
        with open(path, "rb") as fh:
            head = fh.read(8 + 8 + 13)
    except OSError as exc:
        raise OSError(f"{path}: cannot read file: {exc}") from exc
    if len(head) < 29 or head[:8] != _PNG_SIGNATURE:
        raise OSError(f"{path}: not a PNG file")
    if head[12:16] != b"IHDR":
        raise OSError(f"{path}: malformed PNG (missing IHDR)")
    _, _, bit_depth, color_type = struct.unpack(">IIBB", head[16:26])
    return bit_depth, color_type


def load_png(path):
    """Load an 8- or 16-bit grayscale/RGB PNG as a (c, h, w) float array.

    Samples are scaled to [0, 1] by the bit-depth maximum; an alpha channel
    is dropped. Anything else (palette PNGs, depths below 8) is rejected.
    """
    bit_depth, color_type = _read_ihdr(path)
    if bit_depth not in (8, 16):
        raise OSError(f"{path}: unsupported PNG bit depth {bit_depth} (expected 8 or 16)")
    if color_type == 3:
        raise OSError(f"{path}: palette PNGs are not supported (expected grayscale or RGB)")
    if color_type not in (0, 2, 4, 6):
        raise OSError(f"{path}: unsupported PNG color type {color_type}")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise OSError(f"{path}: failed to decode PNG")
    max_val = 255.0 if bit_depth == 8 else 65535.0
    if color_type in (0, 4):
        # Grayscale; cv2 expands gray+alpha to BGRA with equal planes.
        plane = raw if raw.ndim == 2 else raw[:, :, 0]
        stack = plane[None]
    else:
        stack = raw[:, :, 2::-1].transpose(2, 0, 1)  # BGR(A) -> planar RGB
    return np.ascontiguousarray(stack).astype(DTYPE) / DTYPE(max_val)


def save_png(img, path):
    """Write an image as an 8-bit PNG.

    Samples are clamped to [0, 1] and quantized with round-half-up, so a
    save/load round trip moves each in-range sample by at most 1/510.
    """
    img = check_image(img)
    quantized = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    if img.shape[0] == 1:
        packed = quantized[0]
    else:
        packed = quantized.transpose(1, 2, 0)[:, :, ::-1]  # planar RGB -> BGR
    if not cv2.imwrite(str(path), packed):
        raise OSError(f"{path}: failed to write PNG")


def to_grayscale(img):
    """BT.601 luma of an RGB image, or an identity copy for 1-channel input."""
    img = check_image(img)
    if img.shape[0] == 1:
        return img.copy()
    wr, wg, wb = GRAY_WEIGHTS
    return (wr * img[0] + wg * img[1] + wb * img[2])[None]


def _cubic_kernel(t):
    """Cubic convolution kernel with a = -0.5, vectorized over |t|."""
    t = np.abs(t)
    a = CUBIC_A
    near = ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    far = ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    return np.where(t <= 1.0, near, np.where(t < 2.0, far, 0.0))


def _resize_matrix(n_in, n_out):
    """Dense (n_out, n_in) interpolation matrix for one axis.

    Half-pixel-centered mapping; taps beyond the borders are folded onto the
    edge samples (replicate).
    """
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        base = int(np.floor(src))
        for tap in range(base - 1, base + 3):
            weight = float(_cubic_kernel(src - tap))
            mat[i, min(max(tap, 0), n_in - 1)] += weight
    return mat


def bicubic_resize(img, out_h, out_w):
    """Separable cubic-convolution resampling; output is not clamped."""
    img = check_image(img)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target dimensions must be >= 1, got {out_h}x{out_w}")
    _, h, w = img.shape
    row_mat = _resize_matrix(h, out_h)
    col_mat = _resize_matrix(w, out_w)
    out = np.empty((img.shape[0], out_h, out_w), dtype=img.dtype)
    for c in range(img.shape[0]):
        out[c] = row_mat @ img[c] @ col_mat.T
    return out


def center_crop(img, new_h, new_w):
    img = check_image(img)
    _, h, w = img.shape
    if new_h > h or new_w > w or new_h < 1 or new_w < 1:
        raise ValueError(f"cannot crop {h}x{w} image to {new_h}x{new_w}")
    top = (h - new_h) // 2
    left = (w - new_w) // 2
    return img[:, top : top + new_h, left : left + new_w].copy()


def crop_to_multiple(img, m):
    """Center-crop so height and width are divisible by m."""
    img = check_image(img)
    _, h, w = img.shape
    new_h, new_w = (h // m) * m, (w // m) * m
    if new_h == 0 or new_w == 0:
        raise ValueError(f"image {h}x{w} is smaller than the required multiple {m}")
    return center_crop(img, new_h, new_w)


def make_lr(hr, s):
    """Bicubically downscale an HR image by integer factor s (center-cropping
    first so the dimensions divide evenly)."""
    hr = check_image(hr)
    if int(s) != s or s < 2:
        raise ValueError(f"scale factor must be an integer >= 2, got {s}")
    s = int(s)
    cropped = crop_to_multiple(hr, s)
    _, h, w = cropped.shape
    return bicubic_resize(cropped, h // s, w // s)


def crop_border(img, px):
    """Remove px pixels from every side."""
    img = check_image(img)
    if px < 0:
        raise ValueError("border must be nonnegative")
    _, h, w = img.shape
    if 2 * px >= min(h, w):
        raise ValueError(f"border {px} exceeds image {h}x{w}")
    if px == 0:
        return img.copy()
    return img[:, px:-px, px:-px].copy()
