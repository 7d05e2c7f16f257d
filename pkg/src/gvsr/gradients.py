"""Differentiable Sobel operator: gradient maps plus the exact adjoint.

Forward is cross-correlation with the 3x3 Sobel kernels under 1-pixel
replicate padding, so the maps keep the input's size. The backward pass is
the exact vector-Jacobian product, including the fold-back of padded border
contributions.
"""

from typing import NamedTuple

import numpy as np

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()

# Nonzero kernel taps as (row offset, col offset, weight) into the padded
# array; forward gathers and backward scatters from the same tables.
_TAPS_X = [(di, dj, SOBEL_X[di, dj]) for di in range(3) for dj in range(3) if SOBEL_X[di, dj] != 0.0]
_TAPS_Y = [(di, dj, SOBEL_Y[di, dj]) for di in range(3) for dj in range(3) if SOBEL_Y[di, dj] != 0.0]


class GradientPair(NamedTuple):
    gx: np.ndarray
    gy: np.ndarray


def as_plane(gray, name="gray"):
    """Accept a (h, w) map or a 1-channel (1, h, w) image; return the 2D plane."""
    gray = np.asarray(gray)
    if gray.ndim == 3 and gray.shape[0] == 1:
        gray = gray[0]
    if gray.ndim != 2:
        raise ValueError(f"{name}: expected a single-channel map, got shape {gray.shape}")
    return gray


def replicate_pad(x, p):
    """Edge-clamp padding of the last two axes by p pixels."""
    pad = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    return np.pad(x, pad, mode="edge")


def replicate_pad_adjoint(q, p):
    """Exact adjoint of replicate_pad: fold border strips onto edge samples."""
    if p == 0:
        return q.copy()
    h = q.shape[-2] - 2 * p
    w = q.shape[-1] - 2 * p
    if h < 1 or w < 1:
        raise ValueError(f"padded array too small for p={p}")
    rows = q[..., p : p + h, :].copy()
    rows[..., 0, :] += q[..., :p, :].sum(axis=-2)
    rows[..., h - 1, :] += q[..., p + h :, :].sum(axis=-2)
    out = rows[..., :, p : p + w].copy()
    out[..., :, 0] += rows[..., :, :p].sum(axis=-1)
    out[..., :, w - 1] += rows[..., :, p + w :].sum(axis=-1)
    return out


def sobel_forward(gray):
    plane = as_plane(gray)
    h, w = plane.shape
    if h < 3 or w < 3:
        raise ValueError(f"image must be at least 3x3, got {h}x{w}")
    padded = replicate_pad(plane, 1)
    gx = np.zeros_like(plane)
    gy = np.zeros_like(plane)
    for di, dj, weight in _TAPS_X:
        gx += weight * padded[di : di + h, dj : dj + w]
    for di, dj, weight in _TAPS_Y:
        gy += weight * padded[di : di + h, dj : dj + w]
    return GradientPair(gx, gy)


def sobel_backward(cot):
    """Vector-Jacobian product of sobel_forward.

    cot is a GradientPair (or (gx, gy) tuple) of cotangents; returns the
    cotangent with respect to the input plane.
    """
    cgx, cgy = cot
    cgx = as_plane(cgx, "gx cotangent")
    cgy = as_plane(cgy, "gy cotangent")
    if cgx.shape != cgy.shape:
        raise ValueError(f"cotangent shapes differ: {cgx.shape} vs {cgy.shape}")
    h, w = cgx.shape
    scatter = np.zeros((h + 2, w + 2), dtype=np.result_type(cgx, cgy))
    for di, dj, weight in _TAPS_X:
        scatter[di : di + h, dj : dj + w] += weight * cgx
    for di, dj, weight in _TAPS_Y:
        scatter[di : di + h, dj : dj + w] += weight * cgy
    return replicate_pad_adjoint(scatter, 1)
