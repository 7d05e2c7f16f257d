"""Differentiable image losses under one interface.

The gradient-variance loss runs gray -> Sobel -> non-overlapping patch
unfold -> per-patch variance on both images and penalizes the distance
between the two variance maps, for both gradient axes. Baselines: L1, L2,
anisotropic total variation, and SSIM, each with its exact analytic
gradient with respect to the first (SR) argument.
"""

import functools
from dataclasses import dataclass, field

import numpy as np

from .gradients import GradientPair, as_plane, sobel_backward, sobel_forward
from .imagecore import GRAY_WEIGHTS, check_image, to_grayscale

BASE_LOSSES = ("l1", "l2", "ssim")
REGULARIZERS = ("none", "tv", "gv")

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2  # (K1 * dynamic range)^2, range 1.0
SSIM_C2 = 0.03**2


@dataclass(frozen=True)
class LossResult:
    """Scalar loss plus the cotangent d(value)/d(sr), same shape as sr."""

    value: float
    grad_sr: np.ndarray


@dataclass(frozen=True)
class CompositeLossSpec:
    """A base loss optionally combined with a weighted regularizer."""

    base: str
    regularizer: str = "none"
    reg_weight: float = 1.0
    gv_patch: int = 8
    gv_reduction: str = "mean"

    def __post_init__(self):
        if self.base not in BASE_LOSSES:
            raise ValueError(f"unknown base loss {self.base!r}; expected one of {BASE_LOSSES}")
        if self.regularizer not in REGULARIZERS:
            raise ValueError(f"unknown regularizer {self.regularizer!r}; expected one of {REGULARIZERS}")
        if self.reg_weight < 0:
            raise ValueError("reg_weight must be nonnegative")
        if self.gv_patch < 2:
            raise ValueError("gv_patch must be >= 2")
        if self.gv_reduction not in ("mean", "norm"):
            raise ValueError(f"unknown gv_reduction {self.gv_reduction!r}")

    @property
    def name(self):
        if self.regularizer == "none":
            return self.base
        return f"{self.base}+{self.regularizer}"

    @classmethod
    def from_name(cls, name, reg_weight=1.0, gv_patch=8, gv_reduction="mean"):
        """Parse a spec from a name like "l2" or "l1+gv"."""
        parts = name.lower().split("+")
        if len(parts) == 1:
            return cls(parts[0], "none", reg_weight, gv_patch, gv_reduction)
        if len(parts) == 2:
            return cls(parts[0], parts[1], reg_weight, gv_patch, gv_reduction)
        raise ValueError(f"cannot parse loss name {name!r}")


def unfold(gradient_map, n):
    """Rearrange a map into an (n*n, patches) matrix of non-overlapping
    n x n patches; column j is the j-th patch in row-major scan order."""
    plane = as_plane(gradient_map, "map")
    h, w = plane.shape
    if n < 1:
        raise ValueError("patch size must be positive")
    if h % n or w % n:
        raise ValueError(f"dimensions {h}x{w} not divisible by patch size {n}; crop first")
    return plane.reshape(h // n, n, w // n, n).transpose(1, 3, 0, 2).reshape(n * n, -1)


def fold(patches, height, width):
    """Inverse of unfold: fold(unfold(x, n), h, w) == x."""
    nn, count = patches.shape
    n = int(round(nn**0.5))
    if n * n != nn:
        raise ValueError(f"row count {nn} is not a perfect square")
    if height % n or width % n or (height // n) * (width // n) != count:
        raise ValueError(f"{nn}x{count} patches do not tile {height}x{width}")
    return patches.reshape(n, n, height // n, width // n).transpose(2, 0, 3, 1).reshape(height, width)


def patch_variance(patches):
    """Unbiased per-column variance (divisor n^2 - 1)."""
    rows = patches.shape[0]
    if rows < 2:
        raise ValueError("patch must hold at least 2 samples (n >= 2)")
    mu = patches.mean(axis=0)
    return ((patches - mu) ** 2).sum(axis=0) / (rows - 1)


def _patch_variance_backward(patches, cot_v):
    # d v_j / d x_ij = 2 (x_ij - mu_j) / (n^2 - 1); the mu terms cancel.
    rows = patches.shape[0]
    return cot_v[None, :] * (2.0 / (rows - 1)) * (patches - patches.mean(axis=0))


def _grayscale_backward(cot_luma, channels):
    if channels == 1:
        return cot_luma[None].copy()
    wr, wg, wb = GRAY_WEIGHTS
    return np.stack([wr * cot_luma, wg * cot_luma, wb * cot_luma])


def _check_pair(sr, hr):
    sr = check_image(sr, "sr")
    hr = check_image(hr, "hr")
    if sr.shape != hr.shape:
        raise ValueError(f"shape mismatch: sr {sr.shape} vs hr {hr.shape}")
    return sr, hr


def gv_loss(sr, hr, n, reduction="mean"):
    """Distance between the gradient-map patch-variance grids of sr and hr.

    With the default "mean" reduction the distance is the mean over patches
    of squared variance differences, summed over the two gradient axes. The
    "norm" reduction uses the unsquared Euclidean norm instead (kept for
    comparison; not the default). hr carries no gradient.
    """
    sr, hr = _check_pair(sr, hr)
    if n < 2:
        raise ValueError("patch size must be >= 2")
    if reduction not in ("mean", "norm"):
        raise ValueError(f"unknown reduction {reduction!r}")
    _, h, w = sr.shape
    if h % n or w % n:
        raise ValueError(f"dimensions {h}x{w} not divisible by patch size {n}; crop first")

    luma_sr = to_grayscale(sr)[0]
    luma_hr = to_grayscale(hr)[0]
    grads_sr = sobel_forward(luma_sr)
    grads_hr = sobel_forward(luma_hr)

    value = 0.0
    cot_axes = []
    for axis_sr, axis_hr in zip(grads_sr, grads_hr):
        patches = unfold(axis_sr, n)
        diff = patch_variance(patches) - patch_variance(unfold(axis_hr, n))
        if reduction == "mean":
            value += float((diff**2).mean())
            cot_v = (2.0 / diff.size) * diff
        else:
            norm = float(np.sqrt((diff**2).sum()))
            value += norm
            cot_v = diff / norm if norm > 0 else np.zeros_like(diff)
        cot_axes.append(fold(_patch_variance_backward(patches, cot_v), h, w))

    cot_luma = sobel_backward(GradientPair(*cot_axes))
    return LossResult(value, _grayscale_backward(cot_luma, sr.shape[0]))


def l2_loss(sr, hr):
    """Mean squared error over all samples."""
    sr, hr = _check_pair(sr, hr)
    diff = sr - hr
    return LossResult(float((diff**2).mean()), (2.0 / diff.size) * diff)


def l1_loss(sr, hr):
    """Mean absolute error; the subgradient at 0 is fixed to 0."""
    sr, hr = _check_pair(sr, hr)
    diff = sr - hr
    return LossResult(float(np.abs(diff).mean()), np.sign(diff) / diff.size)


def tv_loss(sr):
    """Anisotropic total variation: mean of squared forward differences
    along x and y (single pooled mean over all difference terms)."""
    sr = check_image(sr, "sr")
    _, h, w = sr.shape
    if h < 2 and w < 2:
        raise ValueError("total variation needs at least two pixels along one axis")
    dx = sr[:, :, 1:] - sr[:, :, :-1]
    dy = sr[:, 1:, :] - sr[:, :-1, :]
    count = dx.size + dy.size
    value = (float((dx**2).sum()) + float((dy**2).sum())) / count
    grad = np.zeros_like(sr)
    gx = (2.0 / count) * dx
    gy = (2.0 / count) * dy
    grad[:, :, 1:] += gx
    grad[:, :, :-1] -= gx
    grad[:, 1:, :] += gy
    grad[:, :-1, :] -= gy
    return LossResult(value, grad)


@functools.lru_cache(maxsize=64)
def _gauss_filter_matrix(length):
    """(length - 10, length) matrix applying the 11-tap Gaussian window
    (sigma 1.5) along one axis, valid positions only."""
    offsets = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    kernel = np.exp(-(offsets**2) / (2.0 * SSIM_SIGMA**2))
    kernel /= kernel.sum()
    out_len = length - SSIM_WINDOW + 1
    mat = np.zeros((out_len, length), dtype=np.float64)
    for i in range(out_len):
        mat[i, i : i + SSIM_WINDOW] = kernel
    return mat


def _window_mean(x):
    rows = _gauss_filter_matrix(x.shape[0])
    cols = _gauss_filter_matrix(x.shape[1])
    return rows @ x @ cols.T


def _window_mean_adjoint(cot, h, w):
    rows = _gauss_filter_matrix(h)
    cols = _gauss_filter_matrix(w)
    return rows.T @ cot @ cols


def _ssim_terms(x, y):
    mu_x = _window_mean(x)
    mu_y = _window_mean(y)
    e_xx = _window_mean(x * x)
    e_yy = _window_mean(y * y)
    e_xy = _window_mean(x * y)
    a1 = 2.0 * mu_x * mu_y + SSIM_C1
    a2 = 2.0 * (e_xy - mu_x * mu_y) + SSIM_C2
    b1 = mu_x**2 + mu_y**2 + SSIM_C1
    b2 = (e_xx - mu_x**2) + (e_yy - mu_y**2) + SSIM_C2
    return mu_x, mu_y, a1, a2, b1, b2


def ssim_index(a, b):
    """Mean local SSIM between two luma planes (Gaussian 11x11 windows at
    valid positions, K1=0.01, K2=0.03, dynamic range 1)."""
    x = as_plane(a, "a")
    y = as_plane(b, "b")
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"image must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape}")
    _, _, a1, a2, b1, b2 = _ssim_terms(x, y)
    return float(((a1 * a2) / (b1 * b2)).mean())


def ssim_loss(sr, hr):
    """1 - mean SSIM on luma, with the analytic gradient."""
    sr, hr = _check_pair(sr, hr)
    _, h, w = sr.shape
    if min(h, w) < SSIM_WINDOW:
        raise ValueError(f"image must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")
    x = to_grayscale(sr)[0]
    y = to_grayscale(hr)[0]
    mu_x, mu_y, a1, a2, b1, b2 = _ssim_terms(x, y)
    denom = b1 * b2
    s = (a1 * a2) / denom
    value = 1.0 - float(s.mean())

    # d(1 - mean S)/dS, then S's partials w.r.t. the window statistics that
    # depend on x: mu_x, E[x^2], E[xy].
    cot_s = np.full_like(s, -1.0 / s.size)
    d_mu = cot_s * 2.0 * (mu_y * (a2 - a1) - mu_x * s * (b2 - b1)) / denom
    d_exx = cot_s * (-s / b2)
    d_exy = cot_s * (2.0 * a1 / denom)
    cot_luma = (
        _window_mean_adjoint(d_mu, h, w)
        + 2.0 * x * _window_mean_adjoint(d_exx, h, w)
        + y * _window_mean_adjoint(d_exy, h, w)
    )
    return LossResult(value, _grayscale_backward(cot_luma, sr.shape[0]))


def composite_loss(spec, sr, hr):
    """base(sr, hr) + reg_weight * regularizer, with the summed gradient."""
    if spec.base == "l1":
        base = l1_loss(sr, hr)
    elif spec.base == "l2":
        base = l2_loss(sr, hr)
    else:
        base = ssim_loss(sr, hr)
    if spec.regularizer == "none" or spec.reg_weight == 0.0:
        return base
    if spec.regularizer == "tv":
        reg = tv_loss(sr)
    else:
        reg = gv_loss(sr, hr, spec.gv_patch, spec.gv_reduction)
    return LossResult(base.value + spec.reg_weight * reg.value, base.grad_sr + spec.reg_weight * reg.grad_sr)
