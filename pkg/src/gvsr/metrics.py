"""Evaluation metrics (PSNR, SSIM on luma) and patch-variance profiling.

Reports are plain CSV; the variance profile can also be rendered as a
small standalone SVG with one panel per gradient axis.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .gradients import sobel_forward
from .gvloss import patch_variance, ssim_index, unfold
from .imagecore import check_image, crop_to_multiple, to_grayscale

HIST_BINS = 64
HIST_FLOOR = 1e-8


@dataclass(frozen=True)
class MetricRow:
    name: str
    psnr_db: float
    ssim: float


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    @property
    def mean_psnr(self):
        return sum(r.psnr_db for r in self.rows) / len(self.rows)

    @property
    def mean_ssim(self):
        return sum(r.ssim for r in self.rows) / len(self.rows)


@dataclass(frozen=True)
class VarianceHistogram:
    """Raw per-patch variances of the two gradient maps plus a shared
    log-spaced histogram (counts sum to the patch count per axis)."""

    vx: np.ndarray
    vy: np.ndarray
    edges: np.ndarray
    counts_x: np.ndarray
    counts_y: np.ndarray


def _luma_pair(a, b, border):
    a = check_image(a, "a")
    b = check_image(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    x = to_grayscale(a)[0]
    y = to_grayscale(b)[0]
    if border:
        if 2 * border >= min(x.shape):
            raise ValueError(f"border {border} exceeds image {x.shape}")
        x = x[border:-border, border:-border]
        y = y[border:-border, border:-border]
    return x, y


def psnr(a, b, border=0):
    """Peak signal-to-noise ratio in dB on luma, peak 1.0; identical
    images return +inf. border pixels are excluded on every side."""
    x, y = _luma_pair(a, b, border)
    mse = float(((x - y) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


def ssim(a, b, border=0):
    """Mean structural similarity on luma; shares its window and
    stabilizer constants with the SSIM loss, so ssim = 1 - loss."""
    x, y = _luma_pair(a, b, border)
    return ssim_index(x, y)


def histogram_edges(values_max, bins=HIST_BINS):
    """Log-spaced bin edges from the fixed floor up to the observed
    maximum (at least 2x the floor so edges stay strictly increasing)."""
    hi = max(float(values_max), 2.0 * HIST_FLOOR)
    return np.geomspace(HIST_FLOOR, hi, bins + 1)


def _count(values, edges):
    # Clip into the covered range so every patch lands in some bin.
    clipped = np.clip(values, edges[0], edges[-1])
    counts, _ = np.histogram(clipped, bins=edges)
    return counts


def profile_from_values(vx, vy, edges=None):
    """Build a VarianceHistogram from raw variance arrays (e.g. pooled
    over a whole dataset)."""
    vx = np.asarray(vx, dtype=np.float64)
    vy = np.asarray(vy, dtype=np.float64)
    if edges is None:
        edges = histogram_edges(max(vx.max(), vy.max()))
    return VarianceHistogram(vx, vy, edges, _count(vx, edges), _count(vy, edges))


def variance_profile(img, n, edges=None):
    """Per-patch gradient variances of an image (center-cropped to a
    multiple of n) and their histograms. Pass precomputed edges to put
    several images on a common axis."""
    img = check_image(img, "img")
    if min(img.shape[1:]) < n:
        raise ValueError(f"image {img.shape[1]}x{img.shape[2]} smaller than patch size {n}")
    img = crop_to_multiple(img, n)
    gx, gy = sobel_forward(to_grayscale(img)[0])
    vx = patch_variance(unfold(gx, n))
    vy = patch_variance(unfold(gy, n))
    if edges is None:
        edges = histogram_edges(max(vx.max(), vy.max()))
    return VarianceHistogram(vx, vy, edges, _count(vx, edges), _count(vy, edges))


def format_metric_csv(report):
    lines = ["name,psnr_db,ssim"]
    for r in report.rows:
        lines.append(f"{r.name},{r.psnr_db:.6f},{r.ssim:.6f}")
    lines.append(f"MEAN,{report.mean_psnr:.6f},{report.mean_ssim:.6f}")
    return "\n".join(lines) + "\n"


def format_profile_csv(profile):
    lines = ["patch_index,vx,vy"]
    for i, (x, y) in enumerate(zip(profile.vx, profile.vy)):
        lines.append(f"{i},{x:.12g},{y:.12g}")
    return "\n".join(lines) + "\n"


def format_histogram_csv(profile):
    lines = ["bin_lo,bin_hi,count_x,count_y"]
    for i in range(len(profile.counts_x)):
        lines.append(
            f"{profile.edges[i]:.12g},{profile.edges[i + 1]:.12g},"
            f"{profile.counts_x[i]},{profile.counts_y[i]}"
        )
    return "\n".join(lines) + "\n"


# -- SVG rendering ----------------------------------------------------------
# Hand-rolled so the output bytes are a pure function of the data (plotting
# libraries stamp timestamps and version strings into their SVG).

_PANEL_W = 420
_PANEL_H = 300
_MARGIN = 45
_COLORS = ("#1f77b4", "#d62728")


def _polyline(counts, peak, x0):
    pts = []
    bins = len(counts)
    inner_w = _PANEL_W - 2 * _MARGIN
    inner_h = _PANEL_H - 2 * _MARGIN
    for i, c in enumerate(counts):
        x_lo = x0 + _MARGIN + inner_w * i / bins
        x_hi = x0 + _MARGIN + inner_w * (i + 1) / bins
        y = _MARGIN + inner_h * (1.0 - c / peak)
        pts.append(f"{x_lo:.2f},{y:.2f}")
        pts.append(f"{x_hi:.2f},{y:.2f}")
    return " ".join(pts)


def render_histogram_svg(profiles, labels):
    """Two-panel SVG (one per gradient axis) overlaying the histograms of
    up to two profiles; bins are positions on a log axis already."""
    if not 1 <= len(profiles) <= 2 or len(profiles) != len(labels):
        raise ValueError("expected 1 or 2 profiles with matching labels")
    width = 2 * _PANEL_W
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{_PANEL_H}" '
        f'viewBox="0 0 {width} {_PANEL_H}">',
        f'<rect width="{width}" height="{_PANEL_H}" fill="white"/>',
    ]
    for panel, axis in enumerate(("x", "y")):
        x0 = panel * _PANEL_W
        counts_all = [p.counts_x if axis == "x" else p.counts_y for p in profiles]
        peak = max(1, max(int(c.max()) for c in counts_all))
        left, top = x0 + _MARGIN, _MARGIN
        right, bottom = x0 + _PANEL_W - _MARGIN, _PANEL_H - _MARGIN
        parts.append(
            f'<rect x="{left}" y="{top}" width="{right - left}" height="{bottom - top}" '
            f'fill="none" stroke="#888" stroke-width="1"/>'
        )
        parts.append(
            f'<text x="{x0 + _PANEL_W // 2}" y="{_MARGIN - 12}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="13">patch variance of g{axis} (log bins)</text>'
        )
        parts.append(
            f'<text x="{left}" y="{bottom + 25}" font-family="sans-serif" font-size="11">'
            f"{profiles[0].edges[0]:.1e}</text>"
        )
        parts.append(
            f'<text x="{right}" y="{bottom + 25}" text-anchor="end" font-family="sans-serif" '
            f'font-size="11">{profiles[0].edges[-1]:.1e}</text>'
        )
        parts.append(
            f'<text x="{left - 6}" y="{_MARGIN + 5}" text-anchor="end" font-family="sans-serif" '
            f'font-size="11">{peak}</text>'
        )
        for k, counts in enumerate(counts_all):
            parts.append(
                f'<polyline points="{_polyline(counts, peak, x0)}" fill="none" '
                f'stroke="{_COLORS[k]}" stroke-width="1.5"/>'
            )
        for k, label in enumerate(labels):
            ly = top + 16 + 16 * k
            parts.append(
                f'<line x1="{right - 90}" y1="{ly - 4}" x2="{right - 70}" y2="{ly - 4}" '
                f'stroke="{_COLORS[k]}" stroke-width="2"/>'
            )
            parts.append(
                f'<text x="{right - 64}" y="{ly}" font-family="sans-serif" font-size="12">{label}</text>'
            )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
