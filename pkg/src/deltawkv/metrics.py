"""Image quality evaluation: PSNR, SSIM on the luma channel, percentile
error heatmaps, and the classical bicubic baseline."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor_core import ShapeError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class QualityReport:
    psnr_db: float      # math.inf when the images are identical
    ssim: float
    n_pixels: int


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """Full-range luma from (3, H, W) RGB in [0,1]; (1, H, W) passes through."""
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ShapeError(f"expected (1|3, H, W), got {img.shape}")
    if img.shape[0] == 1:
        return img
    r, g, b = img
    return (0.299 * r + 0.587 * g + 0.114 * b)[None]


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    if a.shape != b.shape:
        raise ShapeError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    mse = float(np.mean(d * d))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 2D Gaussian tap weights."""
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def _windows(x: np.ndarray, size: int) -> np.ndarray:
    # (H, W) -> (H-size+1, W-size+1, size, size) valid-position view
    return np.lib.stride_tricks.sliding_window_view(x, (size, size))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM over valid (unpadded) 11x11 Gaussian windows, L=1.

    Identical inputs give exactly 1.0: with a == b every numerator factor is
    computed by an expression bitwise equal to its denominator partner.
    """
    if a.shape != b.shape:
        raise ShapeError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    x = np.asarray(a, dtype=np.float64).squeeze()
    y = np.asarray(b, dtype=np.float64).squeeze()
    if x.ndim != 2:
        raise ShapeError(f"ssim expects one 2D image, got {a.shape}")
    if min(x.shape) < SSIM_WINDOW:
        raise ShapeError(f"image {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")

    w = gaussian_window()
    mu_x = np.einsum("ijkl,kl->ij", _windows(x, SSIM_WINDOW), w)
    mu_y = np.einsum("ijkl,kl->ij", _windows(y, SSIM_WINDOW), w)
    xx = np.einsum("ijkl,kl->ij", _windows(x * x, SSIM_WINDOW), w)
    yy = np.einsum("ijkl,kl->ij", _windows(y * y, SSIM_WINDOW), w)
    xy = np.einsum("ijkl,kl->ij", _windows(x * y, SSIM_WINDOW), w)
    var_x = xx - mu_x * mu_x
    var_y = yy - mu_y * mu_y
    cov = xy - mu_x * mu_y

    c1 = SSIM_K1 * SSIM_K1
    c2 = SSIM_K2 * SSIM_K2
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def evaluate_pair(pred: np.ndarray, target: np.ndarray) -> QualityReport:
    """PSNR and SSIM on the luma channel of a prediction/reference pair."""
    py = rgb_to_y(pred)
    ty = rgb_to_y(target)
    return QualityReport(psnr_db=psnr(py, ty), ssim=ssim(py, ty),
                         n_pixels=int(ty.size))


def percentile(values: np.ndarray, q: float) -> float:
    """q-th percentile with linear interpolation between order statistics."""
    return float(np.percentile(np.asarray(values, dtype=np.float64).ravel(), q))


def error_heatmap(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-pixel squared error, clipped to the [p1, p99] percentile range and
    affinely mapped to [0,1]. Degenerate spread (p1 == p99) maps to zeros."""
    if pred.shape != target.shape:
        raise ShapeError(f"heatmap shapes differ: {pred.shape} vs {target.shape}")
    se = (np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)) ** 2
    lo = percentile(se, 1.0)
    hi = percentile(se, 99.0)
    if hi == lo:
        return np.zeros_like(se)
    return (np.clip(se, lo, hi) - lo) / (hi - lo)


def _catmull_rom(t: np.ndarray) -> np.ndarray:
    """Catmull-Rom cubic kernel (a = -0.5)."""
    t = np.abs(t)
    near = (1.5 * t - 2.5) * t * t + 1.0
    far = ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0
    return np.where(t <= 1.0, near, np.where(t < 2.0, far, 0.0))


def _resample_matrix(n_in: int, s: int) -> np.ndarray:
    """(s*n_in, n_in) interpolation weights along one axis.

    Output j samples the source at j/s, so every s-th output row is an exact
    copy of a source pixel; edges clamp.
    """
    n_out = n_in * s
    w = np.zeros((n_out, n_in), dtype=np.float64)
    for j in range(n_out):
        pos = j / s
        i0 = int(np.floor(pos))
        for tap in range(i0 - 1, i0 + 3):
            k = _catmull_rom(np.float64(pos - tap))
            if k != 0.0:
                w[j, min(max(tap, 0), n_in - 1)] += k
    return w


def bicubic_upsample(img: np.ndarray, s: int) -> np.ndarray:
    """Separable Catmull-Rom upsampling of a (C, H, W) image by s in {2,4}."""
    if s not in (2, 4):
        raise ShapeError(f"scale must be 2 or 4, got {s}")
    if img.ndim != 3:
        raise ShapeError(f"expected (C, H, W), got {img.shape}")
    _, h, w = img.shape
    wh = _resample_matrix(h, s)
    ww = _resample_matrix(w, s)
    out = np.einsum("pi,ciq->cpq", wh, np.asarray(img, dtype=np.float64))
    out = np.einsum("qj,cpj->cpq", ww, out)
    return out.astype(img.dtype, copy=False)
