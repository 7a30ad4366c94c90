"""Reconstruction quality metrics on magnitude sequences.

All three metrics compare ``|rec|`` against ``|gt|`` frame by frame, so they
are invariant to a global phase on either argument.  The dynamic range used
by PSNR and SSIM is the peak ground-truth magnitude over the whole sequence,
not per frame, so a quiet frame is not graded on an inflated scale.
"""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate

from .volume import ComplexVolume

_SSIM_SIZE = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03
_LOG_SIZE = 15
_LOG_SIGMA = 1.5


class UndefinedMetricError(ValueError):
    """The metric has no value for this input (zero normalization)."""


@dataclass(frozen=True)
class ReconMetrics:
    psnr: float
    ssim: float
    hfen: float


def _magnitudes(rec: ComplexVolume, gt: ComplexVolume):
    if rec.data.shape != gt.data.shape:
        raise ValueError(
            f"shape mismatch: rec {rec.data.shape} vs gt {gt.data.shape}"
        )
    return np.abs(rec.data), np.abs(gt.data)


def psnr(rec: ComplexVolume, gt: ComplexVolume) -> float:
    """Peak signal-to-noise ratio in dB; +inf when the volumes agree exactly."""
    mr, mg = _magnitudes(rec, gt)
    mse = float(np.mean((mr - mg) ** 2))
    if mse == 0.0:
        return float(np.inf)
    peak = float(mg.max())
    if peak == 0.0:
        raise UndefinedMetricError("PSNR needs a nonzero ground-truth peak")
    return float(10.0 * np.log10(peak * peak / mse))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = size // 2
    y, x = np.mgrid[-half : half + 1, -half : half + 1]
    g = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    return g / g.sum()


def _ssim_frame(a: np.ndarray, b: np.ndarray, peak: float) -> float:
    win = _gaussian_window(_SSIM_SIZE, _SSIM_SIGMA)
    c1 = (_SSIM_K1 * peak) ** 2
    c2 = (_SSIM_K2 * peak) ** 2
    # "mirror" extends by whole-sample reflection, matching np.pad(mode="reflect"),
    # and keeps the map the same size as the frame even for 8x8 inputs.
    kw = dict(mode="mirror")
    mu_a = correlate(a, win, **kw)
    mu_b = correlate(b, win, **kw)
    var_a = correlate(a * a, win, **kw) - mu_a * mu_a
    var_b = correlate(b * b, win, **kw) - mu_b * mu_b
    cov = correlate(a * b, win, **kw) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    with np.errstate(invalid="ignore"):
        ssim_map = np.where(den == 0.0, 1.0, num / np.where(den == 0.0, 1.0, den))
    return float(ssim_map.mean())


def ssim(rec: ComplexVolume, gt: ComplexVolume) -> float:
    """Mean structural similarity, 11x11 Gaussian windows, averaged over frames."""
    mr, mg = _magnitudes(rec, gt)
    peak = float(mg.max())
    frames = [_ssim_frame(mr[t], mg[t], peak) for t in range(mr.shape[0])]
    return float(np.mean(frames))


def _log_kernel(size: int, sigma: float) -> np.ndarray:
    half = size // 2
    y, x = np.mgrid[-half : half + 1, -half : half + 1]
    g = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    g = g / g.sum()
    h = g * (x * x + y * y - 2.0 * sigma * sigma) / sigma**4
    return h - h.mean()  # zero response on constants away from the boundary


def hfen(rec: ComplexVolume, gt: ComplexVolume) -> float:
    """High-frequency error norm: relative L2 distance of LoG-filtered magnitudes.

    Uses a 15x15 Laplacian-of-Gaussian kernel (sigma 1.5) with zero padding,
    pooling the squared errors over every frame before taking the ratio.
    Raises UndefinedMetricError when the filtered ground truth has zero norm.
    """
    mr, mg = _magnitudes(rec, gt)
    kern = _log_kernel(_LOG_SIZE, _LOG_SIGMA)
    num = 0.0
    den = 0.0
    for t in range(mg.shape[0]):
        # kernel is symmetric, so correlation and convolution coincide
        fr = correlate(mr[t], kern, mode="constant", cval=0.0)
        fg = correlate(mg[t], kern, mode="constant", cval=0.0)
        num += float(((fr - fg) ** 2).sum())
        den += float((fg * fg).sum())
    if den == 0.0:
        raise UndefinedMetricError("LoG of the ground truth is identically zero")
    return float(np.sqrt(num) / np.sqrt(den))


def compute_metrics(rec: ComplexVolume, gt: ComplexVolume) -> ReconMetrics:
    return ReconMetrics(psnr=psnr(rec, gt), ssim=ssim(rec, gt), hfen=hfen(rec, gt))
