"""Full-reference image quality metrics: MAE, MSE, PSNR, SSIM.

All metrics operate on float64 rasters in [0, 1] (peak defaults to 1.0)
and are symmetric in their two arguments. PSNR of identical images is the
+infinity sentinel rather than an arbitrary cap.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .imagecore import RasterImage

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _pix(x) -> np.ndarray:
    if isinstance(x, RasterImage):
        return x.pixels
    return np.asarray(x, dtype=np.float64)


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    pa, pb = _pix(a), _pix(b)
    if pa.shape != pb.shape:
        raise ValueError(f"shape mismatch: {pa.shape} vs {pb.shape}")
    return pa, pb


def mae(a, b) -> float:
    """Mean absolute error.

    Parameters
    ----------
    a, b : RasterImage or ndarray
        Images of identical shape.

    Returns
    -------
    float
        Mean of |a - b| over all samples.
    """
    pa, pb = _pair(a, b)
    return float(np.mean(np.abs(pa - pb)))


def mse(a, b) -> float:
    """Mean squared error over all samples."""
    pa, pb = _pair(a, b)
    d = pa - pb
    return float(np.mean(d * d))


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in decibels.

    Returns math.inf when the mean squared error is exactly zero.
    """
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


def _gaussian_kernel(n: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(n, dtype=np.float64) - (n - 1) / 2.0
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _window_means(plane: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # Separable Gaussian filter; interior values are unaffected by the
    # boundary mode, and only the interior (valid-window region) is kept.
    half = len(kernel) // 2
    tmp = correlate1d(plane, kernel, axis=0, mode="constant")
    tmp = correlate1d(tmp, kernel, axis=1, mode="constant")
    return tmp[half:-half, half:-half]


def ssim(a, b, peak: float = 1.0) -> float:
    """Structural similarity index, Gaussian-windowed.

    Uses an 11x11 Gaussian window (sigma 1.5) with stabilisers
    C1 = (0.01*peak)^2 and C2 = (0.03*peak)^2. The map is computed per
    channel over the valid-window region (no padding) and averaged over
    positions, then over channels.
    """
    pa, pb = _pair(a, b)
    h, w = pa.shape[:2]
    if min(h, w) < SSIM_WINDOW:
        raise ValueError(
            f"image {w}x{h} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} "
            "ssim window"
        )
    if pa.ndim == 2:
        pa = pa[:, :, None]
        pb = pb[:, :, None]
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    kernel = _gaussian_kernel()
    channel_scores = []
    for c in range(pa.shape[2]):
        x = pa[:, :, c]
        y = pb[:, :, c]
        mu_x = _window_means(x, kernel)
        mu_y = _window_means(y, kernel)
        xx = _window_means(x * x, kernel) - mu_x * mu_x
        yy = _window_means(y * y, kernel) - mu_y * mu_y
        xy = _window_means(x * y, kernel) - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + c1) * (2.0 * xy + c2)
        den = (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
        channel_scores.append(float(np.mean(num / den)))
    return float(np.mean(channel_scores))


@dataclass(frozen=True)
class MetricsReport:
    """One comparison summary, in both [0, 1] and 8-bit-scaled units."""

    mae: float
    mse: float
    psnr: float
    ssim: float
    n_pixels: int
    peak: float
    mae255: float
    mse255: float

    def __post_init__(self):
        if (self.mse == 0.0) != math.isinf(self.psnr):
            raise ValueError("psnr must be the +inf sentinel exactly when mse == 0")
        if self.mae > math.sqrt(self.mse) + 1e-12:
            raise ValueError(f"mae {self.mae} exceeds sqrt(mse) {math.sqrt(self.mse)}")

    def to_dict(self) -> dict:
        return asdict(self)


def compute_report(a, b, peak: float = 1.0) -> MetricsReport:
    """Compute all metrics between two images of equal dims."""
    pa, pb = _pair(a, b)
    err_abs = mae(pa, pb)
    err_sq = mse(pa, pb)
    return MetricsReport(
        mae=err_abs,
        mse=err_sq,
        psnr=psnr(pa, pb, peak),
        ssim=ssim(pa, pb, peak),
        n_pixels=int(pa.shape[0] * pa.shape[1]),
        peak=peak,
        mae255=err_abs * 255.0,
        mse255=err_sq * 255.0 * 255.0,
    )
