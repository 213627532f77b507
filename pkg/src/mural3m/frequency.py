"""Frequency-band decomposition: Fourier low-pass, Sobel high-pass, merge.

The low band is an ideal (brick-wall) low-pass applied per channel in the
2-D DFT domain. The high band is the Sobel gradient magnitude rescaled to
[0, 1]. A band set always carries the untouched source as its full band.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .imagecore import RasterImage

DEFAULT_CUTOFF = 0.10
DEFAULT_MERGE_WEIGHTS = (0.2, 0.2, 0.6)

# Largest radial frequency a 2-D grid represents: the spectrum corner at
# (0.5, 0.5) cycles/sample. Cutoffs are fractions of this radius so that
# cutoff=1.0 keeps every coefficient.
_CORNER_FREQ_SQ = 0.5

_SOBEL_NORM = 1.0 / (4.0 * math.sqrt(2.0))


def lowpass_array(arr: np.ndarray, cutoff: float) -> np.ndarray:
    """Ideal low-pass of an (h, w) or (h, w, c) array. Output is unclamped."""
    if not (0.0 < cutoff <= 1.0):
        raise ValueError(f"cutoff must lie in (0, 1], got {cutoff}")
    h, w = arr.shape[:2]
    fy = np.fft.fftfreq(h)
    fx = np.fft.fftfreq(w)
    r2 = fy[:, None] ** 2 + fx[None, :] ** 2
    keep = r2 <= _CORNER_FREQ_SQ * (cutoff * cutoff)
    if arr.ndim == 3:
        keep = keep[:, :, None]
    spectrum = np.fft.fft2(arr, axes=(0, 1))
    filtered = np.fft.ifft2(spectrum * keep, axes=(0, 1))
    return np.ascontiguousarray(filtered.real)


def lowpass_fft(img: RasterImage, cutoff: float = DEFAULT_CUTOFF) -> RasterImage:
    """Ideal Fourier low-pass per channel, clamped back to [0, 1].

    The cutoff is a fraction of the largest radial frequency on the grid:
    cutoff=1.0 is an all-pass, small cutoffs keep only smooth structure.
    """
    return RasterImage._wrap(np.clip(lowpass_array(img.pixels, cutoff), 0.0, 1.0))


def sobel_magnitude(arr: np.ndarray) -> np.ndarray:
    """Sobel gradient magnitude of an (h, w) or (h, w, c) array.

    The input is reflect-padded by one pixel so the output matches the
    input size, then the magnitude is rescaled by 1/(4*sqrt(2)) which keeps
    results inside [0, 1] for inputs in [0, 1].
    """
    pad = ((1, 1), (1, 1)) + (((0, 0),) if arr.ndim == 3 else ())
    mode = "reflect" if min(arr.shape[:2]) > 1 else "symmetric"
    p = np.pad(arr, pad, mode=mode)
    # Separable Sobel: smooth [1,2,1] along one axis, diff [-1,0,1] along the
    # other.
    sm_y = p[:-2] + 2.0 * p[1:-1] + p[2:]
    gx = sm_y[:, 2:] - sm_y[:, :-2]
    sm_x = p[:, :-2] + 2.0 * p[:, 1:-1] + p[:, 2:]
    gy = sm_x[2:] - sm_x[:-2]
    return np.sqrt(gx * gx + gy * gy) * _SOBEL_NORM


def highpass_sobel(img: RasterImage) -> RasterImage:
    """Per-channel Sobel edge magnitude, rescaled to [0, 1]."""
    return RasterImage._wrap(sobel_magnitude(img.pixels))


@dataclass(frozen=True, eq=False)
class BandSet:
    """Low, high and full frequency bands of one image, equal dims."""

    low: RasterImage
    high: RasterImage
    full: RasterImage

    def __post_init__(self):
        dims = {(b.height, b.width) for b in (self.low, self.high, self.full)}
        if len(dims) != 1:
            raise ValueError(f"band dimensions differ: {sorted(dims)}")


def decompose(img: RasterImage, cutoff: float = DEFAULT_CUTOFF) -> BandSet:
    """Split an image into low/high bands; the full band is the input itself."""
    return BandSet(
        low=lowpass_fft(img, cutoff),
        high=highpass_sobel(img),
        full=img,
    )


def _weight_vec(value, name: str) -> np.ndarray:
    vec = np.asarray(value, dtype=np.float64)
    if vec.ndim == 0:
        vec = np.repeat(vec, 3)
    if vec.shape != (3,):
        raise ValueError(f"{name} must be a scalar or length-3 sequence")
    if (vec < 0.0).any():
        raise ValueError(f"{name} must be non-negative, got {vec.tolist()}")
    return vec


@dataclass(frozen=True, eq=False)
class MergeWeights:
    """Per-channel convex weights for combining low/high/full restorations.

    Each weight is a scalar (applied to all channels) or a length-3
    per-channel vector; the three must sum to 1 per channel within 1e-9.
    """

    w_low: np.ndarray
    w_high: np.ndarray
    w_full: np.ndarray

    def __init__(self, w_low=0.2, w_high=0.2, w_full=0.6):
        object.__setattr__(self, "w_low", _weight_vec(w_low, "w_low"))
        object.__setattr__(self, "w_high", _weight_vec(w_high, "w_high"))
        object.__setattr__(self, "w_full", _weight_vec(w_full, "w_full"))
        total = self.w_low + self.w_high + self.w_full
        if np.abs(total - 1.0).max() > 1e-9:
            raise ValueError(
                f"merge weights must sum to 1 per channel, got {total.tolist()}"
            )


def merge_bands(bands: BandSet, weights: MergeWeights | None = None) -> RasterImage:
    """Convex pixelwise combination of the three bands, clamped to [0, 1]."""
    if weights is None:
        weights = MergeWeights(*DEFAULT_MERGE_WEIGHTS)
    out = (
        bands.low.pixels * weights.w_low
        + bands.high.pixels * weights.w_high
        + bands.full.pixels * weights.w_full
    )
    return RasterImage._wrap(np.clip(out, 0.0, 1.0))
