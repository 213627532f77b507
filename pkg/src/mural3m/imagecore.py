"""Core raster types and pixel-level operations.

Images are carried as float64 arrays in [0, 1] regardless of on-disk bit
depth. All types adopt the arrays they are given and expose them read-only;
operations return new objects instead of mutating.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError


class DecodeError(ValueError):
    """Raised when a file cannot be decoded into a supported raster."""


def _readonly(arr: np.ndarray) -> np.ndarray:
    view = arr.view()
    view.flags.writeable = False
    return view


@dataclass(frozen=True, eq=False)
class RasterImage:
    """Three-channel raster, shape (height, width, 3), float64 in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.pixels, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(
                f"image must have shape (h, w, 3), got {arr.shape}"
            )
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"image dimensions must be >= 1, got {arr.shape}")
        lo, hi = float(arr.min()), float(arr.max())
        if not (0.0 <= lo and hi <= 1.0):
            raise ValueError(
                f"image values must lie in [0, 1], got range [{lo}, {hi}]"
            )
        object.__setattr__(self, "pixels", _readonly(arr))

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "RasterImage":
        # Fast path for internal callers that guarantee a float64 array
        # already in range; skips the O(n) validation scan.
        obj = object.__new__(cls)
        object.__setattr__(obj, "pixels", _readonly(arr))
        return obj

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return 3


@dataclass(frozen=True, eq=False)
class GrayImage:
    """Single-channel raster, shape (height, width), float64 in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"gray image must have shape (h, w), got {arr.shape}")
        lo, hi = float(arr.min()), float(arr.max())
        if not (0.0 <= lo and hi <= 1.0):
            raise ValueError(
                f"gray values must lie in [0, 1], got range [{lo}, {hi}]"
            )
        object.__setattr__(self, "values", _readonly(arr))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class DefectMask:
    """Binary defect map, shape (height, width), uint8 with 1 = damaged."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise ValueError(f"mask must have shape (h, w), got {arr.shape}")
        if arr.dtype != np.uint8:
            arr = arr.astype(np.uint8)
        bad = arr > 1
        if bad.any():
            raise ValueError("mask values must be 0 or 1")
        object.__setattr__(self, "data", _readonly(arr))

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "DefectMask":
        obj = object.__new__(cls)
        object.__setattr__(obj, "data", _readonly(arr))
        return obj

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def coverage(self) -> float:
        """Fraction of pixels marked damaged."""
        return float(np.count_nonzero(self.data)) / self.data.size


def quantize_u8(arr: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to uint8 by round-half-up (0.5/255 steps up)."""
    q = np.floor(arr * 255.0 + 0.5)
    return np.clip(q, 0.0, 255.0).astype(np.uint8)


def load_png(path: str | os.PathLike) -> RasterImage:
    """Load an 8- or 16-bit PNG (or other PIL-readable raster) as RasterImage.

    Alpha channels are dropped. Palette and grayscale files are expanded to
    RGB. Unsupported color modes raise DecodeError naming the path.
    """
    try:
        im = Image.open(path)
        im.load()
    except (UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"cannot decode image file {path!r}: {exc}") from exc
    mode = im.mode
    if mode in ("I;16", "I;16B", "I;16L", "I"):
        arr = np.asarray(im, dtype=np.float64)
        peak = 65535.0 if mode.startswith("I;16") else max(float(arr.max()), 1.0)
        gray = np.clip(arr / peak, 0.0, 1.0)
        return RasterImage._wrap(np.repeat(gray[:, :, None], 3, axis=2))
    if mode not in ("RGB", "RGBA", "L", "LA", "P", "PA", "1"):
        raise DecodeError(f"unsupported color mode {mode!r} in {path!r}")
    if mode != "RGB":
        im = im.convert("RGBA" if "A" in mode else "RGB")
    arr = np.asarray(im, dtype=np.float64) / 255.0
    if arr.ndim == 3 and arr.shape[2] == 4:
        arr = arr[:, :, :3]  # alpha discarded
    return RasterImage._wrap(np.ascontiguousarray(arr))


def save_png(img: RasterImage, path: str | os.PathLike) -> None:
    """Write an 8-bit RGB PNG using round-half-up quantization."""
    Image.fromarray(quantize_u8(img.pixels), mode="RGB").save(path, format="PNG")


def load_mask_png(path: str | os.PathLike) -> DefectMask:
    """Load a mask PNG; any pixel with luminance >= 128 counts as damaged."""
    try:
        im = Image.open(path)
        im.load()
    except (UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"cannot decode mask file {path!r}: {exc}") from exc
    arr = np.asarray(im.convert("L"))
    return DefectMask._wrap((arr >= 128).astype(np.uint8))


def save_mask_png(mask: DefectMask, path: str | os.PathLike) -> None:
    """Write a mask as an 8-bit grayscale PNG (0 = keep, 255 = defect)."""
    Image.fromarray(mask.data * np.uint8(255), mode="L").save(path, format="PNG")


def _axis_coords(n_dst: int, n_src: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # Half-pixel-centered source coordinates for one axis, clamped to the
    # valid range so border samples are never extrapolated.
    pos = (np.arange(n_dst, dtype=np.float64) + 0.5) * (n_src / n_dst) - 0.5
    pos = np.clip(pos, 0.0, n_src - 1.0)
    i0 = np.floor(pos).astype(np.intp)
    i0 = np.minimum(i0, n_src - 1)
    i1 = np.minimum(i0 + 1, n_src - 1)
    return i0, i1, pos - i0


def resize_array(arr: np.ndarray, new_w: int, new_h: int) -> np.ndarray:
    """Bilinear resample of an (h, w) or (h, w, c) array, half-pixel centers."""
    if new_w < 1 or new_h < 1:
        raise ValueError(f"target dimensions must be >= 1, got {new_w}x{new_h}")
    h, w = arr.shape[:2]
    if (new_w, new_h) == (w, h):
        return arr
    y0, y1, wy = _axis_coords(new_h, h)
    x0, x1, wx = _axis_coords(new_w, w)
    if arr.ndim == 3:
        wy = wy[:, None, None]
        wx = wx[None, :, None]
    else:
        wy = wy[:, None]
        wx = wx[None, :]
    rows = arr[y0] * (1.0 - wy) + arr[y1] * wy
    out = rows[:, x0] * (1.0 - wx) + rows[:, x1] * wx
    return out


def resize(img: RasterImage, new_w: int, new_h: int) -> RasterImage:
    """Resize with bilinear interpolation at half-pixel sample centers.

    Resizing to the original dimensions returns the input unchanged.
    """
    out = resize_array(img.pixels, new_w, new_h)
    if out is img.pixels:
        return img
    return RasterImage._wrap(np.clip(out, 0.0, 1.0))


def resize_mask(mask: DefectMask, new_w: int, new_h: int) -> DefectMask:
    """Resize a mask by nearest neighbor, then re-binarize at 0.5."""
    if new_w < 1 or new_h < 1:
        raise ValueError(f"target dimensions must be >= 1, got {new_w}x{new_h}")
    h, w = mask.height, mask.width
    if (new_w, new_h) == (w, h):
        return mask
    yy = np.minimum(
        np.floor((np.arange(new_h) + 0.5) * (h / new_h)).astype(np.intp), h - 1
    )
    xx = np.minimum(
        np.floor((np.arange(new_w) + 0.5) * (w / new_w)).astype(np.intp), w - 1
    )
    picked = mask.data[yy][:, xx]
    return DefectMask._wrap((picked.astype(np.float64) > 0.5).astype(np.uint8))


def apply_mask(img: RasterImage, mask: DefectMask, fill: float = 0.5) -> RasterImage:
    """Return a copy of img with masked pixels replaced by the fill value.

    Unmasked pixels are carried over bit-identically.
    """
    if (img.height, img.width) != (mask.height, mask.width):
        raise ValueError(
            f"mask dims {mask.width}x{mask.height} do not match "
            f"image dims {img.width}x{img.height}"
        )
    if not (0.0 <= fill <= 1.0):
        raise ValueError(f"fill value must lie in [0, 1], got {fill}")
    out = np.where(mask.data[:, :, None] != 0, np.float64(fill), img.pixels)
    return RasterImage._wrap(out)
