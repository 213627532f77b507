"""Combining reconstructions: perspective averaging, scale fusion, paste-back.

All reductions here run in a fixed index order so outputs are
bit-reproducible no matter how the inputs were scheduled. The perspective
mean uses a pairwise (binary-tree) sum, which also makes the mean of
identical images return those images bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imagecore import DefectMask, RasterImage
from .tiling import PERSPECTIVES

DEFAULT_SCALES = (1.0, 0.8, 0.6)
SCALE_WEIGHT_PRESETS = {
    "default": (0.8, 0.1, 0.1),
    "balanced": (0.7, 0.2, 0.1),
}


class PairwiseMean:
    """Streaming pairwise mean over equally shaped arrays, index order.

    Partial sums are combined like a binary counter, which reproduces the
    perfect summation tree for power-of-two counts. Inputs are never
    mutated and at most log2(n) partials are held at a time.
    """

    def __init__(self):
        self._levels: list[np.ndarray | None] = []
        self._count = 0

    def add(self, arr: np.ndarray) -> None:
        carry = arr
        placed = False
        for i, held in enumerate(self._levels):
            if held is None:
                self._levels[i] = carry
                placed = True
                break
            carry = held + carry  # older block stays on the left
            self._levels[i] = None
        if not placed:
            self._levels.append(carry)
        self._count += 1

    @property
    def count(self) -> int:
        return self._count

    def mean(self) -> np.ndarray:
        if self._count == 0:
            raise ValueError("no arrays were added")
        total = None
        # Higher levels hold earlier input blocks; fold left-to-right.
        for held in reversed(self._levels):
            if held is None:
                continue
            total = held if total is None else total + held
        return total / self._count


def pairwise_mean(arrays) -> np.ndarray:
    acc = PairwiseMean()
    for arr in arrays:
        acc.add(arr)
    return acc.mean()


@dataclass(frozen=True, eq=False)
class PerspectiveSet:
    """Exactly 16 same-size reconstructions, one per tiling perspective."""

    images: tuple[RasterImage, ...]

    def __post_init__(self):
        if len(self.images) != PERSPECTIVES:
            raise ValueError(
                f"expected {PERSPECTIVES} perspectives, got {len(self.images)}"
            )
        dims = {(im.height, im.width) for im in self.images}
        if len(dims) != 1:
            raise ValueError(f"perspective dimensions differ: {sorted(dims)}")


def average_perspectives(pset: PerspectiveSet) -> RasterImage:
    """Per-pixel arithmetic mean of the 16 reconstructions."""
    out = pairwise_mean(im.pixels for im in pset.images)
    return RasterImage._wrap(np.clip(out, 0.0, 1.0))


def check_convex(weights, count: int, what: str) -> tuple[float, ...]:
    vec = tuple(float(v) for v in weights)
    if len(vec) != count:
        raise ValueError(f"{what} needs {count} entries, got {len(vec)}")
    if any(v < 0.0 for v in vec):
        raise ValueError(f"{what} must be non-negative, got {vec}")
    if abs(sum(vec) - 1.0) > 1e-9:
        raise ValueError(f"{what} must sum to 1, got sum {sum(vec)}")
    return vec


@dataclass(frozen=True, eq=False)
class ScaleStack:
    """Per-scale reconstructions upsampled to common dims, plus weights."""

    images: tuple[RasterImage, ...]
    weights: tuple[float, ...]
    scales: tuple[float, ...] = DEFAULT_SCALES

    def __post_init__(self):
        if len(self.images) != len(self.scales):
            raise ValueError(
                f"need one image per scale {self.scales}, got {len(self.images)}"
            )
        dims = {(im.height, im.width) for im in self.images}
        if len(dims) != 1:
            raise ValueError(f"scale stack dimensions differ: {sorted(dims)}")
        object.__setattr__(
            self,
            "weights",
            check_convex(self.weights, len(self.images), "scale weights"),
        )


def fuse_scales_raw(arrays, weights) -> np.ndarray:
    """Weighted sum in fixed index order, no clamp (linear in the inputs)."""
    total = None
    for arr, w in zip(arrays, weights):
        term = arr * w
        total = term if total is None else total + term
    return total


def fuse_scales(stack: ScaleStack) -> RasterImage:
    """Convex weighted blend of the scale stack, clamped to [0, 1]."""
    raw = fuse_scales_raw((im.pixels for im in stack.images), stack.weights)
    return RasterImage._wrap(np.clip(raw, 0.0, 1.0))


def masked_composite(
    original: RasterImage, restored: RasterImage, mask: DefectMask
) -> RasterImage:
    """Take restored values where mask == 1, original values elsewhere.

    Unmasked pixels are carried over from the original bit-exactly, so a
    zero-coverage mask returns the original values unchanged.
    """
    if (original.height, original.width) != (restored.height, restored.width):
        raise ValueError(
            f"restored dims {restored.width}x{restored.height} do not match "
            f"original {original.width}x{original.height}"
        )
    if (original.height, original.width) != (mask.height, mask.width):
        raise ValueError(
            f"mask dims {mask.width}x{mask.height} do not match "
            f"image {original.width}x{original.height}"
        )
    out = np.where(mask.data[:, :, None] != 0, restored.pixels, original.pixels)
    return RasterImage._wrap(out)
