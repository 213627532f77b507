"""Synthetic defect mask generators: block, dust, jelly, and linear families.

Every generator is a pure function of its MaskSpec: masks are grown from a
seeded PCG64 stream until the painted fraction lands inside the family's
coverage band. Generation is deterministic and portable; the RNG algorithm
name travels with reports so runs can be reproduced elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage
from skimage.morphology import skeletonize

from .imagecore import DefectMask

RNG_ALGORITHM = "pcg64"

MASK_KINDS = ("block", "dust", "jelly", "linear-skeleton", "linear-dilated")

# Absolute coverage bands per family. The skeleton variant has no band: the
# thinned curves cover whatever they cover.
COVERAGE_TOLERANCE = {
    "block": 0.01,
    "dust": 0.01,
    "jelly": 0.015,
    "linear-dilated": 0.015,
}

# Dust speck geometry: walks are confined to a +/-4 window around their
# start, so one speck never exceeds 9 px across.
_SPECK_REACH = 4
_SPECK_MIN_STEPS = 6
_SPECK_MAX_STEPS = 20

# Jelly shaping.
_JELLY_MIN_COMPONENT = 6
_JELLY_CLOSE_RADIUS = 2
_JELLY_ATTEMPTS = 12

# The linear family thins a mid-coverage jelly mask so the curve network is
# independent of the requested coverage; only the dilation radius tracks it.
_LINEAR_SOURCE_COVERAGE = 0.35


class CoverageError(Exception):
    """Coverage target not reachable; carries the best achieved value."""

    def __init__(self, kind: str, target: float, achieved: float):
        super().__init__(
            f"{kind} mask stalled at coverage {achieved:.4f} "
            f"(target {target:.4f})"
        )
        self.kind = kind
        self.target = target
        self.achieved = achieved


@dataclass(frozen=True)
class MaskSpec:
    """Parameters that fully determine one generated mask."""

    kind: str
    target_coverage: float
    width: int
    height: int
    seed: int

    def __post_init__(self):
        if self.kind not in MASK_KINDS:
            raise ValueError(f"kind must be one of {MASK_KINDS}, got {self.kind!r}")
        if not (0.0 < self.target_coverage < 1.0):
            raise ValueError(
                f"target coverage must lie in (0, 1), got {self.target_coverage}"
            )
        if self.width < 16 or self.height < 16:
            raise ValueError(
                f"mask dimensions must be >= 16, got {self.width}x{self.height}"
            )
        if self.seed < 0:
            raise ValueError(f"seed must be >= 0, got {self.seed}")


def _rng(seed, stream: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, stream])))


def _disk(radius: int) -> np.ndarray:
    y, x = np.ogrid[-radius : radius + 1, -radius : radius + 1]
    return (x * x + y * y) <= radius * radius


# ---------------------------------------------------------------------------
# block family
# ---------------------------------------------------------------------------


def _shape_points(rng: np.random.Generator, radius: float) -> np.ndarray:
    # Either a random star-convex polygon or a rotated ellipse outline.
    if rng.random() < 0.5:
        k = int(rng.integers(5, 12))
        angles = np.sort(rng.uniform(0.0, 2.0 * np.pi, k))
        radii = radius * rng.uniform(0.55, 1.45, k)
        return np.stack([np.cos(angles) * radii, np.sin(angles) * radii], axis=1)
    a = radius * rng.uniform(0.7, 1.6)
    b = radius * rng.uniform(0.4, 1.0)
    theta = rng.uniform(0.0, np.pi)
    t = np.linspace(0.0, 2.0 * np.pi, 32, endpoint=False)
    ex, ey = np.cos(t) * a, np.sin(t) * b
    rot = np.array(
        [[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]]
    )
    return np.stack([ex, ey], axis=1) @ rot.T


def _rasterize(points: np.ndarray, cx: float, cy: float, w: int, h: int):
    """Fill a polygon into a local bounding-box canvas; returns (box, bits)."""
    xs = points[:, 0] + cx
    ys = points[:, 1] + cy
    x0 = max(int(np.floor(xs.min())) - 1, 0)
    y0 = max(int(np.floor(ys.min())) - 1, 0)
    x1 = min(int(np.ceil(xs.max())) + 2, w)
    y1 = min(int(np.ceil(ys.max())) + 2, h)
    if x1 <= x0 or y1 <= y0:
        return None
    canvas = Image.new("L", (x1 - x0, y1 - y0), 0)
    draw = ImageDraw.Draw(canvas)
    draw.polygon(
        [(float(x - x0), float(y - y0)) for x, y in zip(xs, ys)], fill=255
    )
    bits = np.asarray(canvas) > 0
    if not bits.any():
        return None
    return (y0, y1, x0, x1), bits


def gen_block_mask(spec: MaskSpec) -> DefectMask:
    """Union of randomly placed, randomly rotated polygons and ellipses.

    Shapes accrete until coverage enters the +/-1% band; a shape that would
    overshoot the band is shrunk toward its center before being committed.
    """
    rng = _rng(spec.seed)
    h, w = spec.height, spec.width
    total = h * w
    target_px = spec.target_coverage * total
    band_px = COVERAGE_TOLERANCE["block"] * total
    mask = np.zeros((h, w), dtype=bool)
    painted = 0
    max_shape_px = max(total * 0.04, 40.0)
    for _ in range(20000):
        if painted >= target_px - 0.2 * band_px:
            break
        deficit = target_px - painted
        area = min(deficit * rng.uniform(0.25, 0.8), max_shape_px)
        radius = max(np.sqrt(area / np.pi), 1.5)
        points = _shape_points(rng, radius)
        cx = rng.uniform(0.0, w)
        cy = rng.uniform(0.0, h)
        for _shrink in range(6):
            placed = _rasterize(points, cx, cy, w, h)
            if placed is None:
                break
            (y0, y1, x0, x1), bits = placed
            fresh = bits & ~mask[y0:y1, x0:x1]
            n_new = int(np.count_nonzero(fresh))
            if n_new == 0:
                break
            if painted + n_new <= target_px + 0.6 * band_px:
                mask[y0:y1, x0:x1] |= bits
                painted += n_new
                break
            points = points * 0.7  # overshoot: shrink and retry
    achieved = painted / total
    if abs(achieved - spec.target_coverage) > COVERAGE_TOLERANCE["block"]:
        raise CoverageError("block", spec.target_coverage, achieved)
    return DefectMask._wrap(mask.astype(np.uint8))


# ---------------------------------------------------------------------------
# dust family
# ---------------------------------------------------------------------------

_STEPS = np.array([(-1, 0), (1, 0), (0, -1), (0, 1)], dtype=np.int64)


def _paint_dust(rng: np.random.Generator, mask: np.ndarray, budget: int) -> int:
    """Grow random-walk specks until `budget` new pixels are painted.

    Each walk stays inside a +/-4 window around its start. Specks placed at
    high densities merge freely; the last speck is trimmed mid-walk so the
    painted count lands exactly on the budget.
    """
    h, w = mask.shape
    painted = 0
    stall = 0
    while painted < budget and stall < 200000:
        sy = int(rng.integers(0, h))
        sx = int(rng.integers(0, w))
        n_steps = int(rng.integers(_SPECK_MIN_STEPS, _SPECK_MAX_STEPS + 1))
        moves = _STEPS[rng.integers(0, 4, n_steps)]
        path = np.concatenate([[(sy, sx)], np.cumsum(moves, axis=0) + (sy, sx)])
        np.clip(path[:, 0], max(sy - _SPECK_REACH, 0), min(sy + _SPECK_REACH, h - 1), out=path[:, 0])
        np.clip(path[:, 1], max(sx - _SPECK_REACH, 0), min(sx + _SPECK_REACH, w - 1), out=path[:, 1])
        flat = path[:, 0] * w + path[:, 1]
        _, first = np.unique(flat, return_index=True)
        ordered = flat[np.sort(first)]  # visit order, deduplicated
        ordered = ordered[~mask.ravel()[ordered]]
        take = ordered[: budget - painted]
        if take.size == 0:
            stall += 1
            continue
        stall = 0
        mask.ravel()[take] = True
        painted += int(take.size)
    return painted


def gen_dust_mask(spec: MaskSpec) -> DefectMask:
    """Scatter of small random-walk specks, each at most 9 px across."""
    rng = _rng(spec.seed)
    h, w = spec.height, spec.width
    total = h * w
    budget = int(round(spec.target_coverage * total))
    mask = np.zeros((h, w), dtype=bool)
    painted = _paint_dust(rng, mask, budget)
    achieved = painted / total
    if abs(achieved - spec.target_coverage) > COVERAGE_TOLERANCE["dust"]:
        raise CoverageError("dust", spec.target_coverage, achieved)
    return DefectMask._wrap(mask.astype(np.uint8))


# ---------------------------------------------------------------------------
# jelly family
# ---------------------------------------------------------------------------

_EIGHT = np.ones((3, 3), dtype=bool)


def _drop_small_components(mask: np.ndarray, min_size: int) -> np.ndarray:
    labels, n = ndimage.label(mask, structure=_EIGHT)
    if n == 0:
        return mask
    counts = np.bincount(labels.ravel())
    keep = counts >= min_size
    keep[0] = False
    return keep[labels]


def _jelly_from_dust(dust: np.ndarray) -> np.ndarray:
    """Denoise then close: dust specks fuse into blobby regions."""
    cleaned = _drop_small_components(dust, _JELLY_MIN_COMPONENT)
    return ndimage.binary_closing(cleaned, structure=_disk(_JELLY_CLOSE_RADIUS))


def _tune_jelly(spec: MaskSpec) -> tuple[np.ndarray, np.ndarray]:
    """Find a dust field whose closed form lands in the jelly band.

    Returns (dust, jelly) of the accepted attempt. Closing changes coverage
    nonlinearly, so the dust working coverage is retuned multiplicatively.
    """
    h, w = spec.height, spec.width
    total = h * w
    band = COVERAGE_TOLERANCE["jelly"]
    factor = 0.85
    best: tuple[float, np.ndarray, np.ndarray] | None = None
    for attempt in range(_JELLY_ATTEMPTS):
        rng = _rng(spec.seed, stream=1 + attempt)
        dust_cov = float(np.clip(spec.target_coverage * factor, 0.003, 0.97))
        dust = np.zeros((h, w), dtype=bool)
        _paint_dust(rng, dust, int(round(dust_cov * total)))
        jelly = _jelly_from_dust(dust)
        achieved = np.count_nonzero(jelly) / total
        err = abs(achieved - spec.target_coverage)
        if best is None or err < abs(best[0] - spec.target_coverage):
            best = (achieved, dust, jelly)
        if err <= band * 0.85:
            return dust, jelly
        if achieved > 0:
            factor = float(np.clip(factor * spec.target_coverage / achieved, 0.02, 1.5))
        else:
            factor = min(factor * 2.0, 1.5)
    achieved, dust, jelly = best
    if abs(achieved - spec.target_coverage) <= band:
        return dust, jelly
    raise CoverageError("jelly", spec.target_coverage, achieved)


def gen_jelly_mask(spec: MaskSpec) -> DefectMask:
    """Blobby regions built by closing a denoised dust field."""
    _, jelly = _tune_jelly(spec)
    return DefectMask._wrap(jelly.astype(np.uint8))


# ---------------------------------------------------------------------------
# linear family
# ---------------------------------------------------------------------------


def _linear_skeleton(spec: MaskSpec) -> np.ndarray:
    source = MaskSpec(
        kind="jelly",
        target_coverage=_LINEAR_SOURCE_COVERAGE,
        width=spec.width,
        height=spec.height,
        seed=spec.seed,
    )
    jelly = gen_jelly_mask(source).data.astype(bool)
    return skeletonize(jelly)


def gen_linear_mask(spec: MaskSpec) -> DefectMask:
    """Curvilinear defects: thinned jelly curves, optionally dilated.

    The skeleton variant reports whatever coverage the 1-px curves reach;
    the requested coverage does not constrain it. The dilated variant keeps
    every pixel within a real-valued radius of the curves, with the radius
    chosen from the distance transform to hit the target. Pixels tied at
    the chosen radius are ordered by a seeded sub-pixel jitter so the
    landing is exact; radius 0 reproduces the skeleton variant.
    """
    skeleton = _linear_skeleton(spec)
    if spec.kind == "linear-skeleton":
        return DefectMask._wrap(skeleton.astype(np.uint8))

    total = spec.height * spec.width
    want_px = int(round(spec.target_coverage * total))
    base = int(np.count_nonzero(skeleton))
    if base == 0:
        raise CoverageError("linear-dilated", spec.target_coverage, 0.0)
    if want_px <= base:
        # Dilation can only grow the curves; the thinnest reachable mask is
        # the skeleton itself.
        achieved = base / total
        if abs(achieved - spec.target_coverage) > COVERAGE_TOLERANCE["linear-dilated"]:
            raise CoverageError("linear-dilated", spec.target_coverage, achieved)
        return DefectMask._wrap(skeleton.astype(np.uint8))
    dist = ndimage.distance_transform_edt(~skeleton).ravel()
    jitter = _rng(spec.seed, stream=9000).random(total) * 1e-6
    order = np.argsort(dist + jitter, kind="stable")
    grown = np.zeros(total, dtype=bool)
    grown[order[:want_px]] = True
    return DefectMask._wrap(grown.reshape(spec.height, spec.width).astype(np.uint8))


_GENERATORS = {
    "block": gen_block_mask,
    "dust": gen_dust_mask,
    "jelly": gen_jelly_mask,
    "linear-skeleton": gen_linear_mask,
    "linear-dilated": gen_linear_mask,
}


def generate(spec: MaskSpec) -> DefectMask:
    """Dispatch to the generator for spec.kind."""
    return _GENERATORS[spec.kind](spec)
