"""Offset-perspective tiling: cut an image into fixed-size tiles 16 ways.

Each perspective shifts the tile grid by a quarter-tile lattice offset, so
pixels that sit on a tile boundary in one perspective are interior in
others. Cutting reflect-pads the source to a whole number of tiles;
assembling crops the padding away, making cut -> assemble an exact
round trip.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .imagecore import DefectMask, RasterImage

DEFAULT_TILE = 256
PERSPECTIVES = 16


@dataclass(frozen=True)
class TilePlan:
    """Geometry shared by all 16 perspectives of one source image."""

    source_w: int
    source_h: int
    tile: int
    padded_w: int
    padded_h: int
    offsets: tuple[tuple[int, int], ...]

    @property
    def grid_w(self) -> int:
        return self.padded_w // self.tile

    @property
    def grid_h(self) -> int:
        return self.padded_h // self.tile

    @property
    def tiles_per_perspective(self) -> int:
        return self.grid_w * self.grid_h


def make_plan(w: int, h: int, tile: int = DEFAULT_TILE) -> TilePlan:
    """Build the tiling geometry for a w x h source.

    The 16 offsets are the quarter-tile lattice {(i*s, j*s): i, j in 0..3}
    with s = tile/4, enumerated in raster order (j outer, i inner). Padded
    dimensions are the smallest tile multiples covering source plus the
    largest offset.
    """
    if tile < 4 or tile % 4 != 0:
        raise ValueError(f"tile size must be a positive multiple of 4, got {tile}")
    if w < 1 or h < 1:
        raise ValueError(f"source dimensions must be >= 1, got {w}x{h}")
    stride = tile // 4
    offsets = tuple(
        (i * stride, j * stride) for j in range(4) for i in range(4)
    )
    max_off = 3 * stride
    padded_w = math.ceil((w + max_off) / tile) * tile
    padded_h = math.ceil((h + max_off) / tile) * tile
    return TilePlan(
        source_w=w,
        source_h=h,
        tile=tile,
        padded_w=padded_w,
        padded_h=padded_h,
        offsets=offsets,
    )


@dataclass(frozen=True, eq=False)
class TileSheet:
    """All tiles of one perspective, row-major over the padded grid."""

    plan: TilePlan
    perspective: int
    tiles: tuple[RasterImage, ...]

    def __post_init__(self):
        expect = self.plan.tiles_per_perspective
        if len(self.tiles) != expect:
            raise ValueError(
                f"perspective {self.perspective} needs {expect} tiles, "
                f"got {len(self.tiles)}"
            )


def _placement(plan: TilePlan, perspective: int) -> tuple[int, int]:
    """Top-left canvas position of the source for one perspective.

    The cutting grid starts at the offset point inside the source, so in
    source coordinates the tile boundaries of perspective k sit at the
    perspective-0 boundaries shifted by offsets[k]. On the canvas that
    means placing the source at (tile - offset) mod tile.
    """
    if not (0 <= perspective < PERSPECTIVES):
        raise ValueError(
            f"perspective must lie in 0..{PERSPECTIVES - 1}, got {perspective}"
        )
    dx, dy = plan.offsets[perspective]
    t = plan.tile
    return (t - dx) % t, (t - dy) % t


def pad_array(arr: np.ndarray, plan: TilePlan, perspective: int) -> np.ndarray:
    """Place the source at this perspective's grid position on the canvas.

    Every border is filled by reflection. In source coordinates the tile
    boundaries sit at offset + multiples of the tile size.
    """
    dx, dy = _placement(plan, perspective)
    h, w = arr.shape[:2]
    if (w, h) != (plan.source_w, plan.source_h):
        raise ValueError(
            f"array dims {w}x{h} do not match plan source "
            f"{plan.source_w}x{plan.source_h}"
        )
    pad = [(dy, plan.padded_h - h - dy), (dx, plan.padded_w - w - dx)]
    if arr.ndim == 3:
        pad.append((0, 0))
    mode = "reflect" if min(h, w) > 1 else "symmetric"
    return np.pad(arr, pad, mode=mode)


def slice_tiles(canvas: np.ndarray, plan: TilePlan) -> list[np.ndarray]:
    """Row-major list of tile views into a padded canvas (no copies)."""
    t = plan.tile
    return [
        canvas[r * t : (r + 1) * t, c * t : (c + 1) * t]
        for r in range(plan.grid_h)
        for c in range(plan.grid_w)
    ]


def cut_array(arr: np.ndarray, plan: TilePlan, perspective: int) -> list[np.ndarray]:
    return slice_tiles(pad_array(arr, plan, perspective), plan)


def assemble_array(
    tiles: list[np.ndarray], plan: TilePlan, perspective: int
) -> np.ndarray:
    dx, dy = _placement(plan, perspective)
    expect = plan.tiles_per_perspective
    if len(tiles) != expect:
        raise ValueError(f"expected {expect} tiles, got {len(tiles)}")
    t = plan.tile
    shape = (plan.padded_h, plan.padded_w) + tiles[0].shape[2:]
    canvas = np.empty(shape, dtype=tiles[0].dtype)
    for idx, tile_arr in enumerate(tiles):
        if tile_arr.shape[:2] != (t, t):
            raise ValueError(
                f"tile {idx} has shape {tile_arr.shape[:2]}, expected {(t, t)}"
            )
        r, c = divmod(idx, plan.grid_w)
        canvas[r * t : (r + 1) * t, c * t : (c + 1) * t] = tile_arr
    return canvas[dy : dy + plan.source_h, dx : dx + plan.source_w].copy()


def cut(img: RasterImage, plan: TilePlan, perspective: int) -> TileSheet:
    """Cut one perspective of the image into a full sheet of tiles."""
    views = cut_array(img.pixels, plan, perspective)
    return TileSheet(
        plan=plan,
        perspective=perspective,
        tiles=tuple(RasterImage._wrap(v) for v in views),
    )


def assemble(sheet: TileSheet) -> RasterImage:
    """Invert cut(): place tiles on the padded canvas, crop the source out."""
    arrs = [t.pixels for t in sheet.tiles]
    return RasterImage._wrap(assemble_array(arrs, sheet.plan, sheet.perspective))


def cut_mask(mask: DefectMask, plan: TilePlan, perspective: int) -> list[DefectMask]:
    """Cut a defect mask with the same geometry as its image."""
    views = cut_array(mask.data, plan, perspective)
    return [DefectMask._wrap(v) for v in views]
