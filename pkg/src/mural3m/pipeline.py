"""End-to-end giant-image restoration: scales, bands, perspectives, fusion.

For each scale the damaged image and mask are resized, split into frequency
bands, cut into 16 offset perspectives of fixed-size tiles, restored per
band by the configured backends, band-merged per tile, reassembled, and
averaged over perspectives. Scale results are fused back at full
resolution and pasted into the damaged original so unmasked pixels are
never altered.

Band and scale weights are applied to restoration *corrections* (restored
minus damaged carrier) rather than mixing band images directly: weights
still blend what the backends changed, while a backend that changes
nothing leaves the image bit-exactly unchanged end to end, for any weight
configuration.
"""

from __future__ import annotations

import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .backend import (
    BackendError,
    BackendKind,
    DiffusionBackend,
    ExternalBackend,
    InpaintRequest,
    make_backend,
)
from .backend import DEFAULT_ITERS, DEFAULT_TOL
from .frequency import DEFAULT_CUTOFF, DEFAULT_MERGE_WEIGHTS, lowpass_array, sobel_magnitude
from .fusion import (
    DEFAULT_SCALES,
    SCALE_WEIGHT_PRESETS,
    PairwiseMean,
    check_convex,
    masked_composite,
)
from .imagecore import DefectMask, RasterImage, apply_mask, resize_array, resize_mask
from .maskgen import RNG_ALGORITHM, CoverageError, MaskSpec, generate
from .metrics import compute_report
from .tiling import PERSPECTIVES, assemble_array, make_plan, pad_array

WORKERS_ENV = "MURAL3M_WORKERS"
EXTERNAL_RETRY_BUDGET = 2
BAND_ORDER = ("low", "high", "full")

CSV_HEADER = "coverage,seed,mae,mse,psnr,ssim,mae255,mse255"


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def _parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(p) for p in str(text).split(",") if p.strip() != "")


def _parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


@dataclass(frozen=True)
class PipelineConfig:
    """Flat restoration settings; every field has a config-file key."""

    tile: int = 256
    scales: tuple[float, ...] = DEFAULT_SCALES
    scale_weights: tuple[float, ...] = SCALE_WEIGHT_PRESETS["default"]
    cutoff: float = DEFAULT_CUTOFF
    merge_weights: tuple[float, ...] = DEFAULT_MERGE_WEIGHTS
    backend_low: str = "diffusion"
    backend_high: str = "diffusion"
    backend_full: str = "diffusion"
    backend_timeout: float = 30.0
    diffusion_iters: int = DEFAULT_ITERS
    diffusion_tol: float = DEFAULT_TOL
    workers: int = 1
    fill: float = 0.5
    seed: int = 0
    second_stage: bool = False

    def __post_init__(self):
        if self.tile < 4 or self.tile % 4:
            raise ValueError(f"tile must be a positive multiple of 4, got {self.tile}")
        if not self.scales or self.scales[0] != 1.0:
            raise ValueError(f"scales must start at 1.0, got {self.scales}")
        if list(self.scales) != sorted(set(self.scales), reverse=True):
            raise ValueError(f"scales must be strictly descending, got {self.scales}")
        if any(not (0.0 < s <= 1.0) for s in self.scales):
            raise ValueError(f"scales must lie in (0, 1], got {self.scales}")
        object.__setattr__(
            self,
            "scale_weights",
            check_convex(self.scale_weights, len(self.scales), "scale weights"),
        )
        object.__setattr__(
            self, "merge_weights", check_convex(self.merge_weights, 3, "merge weights")
        )
        if not (0.0 < self.cutoff <= 1.0):
            raise ValueError(f"cutoff must lie in (0, 1], got {self.cutoff}")
        if not (0.0 <= self.fill <= 1.0):
            raise ValueError(f"fill must lie in [0, 1], got {self.fill}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")
        if self.diffusion_iters < 1:
            raise ValueError(f"diffusion_iters must be >= 1, got {self.diffusion_iters}")
        for name in ("backend_low", "backend_high", "backend_full"):
            BackendKind.parse(getattr(self, name), timeout=self.backend_timeout)


def parse_config_file(path: str) -> dict[str, str]:
    """Read a flat `key = value` file; # starts a comment, blanks ignored."""
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, value = line.split("=", 1)
            key = key.strip()
            if not key:
                raise ValueError(f"{path}:{lineno}: empty key")
            values[key] = value.strip()
    return values


def _scale_weights_from(text) -> tuple[float, ...]:
    if isinstance(text, str) and text.strip() in SCALE_WEIGHT_PRESETS:
        return SCALE_WEIGHT_PRESETS[text.strip()]
    if isinstance(text, str):
        return _parse_floats(text)
    return tuple(float(v) for v in text)


_CONFIG_COERCERS = {
    "tile": int,
    "scales": _parse_floats,
    "scale_weights": _scale_weights_from,
    "cutoff": float,
    "merge_weights": _parse_floats,
    "backend": str,
    "backend_low": str,
    "backend_high": str,
    "backend_full": str,
    "backend_timeout": float,
    "diffusion_iters": int,
    "diffusion_tol": float,
    "workers": int,
    "fill": float,
    "seed": int,
    "second_stage": _parse_bool,
}


def build_config(
    file_values: dict | None = None, overrides: dict | None = None
) -> PipelineConfig:
    """Merge config sources into a PipelineConfig.

    Precedence, lowest to highest: built-in defaults, config file, the
    MURAL3M_WORKERS environment variable (workers only), explicit
    overrides (CLI flags). The `backend` key sets all three bands at once
    and per-band keys refine it.
    """
    merged: dict = {}

    def apply(source: dict) -> None:
        # The catch-all backend key lands first so per-band keys refine it
        # regardless of their order within the source.
        if "backend" in source:
            selector = str(source["backend"])
            for band_key in ("backend_low", "backend_high", "backend_full"):
                merged[band_key] = selector
        for key, value in source.items():
            if key == "backend" or value is None:
                continue
            if key not in _CONFIG_COERCERS:
                raise ValueError(f"unknown config key {key!r}")
            merged[key] = _CONFIG_COERCERS[key](value)

    apply(file_values or {})
    env = os.environ.get(WORKERS_ENV)
    if env is not None:
        merged["workers"] = int(env)
    apply({k: v for k, v in (overrides or {}).items() if v is not None})
    if "workers" not in merged:
        merged["workers"] = os.cpu_count() or 1
    return PipelineConfig(**merged)


# ---------------------------------------------------------------------------
# Backends per band
# ---------------------------------------------------------------------------


class BandBackends:
    """Per-band backend instances; identical selectors share one instance."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        cache: dict[str, object] = {}
        self.by_band: dict[str, object] = {}
        for band, selector in (
            ("low", cfg.backend_low),
            ("high", cfg.backend_high),
            ("full", cfg.backend_full),
        ):
            if selector not in cache:
                kind = BackendKind.parse(selector, timeout=cfg.backend_timeout)
                cache[selector] = make_backend(
                    kind,
                    iters=cfg.diffusion_iters,
                    tol=cfg.diffusion_tol,
                    max_procs=cfg.workers,
                )
            self.by_band[band] = cache[selector]
        self.fallback = DiffusionBackend(cfg.diffusion_iters, cfg.diffusion_tol)

    def shared_diffusion(self) -> DiffusionBackend | None:
        """The one DiffusionBackend serving all bands, if that is the setup."""
        first = self.by_band["low"]
        if isinstance(first, DiffusionBackend) and all(
            self.by_band[b] is first for b in BAND_ORDER
        ):
            return first
        return None

    def close(self) -> None:
        for backend in {id(b): b for b in self.by_band.values()}.values():
            backend.close()
        self.fallback.close()

    def describe(self) -> dict:
        return {band: self.by_band[band].describe() for band in BAND_ORDER}


@dataclass
class RunTelemetry:
    """Counters collected while a restore runs (thread-safe)."""

    retries: int = 0
    fallbacks: int = 0
    fallback_tiles: list = field(default_factory=list)
    degenerate_tiles: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def note_retry(self) -> None:
        with self._lock:
            self.retries += 1

    def note_fallback(self, where: tuple, error: str) -> None:
        with self._lock:
            self.fallbacks += 1
            if len(self.fallback_tiles) < 100:
                self.fallback_tiles.append({"tile": where, "error": error})

    def to_dict(self) -> dict:
        return {
            "retries": self.retries,
            "fallbacks": self.fallbacks,
            "fallback_tiles": list(self.fallback_tiles),
            "degenerate_tiles": self.degenerate_tiles,
        }


def _call_backend(backend, req: InpaintRequest, backends: BandBackends, tele: RunTelemetry):
    """Run one request; external failures retry then fall back to diffusion."""
    if not isinstance(backend, ExternalBackend):
        return backend.restore(req)
    last: BackendError | None = None
    for attempt in range(1 + EXTERNAL_RETRY_BUDGET):
        try:
            return backend.restore(req)
        except BackendError as exc:
            last = exc
            if attempt < EXTERNAL_RETRY_BUDGET:
                tele.note_retry()
    where = (req.band, float(req.scale), int(req.perspective))
    tele.note_fallback(where, str(last))
    return backends.fallback.restore(req)


# ---------------------------------------------------------------------------
# Core restoration
# ---------------------------------------------------------------------------


def _decompose_arrays(pixels: np.ndarray, cutoff: float) -> dict[str, np.ndarray]:
    return {
        "low": np.clip(lowpass_array(pixels, cutoff), 0.0, 1.0),
        "high": sobel_magnitude(pixels),
        "full": pixels,
    }


def _scale_dims(w: int, h: int, s: float) -> tuple[int, int]:
    return max(1, round(w * s)), max(1, round(h * s))


def _restore_tile(
    band_views: dict[str, np.ndarray],
    mask_view: np.ndarray,
    coords: tuple,
    cfg: PipelineConfig,
    backends: BandBackends,
    tele: RunTelemetry,
) -> np.ndarray:
    scale, perspective, row, col = coords
    full_view = band_views["full"]
    if not mask_view.any():
        # Contract: every backend preserves unmasked pixels, so an
        # untouched tile round-trips unchanged and the merge is a no-op.
        return full_view
    try:
        shared = backends.shared_diffusion()
        if shared is not None and not cfg.second_stage:
            stacked = np.concatenate([band_views[b] for b in BAND_ORDER], axis=2)
            filled = shared.restore_channels(stacked, mask_view)
            restored = {
                b: filled[:, :, 3 * i : 3 * i + 3] for i, b in enumerate(BAND_ORDER)
            }
        else:
            mask_tile = DefectMask._wrap(np.ascontiguousarray(mask_view))
            restored = {}
            for band in BAND_ORDER:
                req = InpaintRequest(
                    tile=RasterImage._wrap(np.ascontiguousarray(band_views[band])),
                    mask=mask_tile,
                    band=band,
                    scale=scale,
                    perspective=perspective,
                )
                restored[band] = _call_backend(
                    backends.by_band[band], req, backends, tele
                ).pixels
        w_low, w_high, w_full = cfg.merge_weights
        merged = full_view + (
            w_low * (restored["low"] - band_views["low"])
            + w_high * (restored["high"] - band_views["high"])
            + w_full * (restored["full"] - full_view)
        )
        np.clip(merged, 0.0, 1.0, out=merged)
        if cfg.second_stage:
            req = InpaintRequest(
                tile=RasterImage._wrap(merged),
                mask=DefectMask._wrap(np.ascontiguousarray(mask_view)),
                band="full",
                scale=scale,
                perspective=perspective,
            )
            merged = _call_backend(
                backends.by_band["full"], req, backends, tele
            ).pixels
        return merged
    except BackendError as exc:
        raise BackendError(
            f"tile row {row} col {col}, perspective {perspective}, "
            f"scale {scale}, restoration failed: {exc}"
        ) from exc


def _restore_one_scale(
    pixels: np.ndarray,
    mask: np.ndarray,
    scale: float,
    cfg: PipelineConfig,
    backends: BandBackends,
    tele: RunTelemetry,
    pool: ThreadPoolExecutor | None,
    perspectives,
) -> np.ndarray:
    h, w = pixels.shape[:2]
    plan = make_plan(w, h, cfg.tile)
    bands = _decompose_arrays(pixels, cfg.cutoff)
    tile = cfg.tile
    acc = PairwiseMean()
    for k in perspectives:
        canvases = {b: pad_array(bands[b], plan, k) for b in BAND_ORDER}
        mask_canvas = pad_array(mask, plan, k)

        def job(idx: int, _k=k, _canvases=canvases, _mc=mask_canvas):
            r, c = divmod(idx, plan.grid_w)
            sl = (slice(r * tile, (r + 1) * tile), slice(c * tile, (c + 1) * tile))
            views = {b: _canvases[b][sl] for b in BAND_ORDER}
            return _restore_tile(
                views, _mc[sl], (scale, _k, r, c), cfg, backends, tele
            )

        indices = range(plan.tiles_per_perspective)
        if pool is None:
            merged = [job(i) for i in indices]
        else:
            futures = [pool.submit(job, i) for i in indices]
            merged = [f.result() for f in futures]
        acc.add(assemble_array(merged, plan, k))
    return acc.mean()


def restore_giant(
    damaged: RasterImage,
    mask: DefectMask,
    cfg: PipelineConfig | None = None,
    backends: BandBackends | None = None,
    perspectives=None,
    info: dict | None = None,
) -> RasterImage:
    """Restore a damaged image; unmasked pixels come back bit-identical.

    Runs the configured scales, bands and perspectives, fuses the per-scale
    corrections at full resolution, and pastes the result into the damaged
    original. `perspectives` restricts the offset set (default: all 16),
    which is useful for ablation. `info`, when given, is filled with run
    telemetry (retries, fallbacks, degenerate tiles, backend identities).
    """
    cfg = cfg or PipelineConfig()
    if (damaged.height, damaged.width) != (mask.height, mask.width):
        raise ValueError(
            f"mask dims {mask.width}x{mask.height} do not match "
            f"image dims {damaged.width}x{damaged.height}"
        )
    if perspectives is None:
        perspectives = range(PERSPECTIVES)
    perspectives = list(perspectives)
    if not perspectives:
        raise ValueError("need at least one perspective")
    if any(not (0 <= int(k) < PERSPECTIVES) for k in perspectives):
        raise ValueError(f"perspective indices must lie in [0, {PERSPECTIVES})")
    own_backends = backends is None
    if own_backends:
        backends = BandBackends(cfg)
    tele = RunTelemetry()
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        base = damaged.pixels
        h, w = base.shape[:2]
        fused = base.copy()
        for s, weight in zip(cfg.scales, cfg.scale_weights):
            if s == 1.0:
                d_pixels, m_data = base, mask.data
            else:
                sw, sh = _scale_dims(w, h, s)
                d_pixels = np.clip(resize_array(base, sw, sh), 0.0, 1.0)
                m_data = resize_mask(mask, sw, sh).data
            recon = _restore_one_scale(
                d_pixels, m_data, s, cfg, backends, tele, pool, perspectives
            )
            up_recon = resize_array(recon, w, h)
            up_carrier = resize_array(d_pixels, w, h)
            fused += weight * (up_recon - up_carrier)
        np.clip(fused, 0.0, 1.0, out=fused)
        out = masked_composite(damaged, RasterImage._wrap(fused), mask)
    finally:
        if pool is not None:
            pool.shutdown()
        if own_backends:
            backends.close()
    for b in set(backends.by_band.values()) | {backends.fallback}:
        if isinstance(b, DiffusionBackend):
            tele.degenerate_tiles += b.degenerate_tiles
    if info is not None:
        info.update(tele.to_dict())
        info["backends"] = backends.describe()
        info["perspectives"] = len(perspectives)
        info["scales"] = list(cfg.scales)
        info["scale_weights"] = list(cfg.scale_weights)
        info["merge_weights"] = list(cfg.merge_weights)
    return out


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepSpec:
    """A coverage ladder crossed with seeds for one mask family.

    An empty ladder is legal and produces an empty report.
    """

    coverages: tuple[float, ...]
    seeds: tuple[int, ...]
    mask_kind: str = "block"

    def __post_init__(self):
        if any(not (0.0 < c < 1.0) for c in self.coverages):
            raise ValueError(f"coverages must lie in (0, 1), got {self.coverages}")


def _csv_num(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float) and not np.isfinite(value):
        return "inf" if value > 0 else "-inf"
    return f"{value:.10g}"


def run_sweep(
    reference: RasterImage,
    sweep: SweepSpec,
    cfg: PipelineConfig | None = None,
) -> dict:
    """Degrade the reference over the ladder, restore, and score each run.

    Returns a report dict with one row per (coverage, seed) plus
    per-coverage means. Unreachable coverage targets are recorded on their
    row and the sweep continues.
    """
    cfg = cfg or PipelineConfig()
    backends = BandBackends(cfg)
    rows = []
    try:
        for coverage in sweep.coverages:
            for seed in sweep.seeds:
                row: dict = {"coverage": coverage, "seed": seed}
                spec = MaskSpec(
                    kind=sweep.mask_kind,
                    target_coverage=coverage,
                    width=reference.width,
                    height=reference.height,
                    seed=seed,
                )
                try:
                    m = generate(spec)
                except CoverageError as exc:
                    row["error"] = str(exc)
                    row["achieved_coverage"] = exc.achieved
                    rows.append(row)
                    continue
                damaged = apply_mask(reference, m, cfg.fill)
                restored = restore_giant(damaged, m, cfg, backends=backends)
                report = compute_report(restored, reference)
                row["achieved_coverage"] = m.coverage()
                row.update(report.to_dict())
                rows.append(row)
    finally:
        backends.close()
    means = []
    for coverage in sweep.coverages:
        good = [r for r in rows if r["coverage"] == coverage and "error" not in r]
        if not good:
            continue
        entry = {"coverage": coverage, "runs": len(good)}
        for key in ("mae", "mse", "psnr", "ssim", "mae255", "mse255"):
            entry[key] = float(np.mean([r[key] for r in good]))
        means.append(entry)
    return {
        "rng": RNG_ALGORITHM,
        "mask_kind": sweep.mask_kind,
        "scales": list(cfg.scales),
        "scale_weights": list(cfg.scale_weights),
        "merge_weights": list(cfg.merge_weights),
        "backends": {b: getattr(cfg, f"backend_{b}") for b in BAND_ORDER},
        "rows": rows,
        "means": means,
    }


def sweep_csv(report: dict) -> str:
    """Render a sweep report as CSV: per-run rows, then per-coverage means."""
    lines = [CSV_HEADER]
    for row in report["rows"]:
        if "error" in row:
            lines.append(
                f"{_csv_num(row['coverage'])},{row['seed']},,,,,,"
            )
            continue
        lines.append(
            ",".join(
                [_csv_num(row["coverage"]), str(row["seed"])]
                + [
                    _csv_num(row[k])
                    for k in ("mae", "mse", "psnr", "ssim", "mae255", "mse255")
                ]
            )
        )
    for entry in report["means"]:
        lines.append(
            ",".join(
                [_csv_num(entry["coverage"]), "mean"]
                + [
                    _csv_num(entry[k])
                    for k in ("mae", "mse", "psnr", "ssim", "mae255", "mse255")
                ]
            )
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Tile corpus export
# ---------------------------------------------------------------------------


def tile_corpus(
    giant: RasterImage,
    tile: int = 256,
    scales: tuple[float, ...] = DEFAULT_SCALES,
    perspectives=None,
):
    """Yield (scale, perspective, index, tile) over scales and perspectives.

    Tiles come from the same padded geometry the restoration uses, so the
    corpus is exactly what per-tile models would see in production.
    """
    if perspectives is None:
        perspectives = range(PERSPECTIVES)
    w, h = giant.width, giant.height
    for s in scales:
        if s == 1.0:
            pixels = giant.pixels
        else:
            sw, sh = _scale_dims(w, h, s)
            pixels = np.clip(resize_array(giant.pixels, sw, sh), 0.0, 1.0)
        plan = make_plan(pixels.shape[1], pixels.shape[0], tile)
        for k in perspectives:
            canvas = pad_array(pixels, plan, k)
            for idx in range(plan.tiles_per_perspective):
                r, c = divmod(idx, plan.grid_w)
                view = canvas[
                    r * tile : (r + 1) * tile, c * tile : (c + 1) * tile
                ]
                yield s, k, idx, RasterImage._wrap(view)
