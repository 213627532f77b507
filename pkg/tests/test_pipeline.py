import os
import sys

import numpy as np
import pytest

from mural3m.backend import BackendError, DiffusionBackend, NullBackend
from mural3m.imagecore import DefectMask, apply_mask
from mural3m.maskgen import MaskSpec, generate
from mural3m.pipeline import (
    BandBackends,
    CSV_HEADER,
    EXTERNAL_RETRY_BUDGET,
    PipelineConfig,
    SweepSpec,
    WORKERS_ENV,
    build_config,
    parse_config_file,
    restore_giant,
    run_sweep,
    sweep_csv,
    tile_corpus,
)
from mural3m.tiling import PERSPECTIVES, make_plan

from conftest import smooth_mural

ECHO = f"{sys.executable} -m mural3m.echo_backend"

NULL_CFG = dict(
    backend_low="null", backend_high="null", backend_full="null", workers=1
)


def square_mask(size: int, r0: int, r1: int, c0: int, c1: int) -> DefectMask:
    m = np.zeros((size, size), np.uint8)
    m[r0:r1, c0:c1] = 1
    return DefectMask(m)


# ------------------------------------------------------------------ config


def test_config_defaults_valid():
    cfg = PipelineConfig()
    assert cfg.tile == 256
    assert cfg.scales == (1.0, 0.8, 0.6)
    assert cfg.scale_weights == (0.8, 0.1, 0.1)
    assert cfg.merge_weights == (0.2, 0.2, 0.6)


@pytest.mark.parametrize(
    "kw",
    [
        {"tile": 30},
        {"tile": 0},
        {"scales": (0.8, 0.6)},
        {"scales": (1.0, 0.6, 0.8)},
        {"scales": (1.0, 1.0)},
        {"scales": (1.0, -0.5)},
        {"scales": (1.0, 0.8), "scale_weights": (0.8, 0.1, 0.1)},
        {"scale_weights": (0.5, 0.4, 0.2)},
        {"merge_weights": (1.0, 0.0)},
        {"cutoff": 0.0},
        {"cutoff": 1.5},
        {"fill": -0.1},
        {"workers": 0},
        {"diffusion_iters": 0},
        {"backend_full": "quantum"},
        {"backend_low": "external:   "},
    ],
)
def test_config_rejects_bad_values(kw):
    with pytest.raises(ValueError):
        PipelineConfig(**kw)


def test_parse_config_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text(
        "# restoration run\n"
        "\n"
        "tile = 128\n"
        "scales = 1.0, 0.8\n"
        "workers = 2   # inline comment\n"
        "backend = null\n"
    )
    vals = parse_config_file(str(p))
    assert vals == {
        "tile": "128",
        "scales": "1.0, 0.8",
        "workers": "2",
        "backend": "null",
    }


def test_parse_config_file_errors_name_position(tmp_path):
    p = tmp_path / "broken.cfg"
    p.write_text("tile = 64\nnot a pair\n")
    with pytest.raises(ValueError, match=rf"{p.name}:2"):
        parse_config_file(str(p))
    p.write_text(" = 5\n")
    with pytest.raises(ValueError, match="empty key"):
        parse_config_file(str(p))


def test_build_config_precedence(monkeypatch):
    monkeypatch.delenv(WORKERS_ENV, raising=False)
    cfg = build_config({"tile": "128", "workers": "5"}, {"tile": 64})
    assert cfg.tile == 64  # override beats file
    assert cfg.workers == 5
    monkeypatch.setenv(WORKERS_ENV, "3")
    cfg = build_config({"workers": "5"}, {})
    assert cfg.workers == 3  # env beats file
    cfg = build_config({"workers": "5"}, {"workers": 2})
    assert cfg.workers == 2  # override beats env


def test_build_config_workers_default_cpu(monkeypatch):
    monkeypatch.delenv(WORKERS_ENV, raising=False)
    assert build_config().workers == (os.cpu_count() or 1)


def test_build_config_backend_catch_all():
    cfg = build_config({"backend": "null"}, {"backend_high": "diffusion"})
    assert cfg.backend_low == "null"
    assert cfg.backend_high == "diffusion"
    assert cfg.backend_full == "null"


def test_build_config_scale_weight_preset():
    cfg = build_config({"scale_weights": "balanced"})
    assert cfg.scale_weights == (0.7, 0.2, 0.1)
    cfg = build_config({"scale_weights": "0.5, 0.25, 0.25"})
    assert cfg.scale_weights == (0.5, 0.25, 0.25)


def test_build_config_unknown_key():
    with pytest.raises(ValueError, match="unknown config key"):
        build_config({"bogus": "1"})


def test_build_config_second_stage_bool():
    assert build_config({"second_stage": "yes"}).second_stage is True
    assert build_config({"second_stage": "0"}).second_stage is False
    with pytest.raises(ValueError):
        build_config({"second_stage": "maybe"})


# ------------------------------------------------------------------ band backends


def test_band_backends_share_identical_selectors():
    cfg = PipelineConfig(**NULL_CFG)
    bb = BandBackends(cfg)
    try:
        assert bb.by_band["low"] is bb.by_band["high"] is bb.by_band["full"]
        assert isinstance(bb.by_band["low"], NullBackend)
        assert bb.shared_diffusion() is None
    finally:
        bb.close()


def test_band_backends_shared_diffusion():
    bb = BandBackends(PipelineConfig(workers=1))
    try:
        shared = bb.shared_diffusion()
        assert isinstance(shared, DiffusionBackend)
        assert shared is bb.by_band["full"]
    finally:
        bb.close()

    mixed = BandBackends(PipelineConfig(backend_high="null", workers=1))
    try:
        assert mixed.shared_diffusion() is None
        assert mixed.by_band["low"] is mixed.by_band["full"]
        assert isinstance(mixed.by_band["high"], NullBackend)
    finally:
        mixed.close()


# ------------------------------------------------------------------ restore_giant


def test_restore_validates_dims():
    img = smooth_mural(64, 64)
    with pytest.raises(ValueError, match="do not match"):
        restore_giant(img, square_mask(32, 0, 4, 0, 4), PipelineConfig(**NULL_CFG))


def test_restore_validates_perspectives():
    img = smooth_mural(64, 64)
    mask = square_mask(64, 8, 16, 8, 16)
    cfg = PipelineConfig(tile=64, scales=(1.0,), scale_weights=(1.0,), **NULL_CFG)
    with pytest.raises(ValueError):
        restore_giant(img, mask, cfg, perspectives=[])
    with pytest.raises(ValueError):
        restore_giant(img, mask, cfg, perspectives=[16])


def test_restore_null_identity_small():
    img = smooth_mural(96, 80)
    mask = DefectMask((np.indices((80, 96)).sum(0) % 7 == 0).astype(np.uint8))
    damaged = apply_mask(img, mask, 0.5)
    cfg = PipelineConfig(tile=64, **NULL_CFG)
    out = restore_giant(damaged, mask, cfg)
    assert np.array_equal(out.pixels, damaged.pixels)


def test_restore_info_dict_keys():
    img = smooth_mural(64, 64)
    mask = square_mask(64, 20, 34, 20, 40)
    damaged = apply_mask(img, mask, 0.5)
    cfg = PipelineConfig(tile=64, scales=(1.0,), scale_weights=(1.0,), workers=1)
    info: dict = {}
    out = restore_giant(damaged, mask, cfg, perspectives=[0, 5], info=info)
    assert info["retries"] == 0 and info["fallbacks"] == 0
    assert info["perspectives"] == 2
    assert info["scales"] == [1.0]
    assert info["backends"]["full"]["kind"] == "diffusion"
    keep = mask.data == 0
    assert np.array_equal(out.pixels[keep], damaged.pixels[keep])


def test_restore_second_stage_runs():
    img = smooth_mural(64, 64)
    mask = square_mask(64, 24, 40, 10, 50)
    damaged = apply_mask(img, mask, 0.0)
    cfg = PipelineConfig(
        tile=64, scales=(1.0,), scale_weights=(1.0,), workers=1, second_stage=True
    )
    out = restore_giant(damaged, mask, cfg, perspectives=[0])
    keep = mask.data == 0
    assert np.array_equal(out.pixels[keep], damaged.pixels[keep])
    hole = out.pixels[mask.data == 1]
    assert hole.min() >= 0.0 and hole.max() <= 1.0
    assert np.abs(hole - 0.0).max() > 0.01  # the defect was actually filled


def test_restore_external_failure_falls_back(tmp_path):
    img = smooth_mural(64, 64)
    mask = square_mask(64, 20, 44, 20, 44)
    damaged = apply_mask(img, mask, 0.5)
    cfg = PipelineConfig(
        tile=64,
        scales=(1.0,),
        scale_weights=(1.0,),
        backend_low="null",
        backend_high="null",
        backend_full=f"external:{ECHO} --mode die",
        backend_timeout=10,
        workers=1,
    )
    info: dict = {}
    out = restore_giant(damaged, mask, cfg, perspectives=[0], info=info)
    assert info["fallbacks"] >= 1
    assert info["retries"] == EXTERNAL_RETRY_BUDGET * info["fallbacks"]
    entry = info["fallback_tiles"][0]
    assert entry["tile"][0] == "full"
    assert any(
        word in entry["error"] for word in ("exited", "closed", "truncated")
    )
    keep = mask.data == 0
    assert np.array_equal(out.pixels[keep], damaged.pixels[keep])
    # the diffusion fallback actually filled the hole
    hole = out.pixels[mask.data == 1]
    assert np.abs(hole - 0.5).max() > 0.01


def test_restore_backend_error_names_tile():
    class Exploding:
        def restore(self, req):
            raise BackendError("boom")

        def close(self):
            pass

        def describe(self):
            return {"kind": "exploding"}

    img = smooth_mural(64, 64)
    mask = square_mask(64, 8, 56, 8, 56)
    damaged = apply_mask(img, mask, 0.5)
    cfg = PipelineConfig(tile=64, scales=(1.0,), scale_weights=(1.0,), **NULL_CFG)
    bb = BandBackends(cfg)
    bb.by_band = {b: Exploding() for b in ("low", "high", "full")}
    try:
        with pytest.raises(
            BackendError, match=r"tile row \d+ col \d+, perspective 0, scale 1.0"
        ):
            restore_giant(damaged, mask, cfg, backends=bb, perspectives=[0])
    finally:
        bb.close()


def test_restore_worker_counts_agree():
    img = smooth_mural(96, 96)
    mask = square_mask(96, 30, 60, 20, 70)
    damaged = apply_mask(img, mask, 0.5)
    outs = []
    for workers in (1, 3):
        cfg = PipelineConfig(
            tile=64, scales=(1.0,), scale_weights=(1.0,), workers=workers
        )
        outs.append(restore_giant(damaged, mask, cfg, perspectives=[0, 7]))
    assert np.array_equal(outs[0].pixels, outs[1].pixels)


# ------------------------------------------------------------------ sweeps


def test_sweep_spec_validation():
    with pytest.raises(ValueError):
        SweepSpec(coverages=(0.0,), seeds=(1,))
    with pytest.raises(ValueError):
        SweepSpec(coverages=(1.0,), seeds=(1,))
    empty = SweepSpec(coverages=(), seeds=(1, 2))
    assert empty.coverages == ()


def test_empty_sweep_empty_report():
    cfg = PipelineConfig(tile=64, scales=(1.0,), scale_weights=(1.0,), **NULL_CFG)
    report = run_sweep(smooth_mural(64, 64), SweepSpec((), (1,)), cfg)
    assert report["rows"] == [] and report["means"] == []
    csv = sweep_csv(report)
    assert csv == CSV_HEADER + "\n"


def test_run_sweep_rows_and_means():
    cfg = PipelineConfig(tile=64, scales=(1.0,), scale_weights=(1.0,), **NULL_CFG)
    ref = smooth_mural(128, 128)
    report = run_sweep(
        ref, SweepSpec(coverages=(0.10, 0.25), seeds=(1, 2), mask_kind="block"), cfg
    )
    assert report["rng"] == "pcg64"
    assert report["mask_kind"] == "block"
    assert report["backends"] == {"low": "null", "high": "null", "full": "null"}
    assert len(report["rows"]) == 4
    for row in report["rows"]:
        assert "error" not in row
        assert abs(row["achieved_coverage"] - row["coverage"]) <= 0.011
        assert row["mae"] > 0 and np.isfinite(row["psnr"])
    assert [m["coverage"] for m in report["means"]] == [0.10, 0.25]
    m0 = report["means"][0]
    by_cov = [r["mae"] for r in report["rows"] if r["coverage"] == 0.10]
    assert m0["runs"] == 2
    assert m0["mae"] == pytest.approx(np.mean(by_cov), rel=1e-12)
    # null restore leaves fill damage in place: more coverage hurts more
    assert report["means"][1]["mae"] > report["means"][0]["mae"]


def test_run_sweep_records_unreachable_rows():
    ref = smooth_mural(128, 128)
    sk = generate(
        MaskSpec(kind="linear-skeleton", target_coverage=0.10, width=128, height=128, seed=5)
    )
    bad = sk.coverage() / 3
    cfg = PipelineConfig(tile=64, scales=(1.0,), scale_weights=(1.0,), **NULL_CFG)
    report = run_sweep(
        ref, SweepSpec(coverages=(bad, 0.25), seeds=(5,), mask_kind="linear-dilated"), cfg
    )
    err_row = report["rows"][0]
    assert "error" in err_row and err_row["achieved_coverage"] > bad
    good_row = report["rows"][1]
    assert "error" not in good_row
    assert [m["coverage"] for m in report["means"]] == [0.25]

    csv = sweep_csv(report)
    lines = csv.strip().split("\n")
    assert lines[0] == CSV_HEADER
    assert lines[1] == f"{bad:.10g},5,,,,,,"
    assert lines[2].startswith(f"{0.25:.10g},5,")
    assert lines[3].split(",")[1] == "mean"


def test_sweep_csv_number_format():
    cfg = PipelineConfig(tile=64, scales=(1.0,), scale_weights=(1.0,), **NULL_CFG)
    ref = smooth_mural(96, 96)
    report = run_sweep(ref, SweepSpec((0.2,), (3,), "dust"), cfg)
    lines = sweep_csv(report).strip().split("\n")
    row = report["rows"][0]
    fields = lines[1].split(",")
    assert fields[0] == f"{0.2:.10g}"
    assert fields[1] == "3"
    assert fields[2] == f"{row['mae']:.10g}"
    assert fields[6] == f"{row['mae255']:.10g}"
    assert len(fields) == 8


# ------------------------------------------------------------------ corpus


def test_tile_corpus_geometry():
    giant = smooth_mural(128, 128)
    tiles = list(tile_corpus(giant, tile=64, scales=(1.0, 0.8, 0.6)))
    expected = 0
    for s in (1.0, 0.8, 0.6):
        d = max(1, round(128 * s))
        expected += make_plan(d, d, 64).tiles_per_perspective * PERSPECTIVES
    assert len(tiles) == expected
    for s, k, idx, t in tiles[:50]:
        assert s in (1.0, 0.8, 0.6)
        assert 0 <= k < PERSPECTIVES
        assert (t.height, t.width) == (64, 64)


def test_tile_corpus_single_perspective():
    giant = smooth_mural(96, 96)
    tiles = list(tile_corpus(giant, tile=64, scales=(1.0,), perspectives=[2]))
    plan = make_plan(96, 96, 64)
    assert len(tiles) == plan.tiles_per_perspective
    assert all(k == 2 for _, k, _, _ in tiles)
