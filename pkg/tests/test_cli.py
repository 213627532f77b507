import json
import math
import os

import numpy as np
import pytest

from mural3m.backend import BackendError
from mural3m.cli import main
from mural3m.imagecore import load_mask_png, load_png, save_mask_png, save_png
from mural3m.maskgen import MaskSpec, generate

from conftest import smooth_mural

FAST = ["--tile", "64", "--scales", "1.0", "--scale-weights", "1.0", "--workers", "1"]


@pytest.fixture
def ref_png(tmp_path):
    path = str(tmp_path / "ref.png")
    save_png(smooth_mural(96, 96), path)
    return path


@pytest.fixture
def mask_png(tmp_path):
    spec = MaskSpec(kind="block", target_coverage=0.2, width=96, height=96, seed=4)
    path = str(tmp_path / "mask.png")
    save_mask_png(generate(spec), path)
    return path


def test_version(capsys):
    with pytest.raises(SystemExit) as ei:
        main(["--version"])
    assert ei.value.code == 0
    assert capsys.readouterr().out.startswith("mural3m ")


def test_no_command_usage_error():
    with pytest.raises(SystemExit) as ei:
        main([])
    assert ei.value.code == 1


def test_unknown_flag_exits_one():
    with pytest.raises(SystemExit) as ei:
        main(["metrics", "--bogus"])
    assert ei.value.code == 1


def test_mask_command(tmp_path, capsys):
    out = str(tmp_path / "m.png")
    rc = main(
        ["mask", "--kind", "dust", "--coverage", "0.25", "--seed", "9",
         "--size", "128x96", "-o", out]
    )
    assert rc == 0
    text = capsys.readouterr().out
    assert "achieved=" in text and out in text
    m = load_mask_png(out)
    assert (m.width, m.height) == (128, 96)
    assert abs(m.coverage() - 0.25) <= 0.04


def test_mask_bad_kind_exits_one():
    with pytest.raises(SystemExit) as ei:
        main(["mask", "--kind", "fire", "--coverage", "0.2", "--size", "64x64",
              "-o", "/tmp/x.png"])
    assert ei.value.code == 1


def test_mask_unreachable_coverage_exits_one(tmp_path, capsys):
    sk = generate(
        MaskSpec(kind="linear-skeleton", target_coverage=0.10, width=128,
                 height=128, seed=3)
    )
    bad = sk.coverage() / 3
    rc = main(
        ["mask", "--kind", "linear-dilated", "--coverage", f"{bad:.6f}",
         "--seed", "3", "--size", "128x128", "-o", str(tmp_path / "m.png")]
    )
    assert rc == 1
    assert "error:" in capsys.readouterr().err


def test_mask_bad_size_exits_one(tmp_path, capsys):
    rc = main(["mask", "--kind", "block", "--coverage", "0.2", "--size", "128",
               "-o", str(tmp_path / "m.png")])
    assert rc == 1
    assert "size" in capsys.readouterr().err


def test_decompose_command(ref_png, tmp_path, capsys):
    prefix = str(tmp_path / "bands")
    rc = main(["decompose", "-i", ref_png, "--out-prefix", prefix])
    assert rc == 0
    out = capsys.readouterr().out
    for name in ("low", "high", "full"):
        path = f"{prefix}_{name}.png"
        assert os.path.exists(path) and path in out
    full = load_png(f"{prefix}_full.png")
    assert np.array_equal(full.pixels, load_png(ref_png).pixels)


def test_restore_command(ref_png, mask_png, tmp_path, capsys):
    damaged_path = str(tmp_path / "damaged.png")
    out_path = str(tmp_path / "restored.png")
    rc = main(["degrade", "-i", ref_png, "-m", mask_png, "--fill", "0.5",
               "-o", damaged_path])
    assert rc == 0
    rc = main(["restore", "-i", damaged_path, "-m", mask_png, "-o", out_path] + FAST)
    assert rc == 0
    text = capsys.readouterr().out
    assert "restored 96x96" in text and "fallbacks=0" in text
    damaged = load_png(damaged_path)
    restored = load_png(out_path)
    keep = load_mask_png(mask_png).data == 0
    assert np.array_equal(restored.pixels[keep], damaged.pixels[keep])
    # masked area moved away from the flat fill
    hole = restored.pixels[~keep]
    assert np.abs(hole - 0.5).max() > 0.01


def test_restore_missing_input_exits_one(mask_png, tmp_path, capsys):
    rc = main(["restore", "-i", str(tmp_path / "nope.png"), "-m", mask_png,
               "-o", str(tmp_path / "o.png")] + FAST)
    assert rc == 1
    assert "error:" in capsys.readouterr().err


def test_restore_backend_failure_exits_two(ref_png, mask_png, tmp_path,
                                           monkeypatch, capsys):
    def boom(*a, **kw):
        raise BackendError("tile row 0 col 0, perspective 0, scale 1.0: boom")

    monkeypatch.setattr("mural3m.cli.restore_giant", boom)
    rc = main(["restore", "-i", ref_png, "-m", mask_png,
               "-o", str(tmp_path / "o.png")] + FAST)
    assert rc == 2
    assert "backend failure:" in capsys.readouterr().err


def test_metrics_command_text(ref_png, mask_png, tmp_path, capsys):
    damaged_path = str(tmp_path / "d.png")
    main(["degrade", "-i", ref_png, "-m", mask_png, "-o", damaged_path])
    capsys.readouterr()
    rc = main(["metrics", "-a", damaged_path, "-b", ref_png])
    assert rc == 0
    lines = capsys.readouterr().out.strip().split("\n")
    vals = dict(line.split("=") for line in lines)
    assert set(vals) == {"mae", "mse", "psnr", "ssim", "mae255", "mse255"}
    assert float(vals["mae"]) > 0
    assert float(vals["ssim"]) < 1


def test_metrics_json_identical_images(ref_png, capsys):
    rc = main(["metrics", "-a", ref_png, "-b", ref_png, "--json"])
    assert rc == 0
    report = json.loads(capsys.readouterr().out)
    assert report["mae"] == 0.0 and report["mse"] == 0.0
    assert report["psnr"] == math.inf  # serialized as Infinity
    assert report["ssim"] == 1.0


def test_sweep_stdout(ref_png, capsys):
    rc = main(["sweep", "--reference", ref_png, "--coverages", "0.1,0.2",
               "--seeds", "1,2", "--mask-kind", "block", "--backend", "null"] + FAST)
    assert rc == 0
    lines = capsys.readouterr().out.strip().split("\n")
    assert lines[0] == "coverage,seed,mae,mse,psnr,ssim,mae255,mse255"
    assert len(lines) == 1 + 4 + 2  # header, 2x2 runs, 2 means
    assert lines[-1].split(",")[1] == "mean"


def test_sweep_files(ref_png, tmp_path, capsys):
    csv_path = str(tmp_path / "sweep.csv")
    json_path = str(tmp_path / "sweep.json")
    rc = main(["sweep", "--reference", ref_png, "--coverages", "0.15",
               "--seeds", "7", "--backend", "null", "--out", csv_path,
               "--json", json_path] + FAST)
    assert rc == 0
    out = capsys.readouterr().out
    assert csv_path in out and json_path in out
    with open(csv_path) as fh:
        assert fh.readline().startswith("coverage,seed")
    with open(json_path) as fh:
        report = json.load(fh)
    assert report["mask_kind"] == "block"
    assert report["rows"][0]["seed"] == 7


def test_sweep_bad_coverage_exits_one(ref_png, capsys):
    rc = main(["sweep", "--reference", ref_png, "--coverages", "1.5",
               "--backend", "null"] + FAST)
    assert rc == 1
    assert "error:" in capsys.readouterr().err


def test_tile_corpus_command(ref_png, tmp_path, capsys):
    out_dir = str(tmp_path / "corpus")
    rc = main(["tile-corpus", "-i", ref_png, "--tile", "64", "--scales", "1.0",
               "--out-dir", out_dir])
    assert rc == 0
    files = sorted(os.listdir(out_dir))
    # 96 px at tile 64: padded canvas 192, 3x3 grid, 16 perspectives
    assert len(files) == 9 * 16
    assert files[0] == "tile_s1000_p00_t0000.png"
    assert f"wrote {9 * 16} tiles" in capsys.readouterr().out
    t = load_png(os.path.join(out_dir, files[0]))
    assert (t.width, t.height) == (64, 64)


def test_degrade_command(ref_png, mask_png, tmp_path, capsys):
    out_path = str(tmp_path / "damaged.png")
    rc = main(["degrade", "-i", ref_png, "-m", mask_png, "--fill", "0.0",
               "-o", out_path])
    assert rc == 0
    assert out_path in capsys.readouterr().out
    damaged = load_png(out_path)
    hole = load_mask_png(mask_png).data == 1
    assert np.abs(damaged.pixels[hole]).max() == 0.0
    ref = load_png(ref_png)
    assert np.array_equal(damaged.pixels[~hole], ref.pixels[~hole])
