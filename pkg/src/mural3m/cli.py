"""Command line front end.

Exit codes: 0 on success, 1 for input or usage problems (bad flags, bad
paths, undecodable images, unreachable mask coverage), 2 when a
restoration backend fails in a way the pipeline cannot absorb.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

from .backend import BackendError
from .frequency import decompose
from .imagecore import (
    DecodeError,
    apply_mask,
    load_mask_png,
    load_png,
    save_mask_png,
    save_png,
)
from .maskgen import MASK_KINDS, CoverageError, MaskSpec, generate
from .metrics import compute_report
from .pipeline import (
    SweepSpec,
    build_config,
    parse_config_file,
    restore_giant,
    run_sweep,
    sweep_csv,
    tile_corpus,
)


class _Parser(argparse.ArgumentParser):
    # usage errors are input errors: exit 1, not argparse's default 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _parse_size(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise ValueError(f"size must look like 512x512, got {text!r}")
    return int(parts[0]), int(parts[1])


def _parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(",") if p.strip() != "")


def _parse_float_list(text: str) -> tuple[float, ...]:
    return tuple(float(p) for p in text.split(",") if p.strip() != "")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value settings file")
    p.add_argument("--backend", default=None, help="backend for all bands")
    p.add_argument("--backend-low", default=None, help="low band backend")
    p.add_argument("--backend-high", default=None, help="high band backend")
    p.add_argument("--backend-full", default=None, help="full band backend")
    p.add_argument("--tile", type=int, default=None, help="tile edge, multiple of 4")
    p.add_argument("--cutoff", type=float, default=None, help="low-pass cutoff (0, 1]")
    p.add_argument("--scales", default=None, help="comma separated scale factors")
    p.add_argument(
        "--scale-weights", default=None, help="per-scale weights or preset name"
    )
    p.add_argument("--merge-weights", default=None, help="low,high,full band weights")
    p.add_argument("--workers", type=int, default=None, help="worker thread count")
    p.add_argument("--fill", type=float, default=None, help="damage fill value [0, 1]")
    p.add_argument(
        "--diffusion-iters", type=int, default=None, help="smoothing sweep cap"
    )
    p.add_argument(
        "--diffusion-tol", type=float, default=None, help="smoothing stop threshold"
    )
    p.add_argument(
        "--backend-timeout", type=float, default=None, help="external backend seconds"
    )
    p.add_argument(
        "--second-stage",
        action="store_true",
        default=None,
        help="re-run the full-band backend on each merged tile",
    )


def _overrides_from(args) -> dict:
    keys = (
        "backend",
        "backend_low",
        "backend_high",
        "backend_full",
        "tile",
        "cutoff",
        "scales",
        "scale_weights",
        "merge_weights",
        "workers",
        "fill",
        "diffusion_iters",
        "diffusion_tol",
        "backend_timeout",
        "second_stage",
    )
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


def _load_config(args):
    file_values = parse_config_file(args.config) if args.config else None
    return build_config(file_values, _overrides_from(args))


def _cmd_mask(args) -> int:
    w, h = _parse_size(args.size)
    spec = MaskSpec(
        kind=args.kind,
        target_coverage=args.coverage,
        width=w,
        height=h,
        seed=args.seed,
    )
    mask = generate(spec)
    save_mask_png(mask, args.output)
    print(
        f"kind={args.kind} size={w}x{h} seed={args.seed} "
        f"target={args.coverage:.4f} achieved={mask.coverage():.4f} "
        f"-> {args.output}"
    )
    return 0


def _cmd_decompose(args) -> int:
    img = load_png(args.input)
    bands = decompose(img, cutoff=args.cutoff)
    for name, band in (("low", bands.low), ("high", bands.high), ("full", bands.full)):
        path = f"{args.out_prefix}_{name}.png"
        save_png(band, path)
        print(path)
    return 0


def _cmd_restore(args) -> int:
    cfg = _load_config(args)
    damaged = load_png(args.input)
    mask = load_mask_png(args.mask)
    info: dict = {}
    started = time.perf_counter()
    out = restore_giant(damaged, mask, cfg, info=info)
    elapsed = time.perf_counter() - started
    save_png(out, args.output)
    print(
        f"restored {damaged.width}x{damaged.height} "
        f"coverage={mask.coverage():.4f} scales={info['scales']} "
        f"retries={info['retries']} fallbacks={info['fallbacks']} "
        f"degenerate_tiles={info['degenerate_tiles']} "
        f"elapsed={elapsed:.2f}s -> {args.output}"
    )
    return 0


def _cmd_metrics(args) -> int:
    a = load_png(args.image_a)
    b = load_png(args.image_b)
    report = compute_report(a, b)
    if args.json:
        print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    else:
        d = report.to_dict()
        for key in ("mae", "mse", "psnr", "ssim", "mae255", "mse255"):
            print(f"{key}={d[key]:.6g}")
    return 0


def _cmd_sweep(args) -> int:
    cfg = _load_config(args)
    reference = load_png(args.reference)
    seeds = _parse_int_list(args.seeds) if args.seeds else (cfg.seed,)
    sweep = SweepSpec(
        coverages=_parse_float_list(args.coverages),
        seeds=seeds,
        mask_kind=args.mask_kind,
    )
    report = run_sweep(reference, sweep, cfg)
    csv_text = sweep_csv(report)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(csv_text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(csv_text)
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
        print(f"wrote {args.json}")
    return 0


def _cmd_tile_corpus(args) -> int:
    giant = load_png(args.input)
    os.makedirs(args.out_dir, exist_ok=True)
    scales = _parse_float_list(args.scales) if args.scales else None
    count = 0
    kwargs = {"tile": args.tile}
    if scales is not None:
        kwargs["scales"] = scales
    for s, k, idx, tile_img in tile_corpus(giant, **kwargs):
        name = f"tile_s{round(s * 1000):04d}_p{k:02d}_t{idx:04d}.png"
        save_png(tile_img, os.path.join(args.out_dir, name))
        count += 1
    print(f"wrote {count} tiles to {args.out_dir}")
    return 0


def _cmd_degrade(args) -> int:
    img = load_png(args.input)
    mask = load_mask_png(args.mask)
    save_png(apply_mask(img, mask, args.fill), args.output)
    print(f"degraded {args.input} with {args.mask} -> {args.output}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    from . import __version__

    parser = _Parser(prog="mural3m", description=__doc__)
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("mask", help="generate a synthetic defect mask")
    p.add_argument("--kind", required=True, choices=MASK_KINDS)
    p.add_argument("--coverage", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", required=True, help="WxH, e.g. 1024x768")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=_cmd_mask)

    p = sub.add_parser("decompose", help="write low/high/full band images")
    p.add_argument("-i", "--input", required=True)
    p.add_argument("--cutoff", type=float, default=0.10)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=_cmd_decompose)

    p = sub.add_parser("restore", help="restore a damaged image")
    p.add_argument("-i", "--input", required=True, help="damaged image")
    p.add_argument("-m", "--mask", required=True, help="defect mask")
    p.add_argument("-o", "--output", required=True)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_restore)

    p = sub.add_parser("metrics", help="compare two images")
    p.add_argument("-a", "--image-a", required=True, help="restored image")
    p.add_argument("-b", "--image-b", required=True, help="reference image")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser("sweep", help="score restoration over a coverage ladder")
    p.add_argument("--reference", required=True, help="clean reference image")
    p.add_argument("--coverages", required=True, help="comma separated fractions")
    p.add_argument("--seeds", default=None, help="comma separated seeds")
    p.add_argument("--mask-kind", default="block", choices=MASK_KINDS)
    p.add_argument("--out", default=None, help="CSV path (default: stdout)")
    p.add_argument("--json", default=None, help="also write a JSON report here")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("tile-corpus", help="export the per-tile training corpus")
    p.add_argument("-i", "--input", required=True)
    p.add_argument("--tile", type=int, default=256)
    p.add_argument("--scales", default=None, help="comma separated scale factors")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_tile_corpus)

    p = sub.add_parser("degrade", help="apply a mask to an image with a fill value")
    p.add_argument("-i", "--input", required=True)
    p.add_argument("-m", "--mask", required=True)
    p.add_argument("--fill", type=float, default=0.5)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=_cmd_degrade)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BackendError as exc:
        print(f"backend failure: {exc}", file=sys.stderr)
        return 2
    except (CoverageError, DecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
