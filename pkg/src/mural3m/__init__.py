"""Restoration toolkit for very large damaged images.

The pipeline runs a scale pyramid, splits each scale into frequency
bands, restores overlapping tile perspectives with pluggable per-band
backends, and fuses everything back while guaranteeing that pixels
outside the defect mask are returned bit-identical.
"""

from .backend import (
    BackendError,
    BackendKind,
    BackendProcessError,
    BackendProtocolError,
    BackendTimeoutError,
    DiffusionBackend,
    ExternalBackend,
    InpaintRequest,
    NullBackend,
    encode_request,
    harmonic_fill_array,
    inpaint_diffusion,
    inpaint_external,
    inpaint_null,
    make_backend,
)
from .frequency import (
    BandSet,
    MergeWeights,
    decompose,
    highpass_sobel,
    lowpass_fft,
    merge_bands,
)
from .fusion import (
    PairwiseMean,
    PerspectiveSet,
    ScaleStack,
    average_perspectives,
    fuse_scales,
    masked_composite,
    pairwise_mean,
)
from .imagecore import (
    DecodeError,
    DefectMask,
    GrayImage,
    RasterImage,
    apply_mask,
    load_mask_png,
    load_png,
    quantize_u8,
    resize,
    resize_mask,
    save_mask_png,
    save_png,
)
from .maskgen import (
    MASK_KINDS,
    RNG_ALGORITHM,
    CoverageError,
    MaskSpec,
    generate,
)
from .metrics import MetricsReport, compute_report, mae, mse, psnr, ssim
from .pipeline import (
    PipelineConfig,
    SweepSpec,
    build_config,
    parse_config_file,
    restore_giant,
    run_sweep,
    sweep_csv,
    tile_corpus,
)
from .tiling import TilePlan, TileSheet, assemble, cut, cut_mask, make_plan

__version__ = "0.1.0"

__all__ = [
    "BackendError",
    "BackendKind",
    "BackendProcessError",
    "BackendProtocolError",
    "BackendTimeoutError",
    "BandSet",
    "CoverageError",
    "DecodeError",
    "DefectMask",
    "DiffusionBackend",
    "ExternalBackend",
    "GrayImage",
    "InpaintRequest",
    "MASK_KINDS",
    "MaskSpec",
    "MergeWeights",
    "MetricsReport",
    "NullBackend",
    "PairwiseMean",
    "PerspectiveSet",
    "PipelineConfig",
    "RNG_ALGORITHM",
    "RasterImage",
    "ScaleStack",
    "SweepSpec",
    "TilePlan",
    "TileSheet",
    "apply_mask",
    "assemble",
    "average_perspectives",
    "build_config",
    "compute_report",
    "cut",
    "cut_mask",
    "decompose",
    "encode_request",
    "fuse_scales",
    "generate",
    "harmonic_fill_array",
    "highpass_sobel",
    "inpaint_diffusion",
    "inpaint_external",
    "inpaint_null",
    "load_mask_png",
    "load_png",
    "lowpass_fft",
    "mae",
    "make_backend",
    "make_plan",
    "masked_composite",
    "merge_bands",
    "mse",
    "pairwise_mean",
    "parse_config_file",
    "psnr",
    "quantize_u8",
    "resize",
    "resize_mask",
    "restore_giant",
    "run_sweep",
    "save_mask_png",
    "save_png",
    "ssim",
    "sweep_csv",
    "tile_corpus",
    "__version__",
]
