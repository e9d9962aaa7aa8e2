"""Refinement of coarse lesion annotations with prototype-based segmentation."""

from .coarse_sim import CoarseMask, EllipseParams, SimConfig, simulate_coarse_mask
from .config import RunConfig, load_config
from .dataset import DatasetManifest, ImageRecord, PatchPair, PatchStore, extract_patch_pairs, load_manifest
from .errors import (
    CheckpointMismatchError,
    DivergenceError,
    EmptyRegionError,
    ManifestError,
    RefineError,
    StoreCorruptionError,
    ValidationError,
)
from .protonet import ModelConfig, RefineNet, load_model
from .refine_eval import EvalReport, RefinementResult, evaluate_manifest, reduction_sweep, refine_image
from .superpixel import SuperpixelLabeling, mask_slic
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "CheckpointMismatchError",
    "CoarseMask",
    "DatasetManifest",
    "DivergenceError",
    "EllipseParams",
    "EmptyRegionError",
    "EvalReport",
    "ImageRecord",
    "ManifestError",
    "ModelConfig",
    "PatchPair",
    "PatchStore",
    "RefineError",
    "RefineNet",
    "RefinementResult",
    "RunConfig",
    "SimConfig",
    "StoreCorruptionError",
    "SuperpixelLabeling",
    "TrainConfig",
    "ValidationError",
    "evaluate_manifest",
    "extract_patch_pairs",
    "load_config",
    "load_manifest",
    "load_model",
    "mask_slic",
    "reduction_sweep",
    "refine_image",
    "simulate_coarse_mask",
    "train",
]
