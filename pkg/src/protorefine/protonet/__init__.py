from .checkpoint import load_model, read_checkpoint, save_checkpoint
from .model import HEADS, STRIDE, ForwardOutput, ModelConfig, RefineNet
from .ops import (
    classify_pixels,
    compute_loss,
    compute_prototype,
    cosine_distance,
    downsample_mask,
    scalar_cosine_distance,
    superpixel_weights,
    weighted_prototype,
)

__all__ = [
    "HEADS",
    "STRIDE",
    "ForwardOutput",
    "ModelConfig",
    "RefineNet",
    "classify_pixels",
    "compute_loss",
    "compute_prototype",
    "cosine_distance",
    "downsample_mask",
    "load_model",
    "read_checkpoint",
    "save_checkpoint",
    "scalar_cosine_distance",
    "superpixel_weights",
    "weighted_prototype",
]
