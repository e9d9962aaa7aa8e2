"""Versioned checkpoint files: parameters + model config + step counter."""

from __future__ import annotations

import os
from pathlib import Path

import torch

from ..errors import CheckpointMismatchError, ValidationError
from .model import ModelConfig, RefineNet

FORMAT = "protorefine-checkpoint/1"


def save_checkpoint(path, model, step=0, epoch=0, extra=None):
    """Write atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": FORMAT,
        "model_config": model.config.to_dict(),
        "state_dict": model.state_dict(),
        "step": step,
        "epoch": epoch,
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def read_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise CheckpointMismatchError(f"{path} is not a {FORMAT} file")
    return payload


def load_model(path, config=None):
    """Rebuild the model stored at `path`.

    With `config`, the stored parameter shapes must match it; inference-only
    fields (head among the prototype variants, alpha, threshold, ...) are
    taken from `config`.
    """
    payload = read_checkpoint(path)
    stored = ModelConfig.from_dict(payload["model_config"])
    if config is None:
        config = stored
    elif config.shape_signature() != stored.shape_signature():
        raise CheckpointMismatchError(
            f"checkpoint shape mismatch: stored {stored.shape_signature()} vs requested {config.shape_signature()}"
        )
    model = RefineNet(config)
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as exc:
        raise CheckpointMismatchError(f"checkpoint shape mismatch: {exc}") from exc
    model.eval()
    return model, payload
