"""Run configuration: one key-value document with model, train and sim sections.

A config file is YAML or JSON::

    model: {input_size: 64, base_width: 8, depth: 3, head: proto}
    train: {epochs: 20, lr: 0.001, batch_size: 16}
    sim: {reduction_factor: 1.0}
    patch_size: 64
    margin: 0.2

Missing sections and keys take the dataclass defaults. Unknown keys are
rejected so that typos do not silently fall back to defaults.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .coarse_sim import SimConfig
from .errors import ValidationError
from .protonet import ModelConfig
from .trainer import TrainConfig

SECTIONS = {"model": ModelConfig, "train": TrainConfig, "sim": SimConfig}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    patch_size: int | None = None  # defaults to model.input_size
    margin: float = 0.2
    explicit: frozenset = field(default=frozenset(), compare=False)  # sections given in the file

    def __post_init__(self):
        if self.patch_size is None:
            self.patch_size = self.model.input_size
        if self.patch_size != self.model.input_size:
            raise ValidationError(
                f"patch_size {self.patch_size} differs from model input_size {self.model.input_size}"
            )
        if self.margin < 0:
            raise ValidationError(f"margin must be >= 0, got {self.margin}")

    def to_dict(self):
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "sim": asdict(self.sim),
            "patch_size": self.patch_size,
            "margin": self.margin,
        }


def _section(cls, doc, name):
    if doc is None:
        return cls()
    if not isinstance(doc, dict):
        raise ValidationError(f"config section {name!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ValidationError(f"unknown key(s) in config section {name!r}: {', '.join(unknown)}")
    try:
        return cls(**doc)
    except TypeError as exc:
        raise ValidationError(f"bad config section {name!r}: {exc}") from exc


def config_from_dict(doc):
    doc = dict(doc or {})
    unknown = sorted(set(doc) - set(SECTIONS) - {"patch_size", "margin"})
    if unknown:
        raise ValidationError(f"unknown top-level config key(s): {', '.join(unknown)}")
    parts = {name: _section(cls, doc.get(name), name) for name, cls in SECTIONS.items()}
    return RunConfig(
        **parts,
        patch_size=doc.get("patch_size"),
        margin=float(doc.get("margin", 0.2)),
        explicit=frozenset(k for k in SECTIONS if doc.get(k) is not None),
    )


def load_config(path=None):
    """Read a YAML or JSON config file; None gives the defaults."""
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ValidationError(f"cannot parse config {path}: {exc}") from exc
    if doc is not None and not isinstance(doc, dict):
        raise ValidationError(f"config {path} must contain a mapping")
    return config_from_dict(doc)


def write_resolved(config, path, **extra):
    """Write the fully resolved config (plus run details in `extra`) as JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {**config.to_dict(), **extra}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str))
    return path
