"""Truncated U-Net feature extractor, coarse-mask fusion and refinement heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import torch
import torch.nn as nn

from ..errors import EmptyRegionError, ValidationError
from ..superpixel import mask_slic
from .ops import classify_pixels, compute_prototype, downsample_mask, weighted_prototype

STRIDE = 4
HEADS = ("proto", "proto-sp", "baseline")


@dataclass
class ModelConfig:
    input_size: int = 256
    base_width: int = 32
    depth: int = 4
    feat_channels: int = 64
    fused_channels: int = 64
    alpha: float = 20.0
    beta: float = 10.0
    n_sp: int = 20
    head: str = "proto"
    threshold: float = 0.5
    distance: str = "cosine"
    slic_compactness: float | None = None
    slic_iters: int = 10

    def __post_init__(self):
        if self.input_size % STRIDE:
            raise ValidationError(f"input size must be divisible by {STRIDE}, got {self.input_size}")
        if self.depth < 3:
            raise ValidationError("backbone depth must be >= 3 to reach stride 4")
        if self.input_size % 2 ** (self.depth - 1):
            raise ValidationError(f"input size {self.input_size} not divisible by 2^(depth-1)")
        if self.alpha <= 0 or self.beta <= 0:
            raise ValidationError("alpha and beta must be positive")
        if not 0.0 < self.threshold < 1.0:
            raise ValidationError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.head not in HEADS:
            raise ValidationError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.distance not in ("cosine", "sqeuclidean"):
            raise ValidationError(f"unknown distance {self.distance!r}")
        if self.n_sp < 1:
            raise ValidationError("n_sp must be >= 1")

    @property
    def feature_size(self):
        return self.input_size // STRIDE

    def shape_signature(self):
        """Fields that determine parameter shapes."""
        return {
            "base_width": self.base_width,
            "depth": self.depth,
            "feat_channels": self.feat_channels,
            "fused_channels": self.fused_channels,
            "classifier": self.head == "baseline",
        }

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def conv_block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class TruncatedUNet(nn.Module):
    """U-Net on (image, coarse mask) input whose decoder stops at 1/4 resolution."""

    def __init__(self, in_channels=4, base_width=32, depth=4, out_channels=64):
        super().__init__()
        widths = [base_width * 2**i for i in range(depth)]
        self.encoders = nn.ModuleList()
        cin = in_channels
        for w in widths:
            self.encoders.append(conv_block(cin, w))
            cin = w
        self.pool = nn.MaxPool2d(2)
        # decoder levels depth-2 .. 2; the two blocks back to full resolution are dropped
        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for level in range(depth - 2, 1, -1):
            self.ups.append(nn.ConvTranspose2d(cin, widths[level], 2, stride=2))
            self.decoders.append(conv_block(2 * widths[level], widths[level]))
            cin = widths[level]
        self.out = nn.Conv2d(cin, out_channels, 1)

    def forward(self, x):
        skips = []
        for i, enc in enumerate(self.encoders):
            if i > 0:
                x = self.pool(x)
            x = enc(x)
            skips.append(x)
        level = len(self.encoders) - 2
        for up, dec in zip(self.ups, self.decoders):
            x = dec(torch.cat([up(x), skips[level]], dim=1))
            level -= 1
        return self.out(x)


class MaskFusion(nn.Module):
    """Concatenate the stride-4 coarse mask and apply 1x1 conv + BN + ReLU."""

    def __init__(self, feat_channels, fused_channels):
        super().__init__()
        self.proj = nn.Conv2d(feat_channels + 1, fused_channels, 1)
        self.norm = nn.BatchNorm2d(fused_channels)
        self.act = nn.ReLU()

    def forward(self, features, small_mask):
        return self.act(self.norm(self.proj(torch.cat([features, small_mask], dim=1))))


class ForwardOutput(NamedTuple):
    prob: torch.Tensor  # (B, H', W') foreground probability
    valid: torch.Tensor  # (B,) False where the prototype fallback was used
    fused: torch.Tensor  # (B, C', H', W')
    small_mask: torch.Tensor  # (B, H', W')
    labelings: list | None = None


class RefineNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.backbone = TruncatedUNet(4, config.base_width, config.depth, config.feat_channels)
        self.fusion = MaskFusion(config.feat_channels, config.fused_channels)
        self.classifier = nn.Conv2d(config.fused_channels, 1, 1) if config.head == "baseline" else None

    def _check(self, image, coarse):
        if image.dim() != 4 or image.shape[1] != 3:
            raise ValidationError(f"image batch must be (B, 3, H, W), got {tuple(image.shape)}")
        if coarse.dim() == 3:
            coarse = coarse.unsqueeze(1)
        if coarse.shape[0] != image.shape[0] or coarse.shape[-2:] != image.shape[-2:]:
            raise ValidationError(f"coarse mask {tuple(coarse.shape)} does not match image {tuple(image.shape)}")
        if image.shape[-1] % 2 ** (self.config.depth - 1) or image.shape[-2] % 2 ** (self.config.depth - 1):
            raise ValidationError(f"spatial size {tuple(image.shape[-2:])} not divisible by 2^(depth-1)")
        return coarse.to(image.dtype)

    def extract_features(self, image, coarse):
        coarse = self._check(image, coarse)
        return self.backbone(torch.cat([image, coarse], dim=1))

    def fuse(self, features, coarse):
        if coarse.dim() == 3:
            coarse = coarse.unsqueeze(1)
        small = downsample_mask(coarse, STRIDE).to(features.dtype)
        if small.shape[-2:] != features.shape[-2:]:
            raise ValidationError(f"mask {tuple(coarse.shape)} does not downsample to features {tuple(features.shape)}")
        return self.fusion(features, small), small.squeeze(1)

    def forward(self, image, coarse, head=None):
        head = head or self.config.head
        features = self.extract_features(image, coarse)
        fused, small = self.fuse(features, self._check(image, coarse))
        if head == "baseline":
            if self.classifier is None:
                raise ValidationError("this model has no baseline classifier")
            prob = torch.sigmoid(self.classifier(fused)).squeeze(1)
            return ForwardOutput(prob, torch.ones(len(prob), dtype=torch.bool), fused, small)
        return self.prototype_head(fused, small, head)

    def prototype_head(self, fused, small, head):
        cfg = self.config
        probs, valid, labelings = [], [], []
        for f, m in zip(fused, small):
            try:
                p_fg = compute_prototype(f, m)
                p_bg = compute_prototype(f, 1.0 - m)
            except EmptyRegionError:
                probs.append(m.clone())
                valid.append(False)
                labelings.append(None)
                continue
            labeling = None
            if head == "proto-sp":
                labeling = mask_slic(
                    f.detach().permute(1, 2, 0).cpu().numpy(),
                    m.detach().cpu().numpy() > 0.5,
                    cfg.n_sp,
                    cfg.slic_compactness,
                    cfg.slic_iters,
                )
                labels = torch.as_tensor(labeling.labels, device=f.device)
                p_fg, _, _ = weighted_prototype(f, labels, labeling.n_eff, p_bg, cfg.beta)
            probs.append(classify_pixels(f, p_fg, p_bg, cfg.alpha, cfg.distance))
            valid.append(True)
            labelings.append(labeling)
        return ForwardOutput(torch.stack(probs), torch.tensor(valid), fused, small, labelings)
