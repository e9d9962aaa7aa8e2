"""Prototype arithmetic: pooling, distances, distance-softmax, weighting, loss.

Feature maps are channels-first torch tensors, (C, H, W) or (B, C, H, W).
"""

from __future__ import annotations

import warnings

import torch

from ..errors import EmptyRegionError, ValidationError

NORM_EPS = 1e-8
PROB_CLAMP = 1e-7
DICE_SMOOTH = 1.0


def compute_prototype(features, region):
    """Mask average pooling of a (C, H, W) feature map over a binary (H, W) region."""
    region = region.to(features.dtype)
    count = region.sum()
    if count <= 0:
        raise EmptyRegionError("empty pooling region")
    return (features * region).sum(dim=(-2, -1)) / count


def _safe_norm(x, dim):
    return (x * x).sum(dim=dim).clamp_min(NORM_EPS**2).sqrt()


def cosine_distance(u, v, dim=-1):
    """1 - cos(u, v) along `dim`; a zero vector is maximally dissimilar (distance 1)."""
    dot = (u * v).sum(dim=dim)
    return 1.0 - dot / (_safe_norm(u, dim) * _safe_norm(v, dim))


def scalar_cosine_distance(u, v):
    """Cosine distance of two 1-D vectors, warning when both are zero."""
    u = torch.as_tensor(u, dtype=torch.float64)
    v = torch.as_tensor(v, dtype=torch.float64)
    if u.shape != v.shape:
        raise ValidationError(f"vector lengths differ: {tuple(u.shape)} vs {tuple(v.shape)}")
    if not u.any() and not v.any():
        warnings.warn("cosine distance of two zero vectors defined as 1", RuntimeWarning, stacklevel=2)
        return 1.0
    return float(cosine_distance(u, v))


def pixel_distance(features, proto, metric="cosine"):
    """Distance from every pixel of (C, H, W) features to a (C,) prototype -> (H, W)."""
    p = proto.reshape(-1, 1, 1)
    if metric == "cosine":
        return cosine_distance(features, p, dim=0)
    if metric == "sqeuclidean":
        return ((features - p) ** 2).sum(dim=0)
    raise ValidationError(f"unknown distance {metric!r}")


def classify_pixels(features, p_fg, p_bg, alpha=20.0, metric="cosine"):
    """Foreground probability per pixel from a softmax over -alpha * distance."""
    if not torch.isfinite(features).all():
        raise ValidationError("non-finite feature values")
    d_bg = pixel_distance(features, p_bg, metric)
    d_fg = pixel_distance(features, p_fg, metric)
    logits = torch.stack([-alpha * d_bg, -alpha * d_fg])
    return torch.softmax(logits, dim=0)[1]


def superpixel_weights(sub_protos, p_bg, beta=10.0):
    """Softmax over beta * cosine distance of each (K, C) sub-prototype to p_bg."""
    d = cosine_distance(sub_protos, p_bg.unsqueeze(0), dim=-1)
    return torch.softmax(beta * d, dim=0)


def weighted_prototype(features, labels, n_eff, p_bg, beta=10.0):
    """Foreground prototype as the weighted sum of superpixel sub-prototypes.

    labels: (H, W) integer tensor with superpixel ids 0..n_eff-1 inside the
    mask. Returns (prototype, weights, sub_prototypes).
    """
    if n_eff < 1:
        raise EmptyRegionError("no superpixels to weight")
    subs = torch.stack([compute_prototype(features, labels == i) for i in range(n_eff)])
    w = superpixel_weights(subs, p_bg, beta)
    return (w.unsqueeze(1) * subs).sum(dim=0), w, subs


def dice_loss(prob, gt):
    inter = (prob * gt).sum()
    return 1.0 - (2.0 * inter + DICE_SMOOTH) / (prob.sum() + gt.sum() + DICE_SMOOTH)


def bce_loss(prob, gt):
    p = prob.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -(gt * torch.log(p) + (1.0 - gt) * torch.log(1.0 - p)).mean()


def compute_loss(prob, gt):
    """Dice + BCE for one (H, W) map, or the batch mean over (B, H, W) maps."""
    gt = gt.to(prob.dtype)
    if prob.shape != gt.shape:
        raise ValidationError(f"probability {tuple(prob.shape)} and target {tuple(gt.shape)} differ")
    if prob.dim() == 2:
        return dice_loss(prob, gt) + bce_loss(prob, gt)
    return torch.stack([dice_loss(p, g) + bce_loss(p, g) for p, g in zip(prob, gt)]).mean()


def downsample_mask(mask, stride=4):
    """Nearest-neighbour downsampling of (..., H, W) masks.

    Each output cell takes the input pixel at offset stride // 2 inside its
    block, the one nearest the cell centre that bilinear upsampling
    (align_corners=False) later assumes.
    """
    off = stride // 2
    return mask[..., off::stride, off::stride].float()
