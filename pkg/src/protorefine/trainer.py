"""Augmentation, the training loop and patch-level validation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import cv2
import numpy as np
import torch
import torch.nn.functional as F

from .dataset import PatchPair
from .errors import DivergenceError, ValidationError
from .protonet import ModelConfig, RefineNet, compute_loss, downsample_mask, save_checkpoint
from .protonet.checkpoint import load_model

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 120
    lr: float = 1e-4
    plateau_patience: int = 5
    plateau_factor: float = 0.5
    val_fraction: float = 0.1
    augment: bool = True
    affine_prob: float = 0.5
    shift: float = 0.10
    scale: float = 0.15
    rotate: float = 30.0
    blur_prob: float = 0.3
    blur_sigma: tuple[float, float] = (0.3, 1.2)
    bc_prob: float = 0.5
    brightness: float = 0.2
    contrast: float = 0.2
    seed: int = 0
    checkpoint_every: int = 1
    grad_clip: float | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValidationError("batch size must be >= 1")
        if self.lr <= 0:
            raise ValidationError("learning rate must be positive")
        if self.plateau_patience < 1:
            raise ValidationError("plateau patience must be >= 1")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValidationError("grad_clip must be positive when set")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValidationError("val_fraction must lie in [0, 1)")
        self.blur_sigma = tuple(self.blur_sigma)

    def to_dict(self):
        d = asdict(self)
        d["blur_sigma"] = list(self.blur_sigma)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class TrainState:
    epoch: int = 0
    best_iou: float = 0.0
    lr: float = 0.0
    step: int = 0
    skipped: int = 0
    losses: list[float] = field(default_factory=list)


@dataclass
class TrainResult:
    best_checkpoint: Path
    final_checkpoint: Path
    metrics_log: Path
    state: TrainState
    history: list[dict]


# ---------------------------------------------------------------- augmentation


def affine_matrix(size, angle_deg=0.0, scale=1.0, shift=(0.0, 0.0)):
    """2x3 forward map rotating/scaling about the patch centre, then shifting (pixels)."""
    c = (size - 1) / 2.0
    t = math.radians(angle_deg)
    cos, sin = math.cos(t), math.sin(t)
    cos = 0.0 if abs(cos) < 1e-12 else cos
    sin = 0.0 if abs(sin) < 1e-12 else sin
    a = np.array([[cos, -sin], [sin, cos]]) * scale
    offset = np.array([c, c]) - a @ np.array([c, c]) + np.asarray(shift, dtype=np.float64)
    return np.hstack([a, offset[:, None]])


def warp_mask(mask, matrix):
    size = mask.shape[1], mask.shape[0]
    out = cv2.warpAffine(mask.astype(np.uint8), matrix, size, flags=cv2.INTER_NEAREST, borderValue=0)
    return out > 0


def warp_image(image, matrix):
    size = image.shape[1], image.shape[0]
    return cv2.warpAffine(image, matrix, size, flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT_101)


def sample_affine(rng, cfg, size):
    angle = rng.uniform(-cfg.rotate, cfg.rotate)
    scale = 1.0 + rng.uniform(-cfg.scale, cfg.scale)
    shift = rng.uniform(-cfg.shift, cfg.shift, 2) * size
    return affine_matrix(size, angle, scale, shift)


def augment_with_transform(pair, rng, cfg):
    """Augment one pair; returns (pair or None if skipped, affine matrix or None)."""
    size = pair.coarse.shape[0]
    matrix = sample_affine(rng, cfg, size) if rng.random() < cfg.affine_prob else None
    blur = rng.uniform(*cfg.blur_sigma) if rng.random() < cfg.blur_prob else None
    bc = None
    if rng.random() < cfg.bc_prob:
        bc = (rng.uniform(-cfg.brightness, cfg.brightness), 1.0 + rng.uniform(-cfg.contrast, cfg.contrast))

    image, coarse, fine = pair.image, pair.coarse, pair.fine
    if matrix is not None:
        coarse = warp_mask(pair.coarse, matrix)
        if not coarse.any() or coarse.all():
            matrix, coarse = None, pair.coarse
        else:
            image = warp_image(pair.image, matrix)
            fine = warp_mask(pair.fine, matrix)
    if blur is not None:
        image = cv2.GaussianBlur(image, (0, 0), blur)
    if bc is not None:
        shift, gain = bc
        mean = image.mean()
        image = (image - mean) * gain + mean + shift
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    if not coarse.any() or coarse.all():
        return None, None
    return PatchPair(image, coarse, fine, pair.placement, pair.pair_id), matrix


def augment(pair, rng, cfg):
    return augment_with_transform(pair, rng, cfg)[0]


# ---------------------------------------------------------------- batching


def to_batch(pairs, device="cpu"):
    image = torch.from_numpy(np.stack([p.image for p in pairs])).permute(0, 3, 1, 2).contiguous()
    coarse = torch.from_numpy(np.stack([p.coarse for p in pairs]).astype(np.float32)).unsqueeze(1)
    fine = torch.from_numpy(np.stack([p.fine for p in pairs]).astype(np.float32)).unsqueeze(1)
    return image.to(device), coarse.to(device), fine.to(device)


def upsample_prob(prob, size):
    """Bilinear upsampling of (B, H', W') probabilities to (B, size, size)."""
    return F.interpolate(prob.unsqueeze(1), size=(size, size), mode="bilinear", align_corners=False).squeeze(1)


@torch.no_grad()
def predict_pairs(model, pairs, head=None, batch_size=32, full_resolution=True, return_valid=False):
    """Patch-level foreground probabilities, numpy (N, H, W).

    With return_valid, also a bool (N,) array that is False where the
    prototype fallback (coarse mask passed through) was used.
    """
    model.eval()
    out, valid = [], []
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i : i + batch_size]
        image, coarse, _ = to_batch(chunk)
        res = model(image, coarse, head=head)
        prob = res.prob
        if full_resolution:
            prob = upsample_prob(prob, image.shape[-1])
            # fallback patches return the coarse mask itself
            for j, ok in enumerate(res.valid.tolist()):
                if not ok:
                    prob[j] = coarse[j, 0]
        out.append(prob.cpu().numpy())
        valid.append(res.valid.cpu().numpy())
    probs = np.concatenate(out) if out else np.zeros((0, 0, 0))
    if return_valid:
        return probs, (np.concatenate(valid) if valid else np.zeros(0, dtype=bool))
    return probs


def mask_iou(pred, gt):
    """IoU of two boolean masks; None when both are empty."""
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return None
    return float(np.logical_and(pred, gt).sum() / union)


def summarize_patch_ious(pairs, ious):
    """Per-class mean/std over source images of the per-image mean patch IoU."""
    per_image = {}
    for pair, iou in zip(pairs, ious):
        if iou is None:
            continue
        per_image.setdefault(pair.lesion_class, {}).setdefault(pair.placement.image_id, []).append(iou)
    report = {}
    for cls, imgs in sorted(per_image.items()):
        scores = np.array([np.mean(v) for v in imgs.values()])
        report[cls] = {"mean_iou": float(scores.mean()), "std_iou": float(scores.std()), "n_images": len(scores)}
    means = [v["mean_iou"] for v in report.values()]
    return {"classes": report, "mean_iou": float(np.mean(means)) if means else None}


def validate(pairs, model, threshold=None, head=None, classes=None, predictions=None):
    """Patch-level IoU report; classes absent from `pairs` are marked not applicable (None).

    `predictions` may supply binary masks directly instead of running `model`.
    """
    pairs = list(pairs)
    if predictions is None:
        if not pairs:
            preds = []
        else:
            threshold = model.config.threshold if threshold is None else threshold
            preds = predict_pairs(model, pairs, head=head) >= threshold
    else:
        preds = [np.asarray(p, dtype=bool) for p in predictions]
    ious = [mask_iou(p, pair.fine) for p, pair in zip(preds, pairs)]
    report = summarize_patch_ious(pairs, ious)
    for cls in classes or []:
        report["classes"].setdefault(cls, None)
    return report


# ---------------------------------------------------------------- training


def split_pairs(pairs, fraction, seed):
    """Class-stratified hold-out; with fraction 0 the training pairs double as validation."""
    if fraction <= 0:
        return list(pairs), list(pairs)
    rng = np.random.default_rng(seed)
    by_class = {}
    for i, p in enumerate(pairs):
        by_class.setdefault(p.lesion_class, []).append(i)
    val_idx = set()
    for cls in sorted(by_class):
        idx = np.array(by_class[cls])
        rng.shuffle(idx)
        n_val = int(round(fraction * len(idx)))
        if len(idx) >= 2:
            n_val = max(1, n_val)
        val_idx.update(idx[:n_val].tolist())
    train = [p for i, p in enumerate(pairs) if i not in val_idx]
    val = [p for i, p in enumerate(pairs) if i in val_idx]
    return train, val


def _seed_everything(seed):
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))


def train(pairs, model_cfg, train_cfg, out_dir, validator=None, device="cpu"):
    """Train a refinement model on patch pairs.

    Writes best.pt, final.pt (and last.pt at the checkpoint cadence),
    metrics.jsonl and run_config.json into `out_dir`. `validator(model,
    val_pairs, epoch)` can replace patch-level validation; it must return a
    mean IoU.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValidationError("training needs a non-empty patch store")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(
        json.dumps({"model": model_cfg.to_dict(), "train": train_cfg.to_dict()}, indent=2, sort_keys=True)
    )

    _seed_everything(train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    train_pairs, val_pairs = split_pairs(pairs, train_cfg.val_fraction, train_cfg.seed)
    classes = sorted({p.lesion_class for p in pairs})

    model = RefineNet(model_cfg).to(device)
    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.lr, betas=ADAM_BETAS, eps=ADAM_EPS)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="max", factor=train_cfg.plateau_factor, patience=train_cfg.plateau_patience
    )
    state = TrainState(lr=train_cfg.lr, best_iou=0.0)
    best_path, final_path, last_path = out / "best.pt", out / "final.pt", out / "last.pt"
    log_path = out / "metrics.jsonl"
    history = []
    header = {
        "header": {
            "optimizer": "adam",
            "betas": list(ADAM_BETAS),
            "eps": ADAM_EPS,
            "n_train": len(train_pairs),
            "n_val": len(val_pairs),
            "head": model_cfg.head,
        }
    }
    best = -math.inf
    with open(log_path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for epoch in range(train_cfg.epochs):
            state.epoch = epoch
            model.train()
            order = rng.permutation(len(train_pairs))
            losses = []
            for i in range(0, len(order), train_cfg.batch_size):
                batch = [train_pairs[j] for j in order[i : i + train_cfg.batch_size]]
                if train_cfg.augment:
                    aug = [augment(p, rng, train_cfg) for p in batch]
                    state.skipped += sum(a is None for a in aug)
                    batch = [a for a in aug if a is not None]
                if not batch:
                    continue
                image, coarse, fine = to_batch(batch, device)
                res = model(image, coarse)
                if not res.valid.any():
                    state.skipped += len(batch)
                    continue
                state.skipped += int((~res.valid).sum())
                gt = downsample_mask(fine, 4).squeeze(1)
                loss = compute_loss(res.prob[res.valid], gt[res.valid])
                if not torch.isfinite(loss):
                    raise DivergenceError(
                        f"non-finite loss at epoch {epoch}; last finite checkpoint kept at {last_path}"
                    )
                opt.zero_grad()
                loss.backward()
                if train_cfg.grad_clip is not None:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip)
                opt.step()
                state.step += 1
                losses.append(float(loss.detach()))

            if validator is not None:
                val_iou = float(validator(model, val_pairs, epoch))
                per_class = None
            else:
                report = validate(val_pairs, model, classes=classes)
                val_iou = report["mean_iou"] or 0.0
                per_class = {k: (v["mean_iou"] if v else None) for k, v in report["classes"].items()}

            sched.step(val_iou)
            state.lr = opt.param_groups[0]["lr"]
            train_loss = float(np.mean(losses)) if losses else None
            state.losses.append(train_loss)
            record = {
                "epoch": epoch,
                "train_loss": train_loss,
                "val_iou_per_class": per_class,
                "val_mean_iou": val_iou,
                "lr": state.lr,
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()
            history.append(record)

            if val_iou > best:
                best = state.best_iou = val_iou
                save_checkpoint(best_path, model, state.step, epoch, {"val_mean_iou": val_iou})
            if (epoch + 1) % train_cfg.checkpoint_every == 0:
                save_checkpoint(last_path, model, state.step, epoch)

    save_checkpoint(final_path, model, state.step, state.epoch)
    return TrainResult(best_path, final_path, log_path, state, history)


def load_trained(path, config=None):
    model, _ = load_model(path, config)
    return model


def overrides(cfg, **kwargs):
    """dataclasses.replace that ignores None values."""
    return replace(cfg, **{k: v for k, v in kwargs.items() if v is not None})
