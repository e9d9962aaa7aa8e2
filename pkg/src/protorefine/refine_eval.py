"""Full-image refinement, IoU evaluation, reduction-factor sweeps and overlays."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from PIL import Image
from scipy import ndimage as ndi

from .coarse_sim import SimConfig, read_ellipse_sidecar, simulate_coarse_mask
from .dataset import CropRect, PatchPair, Placement, crop_rect, resize_image, resize_mask, to_uint8
from .errors import ValidationError
from .superpixel import boundaries
from .trainer import mask_iou, predict_pairs

log = logging.getLogger(__name__)

COLORS = {
    "gt": (255, 0, 0),
    "coarse": (0, 255, 0),
    "refined": (0, 0, 255),
    "superpixel": (255, 255, 0),
}


@dataclass
class PatchProvenance:
    ellipse_index: int
    rect: CropRect
    fallback: bool = False


@dataclass
class RefinementResult:
    prob: np.ndarray  # (H, W) float32 in [0, 1]
    mask: np.ndarray  # (H, W) bool, prob >= threshold
    threshold: float
    provenance: list[PatchProvenance] = field(default_factory=list)

    def footprint(self):
        out = np.zeros(self.prob.shape, dtype=bool)
        for p in self.provenance:
            out[p.rect.slices()] = True
        return out


def place_patch(prob_patch, rect):
    """Resize a square patch-space raster back to its crop rectangle (bilinear)."""
    prob_patch = np.asarray(prob_patch, dtype=np.float32)
    if prob_patch.shape == (rect.height, rect.width):
        return prob_patch
    return cv2.resize(prob_patch, (rect.width, rect.height), interpolation=cv2.INTER_LINEAR)


def merge_to_full(shape, placed):
    """Pointwise maximum of (rect, raster) placements over a zero canvas."""
    out = np.zeros(shape, dtype=np.float32)
    for rect, raster in placed:
        sl = rect.slices()
        np.maximum(out[sl], raster, out=out[sl])
    return out


def threshold_mask(prob, threshold=0.5):
    if not 0.0 < threshold < 1.0:
        raise ValidationError(f"threshold must lie in (0, 1), got {threshold}")
    return np.asarray(prob) >= threshold


def refine_image(
    image, coarse, model, lesion_class="lesion", image_id="image", margin=0.2, threshold=None, head=None
):
    """Refine every ellipse of `coarse` on a full image and merge with a pointwise max."""
    if not coarse.ellipses:
        raise ValidationError(f"coarse mask for {image_id}/{lesion_class} has no ellipses")
    size = model.config.input_size
    threshold = model.config.threshold if threshold is None else threshold
    shape = image.shape[:2]
    pairs, rects, kept = [], [], []
    for k, ellipse in enumerate(coarse.ellipses):
        rect = crop_rect(ellipse, shape, margin)
        sl = rect.slices()
        c = resize_mask(coarse.mask[sl], size)
        if not c.any():
            continue
        pairs.append(
            PatchPair(
                resize_image(image[sl], size),
                c,
                np.zeros_like(c),
                Placement(image_id, rect, lesion_class),
                f"{image_id}_{lesion_class}_{k:04d}",
            )
        )
        rects.append(rect)
        kept.append(k)
    probs, valid = predict_pairs(model, pairs, head=head, return_valid=True) if pairs else ([], [])
    placed, provenance = [], []
    for k, rect, prob, ok in zip(kept, rects, probs, valid):
        fallback = not bool(ok)
        placed.append((rect, np.clip(place_patch(prob, rect), 0.0, 1.0)))
        provenance.append(PatchProvenance(k, rect, fallback))
    full = merge_to_full(shape, placed)
    return RefinementResult(full, threshold_mask(full, threshold), threshold, provenance)


# ---------------------------------------------------------------- evaluation


def config_fingerprint(config):
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class EvalReport:
    classes: dict  # class -> {"mean_iou", "std_iou", "n_images"} or None when not applicable
    rows: list  # per-image dicts: image_id, class, iou
    fingerprint: str = ""

    @property
    def average(self):
        vals = [v["mean_iou"] for v in self.classes.values() if v]
        return float(np.mean(vals)) if vals else None

    def to_dict(self):
        d = {cls: v for cls, v in self.classes.items()}
        d["average"] = self.average
        d["config_fingerprint"] = self.fingerprint
        return d

    def write(self, path):
        """Write the JSON report plus a summary CSV twin and a per-image CSV."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        with open(path.with_suffix(".csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "mean_iou", "std_iou", "n_images"])
            for cls, v in self.classes.items():
                w.writerow([cls, *(["NA", "NA", 0] if v is None else [v["mean_iou"], v["std_iou"], v["n_images"]])])
            w.writerow(["average", self.average if self.average is not None else "NA", "", ""])
        with open(path.with_name(path.stem + "_images.csv"), "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["image_id", "class", "iou"])
            w.writeheader()
            w.writerows(self.rows)


def evaluate_iou(pred_masks, gt_masks, image_ids, lesion_class):
    """Image-level IoU for one class.

    Images where prediction and ground truth are both empty are excluded;
    with no eligible image the class is not applicable (None).
    """
    rows = []
    for pred, gt, image_id in zip(pred_masks, gt_masks, image_ids):
        pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
        if pred.shape != gt.shape:
            raise ValidationError(f"{image_id}: prediction {pred.shape} and ground truth {gt.shape} differ")
        iou = mask_iou(pred, gt)
        if iou is not None:
            rows.append({"image_id": image_id, "class": lesion_class, "iou": iou})
    if not rows:
        return None, rows
    scores = np.array([r["iou"] for r in rows])
    return {"mean_iou": float(scores.mean()), "std_iou": float(scores.std()), "n_images": len(rows)}, rows


def sidecar_path(coarse_dir, image_id, lesion_class):
    return Path(coarse_dir) / f"{image_id}_{lesion_class}.ellipses.json"


def load_or_simulate_coarse(image_id, lesion_class, fine, sim=None, coarse_dir=None):
    """Coarse mask from an ellipse sidecar in `coarse_dir` when present, else simulated from `fine`."""
    if coarse_dir is not None:
        path = sidecar_path(coarse_dir, image_id, lesion_class)
        if path.is_file():
            return read_ellipse_sidecar(path, fine.shape)[1]
    return simulate_coarse_mask(fine, sim or SimConfig())


def evaluate_manifest(manifest, model=None, sim=None, classes=None, margin=0.2, threshold=None, head=None, coarse_dir=None):
    """Simulate (or load) coarse masks, refine them and score against the fine masks.

    With model=None the coarse masks themselves are scored ("initial coarse").
    """
    sim = sim or SimConfig()
    classes = classes or manifest.classes
    summary, all_rows = {}, []
    for cls in classes:
        preds, gts, ids = [], [], []
        for rec in manifest.records:
            image = rec.load_image()
            gt = rec.load_mask(cls, image.shape[:2])
            coarse = load_or_simulate_coarse(rec.id, cls, gt, sim, coarse_dir)
            if model is None or not coarse.ellipses:
                pred = coarse.mask
            else:
                pred = refine_image(image, coarse, model, cls, rec.id, margin, threshold, head).mask
            preds.append(pred)
            gts.append(gt)
            ids.append(rec.id)
        summary[cls], rows = evaluate_iou(preds, gts, ids, cls)
        all_rows.extend(rows)
    fp = {
        "sim": sim.__dict__,
        "model": model.config.to_dict() if model is not None else None,
        "head": head,
        "margin": margin,
        "threshold": threshold,
    }
    return EvalReport(summary, all_rows, config_fingerprint(fp))


def reduction_sweep(manifest, models, factors=(1.0, 1.25, 1.5, 1.75, 2.0), sim=None, classes=None, margin=0.2, threshold=None):
    """Rows (factor, class, head, mean_iou, std_iou) for each factor and each model.

    `models` maps a head label to (model, head) or to a model; the coarse
    masks themselves are always scored under the label "coarse".
    """
    sim = sim or SimConfig()
    rows = []
    for factor in factors:
        fsim = SimConfig(**{**sim.__dict__, "reduction_factor": float(factor)})
        entries = [("coarse", None, None)]
        for label, entry in models.items():
            model, head = entry if isinstance(entry, tuple) else (entry, None)
            entries.append((label, model, head))
        for label, model, head in entries:
            report = evaluate_manifest(manifest, model, fsim, classes, margin, threshold, head)
            for cls, v in report.classes.items():
                rows.append(
                    {
                        "factor": float(factor),
                        "class": cls,
                        "head": label,
                        "mean_iou": None if v is None else v["mean_iou"],
                        "std_iou": None if v is None else v["std_iou"],
                    }
                )
    return rows


def sweep_drop(rows, head, low=None, high=None):
    """Class-averaged IoU at the lowest factor minus that at the highest factor."""
    mine = [r for r in rows if r["head"] == head and r["mean_iou"] is not None]
    factors = sorted({r["factor"] for r in mine})
    low = factors[0] if low is None else low
    high = factors[-1] if high is None else high

    def avg(f):
        return float(np.mean([r["mean_iou"] for r in mine if r["factor"] == f]))

    return avg(low) - avg(high)


def write_sweep(rows, out_dir):
    """CSV of the sweep plus a factor-vs-IoU line plot; returns (csv_path, png_path)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, png_path = out / "sweep.csv", out / "sweep.png"
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["factor", "class", "head", "mean_iou", "std_iou"])
        w.writeheader()
        w.writerows(rows)

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for head in dict.fromkeys(r["head"] for r in rows):
        pts = {}
        for r in rows:
            if r["head"] == head and r["mean_iou"] is not None:
                pts.setdefault(r["factor"], []).append(r["mean_iou"])
        xs = sorted(pts)
        ax.plot(xs, [100 * np.mean(pts[x]) for x in xs], marker="o", label=head)
    ax.set_xlabel("reduction factor")
    ax.set_ylabel("mean IoU (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(png_path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return csv_path, png_path


# ---------------------------------------------------------------- overlays


def mask_edge(mask):
    """Inner boundary: mask pixels with a 4-neighbour outside the mask."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndi.binary_erosion(mask, border_value=0)


def render_overlay(image, coarse, refined, gt, path=None, superpixel_labels=None):
    """RGB overlay: ground truth red, coarse green, refined blue, superpixels yellow.

    Returns the uint8 array; writes a PNG when `path` is given.
    """
    out = to_uint8(image).copy()
    if superpixel_labels is not None:
        out[boundaries(superpixel_labels)] = COLORS["superpixel"]
    for key, m in (("coarse", coarse), ("refined", refined), ("gt", gt)):
        if m is not None:
            out[mask_edge(m)] = COLORS[key]
    if path is not None:
        Image.fromarray(out).save(path, format="PNG")
    return out
