"""Synthetic fundus-like images with clustered blob lesions.

Backgrounds are smooth textured orange-red fields with dark vessel-like
curves; lesions are small irregular blobs grouped in loose clusters. Each
image draws its own background tone and lesion contrast, so absolute lesion
colour varies between images while the local contrast stays visible.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage as ndi

from .coarse_sim import SimConfig, simulate_coarse_mask
from .dataset import ImageRecord, extract_patch_pairs, load_manifest, to_uint8, write_mask

CLASSES = ("EX", "HE")


def _smooth_field(rng, shape, sigma):
    f = ndi.gaussian_filter(rng.standard_normal(shape), sigma)
    return f / (f.std() + 1e-12)


def _vessels(rng, shape, n):
    h, w = shape
    out = np.zeros(shape)
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(n):
        x0, y0 = rng.uniform(0, w), rng.uniform(0, h)
        ang = rng.uniform(0, np.pi)
        curv = rng.uniform(-0.01, 0.01)
        u = (xx - x0) * np.cos(ang) + (yy - y0) * np.sin(ang)
        v = -(xx - x0) * np.sin(ang) + (yy - y0) * np.cos(ang) - curv * u**2
        out = np.maximum(out, np.exp(-(v**2) / (2 * rng.uniform(0.6, 1.6) ** 2)))
    return out


def _blob(rng, shape, cy, cx, radius, wobble=0.25):
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    ang = np.arctan2(yy - cy, xx - cx)
    wobble = 1.0 + wobble * np.sin(3 * ang + rng.uniform(0, 2 * np.pi)) * rng.uniform(0, 1)
    ecc = rng.uniform(0.6, 1.0)
    t = rng.uniform(0, np.pi)
    u = (xx - cx) * np.cos(t) + (yy - cy) * np.sin(t)
    v = (-(xx - cx) * np.sin(t) + (yy - cy) * np.cos(t)) / ecc
    return np.hypot(u, v) <= radius * wobble


def make_image(
    rng, size=160, n_groups=(3, 6), classes=CLASSES, radius=(1.5, 5.0), per_group=(1, 4), wobble=0.25
):
    """Return (image float32 HxWx3, {class: fine mask}).

    Each class gets `n_groups` clusters of `per_group` blobs with radii drawn
    from `radius`; wobble=0 gives plain ellipses.
    """
    shape = (size, size)
    tone = rng.uniform(0.35, 0.95)
    base = np.array([0.85, 0.42, 0.18]) * tone
    tex = 0.06 * _smooth_field(rng, shape, 8) + 0.02 * _smooth_field(rng, shape, 2)
    img = base[None, None, :] * (1.0 + tex[..., None])
    img = img * (1.0 - 0.35 * _vessels(rng, shape, rng.integers(2, 5))[..., None])

    masks = {}
    taken = np.zeros(shape, dtype=bool)
    for cls in classes:
        mask = np.zeros(shape, dtype=bool)
        for _ in range(rng.integers(n_groups[0], n_groups[1] + 1)):
            border = 14 + radius[1]
            gy, gx = rng.uniform(border, size - border, 2)
            for _ in range(rng.integers(per_group[0], per_group[1] + 1)):
                cy, cx = gy + rng.normal(0, 6), gx + rng.normal(0, 6)
                blob = _blob(rng, shape, cy, cx, rng.uniform(*radius), wobble)
                mask |= blob & ~taken
        taken |= mask
        masks[cls] = mask
        contrast = rng.uniform(0.18, 0.4)
        if cls == "HE":
            color = -contrast * np.array([0.5, 0.9, 0.9])
        else:
            color = contrast * np.array([0.6, 0.9, 0.2])
        soft = ndi.gaussian_filter(mask.astype(float), 0.6)
        img = img + soft[..., None] * color[None, None, :] * tone
    img = img + rng.normal(0, 0.012, img.shape)
    return np.clip(img, 0, 1).astype(np.float32), masks


def synthetic_pairs(
    n_pairs, seed=0, patch_size=64, image_size=160, sim=None, margin=0.2, classes=CLASSES, **image_kw
):
    """Exactly `n_pairs` patch pairs cut from freshly generated images.

    Extra keyword arguments go to make_image.
    """
    rng = np.random.default_rng(seed)
    sim = sim or SimConfig()
    pairs, k = [], 0
    while len(pairs) < n_pairs:
        image, masks = make_image(rng, image_size, classes=classes, **image_kw)
        rec = ImageRecord(f"syn{seed}_{k:04d}", Path("<memory>"))
        for cls, fine in masks.items():
            coarse = simulate_coarse_mask(fine, sim)
            pairs.extend(
                extract_patch_pairs(rec, cls, coarse.ellipses, coarse, patch_size, margin, image=image, fine=fine)
            )
        k += 1
    return pairs[:n_pairs]


def write_dataset(root, n_images, seed=0, image_size=160, split="test", classes=CLASSES, **image_kw):
    """Write images, per-class masks and manifest.json under `root`; return the manifest."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for cls in classes:
        (root / "masks" / cls).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for k in range(n_images):
        image, masks = make_image(rng, image_size, classes=classes, **image_kw)
        image_id = f"img{seed}_{k:03d}"
        Image.fromarray(to_uint8(image)).save(root / "images" / f"{image_id}.png")
        entry = {"id": image_id, "image": f"images/{image_id}.png", "masks": {}}
        for cls, m in masks.items():
            rel = f"masks/{cls}/{image_id}.png"
            write_mask(root / rel, m)
            entry["masks"][cls] = rel
        entries.append(entry)
    doc = {"root": ".", "split": split, "classes": list(classes), "images": entries}
    (root / "manifest.json").write_text(json.dumps(doc, indent=2))
    return load_manifest(root / "manifest.json")
