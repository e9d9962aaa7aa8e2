"""Manifests, patch-pair extraction and the on-disk patch store."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from .errors import ManifestError, StoreCorruptionError, ValidationError

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
IDRID_CLASSES = {
    "MA": "1. Microaneurysms",
    "HE": "2. Haemorrhages",
    "EX": "3. Hard Exudates",
    "SE": "4. Soft Exudates",
}


# ---------------------------------------------------------------- raster io


def read_image(path):
    """RGB image as float32 in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float32) / 255.0


def read_mask(path):
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3:
        arr = arr.max(axis=2)
    return arr > 0


def write_mask(path, mask):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(mask, dtype=np.uint8) * 255).save(path, format="PNG")


def to_uint8(image):
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------- manifest


@dataclass
class ImageRecord:
    id: str
    image: Path
    masks: dict[str, Path] = field(default_factory=dict)

    def load_image(self):
        return read_image(self.image)

    def load_mask(self, lesion_class, shape=None):
        """Fine mask for one class; a class with no file is an all-empty mask."""
        path = self.masks.get(lesion_class)
        if path is None:
            if shape is None:
                with Image.open(self.image) as im:
                    shape = (im.height, im.width)
            return np.zeros(shape, dtype=bool)
        mask = read_mask(path)
        if shape is not None and mask.shape != tuple(shape):
            raise ValidationError(
                f"mask {path} has shape {mask.shape}, image {self.id} has {tuple(shape)}"
            )
        return mask


@dataclass
class DatasetManifest:
    root: Path
    split: str
    classes: list[str]
    records: list[ImageRecord]

    def __len__(self):
        return len(self.records)

    def record(self, image_id):
        for r in self.records:
            if r.id == image_id:
                return r
        raise KeyError(image_id)

    def to_dict(self):
        def rel(p):
            try:
                return str(Path(p).relative_to(self.root))
            except ValueError:
                return str(p)

        return {
            "root": str(self.root),
            "split": self.split,
            "classes": list(self.classes),
            "images": [
                {"id": r.id, "image": rel(r.image), "masks": {k: rel(v) for k, v in r.masks.items()}}
                for r in self.records
            ],
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def load_manifest(path):
    """Load and validate a manifest file (or a directory holding manifest.json).

    File existence is checked for every raster; nothing is decoded.
    """
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest {path} is not valid JSON: {exc}") from exc

    for key in ("classes", "images"):
        if key not in doc:
            raise ManifestError(f"manifest {path} lacks the {key!r} field")
    root = Path(doc.get("root", "."))
    if not root.is_absolute():
        root = (path.parent / root).resolve()
    classes = list(doc["classes"])
    if not classes:
        raise ValidationError("manifest class list is empty")
    if len(set(classes)) != len(classes):
        raise ValidationError(f"manifest class list has duplicates: {classes}")

    records, seen = [], set()
    for entry in doc["images"]:
        image_id = str(entry["id"])
        if image_id in seen:
            raise ValidationError(f"duplicate image id {image_id!r}")
        seen.add(image_id)
        image = root / entry["image"]
        if not image.is_file():
            raise ManifestError(f"missing image file: {image}")
        masks = {}
        for cls, rel in entry.get("masks", {}).items():
            if cls not in classes:
                raise ValidationError(f"image {image_id!r} references unknown class {cls!r}")
            mpath = root / rel
            if not mpath.is_file():
                raise ManifestError(f"missing mask file: {mpath}")
            masks[cls] = mpath
        records.append(ImageRecord(image_id, image, masks))
    return DatasetManifest(root, str(doc.get("split", "train")), classes, records)


def build_idrid_manifest(root, split="train"):
    """Manifest for the official IDRiD segmentation folder layout."""
    root = Path(root)
    sub = "a. Training Set" if split == "train" else "b. Testing Set"
    img_dir = root / "1. Original Images" / sub
    gt_dir = root / "2. All Segmentation Groundtruths" / sub
    if not img_dir.is_dir():
        raise ManifestError(f"IDRiD image folder not found: {img_dir}")
    records = []
    for img in sorted(img_dir.glob("IDRiD_*.jpg")):
        masks = {}
        for cls, folder in IDRID_CLASSES.items():
            cand = gt_dir / folder / f"{img.stem}_{cls}.tif"
            if cand.is_file():
                masks[cls] = cand
        records.append(ImageRecord(img.stem, img, masks))
    return DatasetManifest(root, split, list(IDRID_CLASSES), records)


# ---------------------------------------------------------------- patch pairs


@dataclass(frozen=True)
class CropRect:
    top: int
    left: int
    height: int
    width: int

    @property
    def bottom(self):
        return self.top + self.height

    @property
    def right(self):
        return self.left + self.width

    def slices(self):
        return slice(self.top, self.bottom), slice(self.left, self.right)


@dataclass(frozen=True)
class Placement:
    image_id: str
    rect: CropRect
    lesion_class: str

    def to_dict(self):
        return {"image_id": self.image_id, "rect": asdict(self.rect), "lesion_class": self.lesion_class}

    @classmethod
    def from_dict(cls, d):
        return cls(d["image_id"], CropRect(**d["rect"]), d["lesion_class"])


@dataclass
class PatchPair:
    """Image patch (H, W, 3) float32 in [0, 1] plus coarse and fine masks (H, W) bool."""

    image: np.ndarray
    coarse: np.ndarray
    fine: np.ndarray
    placement: Placement
    pair_id: str = ""

    def __post_init__(self):
        h, w = self.coarse.shape
        if self.image.shape != (h, w, 3) or self.fine.shape != (h, w):
            raise ValidationError(
                f"patch shapes disagree: image {self.image.shape}, coarse {self.coarse.shape}, "
                f"fine {self.fine.shape}"
            )

    @property
    def lesion_class(self):
        return self.placement.lesion_class


def crop_rect(ellipse, image_shape, margin=0.2):
    """Square crop around an ellipse's bounding box.

    The box grows by `margin` of its extent on each side, the short side is
    padded to a square, then the square is translated into the image. It is
    shrunk only when the image itself is smaller than the square.
    """
    h, w = image_shape[:2]
    x0, y0, x1, y1 = ellipse.bbox()
    if x1 < 0 or y1 < 0 or x0 > w - 1 or y0 > h - 1:
        raise ValidationError(f"ellipse at ({ellipse.cx:.1f}, {ellipse.cy:.1f}) lies outside a {w}x{h} image")
    bw, bh = x1 - x0, y1 - y0
    side = int(math.ceil(max(bw, bh) * (1.0 + 2.0 * margin)))
    side = max(side, 1)
    side = min(side, h, w)
    left = int(math.floor(ellipse.cx - side / 2.0 + 0.5))
    top = int(math.floor(ellipse.cy - side / 2.0 + 0.5))
    left = min(max(left, 0), w - side)
    top = min(max(top, 0), h - side)
    return CropRect(top, left, side, side)


def resize_image(image, size):
    """Bilinear resize of a [0, 1] image, quantized to 8 bits so patches store losslessly."""
    u8 = to_uint8(image)
    out = cv2.resize(u8, (size, size), interpolation=cv2.INTER_LINEAR)
    return out.astype(np.float32) / 255.0


def resize_mask(mask, size):
    out = cv2.resize(np.asarray(mask, dtype=np.uint8), (size, size), interpolation=cv2.INTER_NEAREST)
    return out > 0


def patch_to_source(rect, patch_size, rows, cols):
    """Map patch pixel indices to the source pixel whose center they sample."""
    sy, sx = rect.height / patch_size, rect.width / patch_size
    r = np.floor((np.asarray(rows) + 0.5) * sy).astype(int) + rect.top
    c = np.floor((np.asarray(cols) + 0.5) * sx).astype(int) + rect.left
    return r, c


def extract_patch_pairs(
    record, lesion_class, ellipses, coarse, patch_size=256, margin=0.2, image=None, fine=None
):
    """One PatchPair per ellipse; pairs whose coarse crop is empty or full are dropped."""
    image = record.load_image() if image is None else image
    shape = image.shape[:2]
    fine = record.load_mask(lesion_class, shape) if fine is None else np.asarray(fine, dtype=bool)
    coarse_raster = coarse.mask if hasattr(coarse, "mask") else np.asarray(coarse, dtype=bool)
    if coarse_raster.shape != shape or fine.shape != shape:
        raise ValidationError(f"coarse/fine masks do not match image {record.id} of shape {shape}")

    pairs, dropped = [], 0
    for k, ellipse in enumerate(ellipses):
        rect = crop_rect(ellipse, shape, margin)
        sl = rect.slices()
        c = resize_mask(coarse_raster[sl], patch_size)
        if not c.any() or c.all():
            dropped += 1
            continue
        pairs.append(
            PatchPair(
                image=resize_image(image[sl], patch_size),
                coarse=c,
                fine=resize_mask(fine[sl], patch_size),
                placement=Placement(record.id, rect, lesion_class),
                pair_id=f"{record.id}_{lesion_class}_{k:04d}",
            )
        )
    if dropped:
        log.warning("%s/%s: dropped %d patch(es) with empty or full coarse crops", record.id, lesion_class, dropped)
    return pairs


# ---------------------------------------------------------------- patch store


def _png_bytes(array):
    buf = io.BytesIO()
    Image.fromarray(array).save(buf, format="PNG")
    return buf.getvalue()


def _atomic_write(path, data):
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


class PatchStore:
    """Directory of per-pair PNG triplets, JSON placement records and an index.

    The index maps pair ids to checksums and is rewritten after every write,
    so an interrupted run can be resumed: ids already present are skipped.
    """

    INDEX = "index.json"

    def __init__(self, path):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        idx = self.path / self.INDEX
        self.index = json.loads(idx.read_text()) if idx.is_file() else {"count": 0, "classes": {}, "pairs": {}}

    def __len__(self):
        return len(self.index["pairs"])

    def __contains__(self, pair_id):
        return pair_id in self.index["pairs"]

    def ids(self):
        return list(self.index["pairs"])

    def _files(self, pair_id):
        return [self.path / f"{pair_id}.{kind}" for kind in ("img.png", "coarse.png", "gt.png", "json")]

    def add(self, pair, flush=True):
        if not pair.pair_id:
            raise ValidationError("patch pairs need a pair_id to be stored")
        blobs = [
            _png_bytes(to_uint8(pair.image)),
            _png_bytes(pair.coarse.astype(np.uint8) * 255),
            _png_bytes(pair.fine.astype(np.uint8) * 255),
            json.dumps(pair.placement.to_dict(), sort_keys=True).encode(),
        ]
        digest = hashlib.sha256()
        for path, blob in zip(self._files(pair.pair_id), blobs):
            _atomic_write(path, blob)
            digest.update(blob)
        self.index["pairs"][pair.pair_id] = {"sha256": digest.hexdigest(), "class": pair.lesion_class}
        if flush:
            self.flush()

    def flush(self):
        pairs = self.index["pairs"]
        classes = {}
        for meta in pairs.values():
            classes[meta["class"]] = classes.get(meta["class"], 0) + 1
        self.index["count"] = len(pairs)
        self.index["classes"] = classes
        _atomic_write(self.path / self.INDEX, json.dumps(self.index, indent=1, sort_keys=True).encode())

    def read(self, pair_id):
        meta = self.index["pairs"].get(pair_id)
        if meta is None:
            raise KeyError(pair_id)
        digest = hashlib.sha256()
        blobs = []
        for path in self._files(pair_id):
            if not path.is_file():
                raise StoreCorruptionError(pair_id, f"patch store record {pair_id!r} is missing {path.name}")
            blob = path.read_bytes()
            digest.update(blob)
            blobs.append(blob)
        if digest.hexdigest() != meta["sha256"]:
            raise StoreCorruptionError(pair_id)
        arrays = [np.asarray(Image.open(io.BytesIO(b))) for b in blobs[:3]]
        return PatchPair(
            image=arrays[0].astype(np.float32) / 255.0,
            coarse=arrays[1] > 0,
            fine=arrays[2] > 0,
            placement=Placement.from_dict(json.loads(blobs[3])),
            pair_id=pair_id,
        )

    def __iter__(self):
        for pair_id in self.ids():
            yield self.read(pair_id)


def write_patch_store(pairs, path, resume=True):
    store = PatchStore(path)
    for pair in pairs:
        if resume and pair.pair_id in store:
            try:
                store.read(pair.pair_id)
                continue
            except StoreCorruptionError:
                log.warning("rewriting corrupted record %s", pair.pair_id)
        store.add(pair, flush=False)
    store.flush()
    return store


def read_patch_store(path):
    return list(PatchStore(path))


def patch_store_roundtrip(pairs, path):
    write_patch_store(pairs, path)
    return read_patch_store(path)
