import json
import logging

import numpy as np
import pytest
from PIL import Image

from protorefine.coarse_sim import EllipseParams, SimConfig, simulate_coarse_mask
from protorefine.dataset import (
    CropRect,
    ImageRecord,
    PatchPair,
    PatchStore,
    Placement,
    build_idrid_manifest,
    crop_rect,
    extract_patch_pairs,
    load_manifest,
    patch_store_roundtrip,
    patch_to_source,
    read_mask,
    resize_mask,
    write_patch_store,
)
from protorefine.errors import ManifestError, StoreCorruptionError, ValidationError
from protorefine.synthetic import make_image, write_dataset


def write_manifest(root, doc):
    path = root / "manifest.json"
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture
def tiny_dataset(tmp_path):
    return write_dataset(tmp_path / "data", 2, seed=0, image_size=96)


class TestManifest:
    def test_load(self, tiny_dataset):
        m = load_manifest(tiny_dataset.root / "manifest.json")
        assert len(m) == 2 and m.classes == ["EX", "HE"]
        assert load_manifest(tiny_dataset.root).records[0].id == m.records[0].id

    def test_four_classes(self, tmp_path):
        Image.new("RGB", (8, 8)).save(tmp_path / "a.png")
        Image.new("RGB", (8, 8)).save(tmp_path / "b.png")
        doc = {
            "root": ".",
            "split": "train",
            "classes": ["EX", "HE", "MA", "SE"],
            "images": [{"id": "a", "image": "a.png", "masks": {}}, {"id": "b", "image": "b.png", "masks": {}}],
        }
        m = load_manifest(write_manifest(tmp_path, doc))
        assert len(m.records) == 2 and len(m.classes) == 4

    def test_missing_mask_named(self, tiny_dataset):
        doc = json.loads((tiny_dataset.root / "manifest.json").read_text())
        doc["images"][0]["masks"]["EX"] = "masks/EX/nope.png"
        path = write_manifest(tiny_dataset.root, doc)
        with pytest.raises(ManifestError, match="nope.png"):
            load_manifest(path)

    def test_duplicate_id(self, tiny_dataset):
        doc = json.loads((tiny_dataset.root / "manifest.json").read_text())
        doc["images"][1]["id"] = doc["images"][0]["id"]
        with pytest.raises(ValidationError, match="duplicate"):
            load_manifest(write_manifest(tiny_dataset.root, doc))

    def test_unknown_class(self, tiny_dataset):
        doc = json.loads((tiny_dataset.root / "manifest.json").read_text())
        doc["classes"] = ["EX"]
        with pytest.raises(ValidationError, match="unknown class"):
            load_manifest(write_manifest(tiny_dataset.root, doc))

    @pytest.mark.parametrize("classes", [[], ["EX", "EX"]])
    def test_bad_class_lists(self, tiny_dataset, classes):
        doc = json.loads((tiny_dataset.root / "manifest.json").read_text())
        doc["classes"] = classes
        for entry in doc["images"]:
            entry["masks"] = {}
        with pytest.raises(ValidationError):
            load_manifest(write_manifest(tiny_dataset.root, doc))

    def test_absent_class_is_empty_mask(self, tmp_path):
        Image.new("RGB", (6, 5)).save(tmp_path / "a.png")
        rec = ImageRecord("a", tmp_path / "a.png", {})
        assert rec.load_mask("MA").shape == (5, 6)

    def test_masks_are_binary(self, tmp_path):
        Image.fromarray(np.array([[0, 1, 128, 255]], dtype=np.uint8)).save(tmp_path / "m.png")
        m = read_mask(tmp_path / "m.png")
        assert m.dtype == bool and m.tolist() == [[False, True, True, True]]

    def test_idrid_layout(self, tmp_path):
        img_dir = tmp_path / "1. Original Images" / "a. Training Set"
        gt_dir = tmp_path / "2. All Segmentation Groundtruths" / "a. Training Set"
        img_dir.mkdir(parents=True)
        for i in range(1, 55):
            Image.new("RGB", (4, 4)).save(img_dir / f"IDRiD_{i:02d}.jpg")
        (gt_dir / "3. Hard Exudates").mkdir(parents=True)
        Image.new("L", (4, 4)).save(gt_dir / "3. Hard Exudates" / "IDRiD_01_EX.tif")
        m = build_idrid_manifest(tmp_path, "train")
        assert len(m.records) == 54
        assert set(m.classes) == {"EX", "HE", "MA", "SE"}
        assert "EX" in m.records[0].masks and not m.records[1].masks


class TestCrop:
    def test_centered(self):
        r = crop_rect(EllipseParams(50, 50, 10, 5, 0.0), (100, 100), 0.2)
        assert r.height == r.width == 28
        assert r.top == 36 and r.left == 36

    def test_corner_translates(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            h, w = int(rng.integers(40, 120)), int(rng.integers(40, 120))
            e = EllipseParams(float(rng.uniform(0, w - 1)), float(rng.uniform(0, h - 1)), 8.0, 3.0, float(rng.uniform(0, 3)))
            r = crop_rect(e, (h, w), 0.2)
            free = crop_rect(EllipseParams(500, 500, e.a, e.b, e.theta), (1000, 1000), 0.2)
            assert r.height == r.width == free.height  # area preserved
            assert 0 <= r.top and r.bottom <= h and 0 <= r.left and r.right <= w

    def test_shrinks_only_for_small_images(self):
        r = crop_rect(EllipseParams(10, 10, 30, 30, 0.0), (20, 25), 0.2)
        assert r.height == r.width == 20

    def test_outside_image(self):
        with pytest.raises(ValidationError):
            crop_rect(EllipseParams(-50, -50, 5, 5, 0.0), (100, 100))

    def test_projection_round_trip(self):
        rect = CropRect(13, 7, 90, 90)
        rows, cols = np.mgrid[0:64, 0:64]
        r, c = patch_to_source(rect, 64, rows, cols)
        expected_r = rect.top + (rows + 0.5) * rect.height / 64
        assert np.abs(r + 0.5 - expected_r).max() <= 1.0
        assert r.min() >= rect.top and r.max() < rect.bottom and c.max() < rect.right


class TestExtraction:
    def setup_method(self):
        rng = np.random.default_rng(5)
        self.image, masks = make_image(rng, 128)
        self.fine = masks["EX"]
        self.coarse = simulate_coarse_mask(self.fine, SimConfig())
        self.rec = ImageRecord("img", "<memory>")

    def pairs(self, size=64):
        return extract_patch_pairs(
            self.rec, "EX", self.coarse.ellipses, self.coarse, size, 0.2, image=self.image, fine=self.fine
        )

    def test_one_pair_per_ellipse(self):
        pairs = self.pairs()
        assert len(pairs) == len(self.coarse.ellipses)
        for p in pairs:
            assert p.image.shape == (64, 64, 3) and p.coarse.shape == (64, 64)
            assert p.coarse.any() and not p.coarse.all()
            assert p.coarse.dtype == bool and p.fine.dtype == bool
            assert 0.0 <= p.image.min() and p.image.max() <= 1.0

    def test_fine_inside_coarse(self):
        for p in self.pairs():
            sl = p.placement.rect.slices()
            fine, coarse = self.fine[sl], self.coarse.mask[sl]
            if fine.any():
                assert (fine & coarse).sum() / fine.sum() >= 0.99

    def test_deterministic(self):
        a, b = self.pairs(), self.pairs()
        for p, q in zip(a, b):
            assert np.array_equal(p.image, q.image) and p.placement == q.placement

    def test_full_coarse_crop_dropped(self, caplog):
        full = np.ones_like(self.fine)
        e = [EllipseParams(64, 64, 10, 10, 0.0)]
        with caplog.at_level(logging.WARNING):
            pairs = extract_patch_pairs(self.rec, "EX", e, full, 32, image=self.image, fine=self.fine)
        assert pairs == [] and "dropped 1" in caplog.text

    def test_resize_keeps_masks_binary(self):
        m = np.random.default_rng(0).random((37, 37)) < 0.3
        out = resize_mask(m, 64)
        assert out.dtype == bool and set(np.unique(out)) <= {False, True}

    def test_shape_validation(self):
        with pytest.raises(ValidationError):
            PatchPair(np.zeros((4, 4, 3)), np.zeros((4, 4), bool), np.zeros((5, 4), bool), None)


class TestStore:
    def test_empty(self, tmp_path):
        assert patch_store_roundtrip([], tmp_path / "s") == []

    def test_round_trip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(1)
        pairs = []
        for k in range(3):
            img = rng.integers(0, 256, (16, 16, 3)).astype(np.float32) / 255.0
            coarse = rng.random((16, 16)) < 0.5
            coarse[0, 0], coarse[0, 1] = True, False
            pairs.append(
                PatchPair(img, coarse, rng.random((16, 16)) < 0.2, Placement(f"i{k}", CropRect(k, 2, 30, 30), "HE"), f"p{k}")
            )
        back = patch_store_roundtrip(pairs, tmp_path / "s")
        assert len(back) == 3
        for p, q in zip(pairs, back):
            assert np.array_equal(p.image, q.image)
            assert np.array_equal(p.coarse, q.coarse) and np.array_equal(p.fine, q.fine)
            assert p.placement == q.placement and p.pair_id == q.pair_id
        index = json.loads((tmp_path / "s" / "index.json").read_text())
        assert index["count"] == 3 and index["classes"] == {"HE": 3}

    def test_corruption_names_pair(self, tmp_path):
        rng = np.random.default_rng(2)
        img = rng.random((8, 8, 3)).astype(np.float32)
        c = np.zeros((8, 8), bool)
        c[2:5, 2:5] = True
        pair = PatchPair(img, c, c.copy(), Placement("i", CropRect(0, 0, 8, 8), "EX"), "bad_one")
        write_patch_store([pair], tmp_path / "s")
        (tmp_path / "s" / "bad_one.gt.png").write_bytes(b"garbage")
        with pytest.raises(StoreCorruptionError, match="bad_one"):
            PatchStore(tmp_path / "s").read("bad_one")
        # resuming rewrites the damaged record
        store = write_patch_store([pair], tmp_path / "s")
        assert np.array_equal(store.read("bad_one").coarse, c)

    def test_resume_skips_existing(self, tmp_path):
        rng = np.random.default_rng(3)
        c = np.zeros((8, 8), bool)
        c[1:4, 1:4] = True
        pair = PatchPair(rng.random((8, 8, 3)).astype(np.float32), c, c, Placement("i", CropRect(0, 0, 8, 8), "EX"), "a")
        write_patch_store([pair], tmp_path / "s")
        stamp = (tmp_path / "s" / "a.img.png").stat().st_mtime_ns
        write_patch_store([pair], tmp_path / "s")
        assert (tmp_path / "s" / "a.img.png").stat().st_mtime_ns == stamp
