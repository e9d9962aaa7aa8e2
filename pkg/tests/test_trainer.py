import json
import math

import numpy as np
import pytest
import torch

import oracles
from protorefine import trainer as trainer_mod
from protorefine.dataset import CropRect, PatchPair, Placement
from protorefine.errors import DivergenceError, ValidationError
from protorefine.protonet import ModelConfig, load_model
from protorefine.synthetic import synthetic_pairs
from protorefine.trainer import (
    TrainConfig,
    affine_matrix,
    augment,
    augment_with_transform,
    split_pairs,
    train,
    validate,
    warp_mask,
)

TINY = ModelConfig(input_size=32, base_width=4, depth=3, feat_channels=16, fused_channels=16)
QUIET = dict(batch_size=8, lr=1e-3, augment=False, val_fraction=0.25)


@pytest.fixture(scope="module")
def pairs():
    return synthetic_pairs(16, seed=3, patch_size=32, image_size=96)


def square_pair(size=32, half=6):
    c = np.zeros((size, size), bool)
    lo, hi = size // 2 - half, size // 2 + half
    c[lo:hi, lo:hi] = True
    f = np.zeros_like(c)
    f[lo + 3 : hi - 3, lo + 3 : hi - 3] = True
    img = np.random.default_rng(0).random((size, size, 3)).astype(np.float32)
    return PatchPair(img, c, f, Placement("i", CropRect(0, 0, size, size), "EX"), "sq")


def nearest_oracle(mask, matrix):
    """Inverse-map every output pixel and round to the nearest source pixel."""
    h, w = mask.shape
    inv = np.linalg.inv(np.vstack([matrix, [0, 0, 1]]))
    out = np.zeros_like(mask)
    ambiguous = np.zeros_like(mask)
    for y in range(h):
        for x in range(w):
            sx, sy, _ = inv @ np.array([x, y, 1.0])
            fx, fy = sx + 0.5, sy + 0.5
            ambiguous[y, x] = min(abs(fx - round(fx)), abs(fy - round(fy))) < 4e-3
            ix, iy = math.floor(fx), math.floor(fy)
            if 0 <= ix < w and 0 <= iy < h:
                out[y, x] = mask[iy, ix]
    return out, ambiguous


class TestAugment:
    def test_zero_probabilities_is_identity(self):
        pair = square_pair()
        cfg = TrainConfig(affine_prob=0, blur_prob=0, bc_prob=0)
        out = augment(pair, np.random.default_rng(0), cfg)
        assert np.array_equal(out.image, pair.image)
        assert np.array_equal(out.coarse, pair.coarse) and np.array_equal(out.fine, pair.fine)

    def test_quarter_turn_of_centered_square(self):
        pair = square_pair()
        m = affine_matrix(32, 90.0)
        assert np.array_equal(warp_mask(pair.coarse, m), pair.coarse)
        assert np.array_equal(warp_mask(pair.fine, m), pair.fine)

    def test_transform_replay(self, pairs):
        cfg = TrainConfig(affine_prob=1.0, blur_prob=0.3, bc_prob=0.5)
        rng = np.random.default_rng(11)
        checked = 0
        for k in range(500):
            pair = pairs[k % len(pairs)]
            out, matrix = augment_with_transform(pair, rng, cfg)
            if out is None:
                continue
            assert out.image.shape == pair.image.shape and out.coarse.shape == pair.coarse.shape
            assert out.coarse.dtype == bool and out.fine.dtype == bool
            assert out.coarse.any() and not out.coarse.all()
            if matrix is None:
                assert np.array_equal(out.coarse, pair.coarse)
                continue
            if k % 10 == 0:  # the pure-Python oracle is slow; replay a subset
                for got, src in ((out.coarse, pair.coarse), (out.fine, pair.fine)):
                    want, amb = nearest_oracle(src, matrix)
                    assert np.array_equal(got[~amb], want[~amb])
                checked += 1
        assert checked >= 30

    def test_deterministic_given_rng(self, pairs):
        cfg = TrainConfig()
        a = augment(pairs[0], np.random.default_rng(4), cfg)
        b = augment(pairs[0], np.random.default_rng(4), cfg)
        assert np.array_equal(a.image, b.image) and np.array_equal(a.fine, b.fine)


class TestValidate:
    def test_perfect_model(self, pairs):
        report = validate(pairs, None, predictions=[p.fine for p in pairs])
        present = [c for c, v in report["classes"].items() if v]
        assert present and all(report["classes"][c]["mean_iou"] == 1.0 for c in present)

    def test_coarse_predictions_match_direct_iou(self, pairs):
        report = validate(pairs, None, predictions=[p.coarse for p in pairs], classes=["EX", "HE", "MA"])
        for cls in ("EX", "HE"):
            per_image = {}
            for p in pairs:
                if p.lesion_class == cls:
                    v = oracles.iou(p.coarse, p.fine)
                    if v is not None:
                        per_image.setdefault(p.placement.image_id, []).append(v)
            want = np.mean([np.mean(v) for v in per_image.values()])
            assert report["classes"][cls]["mean_iou"] == pytest.approx(want)
        assert report["classes"]["MA"] is None

    def test_empty_split(self):
        report = validate([], None)
        assert report["classes"] == {} and report["mean_iou"] is None


class TestSplit:
    def test_stratified(self, pairs):
        train_p, val_p = split_pairs(pairs, 0.25, seed=0)
        assert len(train_p) + len(val_p) == len(pairs)
        assert {p.lesion_class for p in val_p} == {p.lesion_class for p in pairs}
        assert not {p.pair_id for p in train_p} & {p.pair_id for p in val_p}

    def test_zero_fraction_reuses_training_pairs(self, pairs):
        train_p, val_p = split_pairs(pairs, 0.0, seed=0)
        assert train_p == val_p == list(pairs)


class TestTraining:
    def test_config_validation(self):
        with pytest.raises(ValidationError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValidationError):
            TrainConfig(lr=0)
        with pytest.raises(ValidationError):
            TrainConfig(plateau_patience=0)

    def test_empty_store(self, tmp_path):
        with pytest.raises(ValidationError):
            train([], TINY, TrainConfig(), tmp_path)

    def test_plateau_schedule_bookkeeping(self, pairs, tmp_path):
        cfg = TrainConfig(epochs=14, plateau_patience=5, plateau_factor=0.5, **QUIET)
        res = train(pairs[:4], TINY, cfg, tmp_path, validator=lambda m, v, e: 0.3)
        lrs = [r["lr"] for r in res.history]
        drops = [r["epoch"] for prev, r in zip(res.history, res.history[1:]) if r["lr"] < prev["lr"]]
        assert drops == [6, 12]
        assert lrs[0] == 1e-3 and lrs[6] == 5e-4 and lrs[12] == 2.5e-4

    def test_logs_checkpoints_and_invariants(self, pairs, tmp_path):
        cfg = TrainConfig(epochs=3, **QUIET)
        res = train(pairs, TINY, cfg, tmp_path)
        lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
        header = json.loads(lines[0])["header"]
        assert header["optimizer"] == "adam" and header["betas"] == [0.9, 0.999]
        records = [json.loads(line) for line in lines[1:]]
        assert [r["epoch"] for r in records] == [0, 1, 2]
        assert set(records[0]) >= {"epoch", "train_loss", "val_iou_per_class", "lr"}
        lrs = [r["lr"] for r in records]
        assert all(b <= a for a, b in zip(lrs, lrs[1:])) and lrs[0] <= cfg.lr
        _, payload = load_model(res.best_checkpoint)
        assert payload["extra"]["val_mean_iou"] == max(r["val_mean_iou"] for r in records)
        assert res.final_checkpoint.is_file()
        assert json.loads((tmp_path / "run_config.json").read_text())["model"]["input_size"] == 32

    @pytest.mark.parametrize("augment_on", [False, True])
    def test_deterministic_runs(self, pairs, tmp_path, augment_on):
        cfg = TrainConfig(epochs=2, **{**QUIET, "augment": augment_on})
        a = train(pairs, TINY, cfg, tmp_path / "a")
        b = train(pairs, TINY, cfg, tmp_path / "b")
        assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
        ma, _ = load_model(a.final_checkpoint)
        mb, _ = load_model(b.final_checkpoint)
        for (ka, va), (_, vb) in zip(ma.state_dict().items(), mb.state_dict().items()):
            assert torch.equal(va, vb), ka

    def test_divergence_keeps_last_checkpoint(self, pairs, tmp_path, monkeypatch):
        calls = {"n": 0}
        real = trainer_mod.compute_loss

        def flaky(prob, gt):
            calls["n"] += 1
            loss = real(prob, gt)
            return loss * float("nan") if calls["n"] > 2 else loss

        monkeypatch.setattr(trainer_mod, "compute_loss", flaky)
        cfg = TrainConfig(epochs=3, **{**QUIET, "batch_size": 16, "val_fraction": 0.0})
        with pytest.raises(DivergenceError):
            train(pairs, TINY, cfg, tmp_path)
        assert (tmp_path / "last.pt").is_file()

    def test_grad_clip_option(self, pairs, tmp_path):
        with pytest.raises(ValidationError):
            TrainConfig(grad_clip=0.0)
        res = train(pairs, TINY, TrainConfig(epochs=1, grad_clip=1.0, **QUIET), tmp_path)
        assert math.isfinite(res.history[0]["train_loss"])
