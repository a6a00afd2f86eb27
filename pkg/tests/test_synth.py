import hashlib
import json
from pathlib import Path

import numpy as np
import numpy.testing as npt
import pytest

from tokenfusion.errors import ConfigError
from tokenfusion.projection import points_to_patches
from tokenfusion.synth import (
    HeterogeneousConfig,
    HomogeneousConfig,
    gen_heterogeneous,
    gen_homogeneous,
    load_dataset,
)


def dir_digest(path: Path) -> str:
    h = hashlib.sha256()
    for f in sorted(path.iterdir()):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


class TestHomogeneous:
    def test_visible_masks_cover_and_barely_overlap(self):
        for m_count in (2, 3, 4):
            cfg = HomogeneousConfig(num_modalities=m_count, grid=6, train_samples=4,
                                    val_samples=2, seed=3)
            ds = gen_homogeneous(cfg)
            masks = [ds.arrays[f"visible_m{m}"].astype(bool) for m in range(m_count)]
            union = np.zeros(cfg.tokens, dtype=bool)
            for mask in masks:
                union |= mask
            assert union.all()
            for i in range(m_count):
                for j in range(i + 1, m_count):
                    overlap = (masks[i] & masks[j]).sum()
                    assert overlap <= 0.25 * cfg.tokens

    def test_hidden_tokens_are_zero(self):
        cfg = HomogeneousConfig(grid=4, train_samples=8, val_samples=2, seed=4,
                                noise_sigma=0.0)
        ds = gen_homogeneous(cfg)
        for m in range(2):
            x = ds.arrays[f"x_m{m}_train"]
            hidden = ~ds.arrays[f"visible_m{m}"].astype(bool)
            npt.assert_array_equal(x[:, hidden, :], 0.0)
            visible = ~hidden
            z = ds.arrays["z_train"]
            npt.assert_allclose(x[:, visible, :-1], z[:, visible], atol=1e-12)
            npt.assert_array_equal(x[:, visible, -1], 1.0)

    def test_same_seed_bitwise_identical(self, tmp_path):
        cfg = HomogeneousConfig(grid=4, train_samples=8, val_samples=4, seed=11)
        gen_homogeneous(cfg, tmp_path / "a")
        gen_homogeneous(cfg, tmp_path / "b")
        assert dir_digest(tmp_path / "a") == dir_digest(tmp_path / "b")
        other = HomogeneousConfig(grid=4, train_samples=8, val_samples=4, seed=12)
        gen_homogeneous(other, tmp_path / "c")
        assert dir_digest(tmp_path / "a") != dir_digest(tmp_path / "c")

    def test_least_squares_complementarity_oracle(self):
        # per-token linear fits: joint modalities must beat each single one
        cfg = HomogeneousConfig(grid=6, train_samples=512, val_samples=2, seed=13)
        ds = gen_homogeneous(cfg)
        x = [ds.arrays["x_m0_train"], ds.arrays["x_m1_train"]]
        y = ds.arrays["y_train"][..., 0]
        n = cfg.tokens

        def fit_mse(features):
            total = 0.0
            for tok in range(n):
                a = np.concatenate([f[:, tok, :] for f in features] +
                                   [np.ones((512, 1))], axis=1)
                coef, *_ = np.linalg.lstsq(a, y[:, tok], rcond=None)
                total += float(np.mean((a @ coef - y[:, tok]) ** 2))
            return total / n

        joint = fit_mse(x)
        single0 = fit_mse([x[0]])
        single1 = fit_mse([x[1]])
        assert joint < single0
        assert joint < single1

    def test_roundtrip_through_files(self, tmp_path):
        cfg = HomogeneousConfig(grid=4, train_samples=6, val_samples=3, seed=14)
        ds = gen_homogeneous(cfg, tmp_path)
        loaded = load_dataset(tmp_path)
        assert loaded.kind == "homogeneous"
        assert loaded.sample_count("train") == 6
        # files are float32, so compare after the same truncation
        npt.assert_array_equal(loaded.arrays["y_train"],
                               ds.arrays["y_train"].astype(np.float32).astype(np.float64))

    def test_class_targets(self):
        cfg = HomogeneousConfig(grid=4, train_samples=32, val_samples=4, seed=15,
                                num_classes=4)
        ds = gen_homogeneous(cfg)
        y_cls = ds.arrays["y_cls_train"]
        assert set(np.unique(y_cls)) <= {0.0, 1.0, 2.0, 3.0}

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            gen_homogeneous(HomogeneousConfig(num_modalities=5))
        with pytest.raises(ConfigError):
            gen_homogeneous(HomogeneousConfig(num_classes=3))


class TestHeterogeneous:
    def test_projection_self_consistency(self):
        cfg = HeterogeneousConfig(num_points=32, train_samples=8, val_samples=2, seed=21)
        ds = gen_heterogeneous(cfg)
        for split in ("train", "val"):
            stored = ds.arrays[f"gt_patch_{split}"].astype(np.int64)
            recovered = ds.correspondences(split)
            npt.assert_array_equal(recovered, stored)

    def test_in_view_fraction(self):
        cfg = HeterogeneousConfig(num_points=64, train_samples=16, val_samples=4, seed=22)
        ds = gen_heterogeneous(cfg)
        gt = ds.arrays["gt_patch_train"]
        assert (gt >= 0).mean() >= 0.8

    def test_zero_noise_target_reconstruction(self):
        cfg = HeterogeneousConfig(num_points=16, train_samples=4, val_samples=2, seed=23,
                                  noise_sigma=0.0, mix_weight=0.0)
        ds = gen_heterogeneous(cfg)
        w = ds.manifest["target_weights"]
        feats = ds.arrays["point_latent_train"]
        fields = ds.arrays["field_train"]
        alpha = ds.arrays["alpha_train"]
        gt = ds.arrays["gt_patch_train"].astype(np.int64)
        y = ds.arrays["y_point_train"][..., 0]
        for s in range(4):
            for p in range(16):
                local = feats[s, p] @ np.array(w["point"])
                patch = fields[s, gt[s, p]] @ np.array(w["field"]) if gt[s, p] >= 0 else 0.0
                expected = alpha[s, p] * local + (1 - alpha[s, p]) * patch
                assert abs(y[s, p] - expected) < 1e-12

    def test_same_seed_identical_files(self, tmp_path):
        cfg = HeterogeneousConfig(num_points=16, train_samples=4, val_samples=2, seed=24)
        gen_heterogeneous(cfg, tmp_path / "a")
        gen_heterogeneous(cfg, tmp_path / "b")
        assert dir_digest(tmp_path / "a") == dir_digest(tmp_path / "b")

    def test_camera_matrices_in_manifest(self, tmp_path):
        cfg = HeterogeneousConfig(num_points=8, train_samples=3, val_samples=2, seed=25)
        gen_heterogeneous(cfg, tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert len(manifest["cameras"]["train"]) == 3
        assert len(manifest["cameras"]["train"][0]["k"]) == 16
        assert len(manifest["cameras"]["train"][0]["rt"]) == 16
        # cameras survive the JSON roundtrip exactly
        ds = gen_heterogeneous(cfg)
        loaded = load_dataset(tmp_path)
        for a, b in zip(ds.manifest["cameras"]["train"], loaded.manifest["cameras"]["train"]):
            npt.assert_array_equal(np.array(a["k"]), np.array(b["k"]))
            npt.assert_array_equal(np.array(a["rt"]), np.array(b["rt"]))

    def test_alpha_flag_present_in_inputs(self):
        cfg = HeterogeneousConfig(num_points=16, train_samples=4, val_samples=2, seed=26,
                                  noise_sigma=0.0)
        ds = gen_heterogeneous(cfg)
        x = ds.arrays["x_point_train"]
        alpha = ds.arrays["alpha_train"]
        npt.assert_array_equal(x[..., -1], alpha)

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            gen_heterogeneous(HeterogeneousConfig(image_width=60, patch_size=16))
        with pytest.raises(ConfigError):
            gen_heterogeneous(HeterogeneousConfig(out_of_view_fraction=0.5))
