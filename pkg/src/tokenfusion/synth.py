"""Deterministic synthetic multimodal datasets with built-in complementarity.

Homogeneous task: a per-token latent field drives a regression target;
each modality sees the latent only on its own token subset (the subsets
partition the grid), plus a visibility flag channel, so no modality can
solve the task alone.  Each target also mixes in the latents of the four
grid neighbors (torus adjacency), which makes cross-token attention
load-bearing: a token that carries information has O(1) marginal value to
its neighbors, so the task protects its score against the l1 pressure,
while empty tokens have none and get pruned.  ``mix_weight=0`` removes
the coupling.

Heterogeneous task: camera-frustum points plus an image patch field.  A
point's target blends a point-local part and the field value at the patch
the point projects to, weighted by a per-point informativeness flag, so
pruning the uninformative points and importing their patch features is
the optimal strategy.  Cameras are stored exactly; the projection chain
recovers each stored ground-truth patch index.

All randomness flows from one seed through a counter-based Philox stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .projection import CameraModel, points_to_patches
from .storage import load_bundle, save_bundle

ALPHA_INFORMATIVE = 0.9
ALPHA_UNINFORMATIVE = 0.1


@dataclass
class HomogeneousConfig:
    num_modalities: int = 2
    grid: int = 8
    latent_channels: int = 4
    train_samples: int = 256
    val_samples: int = 64
    noise_sigma: float = 0.05
    num_classes: int = 4
    mix_weight: float = 2.0
    seed: int = 0

    def validate(self):
        if not 2 <= self.num_modalities <= 4:
            raise ConfigError(f"modalities must be 2..4, got {self.num_modalities}")
        if self.grid < 2:
            raise ConfigError("grid must be at least 2")
        if self.num_classes not in (2, 4):
            raise ConfigError("num_classes must be 2 or 4")
        if min(self.train_samples, self.val_samples) < 1 or self.latent_channels < 1:
            raise ConfigError("sample counts and channels must be positive")

    @property
    def tokens(self) -> int:
        return self.grid * self.grid

    @property
    def channels(self) -> int:
        # latent channels plus the visibility flag
        return self.latent_channels + 1


@dataclass
class HeterogeneousConfig:
    num_points: int = 64
    image_width: int = 64
    image_height: int = 64
    patch_size: int = 8
    point_feature_channels: int = 4
    image_field_channels: int = 6
    train_samples: int = 256
    val_samples: int = 64
    noise_sigma: float = 0.0
    out_of_view_fraction: float = 0.1
    mix_weight: float = 1.0
    seed: int = 0

    def validate(self):
        if self.image_width % self.patch_size or self.image_height % self.patch_size:
            raise ConfigError("image size must be divisible by the patch size")
        if not 0.0 <= self.out_of_view_fraction <= 0.2:
            raise ConfigError("out_of_view_fraction must stay within [0, 0.2]")
        if min(self.num_points, self.train_samples, self.val_samples) < 1:
            raise ConfigError("sample and point counts must be positive")

    @property
    def num_patches(self) -> int:
        return (self.image_width // self.patch_size) * (self.image_height // self.patch_size)

    @property
    def point_channels(self) -> int:
        # features plus the informativeness flag
        return self.point_feature_channels + 1


@dataclass
class Dataset:
    """Loaded dataset: manifest metadata plus per-split arrays."""

    kind: str
    manifest: dict
    arrays: dict

    def split(self, name: str, key: str) -> np.ndarray:
        return self.arrays[f"{key}_{name}"]

    def sample_count(self, name: str) -> int:
        return int(self.manifest["splits"][name])

    def cameras(self, name: str):
        out = []
        for entry in self.manifest["cameras"][name]:
            out.append(CameraModel(
                k=np.array(entry["k"], dtype=np.float64).reshape(4, 4),
                rt=np.array(entry["rt"], dtype=np.float64).reshape(4, 4),
                width=self.manifest["image_width"], height=self.manifest["image_height"],
                patch_size=self.manifest["patch_size"]))
        return out

    def correspondences(self, name: str) -> np.ndarray:
        """Patch index per point via the camera chain, one row per sample."""
        points = self.split(name, "points")
        cams = self.cameras(name)
        return np.stack([points_to_patches(points[i], cams[i]) for i in range(len(cams))])


def _unit(rng, n: int) -> np.ndarray:
    v = rng.standard_normal(n)
    return v / np.linalg.norm(v)


def _orthonormal_pair(rng, n: int):
    a = _unit(rng, n)
    b = rng.standard_normal(n)
    b -= a * (a @ b)
    return a, b / np.linalg.norm(b)


def grid_neighbors(grid: int) -> np.ndarray:
    """4-neighborhood on the torus grid, row-major token order: [N, 4]."""
    n = grid * grid
    idx = np.arange(n)
    row, col = idx // grid, idx % grid
    up = ((row - 1) % grid) * grid + col
    down = ((row + 1) % grid) * grid + col
    left = row * grid + (col - 1) % grid
    right = row * grid + (col + 1) % grid
    return np.stack([up, down, left, right], axis=1)


def gen_homogeneous(cfg: HomogeneousConfig, out_dir=None):
    """Generate the pixel-grid dataset; optionally persist it."""
    cfg.validate()
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(cfg.seed)))
    n, cz, m_count = cfg.tokens, cfg.latent_channels, cfg.num_modalities

    perm = rng.permutation(n)
    visible = np.zeros((m_count, n), dtype=bool)
    for i, tok in enumerate(perm):
        visible[i % m_count, tok] = True

    w_local, w_neighbor = _orthonormal_pair(rng, cz)
    neighbors = grid_neighbors(cfg.grid)

    arrays = {}
    for m in range(m_count):
        arrays[f"visible_m{m}"] = visible[m].astype(np.float64)
    for split, count in (("train", cfg.train_samples), ("val", cfg.val_samples)):
        z = rng.standard_normal((count, n, cz))
        local = z @ w_local
        context = (z @ w_neighbor)[:, neighbors].mean(axis=2)
        y = local + cfg.mix_weight * context
        y_cls = (local > 0).astype(np.int64)
        if cfg.num_classes == 4:
            y_cls = y_cls * 2 + (context > 0).astype(np.int64)
        arrays[f"z_{split}"] = z
        arrays[f"y_{split}"] = y[..., None]
        arrays[f"y_cls_{split}"] = y_cls.astype(np.float64)
        for m in range(m_count):
            noise = rng.standard_normal((count, n, cz)) * cfg.noise_sigma
            x = np.zeros((count, n, cz + 1))
            x[:, visible[m], :cz] = (z + noise)[:, visible[m]]
            x[:, visible[m], cz] = 1.0
            arrays[f"x_m{m}_{split}"] = x

    manifest = {
        "kind": "homogeneous",
        "num_modalities": m_count,
        "grid": cfg.grid,
        "tokens": n,
        "latent_channels": cz,
        "channels": cfg.channels,
        "noise_sigma": cfg.noise_sigma,
        "num_classes": cfg.num_classes,
        "mix_weight": cfg.mix_weight,
        "seed": cfg.seed,
        "modalities": [f"mod{m}" for m in range(m_count)],
        "splits": {"train": cfg.train_samples, "val": cfg.val_samples},
        "target_weights": {"local": w_local.tolist(), "neighbor": w_neighbor.tolist()},
    }
    ds = Dataset(kind="homogeneous", manifest=manifest, arrays=arrays)
    if out_dir is not None:
        save_bundle(out_dir, manifest, arrays, dtype="f4")
    return ds


def _make_camera(cfg: HeterogeneousConfig, rng) -> CameraModel:
    focal = float(rng.uniform(0.8, 1.2)) * min(cfg.image_width, cfg.image_height)
    k = np.eye(4)
    k[0, 0] = k[1, 1] = focal
    k[0, 2] = cfg.image_width / 2.0
    k[1, 2] = cfg.image_height / 2.0
    angle = float(rng.uniform(-0.25, 0.25))
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    t = rng.uniform(-0.5, 0.5, size=3)
    rt = np.eye(4)
    rt[:3, :3] = rot
    rt[:3, 3] = t
    return CameraModel(k=k, rt=rt, width=cfg.image_width, height=cfg.image_height,
                       patch_size=cfg.patch_size)


def _sample_points(cfg: HeterogeneousConfig, cam: CameraModel, rng):
    """World points with known patch targets (-1 for out-of-view)."""
    n = cfg.num_points
    p = cfg.patch_size
    cols = cam.patches_per_row
    fx, fy = cam.k[0, 0], cam.k[1, 1]
    cx, cy = cam.k[0, 2], cam.k[1, 2]
    rt_inv = np.linalg.inv(cam.rt)

    points = np.empty((n, 3))
    gt = np.empty(n, dtype=np.int64)
    for i in range(n):
        out_of_view = rng.random() < cfg.out_of_view_fraction
        if out_of_view and rng.random() < 0.5:
            # behind the camera
            cam_xyz = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-3, -1)])
            gt[i] = -1
        else:
            if out_of_view:
                # in front but off the right edge of the image
                u = cfg.image_width + rng.uniform(5, 40)
                v = rng.uniform(0, cfg.image_height)
                gt[i] = -1
            else:
                patch = int(rng.integers(cam.num_patches))
                px = (patch % cols) * p + int(rng.integers(p))
                py = (patch // cols) * p + int(rng.integers(p))
                u, v = px + 0.5, py + 0.5
                gt[i] = patch
            z = rng.uniform(1.0, 4.0)
            cam_xyz = np.array([(u - cx) * z / fx, (v - cy) * z / fy, z])
        world = rt_inv @ np.append(cam_xyz, 1.0)
        points[i] = world[:3]
    return points, gt


def gen_heterogeneous(cfg: HeterogeneousConfig, out_dir=None):
    """Generate point+image scenes with exact cameras; optionally persist."""
    cfg.validate()
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(cfg.seed)))
    n, cp, cv = cfg.num_points, cfg.point_feature_channels, cfg.image_field_channels

    w_point = _unit(rng, cp)
    w_field = _unit(rng, cv)
    w_img = _unit(rng, cv)
    w_mix = _unit(rng, cp)

    arrays = {}
    cameras = {"train": [], "val": []}
    for split, count in (("train", cfg.train_samples), ("val", cfg.val_samples)):
        points = np.empty((count, n, 3))
        gt = np.empty((count, n), dtype=np.int64)
        feats = np.empty((count, n, cp))
        alpha = np.empty((count, n))
        fields = np.empty((count, cfg.num_patches, cv))
        for i in range(count):
            cam = _make_camera(cfg, rng)
            cameras[split].append({"k": cam.k.reshape(-1).tolist(),
                                   "rt": cam.rt.reshape(-1).tolist()})
            pts, g = _sample_points(cfg, cam, rng)
            recovered = points_to_patches(pts, cam)
            if not np.array_equal(recovered, g):
                raise ConfigError("generator self-consistency failed: projection "
                                  "does not recover the constructed patch index")
            points[i], gt[i] = pts, g
            feats[i] = rng.standard_normal((n, cp))
            alpha[i] = np.where(rng.random(n) < 0.5, ALPHA_INFORMATIVE, ALPHA_UNINFORMATIVE)
            fields[i] = rng.standard_normal((cfg.num_patches, cv))

        informative = (alpha > 0.5).astype(np.float64)
        local = feats @ w_point
        patch_term = np.where(gt >= 0,
                              np.take_along_axis(fields @ w_field,
                                                 np.maximum(gt, 0), axis=1), 0.0)
        mix = (informative * (feats @ w_mix)).sum(axis=1, keepdims=True) / np.sqrt(n)
        y_point = alpha * local + (1.0 - alpha) * patch_term + cfg.mix_weight * 0.5 * mix
        y_img = fields @ w_img

        x_point = np.concatenate(
            [feats + rng.standard_normal(feats.shape) * cfg.noise_sigma, alpha[..., None]],
            axis=-1)
        x_img = fields + rng.standard_normal(fields.shape) * cfg.noise_sigma

        arrays[f"points_{split}"] = points
        arrays[f"gt_patch_{split}"] = gt.astype(np.float64)
        arrays[f"alpha_{split}"] = alpha
        arrays[f"point_latent_{split}"] = feats
        arrays[f"field_{split}"] = fields
        arrays[f"x_point_{split}"] = x_point
        arrays[f"x_image_{split}"] = x_img
        arrays[f"y_point_{split}"] = y_point[..., None]
        arrays[f"y_image_{split}"] = y_img[..., None]

    manifest = {
        "kind": "heterogeneous",
        "num_points": n,
        "image_width": cfg.image_width,
        "image_height": cfg.image_height,
        "patch_size": cfg.patch_size,
        "num_patches": cfg.num_patches,
        "point_channels": cfg.point_channels,
        "point_feature_channels": cp,
        "image_field_channels": cv,
        "noise_sigma": cfg.noise_sigma,
        "out_of_view_fraction": cfg.out_of_view_fraction,
        "mix_weight": cfg.mix_weight,
        "seed": cfg.seed,
        "splits": {"train": cfg.train_samples, "val": cfg.val_samples},
        "cameras": cameras,
        "target_weights": {"point": w_point.tolist(), "field": w_field.tolist(),
                           "image": w_img.tolist(), "mix": w_mix.tolist()},
    }
    ds = Dataset(kind="heterogeneous", manifest=manifest, arrays=arrays)
    if out_dir is not None:
        save_bundle(out_dir, manifest, arrays, dtype="f4")
    return ds


def load_dataset(directory) -> Dataset:
    manifest, arrays = load_bundle(directory)
    kind = manifest.get("kind")
    if kind not in ("homogeneous", "heterogeneous"):
        raise ConfigError(f"not a dataset bundle: kind={kind!r}")
    return Dataset(kind=kind, manifest=manifest, arrays=arrays)
