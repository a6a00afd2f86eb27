"""Inter-modal alignment: token/modality projections and camera geometry.

Homogeneous modalities share a token grid, so the projection is an
identity lookup at the same position.  Heterogeneous modalities map a 3D
point to an image patch through the camera matrices and pass the source
feature through a small learned adapter.

Points behind the camera or landing outside the image resolve to "no
substitution": the caller keeps the original token.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ContractError

# sentinel patch index for unresolved correspondences
UNRESOLVED = -1


@dataclass
class CameraModel:
    """Pinhole camera: 4x4 intrinsics K and extrinsics Rt, plus patch grid."""

    k: np.ndarray
    rt: np.ndarray
    width: int
    height: int
    patch_size: int

    def __post_init__(self):
        self.k = np.asarray(self.k, dtype=np.float64).reshape(4, 4)
        self.rt = np.asarray(self.rt, dtype=np.float64).reshape(4, 4)
        if not (np.all(np.isfinite(self.k)) and np.all(np.isfinite(self.rt))):
            raise ConfigError("camera matrices must be finite")
        if self.width % self.patch_size or self.height % self.patch_size:
            raise ConfigError(
                f"image {self.width}x{self.height} not divisible by patch size {self.patch_size}"
            )

    @property
    def patches_per_row(self) -> int:
        return self.width // self.patch_size

    @property
    def num_patches(self) -> int:
        return (self.width // self.patch_size) * (self.height // self.patch_size)


def project_point(point, cam: CameraModel):
    """Project a 3D point to integer pixel coordinates.

    [u, v, z]^T are the first three rows of K Rt [x, y, z, 1]^T; the pixel
    is (floor(u/z), floor(v/z)).  Returns None when the projected depth is
    not positive (point behind the camera).
    """
    p = np.concatenate([np.asarray(point, dtype=np.float64).reshape(3), [1.0]])
    uvzw = cam.k @ (cam.rt @ p)
    u, v, z = uvzw[0], uvzw[1], uvzw[2]
    if z <= 0:
        return None
    return int(np.floor(u / z)), int(np.floor(v / z))


def pixel_to_patch(pixel, cam: CameraModel) -> int:
    """Row-major patch index for a pixel; UNRESOLVED when outside the image."""
    px, py = pixel
    if not (0 <= px < cam.width and 0 <= py < cam.height):
        return UNRESOLVED
    return (py // cam.patch_size) * cam.patches_per_row + (px // cam.patch_size)


def point_to_patch(point, cam: CameraModel) -> int:
    """Full chain: camera projection then patch lookup."""
    pixel = project_point(point, cam)
    if pixel is None:
        return UNRESOLVED
    return pixel_to_patch(pixel, cam)


def points_to_patches(points: np.ndarray, cam: CameraModel) -> np.ndarray:
    """Vectorized point_to_patch over an [N, 3] array (UNRESOLVED entries kept)."""
    pts = np.asarray(points, dtype=np.float64)
    homo = np.concatenate([pts, np.ones((pts.shape[0], 1))], axis=1)
    uvzw = homo @ (cam.k @ cam.rt).T
    z = uvzw[:, 2]
    out = np.full(pts.shape[0], UNRESOLVED, dtype=np.int64)
    front = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        px = np.floor(uvzw[:, 0] / z).astype(np.int64, copy=False)
        py = np.floor(uvzw[:, 1] / z).astype(np.int64, copy=False)
    inside = front & (px >= 0) & (px < cam.width) & (py >= 0) & (py < cam.height)
    out[inside] = (py[inside] // cam.patch_size) * cam.patches_per_row + (
        px[inside] // cam.patch_size
    )
    return out


@dataclass
class AdapterMLP:
    """Two-layer GELU adapter mapping source channels onto target channels."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    name: str = field(default="adapter")

    @classmethod
    def create(cls, in_channels: int, out_channels: int, rng: np.random.Generator,
               name: str = "adapter", dtype=np.float64) -> "AdapterMLP":
        hidden = max(in_channels, out_channels)

        def linear(fan_in, fan_out):
            scale = np.sqrt(2.0 / (fan_in + fan_out))
            return Tensor(rng.standard_normal((fan_in, fan_out)) * scale,
                          requires_grad=True, dtype=dtype)

        return cls(
            w1=linear(in_channels, hidden),
            b1=Tensor(np.zeros(hidden), requires_grad=True, dtype=dtype),
            w2=linear(hidden, out_channels),
            b2=Tensor(np.zeros(out_channels), requires_grad=True, dtype=dtype),
            name=name,
        )

    def __call__(self, x: Tensor) -> Tensor:
        return ag.gelu(x @ self.w1 + self.b1) @ self.w2 + self.b2

    def parameters(self):
        return [(f"{self.name}.w1", self.w1), (f"{self.name}.b1", self.b1),
                (f"{self.name}.w2", self.w2), (f"{self.name}.b2", self.b2)]


def token_projection(source: Tensor, n_target: int, correspondence, adapter=None):
    """Feature a target token would receive from the source modality.

    ``correspondence`` is either the string "homogeneous" (same position,
    identity adapter unless one is given) or an integer source index
    resolved from camera geometry (UNRESOLVED for no substitution).
    Returns None when the correspondence is unresolved.
    """
    if correspondence == "homogeneous":
        n_source = n_target
    else:
        n_source = int(correspondence)
        if n_source == UNRESOLVED:
            return None
    row = ag.take_tokens(source, np.array([n_source]))
    if adapter is not None:
        row = adapter(row)
    return row.reshape(row.shape[-1])


def modality_projection(source: Tensor, num_targets: int, correspondence=None, adapter=None):
    """Stack token projections for all target tokens.

    Returns ``(features, resolved)``: features is a [num_targets, C]
    tensor (rows for unresolved targets are zero and must not be used),
    resolved is a boolean mask the fusion stage folds into its keep mask.
    Homogeneous mode (``correspondence is None``) copies the whole source.
    """
    if correspondence is None:
        if source.shape[-2] != num_targets:
            raise ContractError(
                f"homogeneous projection needs matching token counts, "
                f"got {source.shape[-2]} source vs {num_targets} target"
            )
        out = adapter(source) if adapter is not None else source
        return out, np.ones(num_targets, dtype=bool)

    idx = np.asarray(correspondence, dtype=np.int64)
    if idx.shape[-1] != num_targets:
        raise ContractError(f"correspondence length {idx.shape} != targets {num_targets}")
    resolved = idx != UNRESOLVED
    safe_idx = np.where(resolved, idx, 0)
    gathered = ag.take_tokens(source, safe_idx)
    if adapter is not None:
        gathered = adapter(gathered)
    return gathered, resolved
