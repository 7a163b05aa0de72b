"""Per-point feature construction: projection features, 2D-to-3D AdaIN, concatenation."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, DomainError, ShapeError
from .tensor import Tensor

FEATURE_MODES = ("full", "projection_only", "adain_only")


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    near: float = 1.0
    far: float = 3.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.near < self.far):
            raise ConfigError(f"need 0 < near < far, got near={self.near}, far={self.far}")

    @classmethod
    def default(cls, image_size=(64, 64), near=1.0, far=3.0) -> "CameraIntrinsics":
        """Square pixels, principal point at the image centre, ~53 deg horizontal FOV."""
        h, w = image_size
        return cls(fx=float(w), fy=float(w), cx=w / 2.0, cy=h / 2.0, near=near, far=far)

    def to_dict(self) -> dict:
        return asdict(self)

    def project_numpy(self, pts: np.ndarray) -> np.ndarray:
        """(N, 3) camera-frame points -> (N, 2) full-image pixel coordinates."""
        pts = np.asarray(pts, dtype=np.float64)
        return np.stack([self.fx * pts[:, 0] / pts[:, 2] + self.cx,
                         self.fy * pts[:, 1] / pts[:, 2] + self.cy], axis=1)


def project_points(cloud: Tensor, cam: CameraIntrinsics, map_shape: Tuple[int, int],
                   image_shape: Tuple[int, int]) -> Tensor:
    """Pinhole projection into the continuous grid of a (h_i, w_i) feature map."""
    if cloud.ndim != 2 or cloud.shape[1] != 3:
        raise ShapeError(f"project_points expects (N, 3), got {cloud.shape}")
    z = cloud.data[:, 2]
    if z.size and (not np.all(np.isfinite(z)) or z.min() < cam.near):
        bad = int(np.argmin(np.where(np.isfinite(z), z, -np.inf)))
        raise DomainError(f"point {bad} has depth {z[bad]!r} < near plane {cam.near}")
    h_i, w_i = map_shape
    H, W = image_shape
    dt = cloud.dtype
    focal = np.array([[cam.fx * w_i / W, cam.fy * h_i / H]], dtype=dt)
    centre = np.array([[cam.cx * w_i / W, cam.cy * h_i / H]], dtype=dt)
    return cloud[:, 0:2] / cloud[:, 2:3] * focal + centre


def projection_features(cloud: Tensor, cam: CameraIntrinsics, pyramid: Sequence[Tensor],
                        image_shape: Tuple[int, int]) -> List[Tensor]:
    return [T.bilinear_sample(fmap, project_points(cloud, cam, fmap.shape[1:], image_shape))
            for fmap in pyramid]


def adain_2d_to_3d(fmap: Tensor, point_feats: Tensor) -> Tensor:
    """Renormalize point features to the per-channel mean/std of an image feature map.

    ``sigma_X * (y - mu_Y) / sigma_Y + mu_X`` per channel; image statistics run
    over spatial locations, point statistics over the N points.
    """
    if fmap.ndim != 3 or point_feats.ndim != 2 or fmap.shape[0] != point_feats.shape[1]:
        raise ShapeError(f"AdaIN channel mismatch: map {fmap.shape}, points {point_feats.shape}")
    if point_feats.shape[0] == 0:
        raise DomainError("AdaIN needs at least one point")
    mu_x, sd_x = T.reduce_stats(fmap, (1, 2))
    mu_y, sd_y = T.reduce_stats(point_feats, 0, canonical=True)
    return (point_feats - mu_y) / sd_y * sd_x + mu_x


def blend(cloud: Tensor, cam: CameraIntrinsics, pyramid: Sequence[Tensor], mlp_features: Sequence[Tensor],
          image_shape: Tuple[int, int], mode: str = "full") -> Tensor:
    """Concatenate [AdaIN_1..S | projection_1..S | xyz] per point.

    ``mode`` drops the AdaIN or projection blocks for ablations; xyz is kept.
    """
    if mode not in FEATURE_MODES:
        raise ConfigError(f"unknown feature mode {mode!r}; expected one of {FEATURE_MODES}")
    if len(pyramid) != len(mlp_features):
        raise ShapeError(f"{len(pyramid)} feature maps but {len(mlp_features)} point feature sets")
    for i, (fmap, feats) in enumerate(zip(pyramid, mlp_features)):
        if feats.shape != (cloud.shape[0], fmap.shape[0]):
            raise ShapeError(f"scale {i}: point features {feats.shape} do not match "
                             f"({cloud.shape[0]}, {fmap.shape[0]})")
    blocks = []
    if mode in ("full", "adain_only"):
        blocks += [adain_2d_to_3d(fmap, feats) for fmap, feats in zip(pyramid, mlp_features)]
    if mode in ("full", "projection_only"):
        blocks += projection_features(cloud, cam, pyramid, image_shape)
    blocks.append(cloud)
    return T.concat(blocks, axis=1)


def feature_width(channels: Sequence[int], mode: str = "full") -> int:
    c = sum(channels)
    return {"full": 2 * c + 3, "projection_only": c + 3, "adain_only": c + 3}[mode]


def block_slices(channels: Sequence[int], mode: str = "full") -> List[Tuple[str, slice]]:
    """Column ranges of each block in the blended feature, in concatenation order."""
    names = []
    if mode in ("full", "adain_only"):
        names += [(f"adain_{i}", c) for i, c in enumerate(channels)]
    if mode in ("full", "projection_only"):
        names += [(f"projection_{i}", c) for i, c in enumerate(channels)]
    names.append(("xyz", 3))
    out, start = [], 0
    for name, width in names:
        out.append((name, slice(start, start + width)))
        start += width
    return out
