# Licensed under the MIT license. See LICENSE.md file in the project root for full license information.

"""
Rigid transforms, the four-stage LiDAR-to-camera calibration chain, pinhole
projection and image-bounds masking.

Pixel convention: idx column 0 is the image row (v), column 1 the column (u).
Pixel (r, c) has its centre at coordinates (r, c); bounds are half-open
[0, H) x [0, W) after round-to-nearest.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, List, Optional

import numpy as np

from lifseg.errors import NonRigid, ShapeMismatch

if TYPE_CHECKING:
    from lifseg.data_model import FrameBundle, PointCloud

logger = logging.getLogger(__name__)

ORTHONORMAL_TOL = 1e-9
MIN_DEPTH = 1e-9


def _frozen(array, shape, name) -> np.ndarray:
    out = np.array(array, dtype=np.float64)
    if out.shape != shape:
        raise ShapeMismatch(name, out.shape, shape)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """4x4 homogeneous rigid transform; maps points of a source frame into a target frame."""

    matrix: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "matrix", _frozen(self.matrix, (4, 4), "RigidTransform"))

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(4))

    @classmethod
    def from_rotation_translation(cls, rotation, translation) -> RigidTransform:
        m = np.eye(4)
        m[:3, :3] = np.asarray(rotation, dtype=np.float64)
        m[:3, 3] = np.asarray(translation, dtype=np.float64)
        return cls(m)

    @classmethod
    def translation(cls, t) -> RigidTransform:
        return cls.from_rotation_translation(np.eye(3), t)

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def offset(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def compose(self, other: RigidTransform) -> RigidTransform:
        """Return self . other (apply other first)."""
        return RigidTransform(self.matrix @ other.matrix)

    def apply(self, xyz: np.ndarray) -> np.ndarray:
        xyz = np.asarray(xyz, dtype=np.float64)
        return xyz @ self.rotation.T + self.offset

    def validate(self, tol: float = ORTHONORMAL_TOL) -> None:
        m = self.matrix
        if not np.all(np.isfinite(m)):
            raise NonRigid("transform contains non-finite entries")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise NonRigid(f"last row must be (0, 0, 0, 1), got {m[3].tolist()}")
        r = m[:3, :3]
        err = np.max(np.abs(r.T @ r - np.eye(3)))
        if err > tol:
            raise NonRigid(f"rotation block is not orthonormal (max deviation {err:.3e})")
        det = np.linalg.det(r)
        if abs(det - 1.0) > tol:
            raise NonRigid(f"rotation determinant is {det:.12f}, expected 1")


@dataclass(frozen=True, eq=False)
class CameraIntrinsics:
    """3x4 camera matrix K with K[2] = (0, 0, 1, 0)."""

    matrix: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "matrix", _frozen(self.matrix, (3, 4), "CameraIntrinsics"))

    @classmethod
    def from_pinhole(cls, fx: float, fy: float, cx: float, cy: float) -> CameraIntrinsics:
        return cls(np.array([
            [fx, 0.0, cx, 0.0],
            [0.0, fy, cy, 0.0],
            [0.0, 0.0, 1.0, 0.0],
        ]))

    def validate(self) -> None:
        k = self.matrix
        if not np.all(np.isfinite(k)):
            raise ValueError("intrinsics contain non-finite entries")
        if not np.array_equal(k[2], [0.0, 0.0, 1.0, 0.0]):
            raise ValueError(f"intrinsics last row must be (0, 0, 1, 0), got {k[2].tolist()}")
        if k[0, 0] <= 0 or k[1, 1] <= 0:
            raise ValueError("focal entries K[0][0] and K[1][1] must be positive")


@dataclass(frozen=True, eq=False)
class CalibrationChain:
    """LiDAR -> ego(sweep time) -> global -> ego(image time) -> camera."""

    ego_from_lidar: RigidTransform
    global_from_ego_sweep: RigidTransform
    ego_image_from_global: RigidTransform
    camera_from_ego_image: RigidTransform

    def transforms(self) -> List[RigidTransform]:
        return [self.ego_from_lidar, self.global_from_ego_sweep,
                self.ego_image_from_global, self.camera_from_ego_image]

    def validate(self) -> None:
        for t in self.transforms():
            t.validate()


@dataclass(frozen=True, eq=False)
class PixelCoords:
    idx: np.ndarray
    depth: np.ndarray

    @property
    def rounded(self) -> np.ndarray:
        """Nearest integer pixel per point; garbage where the coords are NaN, so mask first."""
        with np.errstate(invalid="ignore"):
            safe = np.clip(np.nan_to_num(self.idx, nan=-1.0), -1e9, 1e9)
            return np.rint(safe).astype(np.int64)


@dataclass(frozen=True, eq=False)
class VisibilityMask:
    mask: np.ndarray

    @property
    def count(self) -> int:
        return int(self.mask.sum())


def compose_chain(chain: CalibrationChain) -> RigidTransform:
    """T = T(cam<-ego_i) . T(ego_i<-g) . T(g<-ego_s) . T(ego_s<-lidar)."""
    chain.validate()
    m = chain.camera_from_ego_image.matrix @ chain.ego_image_from_global.matrix
    m = m @ chain.global_from_ego_sweep.matrix
    m = m @ chain.ego_from_lidar.matrix
    result = RigidTransform(m)
    result.validate()
    return result


def invert(transform: RigidTransform) -> RigidTransform:
    r = transform.rotation
    t = transform.offset
    return RigidTransform.from_rotation_translation(r.T, -r.T @ t)


def project_xyz(xyz: np.ndarray, transform: RigidTransform, intrinsics: CameraIntrinsics) -> PixelCoords:
    """Project raw N x 3 LiDAR-frame coordinates; see project_points."""
    xyz = np.asarray(xyz, dtype=np.float64)
    homogeneous = np.hstack([xyz, np.ones((xyz.shape[0], 1))])
    camera = homogeneous @ transform.matrix.T
    abw = camera @ intrinsics.matrix.T
    depth = abw[:, 2].copy()
    valid = depth > MIN_DEPTH
    idx = np.full((xyz.shape[0], 2), np.nan)
    idx[valid, 0] = abw[valid, 1] / depth[valid]
    idx[valid, 1] = abw[valid, 0] / depth[valid]
    return PixelCoords(idx=idx, depth=depth)


def project_points(cloud: PointCloud, transform: RigidTransform, intrinsics: CameraIntrinsics) -> PixelCoords:
    """
    idx = K . T . L_xyz for every point.

    Points with camera depth w <= 1e-9 are invalid: their depth is kept and their
    pixel coordinates are NaN.
    """
    return project_xyz(cloud.points[:, :3], transform, intrinsics)


def in_image_mask(coords: PixelCoords, height: int, width: int) -> VisibilityMask:
    rounded = coords.rounded
    with np.errstate(invalid="ignore"):
        mask = (
            (coords.depth > MIN_DEPTH)
            & np.all(np.isfinite(coords.idx), axis=1)
            & (rounded[:, 0] >= 0) & (rounded[:, 0] < height)
            & (rounded[:, 1] >= 0) & (rounded[:, 1] < width)
        )
    return VisibilityMask(mask=mask)


def pixel_ray(row: float, col: float, depth: float, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Camera-frame point that projects to (row, col) at the given depth."""
    k = intrinsics.matrix
    rhs = np.array([col * depth, row * depth, depth]) - k[:, 3]
    return np.linalg.solve(k[:, :3], rhs)


@dataclass(frozen=True, eq=False)
class CameraProjections:
    """Per-camera projections of one cloud plus the owning camera of each point."""

    coords: List[PixelCoords]
    masks: List[VisibilityMask]
    owner: np.ndarray

    @property
    def camera_count(self) -> int:
        return len(self.coords)

    def owner_pixels(self) -> np.ndarray:
        """Fractional pixel position of each point in its owning camera (NaN when unowned)."""
        n = self.owner.shape[0]
        out = np.full((n, 2), np.nan)
        for cam, coords in enumerate(self.coords):
            sel = self.owner == cam
            out[sel] = coords.idx[sel]
        return out


def owning_camera(masks: List[VisibilityMask]) -> np.ndarray:
    """Last camera in index order that sees each point, -1 when none does."""
    n = masks[0].mask.shape[0] if masks else 0
    owner = np.full(n, -1, dtype=np.int64)
    for cam, mask in enumerate(masks):
        owner[mask.mask] = cam
    return owner


def project_bundle(bundle: FrameBundle, cloud: Optional[PointCloud] = None) -> CameraProjections:
    """Project cloud (default: the bundle's own) through every camera of the bundle."""
    cloud = bundle.cloud if cloud is None else cloud
    height, width = bundle.image_shape
    coords, masks = [], []
    for view in bundle.cameras:
        transform = compose_chain(view.chain)
        c = project_points(cloud, transform, view.intrinsics)
        coords.append(c)
        masks.append(in_image_mask(c, height, width))
    owner = owning_camera(masks)
    logger.debug(f"Projected {cloud.count} points into {len(coords)} cameras; "
                 f"{int((owner >= 0).sum())} visible in at least one")
    return CameraProjections(coords=coords, masks=masks, owner=owner)
