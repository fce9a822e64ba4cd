# Licensed under the MIT license. See LICENSE.md file in the project root for full license information.

"""Core domain types shared by every lifseg module."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from lifseg.errors import InvalidBundle, NonRigid
from lifseg.geometry import CalibrationChain, CameraIntrinsics


def _readonly(array, dtype) -> np.ndarray:
    out = np.array(array, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class PointCloud:
    """N x D points (x, y, z in metres, then intensity and optional channels) with optional labels."""

    points: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "points", _readonly(self.points, np.float64))
        if self.labels is not None:
            object.__setattr__(self, "labels", _readonly(self.labels, np.int64))

    @property
    def count(self) -> int:
        return int(self.points.shape[0])

    @property
    def dim(self) -> int:
        return int(self.points.shape[1]) if self.points.ndim == 2 else 0

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]


@dataclass(frozen=True, eq=False)
class CameraImage:
    pixels: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "pixels", _readonly(self.pixels, np.float64))

    @property
    def shape(self) -> Tuple[int, int]:
        return int(self.pixels.shape[0]), int(self.pixels.shape[1])


@dataclass(frozen=True)
class Box2D:
    """Inclusive pixel rectangle around one foreground instance."""

    min_row: int
    min_col: int
    max_row: int
    max_col: int
    class_id: int
    instance_id: int

    @property
    def area(self) -> int:
        return (self.max_row - self.min_row + 1) * (self.max_col - self.min_col + 1)

    @property
    def center(self) -> Tuple[float, float]:
        return (self.min_row + self.max_row) / 2.0, (self.min_col + self.max_col) / 2.0

    def contains(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        return ((rows >= self.min_row) & (rows <= self.max_row)
                & (cols >= self.min_col) & (cols <= self.max_col))

    def to_dict(self) -> dict:
        return {
            "min_row": self.min_row, "min_col": self.min_col,
            "max_row": self.max_row, "max_col": self.max_col,
            "class_id": self.class_id, "instance_id": self.instance_id,
        }

    @classmethod
    def from_dict(cls, data: dict) -> Box2D:
        return cls(**{k: int(data[k]) for k in
                      ("min_row", "min_col", "max_row", "max_col", "class_id", "instance_id")})


@dataclass(frozen=True, eq=False)
class CameraView:
    """Everything known about one camera for one frame."""

    image: CameraImage
    chain: CalibrationChain
    intrinsics: CameraIntrinsics
    boxes: List[Box2D] = field(default_factory=list)


@dataclass(frozen=True, eq=False)
class FrameBundle:
    """One synchronized sample: a point cloud and n camera views."""

    cloud: PointCloud
    cameras: List[CameraView]
    class_count: int
    gt_offsets: Optional[np.ndarray] = None
    lidar_timestamp: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "cameras", list(self.cameras))
        if self.gt_offsets is not None:
            object.__setattr__(self, "gt_offsets", _readonly(self.gt_offsets, np.float64))

    @property
    def camera_count(self) -> int:
        return len(self.cameras)

    @property
    def image_shape(self) -> Tuple[int, int]:
        return self.cameras[0].image.shape

    def images(self) -> np.ndarray:
        """Stacked n x H x W x 3 pixel array."""
        return np.stack([view.image.pixels for view in self.cameras])


def validate(bundle: FrameBundle) -> None:
    """
    Check every type invariant of a FrameBundle.

    Raises:
        InvalidBundle: naming the first violated invariant.
    """
    cloud = bundle.cloud
    points = cloud.points
    if points.ndim != 2 or points.shape[1] < 3:
        raise InvalidBundle("D ≥ 3")
    if not np.all(np.isfinite(points[:, :3])):
        raise InvalidBundle("finite coordinates")
    if points.shape[1] >= 4:
        intensity = points[:, 3]
        if np.any(~np.isfinite(intensity)) or np.any(intensity < 0.0) or np.any(intensity > 1.0):
            raise InvalidBundle("intensity in [0,1]")
    if bundle.class_count < 2:
        raise InvalidBundle("C ≥ 2")
    if cloud.labels is not None:
        if cloud.labels.shape != (points.shape[0],):
            raise InvalidBundle("label length")
        if cloud.labels.size and (cloud.labels.min() < 0 or cloud.labels.max() >= bundle.class_count):
            raise InvalidBundle("label range")
    if not bundle.cameras:
        raise InvalidBundle("n ≥ 1")

    shape = None
    for i, view in enumerate(bundle.cameras):
        pixels = view.image.pixels
        if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.shape[0] < 1 or pixels.shape[1] < 1:
            raise InvalidBundle(f"camera {i}: image shape H×W×3")
        if np.any(~np.isfinite(pixels)) or np.any(pixels < 0.0) or np.any(pixels > 1.0):
            raise InvalidBundle(f"camera {i}: pixel values in [0,1]")
        if shape is None:
            shape = pixels.shape[:2]
        elif pixels.shape[:2] != shape:
            raise InvalidBundle("identical (H, W) across cameras")
        try:
            view.chain.validate()
        except NonRigid as e:
            raise InvalidBundle(f"camera {i}: rigid calibration ({e})") from e
        try:
            view.intrinsics.validate()
        except ValueError as e:
            raise InvalidBundle(f"camera {i}: intrinsics ({e})") from e
        height, width = shape
        for box in view.boxes:
            if not (0 <= box.min_row <= box.max_row < height and 0 <= box.min_col <= box.max_col < width):
                raise InvalidBundle(f"camera {i}: box {box.instance_id} inside image")
            if not 0 <= box.class_id < bundle.class_count:
                raise InvalidBundle(f"camera {i}: box {box.instance_id} class range")

    if bundle.gt_offsets is not None:
        if bundle.gt_offsets.shape != (points.shape[0], 2):
            raise InvalidBundle("gt_offsets shape N×2")
        if not np.all(np.isfinite(bundle.gt_offsets)):
            raise InvalidBundle("gt_offsets finite")
