# Licensed under the MIT license. See LICENSE.md file in the project root for full license information.

"""
Coarse-stage early fusion: paint every LiDAR point with the w x w RGB window
around its projection.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from lifseg.data_model import CameraImage, FrameBundle, PointCloud
from lifseg.errors import BadWindow, ShapeMismatch
from lifseg.geometry import CameraProjections, PixelCoords, VisibilityMask, project_bundle

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ContextPatch:
    """N_i x w x w x 3 windows for the visible points of one camera, in point order."""

    values: np.ndarray

    @property
    def window(self) -> int:
        return int(self.values.shape[1])

    def flattened(self) -> np.ndarray:
        """N_i x 3w^2 rows, window row-major then RGB."""
        return self.values.reshape(self.values.shape[0], -1)


@dataclass(frozen=True, eq=False)
class PaintedCloud:
    rows: np.ndarray
    point_dim: int
    window: int

    @property
    def width(self) -> int:
        return int(self.rows.shape[1])

    @property
    def context(self) -> np.ndarray:
        return self.rows[:, self.point_dim:]


def check_window(w: int) -> None:
    if not isinstance(w, (int, np.integer)) or w < 1 or w % 2 == 0:
        raise BadWindow(f"context window must be an odd integer >= 1, got {w!r}")


def sample_context(image: CameraImage, coords: PixelCoords, mask: VisibilityMask, w: int) -> ContextPatch:
    """
    Gather the w x w window centred on each visible point's rounded pixel.

    Window cells falling outside the image are zero.
    """
    check_window(w)
    if mask.mask.shape[0] != coords.idx.shape[0]:
        raise ShapeMismatch("sample_context", coords.idx.shape, mask.mask.shape)
    radius = w // 2
    padded = np.pad(image.pixels, ((radius, radius), (radius, radius), (0, 0)))
    centers = coords.rounded[mask.mask]
    steps = np.arange(w)
    rows = centers[:, 0][:, None, None] + steps[None, :, None]
    cols = centers[:, 1][:, None, None] + steps[None, None, :]
    return ContextPatch(values=padded[rows, cols])


def paint(cloud: PointCloud, frames: FrameBundle, w: int,
          projections: Optional[CameraProjections] = None) -> PaintedCloud:
    """
    Append 3w^2 context columns to every point.

    Cameras are visited in index order and each overwrites the context of the
    points it sees, so a point seen by several cameras keeps the last one's
    window. Points seen by no camera get zeros. The cloud is projected through
    the frames' cameras; precomputed projections must cover exactly its points.
    """
    check_window(w)
    if projections is None:
        projections = project_bundle(frames, cloud)
    for mask in projections.masks:
        if mask.mask.shape != (cloud.count,):
            raise ShapeMismatch("paint", (cloud.count,), mask.mask.shape)
    context = np.zeros((cloud.count, 3 * w * w))
    for view, coords, mask in zip(frames.cameras, projections.coords, projections.masks):
        patch = sample_context(view.image, coords, mask, w)
        context[mask.mask] = patch.flattened()
    visible = int(np.any([m.mask for m in projections.masks], axis=0).sum()) if projections.masks else 0
    if visible == 0:
        logger.warning(f"No point of {cloud.count} is visible in any camera; context columns are all zero")
    else:
        logger.debug(f"Painted {visible}/{cloud.count} points with {w}x{w} context")
    return PaintedCloud(rows=np.hstack([cloud.points, context]), point_dim=cloud.dim, window=w)
