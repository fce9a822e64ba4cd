# Licensed under the MIT license. See LICENSE.md file in the project root for full license information.

"""
Small trainable feature extractors with the shape contracts of the fusion
pipeline:

- GridPoolSegmenter: per-point features -> N x C logits, pooling over a
  Cartesian voxel grid (coarse and refinement stages).
- PixelConvSegmenter: n x H x W x 3 images -> n x H x W x C1 features.
- OffsetHead: n x H x W x (C0 + C1) -> n x H x W x 2 pixel offsets.
- PerceptronHead: per-point two-layer head used by the plain mid-fusion variants.

Every module draws its initial weights from its own generator seeded with
(seed, stage), so enabling one stage never changes another stage's weights.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from lifseg import autodiff as ad
from lifseg.context_fusion import PaintedCloud
from lifseg.errors import ShapeMismatch

logger = logging.getLogger(__name__)

STAGE_COARSE = 1
STAGE_IMAGE = 2
STAGE_OFFSET = 3
STAGE_REFINE = 4
STAGE_HEAD = 5


def stage_rng(seed: int, stage: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(stage)])


@dataclass(frozen=True, eq=False)
class VoxelAssignment:
    """Compressed voxel id per point (0..count-1)."""

    index: np.ndarray
    count: int


def voxelize(xyz: np.ndarray, resolution: Sequence[int]) -> VoxelAssignment:
    """
    Bucket points into a resolution[0] x resolution[1] x resolution[2] grid
    spanning their axis-aligned bounding box.
    """
    xyz = np.asarray(xyz, dtype=np.float64)
    if xyz.shape[0] == 0:
        return VoxelAssignment(index=np.zeros(0, dtype=np.int64), count=0)
    res = np.asarray(resolution, dtype=np.int64)
    low = xyz.min(axis=0)
    extent = xyz.max(axis=0) - low
    extent = np.where(extent > 0, extent, 1.0)
    cells = np.floor((xyz - low) / extent * res).astype(np.int64)
    cells = np.clip(cells, 0, res - 1)
    linear = (cells[:, 0] * res[1] + cells[:, 1]) * res[2] + cells[:, 2]
    unique, inverse = np.unique(linear, return_inverse=True)
    return VoxelAssignment(index=inverse.reshape(-1).astype(np.int64), count=int(unique.shape[0]))


class GridPoolSegmenter:
    """
    [x | voxel-mean(x)] -> dense(hidden) -> relu -> dense(out).

    Points sharing a voxel share the pooled half of their input row.
    """

    def __init__(self, in_width: int, out_width: int, hidden: int = 64,
                 grid_resolution: Tuple[int, int, int] = (32, 32, 8),
                 rng: Optional[np.random.Generator] = None, name: str = "coarse"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_width = in_width
        self.out_width = out_width
        self.grid_resolution = tuple(grid_resolution)
        self.name = name
        self.w1 = ad.glorot_uniform(rng, (2 * in_width, hidden), 2 * in_width, hidden, name=f"{name}.w1")
        self.b1 = ad.zeros_parameter((hidden,), name=f"{name}.b1")
        self.w2 = ad.glorot_uniform(rng, (hidden, out_width), hidden, out_width, name=f"{name}.w2")
        self.b2 = ad.zeros_parameter((out_width,), name=f"{name}.b2")

    def parameters(self) -> Dict[str, ad.DenseArray]:
        return {p.name: p for p in (self.w1, self.b1, self.w2, self.b2)}

    def forward(self, features: ad.ArrayLike, voxels: VoxelAssignment) -> ad.DenseArray:
        features = ad.constant(features)
        if features.data.ndim != 2 or features.shape[1] != self.in_width:
            raise ShapeMismatch(f"{self.name} segmenter", features.shape, (voxels.index.shape[0], self.in_width))
        if voxels.index.shape[0] != features.shape[0]:
            raise ShapeMismatch(f"{self.name} voxels", features.shape, voxels.index.shape)
        pooled = ad.gather_rows(ad.scatter_rows_mean(features, voxels.index, voxels.count), voxels.index)
        hidden = ad.relu(ad.dense(ad.concat_lastdim([features, pooled]), self.w1, self.b1))
        return ad.dense(hidden, self.w2, self.b2)


class PixelConvSegmenter:
    """conv3x3(3 -> hidden) -> relu -> conv3x3(hidden -> out)."""

    def __init__(self, in_channels: int = 3, hidden: int = 16, out_channels: int = 16,
                 rng: Optional[np.random.Generator] = None, name: str = "image"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.name = name
        self.k1 = ad.glorot_uniform(rng, (3, 3, in_channels, hidden), 9 * in_channels, 9 * hidden, name=f"{name}.k1")
        self.b1 = ad.zeros_parameter((hidden,), name=f"{name}.b1")
        self.k2 = ad.glorot_uniform(rng, (3, 3, hidden, out_channels), 9 * hidden, 9 * out_channels, name=f"{name}.k2")
        self.b2 = ad.zeros_parameter((out_channels,), name=f"{name}.b2")

    def parameters(self) -> Dict[str, ad.DenseArray]:
        return {p.name: p for p in (self.k1, self.b1, self.k2, self.b2)}

    def forward(self, images: ad.ArrayLike) -> ad.DenseArray:
        images = ad.constant(images)
        if images.data.ndim != 4 or images.shape[3] != self.in_channels:
            raise ShapeMismatch(f"{self.name} segmenter", images.shape, ("n", "H", "W", self.in_channels))
        hidden = ad.relu(ad.conv2d_3x3(images, self.k1, self.b1))
        return ad.conv2d_3x3(hidden, self.k2, self.b2)


class OffsetHead:
    """conv3x3(C0+C1 -> hidden) -> relu -> conv3x3(hidden -> hidden) -> relu -> conv1x1(hidden -> 2)."""

    def __init__(self, in_channels: int, hidden: int = 32,
                 rng: Optional[np.random.Generator] = None, name: str = "offset"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.name = name
        self.k1 = ad.glorot_uniform(rng, (3, 3, in_channels, hidden), 9 * in_channels, 9 * hidden, name=f"{name}.k1")
        self.b1 = ad.zeros_parameter((hidden,), name=f"{name}.b1")
        self.k2 = ad.glorot_uniform(rng, (3, 3, hidden, hidden), 9 * hidden, 9 * hidden, name=f"{name}.k2")
        self.b2 = ad.zeros_parameter((hidden,), name=f"{name}.b2")
        self.k3 = ad.glorot_uniform(rng, (hidden, 2), hidden, 2, name=f"{name}.k3")
        self.b3 = ad.zeros_parameter((2,), name=f"{name}.b3")

    def parameters(self) -> Dict[str, ad.DenseArray]:
        return {p.name: p for p in (self.k1, self.b1, self.k2, self.b2, self.k3, self.b3)}

    def zero_(self) -> OffsetHead:
        """Make the head output an all-zero field."""
        self.k3.data = np.zeros_like(self.k3.data)
        self.b3.data = np.zeros_like(self.b3.data)
        return self

    def forward(self, f_offset: ad.ArrayLike) -> ad.DenseArray:
        f_offset = ad.constant(f_offset)
        if f_offset.data.ndim != 4 or f_offset.shape[3] != self.in_channels:
            raise ShapeMismatch("offset head", f_offset.shape, ("n", "H", "W", self.in_channels))
        x = ad.relu(ad.conv2d_3x3(f_offset, self.k1, self.b1))
        x = ad.relu(ad.conv2d_3x3(x, self.k2, self.b2))
        return ad.conv2d_1x1(x, self.k3, self.b3)


class PerceptronHead:
    """Per-point dense(hidden) -> relu -> dense(out)."""

    def __init__(self, in_width: int, out_width: int, hidden: int = 64,
                 rng: Optional[np.random.Generator] = None, name: str = "head"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_width = in_width
        self.name = name
        self.w1 = ad.glorot_uniform(rng, (in_width, hidden), in_width, hidden, name=f"{name}.w1")
        self.b1 = ad.zeros_parameter((hidden,), name=f"{name}.b1")
        self.w2 = ad.glorot_uniform(rng, (hidden, out_width), hidden, out_width, name=f"{name}.w2")
        self.b2 = ad.zeros_parameter((out_width,), name=f"{name}.b2")

    def parameters(self) -> Dict[str, ad.DenseArray]:
        return {p.name: p for p in (self.w1, self.b1, self.w2, self.b2)}

    def forward(self, features: ad.ArrayLike) -> ad.DenseArray:
        features = ad.constant(features)
        if features.data.ndim != 2 or features.shape[1] != self.in_width:
            raise ShapeMismatch("perceptron head", features.shape, ("N", self.in_width))
        return ad.dense(ad.relu(ad.dense(features, self.w1, self.b1)), self.w2, self.b2)


def scaled_rows(painted: PaintedCloud, coord_scale: float) -> np.ndarray:
    """Painted rows with xyz divided by coord_scale."""
    rows = np.array(painted.rows, dtype=np.float64)
    rows[:, :3] /= coord_scale
    return rows


def coarse_forward(segmenter: GridPoolSegmenter, painted: PaintedCloud,
                   extra: Optional[ad.ArrayLike] = None, voxels: Optional[VoxelAssignment] = None,
                   coord_scale: float = 30.0) -> ad.DenseArray:
    """
    F_coarse = segmenter([painted rows | extra]).

    extra carries per-point image semantics for the early semantic fusion variants.
    """
    if voxels is None:
        voxels = voxelize(painted.rows[:, :3], segmenter.grid_resolution)
    inputs = ad.DenseArray(scaled_rows(painted, coord_scale))
    if extra is not None:
        inputs = ad.concat_lastdim([inputs, extra])
    if inputs.shape[1] != segmenter.in_width:
        raise ShapeMismatch("coarse_forward", inputs.shape, (painted.rows.shape[0], segmenter.in_width))
    return segmenter.forward(inputs, voxels)


def image_forward(segmenter: PixelConvSegmenter, images: ad.ArrayLike) -> ad.DenseArray:
    return segmenter.forward(images)


def offset_forward(head: OffsetHead, f_offset: ad.ArrayLike) -> ad.DenseArray:
    return head.forward(f_offset)


def refine_forward(segmenter: GridPoolSegmenter, fused: ad.ArrayLike, voxels: VoxelAssignment) -> ad.DenseArray:
    return segmenter.forward(fused, voxels)
