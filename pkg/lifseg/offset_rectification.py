# Licensed under the MIT license. See LICENSE.md file in the project root for full license information.

"""
Offset learning stage: scatter coarse point features to per-camera
pseudo-images, predict a per-pixel offset field, and gather image features at
offset-corrected pixels. Also builds the supervision targets and the two
auxiliary losses that train the offset head.

A point's owning camera is the last camera in index order that sees it; the
same camera supplies its painted context, its offset and its target.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from lifseg import autodiff as ad
from lifseg.data_model import FrameBundle
from lifseg.errors import ShapeMismatch
from lifseg.geometry import PixelCoords, VisibilityMask, owning_camera

logger = logging.getLogger(__name__)

DIRECTION_EPS = 1e-8


@dataclass(frozen=True, eq=False)
class PseudoImage:
    """n x H x W x C0 coarse features; source_rows holds the point index per cell, -1 when empty."""

    features: ad.DenseArray
    source_rows: np.ndarray


@dataclass(frozen=True, eq=False)
class PointwiseOffset:
    """N x 2 offsets (row, col) in pixels; zero for points no camera sees."""

    values: ad.DenseArray

    def numpy(self) -> np.ndarray:
        return self.values.data


@dataclass(frozen=True, eq=False)
class OffsetTargets:
    mask: np.ndarray
    c_hat: np.ndarray
    pixels: np.ndarray
    box_index: np.ndarray

    @property
    def residual(self) -> np.ndarray:
        """c_hat - p, zero where the mask is off."""
        return np.where(self.mask[:, None], self.c_hat - self.pixels, 0.0)

    @property
    def count(self) -> int:
        return int(self.mask.sum())


def _check_lengths(op: str, coords: Sequence[PixelCoords], masks: Sequence[VisibilityMask], n_points: int):
    if len(coords) != len(masks):
        raise ShapeMismatch(op, (len(coords),), (len(masks),))
    for c, m in zip(coords, masks):
        if c.idx.shape != (n_points, 2) or m.mask.shape != (n_points,):
            raise ShapeMismatch(op, c.idx.shape, m.mask.shape)


def _flat_pixel(camera: int, pixels: np.ndarray, height: int, width: int) -> np.ndarray:
    return (camera * height + pixels[:, 0]) * width + pixels[:, 1]


def scatter_coarse(f_coarse: ad.ArrayLike, coords: Sequence[PixelCoords], masks: Sequence[VisibilityMask],
                   height: int, width: int) -> PseudoImage:
    """
    F_points[i, row, col] = F_coarse of the nearest visible point projecting to that cell.

    Ties in depth go to the lower point index. Cells no point reaches are zero.
    """
    f_coarse = ad.constant(f_coarse)
    n_points = f_coarse.shape[0]
    _check_lengths("scatter_coarse", coords, masks, n_points)
    n_cameras = len(coords)

    cells, depths, points = [], [], []
    for cam, (c, m) in enumerate(zip(coords, masks)):
        visible = np.flatnonzero(m.mask)
        cells.append(_flat_pixel(cam, c.rounded[visible], height, width))
        depths.append(c.depth[visible])
        points.append(visible)
    cells = np.concatenate(cells) if cells else np.zeros(0, dtype=np.int64)
    depths = np.concatenate(depths) if depths else np.zeros(0)
    points = np.concatenate(points) if points else np.zeros(0, dtype=np.int64)

    source = np.full(n_cameras * height * width, -1, dtype=np.int64)
    if cells.size:
        order = np.lexsort((points, depths, cells))
        sorted_cells = cells[order]
        first = np.ones(sorted_cells.shape[0], dtype=bool)
        first[1:] = sorted_cells[1:] != sorted_cells[:-1]
        source[sorted_cells[first]] = points[order][first]

    gathered = ad.gather_rows(f_coarse, source)
    features = ad.reshape(gathered, (n_cameras, height, width, f_coarse.shape[1]))
    return PseudoImage(features=features, source_rows=source.reshape(n_cameras, height, width))


def offset_features(f_image: ad.ArrayLike, pseudo: PseudoImage) -> ad.DenseArray:
    """F_offset = [F_image | F_points] along the channel axis."""
    return ad.concat_lastdim([f_image, pseudo.features])


def owner_flat_pixels(coords: Sequence[PixelCoords], masks: Sequence[VisibilityMask],
                      height: int, width: int, owner: Optional[np.ndarray] = None) -> np.ndarray:
    """Flat n*H*W index of each point's rounded pixel in its owning camera, -1 when unowned."""
    owner = owning_camera(list(masks)) if owner is None else owner
    flat = np.full(owner.shape[0], -1, dtype=np.int64)
    for cam, c in enumerate(coords):
        sel = owner == cam
        flat[sel] = _flat_pixel(cam, c.rounded[sel], height, width)
    return flat


def image_gather(f_image: ad.ArrayLike, coords: Sequence[PixelCoords], masks: Sequence[VisibilityMask],
                 owner: Optional[np.ndarray] = None) -> ad.DenseArray:
    """Unrectified back-projection: F_image at each point's owning-camera pixel, zero when unseen."""
    f_image = ad.constant(f_image)
    n, height, width, channels = f_image.shape
    flat = owner_flat_pixels(coords, masks, height, width, owner)
    return ad.gather_rows(ad.reshape(f_image, (n * height * width, channels)), flat)


def rectified_gather(f_image: ad.ArrayLike, offset: ad.ArrayLike, coords: Sequence[PixelCoords],
                     masks: Sequence[VisibilityMask], owner: Optional[np.ndarray] = None):
    """
    Back-project image features at offset-corrected pixels.

    For each point seen by some camera: o = Offset at its original rounded
    pixel; updated index = round(idx + o) clamped to the image; F'_image =
    F_image at the updated index. The result is differentiable with respect to
    F_image and, through O, to the offset field; the index update itself is not.

    Returns:
        (F'_image: N x C1, O: PointwiseOffset)
    """
    f_image, offset = ad.constant(f_image), ad.constant(offset)
    n, height, width, channels = f_image.shape
    if offset.shape != (n, height, width, 2):
        raise ShapeMismatch("rectified_gather", f_image.shape, offset.shape)
    owner = owning_camera(list(masks)) if owner is None else owner
    _check_lengths("rectified_gather", coords, masks, owner.shape[0])

    original = owner_flat_pixels(coords, masks, height, width, owner)
    o = ad.gather_rows(ad.reshape(offset, (n * height * width, 2)), original)

    step = np.nan_to_num(o.data, nan=0.0, posinf=0.0, neginf=0.0)
    updated = np.full(owner.shape[0], -1, dtype=np.int64)
    for cam, c in enumerate(coords):
        sel = owner == cam
        if not np.any(sel):
            continue
        moved = np.rint(np.clip(c.idx[sel] + step[sel], -1e9, 1e9)).astype(np.int64)
        moved[:, 0] = np.clip(moved[:, 0], 0, height - 1)
        moved[:, 1] = np.clip(moved[:, 1], 0, width - 1)
        updated[sel] = _flat_pixel(cam, moved, height, width)

    f_prime = ad.gather_rows(ad.reshape(f_image, (n * height * width, channels)), updated)
    return f_prime, PointwiseOffset(values=o)


def fuse(f_coarse: ad.ArrayLike, f_image_prime: ad.ArrayLike) -> ad.DenseArray:
    """F = [F_coarse | F'_image]."""
    f_coarse, f_image_prime = ad.constant(f_coarse), ad.constant(f_image_prime)
    if f_coarse.data.ndim != 2 or f_image_prime.data.ndim != 2 or f_coarse.shape[0] != f_image_prime.shape[0]:
        raise ShapeMismatch("fuse", f_coarse.shape, f_image_prime.shape)
    return ad.concat_lastdim([f_coarse, f_image_prime])


def _assign_boxes(bundle: FrameBundle, coords: Sequence[PixelCoords], owner: np.ndarray,
                  foreground_only: bool):
    """Group id per point (-1 for none) and the list of (camera, box) per group."""
    groups = np.full(owner.shape[0], -1, dtype=np.int64)
    group_boxes = []
    labels = bundle.cloud.labels
    for cam, (view, c) in enumerate(zip(bundle.cameras, coords)):
        sel = np.flatnonzero(owner == cam)
        if sel.size == 0 or not view.boxes:
            continue
        pixels = c.rounded[sel]
        # Largest first so the smallest box (then the lowest instance id) is written last.
        ordered = sorted(view.boxes, key=lambda b: (-b.area, -b.instance_id))
        for box in ordered:
            inside = box.contains(pixels[:, 0], pixels[:, 1])
            if foreground_only and labels is not None:
                inside &= labels[sel] == box.class_id
            if np.any(inside):
                groups[sel[inside]] = len(group_boxes)
            group_boxes.append((cam, box))
    return groups, group_boxes


ALIGN_MARGIN = 10.0
ALIGN_TOLERANCE = 3.0


def _box_shifts(group_boxes, pixels: np.ndarray, owner: np.ndarray, labels: Optional[np.ndarray],
                image_shape, margin: float = ALIGN_MARGIN, tolerance: float = ALIGN_TOLERANCE):
    """
    Per box: box centre minus the midpoint of the projected extent of its
    class-matched points, searched in the box grown by margin pixels.

    A box is left out (valid False) when it touches the image border, holds
    fewer than two such points, or when their extent differs from the box
    size by more than tolerance pixels in either axis.
    """
    height, width = image_shape
    shifts = np.zeros((len(group_boxes), 2))
    valid = np.zeros(len(group_boxes), dtype=bool)
    for g, (cam, box) in enumerate(group_boxes):
        if box.min_row <= 0 or box.min_col <= 0 or box.max_row >= height - 1 or box.max_col >= width - 1:
            continue
        near = ((owner == cam)
                & (pixels[:, 0] >= box.min_row - margin) & (pixels[:, 0] <= box.max_row + margin)
                & (pixels[:, 1] >= box.min_col - margin) & (pixels[:, 1] <= box.max_col + margin))
        if labels is not None:
            near &= labels == box.class_id
        if np.count_nonzero(near) < 2:
            continue
        low, high = pixels[near].min(axis=0), pixels[near].max(axis=0)
        box_extent = np.array([box.max_row - box.min_row, box.max_col - box.min_col], dtype=np.float64)
        if np.any(np.abs((high - low) - box_extent) > tolerance):
            continue
        shifts[g] = np.asarray(box.center, dtype=np.float64) - (low + high) / 2.0
        valid[g] = True
    return shifts, valid


def compute_targets(bundle: FrameBundle, coords: Sequence[PixelCoords], masks: Sequence[VisibilityMask],
                    centroid_mode: str = "points", foreground_only: bool = False) -> OffsetTargets:
    """
    m_i = 1 when point i's rounded pixel in its owning camera lies inside a box.

    c_hat_i is the mean projected pixel position of every point assigned to
    the same box ("points"), or the box centre ("box_center"). With "aligned"
    c_hat_i - p_i is the box's shift from _box_shifts, shared by its members;
    members of boxes without a usable shift are unmasked.
    """
    n_points = bundle.cloud.count
    _check_lengths("compute_targets", coords, masks, n_points)
    owner = owning_camera(list(masks))
    pixels = np.zeros((n_points, 2))
    for cam, c in enumerate(coords):
        sel = owner == cam
        pixels[sel] = c.idx[sel]

    groups, group_boxes = _assign_boxes(bundle, coords, owner, foreground_only)
    mask = groups >= 0
    c_hat = pixels.copy()
    if np.any(mask):
        if centroid_mode == "aligned":
            shifts, valid = _box_shifts(group_boxes, pixels, owner, bundle.cloud.labels, bundle.image_shape)
            mask &= valid[np.maximum(groups, 0)]
            c_hat[mask] = pixels[mask] + shifts[groups[mask]]
        elif centroid_mode == "box_center":
            centers = np.array([box.center for _, box in group_boxes])
            c_hat[mask] = centers[groups[mask]]
        else:
            count = np.bincount(groups[mask], minlength=len(group_boxes)).astype(np.float64)
            sums = np.zeros((len(group_boxes), 2))
            np.add.at(sums, groups[mask], pixels[mask])
            means = sums / np.where(count > 0, count, 1.0)[:, None]
            c_hat[mask] = means[groups[mask]]
    logger.debug(f"Offset targets: {int(mask.sum())}/{n_points} points inside boxes, "
                 f"{len(np.unique(groups[mask]))} non-empty boxes")
    return OffsetTargets(mask=mask, c_hat=c_hat, pixels=pixels, box_index=groups)


def ground_truth_targets(bundle: FrameBundle, coords: Sequence[PixelCoords],
                         masks: Sequence[VisibilityMask]) -> OffsetTargets:
    """Targets whose residual c_hat - p is the recorded ground-truth offset of every owned point."""
    n_points = bundle.cloud.count
    owner = owning_camera(list(masks))
    pixels = np.zeros((n_points, 2))
    for cam, c in enumerate(coords):
        sel = owner == cam
        pixels[sel] = c.idx[sel]
    mask = owner >= 0
    gt = bundle.gt_offsets if bundle.gt_offsets is not None else np.zeros((n_points, 2))
    if bundle.gt_offsets is None:
        logger.warning("Ground-truth offset targets requested for a frame without gt_offsets; using zeros")
    c_hat = pixels + np.where(mask[:, None], gt, 0.0)
    return OffsetTargets(mask=mask, c_hat=c_hat, pixels=pixels, box_index=np.where(mask, 0, -1))


def _offset_values(offset) -> ad.DenseArray:
    return offset.values if isinstance(offset, PointwiseOffset) else ad.constant(offset)


def loss_reg(offset, targets: OffsetTargets) -> ad.DenseArray:
    """(1 / sum m) * sum_i m_i * |o_i - (c_hat_i - p_i)|_1; 0 when no point is masked."""
    o = _offset_values(offset)
    if o.shape != targets.pixels.shape:
        raise ShapeMismatch("loss_reg", o.shape, targets.pixels.shape)
    weight = targets.mask.astype(np.float64)
    total = weight.sum()
    if total == 0:
        return ad.make_node(np.asarray(0.0), (o,), lambda g: (np.zeros(o.shape),), "loss_reg")
    diff = o.data - targets.residual
    value = np.sum(np.abs(diff).sum(axis=1) * weight) / total

    def backward_fn(g):
        return (float(g) * np.sign(diff) * weight[:, None] / total,)

    return ad.make_node(np.asarray(value), (o,), backward_fn, "loss_reg")


def loss_dir(offset, targets: OffsetTargets, eps: float = DIRECTION_EPS) -> ad.DenseArray:
    """
    Minus the mean cosine similarity between o_i and c_hat_i - p_i over masked
    points; points where either vector is shorter than eps are left out.
    """
    o = _offset_values(offset)
    if o.shape != targets.pixels.shape:
        raise ShapeMismatch("loss_dir", o.shape, targets.pixels.shape)
    t = targets.residual
    o_norm = np.linalg.norm(o.data, axis=1)
    t_norm = np.linalg.norm(t, axis=1)
    keep = targets.mask & (o_norm >= eps) & (t_norm >= eps)
    total = float(keep.sum())
    if total == 0:
        return ad.make_node(np.asarray(0.0), (o,), lambda g: (np.zeros(o.shape),), "loss_dir")
    o_safe = np.where(keep, o_norm, 1.0)[:, None]
    t_unit = t / np.where(keep, t_norm, 1.0)[:, None]
    cos = np.sum(o.data / o_safe * t_unit, axis=1)
    value = -np.sum(cos * keep) / total

    def backward_fn(g):
        d_cos = t_unit / o_safe - cos[:, None] * o.data / o_safe ** 2
        return (-float(g) * d_cos * keep[:, None] / total,)

    return ad.make_node(np.asarray(value), (o,), backward_fn, "loss_dir")

