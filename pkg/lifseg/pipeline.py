# Licensed under the MIT license. See LICENSE.md file in the project root for full license information.

"""
End-to-end coarse-to-fine pipeline, training loop and evaluation.

Stages, each toggled by PipelineConfig:
  1. coarse: paint points with w x w image context (optional), append image
     semantics (optional), run the coarse GridPoolSegmenter -> F_coarse.
  2. offset learning: scatter F_coarse to pseudo-images, predict an offset
     field from [F_image | F_points], gather F_image at corrected pixels.
  3. refinement: F = [F_coarse | F'_image] -> refinement segmenter (or the
     per-point perceptron head) -> S.

Without mid fusion F'_image is all zeros; without the offset stage it is the
plain (unrectified) gather.
"""

from __future__ import annotations

import concurrent.futures
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime
from functools import partial
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from lifseg import autodiff as ad
from lifseg import dataio
from lifseg.config import PipelineConfig
from lifseg.context_fusion import PaintedCloud, paint
from lifseg.data_model import FrameBundle, validate
from lifseg.errors import InvalidBundle, ShapeMismatch, TooFewFrames
from lifseg.evaluation import ConfusionMatrix, IoUResult, accumulate, miou, write_report_csv
from lifseg.geometry import CameraProjections, project_bundle
from lifseg.losses import LossWeights, loss_terms, semantic_loss
from lifseg.networks import (STAGE_COARSE, STAGE_HEAD, STAGE_IMAGE, STAGE_OFFSET, STAGE_REFINE,
                             GridPoolSegmenter, OffsetHead, PerceptronHead, PixelConvSegmenter,
                             VoxelAssignment, coarse_forward, image_forward, offset_forward, refine_forward,
                             stage_rng, voxelize)
from lifseg.offset_rectification import (OffsetTargets, PointwiseOffset, compute_targets, fuse,
                                         ground_truth_targets, image_gather, offset_features, rectified_gather,
                                         scatter_coarse)

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.json"
CHECKPOINT_FILE = "checkpoint.bin"
REPORT_FILE = "report.json"


@dataclass(eq=False)
class LifSegModels:
    config: PipelineConfig
    point_dim: int
    coarse: GridPoolSegmenter
    image: Optional[PixelConvSegmenter] = None
    offset: Optional[OffsetHead] = None
    refine: Optional[GridPoolSegmenter] = None
    head: Optional[PerceptronHead] = None

    def modules(self):
        return [m for m in (self.coarse, self.image, self.offset, self.refine, self.head) if m is not None]

    def parameters(self) -> Dict[str, ad.DenseArray]:
        params = {}
        for module in self.modules():
            params.update(module.parameters())
        return params

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.parameters().items()}

    def load_state_dict(self, tensors: Dict[str, np.ndarray]):
        params = self.parameters()
        missing = sorted(set(params) - set(tensors))
        if missing:
            raise KeyError(f"Checkpoint lacks parameters {missing}")
        for name, p in params.items():
            value = np.asarray(tensors[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeMismatch(f"load {name}", p.shape, value.shape)
            p.data = np.array(value)


def coarse_input_width(config: PipelineConfig, point_dim: int) -> int:
    return point_dim + config.painted_width_extra + (config.image_channels if config.early_semantic else 0)


def build_models(config: PipelineConfig, point_dim: int) -> LifSegModels:
    """Initialise every module the configuration needs, each from its own seeded generator."""
    c, c1 = config.class_count, config.image_channels
    models = LifSegModels(
        config=config,
        point_dim=point_dim,
        coarse=GridPoolSegmenter(coarse_input_width(config, point_dim), config.c0, config.hidden,
                                 config.grid_resolution, stage_rng(config.seed, STAGE_COARSE), name="coarse"),
    )
    if config.uses_image:
        models.image = PixelConvSegmenter(3, config.image_hidden, c1, stage_rng(config.seed, STAGE_IMAGE))
    if config.offset_stage:
        models.offset = OffsetHead(c1 + config.c0, config.offset_hidden, stage_rng(config.seed, STAGE_OFFSET))
    if config.mid_fusion == "head":
        models.head = PerceptronHead(config.c0 + c1, c, config.hidden, stage_rng(config.seed, STAGE_HEAD))
    else:
        models.refine = GridPoolSegmenter(config.c0 + c1, c, config.hidden, config.grid_resolution,
                                          stage_rng(config.seed, STAGE_REFINE), name="refine")
    logger.debug(f"Built models for {config.variant}: "
                 f"{sum(p.data.size for p in models.parameters().values())} parameters")
    return models


@dataclass(frozen=True, eq=False)
class PreparedFrame:
    """Per-frame geometry that does not change during training."""

    bundle: FrameBundle
    projections: CameraProjections
    painted: PaintedCloud
    voxels: VoxelAssignment
    targets: OffsetTargets
    images: np.ndarray

    @property
    def labels(self) -> Optional[np.ndarray]:
        return self.bundle.cloud.labels


def prepare_frame(config: PipelineConfig, bundle: FrameBundle) -> PreparedFrame:
    """Validate the bundle and compute projections, painted rows, voxels and offset targets once."""
    validate(bundle)
    if bundle.class_count != config.class_count:
        raise InvalidBundle(f"bundle has C={bundle.class_count}, configuration expects {config.class_count}")
    projections = project_bundle(bundle)
    if config.paint:
        painted = paint(bundle.cloud, bundle, config.window, projections)
    else:
        painted = PaintedCloud(rows=np.array(bundle.cloud.points), point_dim=bundle.cloud.dim, window=0)
    if config.offset_target == "ground_truth":
        targets = ground_truth_targets(bundle, projections.coords, projections.masks)
    else:
        targets = compute_targets(bundle, projections.coords, projections.masks,
                                  config.centroid_mode, config.foreground_only)
    return PreparedFrame(
        bundle=bundle,
        projections=projections,
        painted=painted,
        voxels=voxelize(bundle.cloud.xyz, config.grid_resolution),
        targets=targets,
        images=bundle.images(),
    )


@dataclass(eq=False)
class ForwardResult:
    scores: ad.DenseArray
    offset: Optional[PointwiseOffset]
    f_coarse: ad.DenseArray
    intermediates: Dict[str, ad.DenseArray] = field(default_factory=dict)


def run_forward(config: PipelineConfig, frame: Union[FrameBundle, PreparedFrame], models: LifSegModels) -> ForwardResult:
    """
    Run every enabled stage on one frame.

    Returns:
        ForwardResult with S (N x C logits), O (per-point offsets, None without
        the offset stage) and the intermediate feature maps.
    """
    prepared = frame if isinstance(frame, PreparedFrame) else prepare_frame(config, frame)
    proj = prepared.projections
    height, width = prepared.bundle.image_shape
    inter: Dict[str, ad.DenseArray] = {}

    f_image = None
    if config.uses_image:
        f_image = image_forward(models.image, prepared.images)
        inter["f_image"] = f_image

    extra = image_gather(f_image, proj.coords, proj.masks, proj.owner) if config.early_semantic else None
    f_coarse = coarse_forward(models.coarse, prepared.painted, extra=extra, voxels=prepared.voxels,
                              coord_scale=config.coord_scale)
    inter["f_coarse"] = f_coarse

    offset = None
    if config.mid_fusion == "none":
        f_prime = ad.DenseArray(np.zeros((prepared.bundle.cloud.count, config.image_channels)))
    elif config.offset_stage:
        pseudo = scatter_coarse(f_coarse, proj.coords, proj.masks, height, width)
        offset_map = offset_forward(models.offset, offset_features(f_image, pseudo))
        if config.force_zero_offset:
            offset_map = ad.mul_scalar(offset_map, 0.0)
        inter["f_points"] = pseudo.features
        inter["offset_field"] = offset_map
        f_prime, offset = rectified_gather(f_image, offset_map, proj.coords, proj.masks, proj.owner)
    else:
        f_prime = image_gather(f_image, proj.coords, proj.masks, proj.owner)
    inter["f_image_prime"] = f_prime

    fused = fuse(f_coarse, f_prime)
    inter["fused"] = fused
    if models.head is not None:
        scores = models.head.forward(fused)
    else:
        scores = refine_forward(models.refine, fused, prepared.voxels)
    return ForwardResult(scores=scores, offset=offset, f_coarse=f_coarse, intermediates=inter)


def frame_loss(config: PipelineConfig, prepared: PreparedFrame, result: ForwardResult):
    """Training objective for one frame and its components as floats."""
    labels = prepared.labels
    if labels is None:
        raise InvalidBundle("labels are required for training")
    terms = loss_terms(result.scores, labels, result.offset,
                       prepared.targets if result.offset is not None else None, LossWeights(config.alpha))
    total = terms.total
    parts = terms.as_floats()
    if config.supervise_coarse:
        coarse = semantic_loss(result.f_coarse, labels)
        total = ad.add(total, coarse)
        parts["coarse"] = coarse.item()
        parts["total"] = total.item()
    return total, parts


def _json_number(value):
    if value is None:
        return None
    value = float(value)
    return value if np.isfinite(value) else None


@dataclass
class RunReport:
    variant: str
    epoch_losses: List[float] = field(default_factory=list)
    per_class_iou: List[Optional[float]] = field(default_factory=list)
    miou: Optional[float] = None
    mean_offset_error: Optional[float] = None
    mean_gt_offset: Optional[float] = None
    zero_offset_error: Optional[float] = None
    frames_evaluated: int = 0
    points_evaluated: int = 0
    metadata: Dict = field(default_factory=dict)

    @property
    def offset_error_ratio(self) -> Optional[float]:
        if self.mean_offset_error is None or not self.zero_offset_error:
            return None
        return self.mean_offset_error / self.zero_offset_error

    def iou_result(self) -> IoUResult:
        per_class = np.array([np.nan if v is None else v for v in self.per_class_iou], dtype=np.float64)
        return IoUResult(per_class=per_class, mean=float("nan") if self.miou is None else self.miou)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["offset_error_ratio"] = self.offset_error_ratio
        return data

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path) -> RunReport:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        data.pop("offset_error_ratio", None)
        return cls(**data)


@dataclass(frozen=True, eq=False)
class FrameEvaluation:
    confusion: ConfusionMatrix
    residual: Optional[np.ndarray] = None
    zero_offset: Optional[np.ndarray] = None
    gt_norm: Optional[np.ndarray] = None


def evaluate_frame(models: LifSegModels, config: PipelineConfig,
                   frame: Union[FrameBundle, PreparedFrame]) -> Optional[FrameEvaluation]:
    """Confusion counts and offset errors of one frame; None when the frame has no labels."""
    prepared = frame if isinstance(frame, PreparedFrame) else prepare_frame(config, frame)
    if prepared.labels is None:
        logger.warning("Skipping an unlabelled frame during evaluation")
        return None
    result = run_forward(config, prepared, models)
    predictions = np.argmax(result.scores.data, axis=1)
    cm = accumulate(ConfusionMatrix.zeros(config.class_count), predictions, prepared.labels)

    gt = prepared.bundle.gt_offsets
    if gt is None:
        return FrameEvaluation(confusion=cm)
    owned = prepared.projections.owner >= 0
    masked = prepared.targets.mask
    predicted = result.offset.numpy() if result.offset is not None else np.zeros_like(gt)
    return FrameEvaluation(
        confusion=cm,
        residual=np.linalg.norm(predicted[masked] - gt[masked], axis=1),
        zero_offset=np.linalg.norm(gt[masked], axis=1),
        gt_norm=np.linalg.norm(gt[owned], axis=1),
    )


def _mean_of(chunks) -> Optional[float]:
    chunks = [c for c in chunks if c is not None]
    values = np.concatenate(chunks) if chunks else np.zeros(0)
    return float(values.mean()) if values.size else None


def evaluate(models: LifSegModels, dataset: Sequence[Union[FrameBundle, PreparedFrame]],
             config: PipelineConfig, workers: int = 1) -> RunReport:
    """
    Confusion matrix and mIoU over the frames, plus the mean residual
    alignment error ||O - gt_offset|| over masked points where ground truth exists.

    With workers > 1 frames are evaluated on a thread pool and the per-frame
    confusion matrices are merged in frame order.
    """
    run_one = partial(evaluate_frame, models, config)
    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(run_one, dataset))
    else:
        results = [run_one(frame) for frame in dataset]
    results = [r for r in results if r is not None]
    if not results:
        raise TooFewFrames("evaluation needs at least one labelled frame")

    cm = ConfusionMatrix.zeros(config.class_count)
    for r in results:
        cm = cm.merge(r.confusion)
    scores = miou(cm, strict=config.strict_miou)

    report = RunReport(
        variant=config.variant,
        per_class_iou=[_json_number(v) for v in scores.per_class],
        miou=_json_number(scores.mean),
        mean_offset_error=_mean_of(r.residual for r in results),
        mean_gt_offset=_mean_of(r.gt_norm for r in results),
        zero_offset_error=_mean_of(r.zero_offset for r in results),
        frames_evaluated=len(results),
        points_evaluated=cm.total,
    )
    logger.info(f"Evaluated {config.variant} on {len(results)} frames: mIoU={report.miou}, "
                f"offset error={report.mean_offset_error} (zero-offset {report.zero_offset_error})")
    return report


def save_run(run_dir, models: LifSegModels, report: Optional[RunReport] = None,
             checkpoint_name: str = CHECKPOINT_FILE):
    dataio.ensure_directory_exists(run_dir)
    models.config.save(os.path.join(run_dir, CONFIG_FILE))
    dataio.save_checkpoint(os.path.join(run_dir, checkpoint_name), models.state_dict(),
                           {"variant": models.config.variant, "point_dim": models.point_dim})
    if report is not None:
        report.save(os.path.join(run_dir, REPORT_FILE))


def load_run(run_dir) -> LifSegModels:
    config = PipelineConfig.load(os.path.join(run_dir, CONFIG_FILE))
    tensors, metadata = dataio.load_checkpoint(os.path.join(run_dir, CHECKPOINT_FILE))
    models = build_models(config, int(metadata["point_dim"]))
    models.load_state_dict(tensors)
    return models


def train(config: PipelineConfig, dataset: Sequence[FrameBundle], held_out: Optional[Sequence[FrameBundle]] = None,
          run_dir=None, progress: bool = True) -> Tuple[LifSegModels, RunReport]:
    """
    Plain SGD over the frames for config.epochs epochs, one step per frame.
    The offset head steps with config.offset_learning_rate; its only gradient
    is the alpha-weighted auxiliary loss.

    Frames are visited in a seeded order that changes each epoch. When run_dir
    is given a checkpoint is written after every epoch, plus the final
    checkpoint, config.json and report.json.
    """
    if not dataset:
        raise TooFewFrames("training needs at least one frame")
    started = time.perf_counter()
    prepared = [prepare_frame(config, bundle) for bundle in dataset]
    models = build_models(config, dataset[0].cloud.dim)
    params = models.parameters()
    head_params = models.offset.parameters() if models.offset is not None else {}
    backbone_params = {name: p for name, p in params.items() if name not in head_params}
    rng = np.random.default_rng([int(config.seed), 7])
    logger.info(f"Training {config.variant} on {len(prepared)} frames for {config.epochs} epochs "
                f"(lr={config.learning_rate}, offset lr={config.offset_learning_rate}, alpha={config.alpha})")

    epoch_losses = []
    for epoch in tqdm(range(config.epochs), desc=config.variant, disable=not progress):
        losses = []
        for index in rng.permutation(len(prepared)):
            frame = prepared[index]
            with ad.Tape() as tape:
                result = run_forward(config, frame, models)
                total, parts = frame_loss(config, frame, result)
            if not np.isfinite(total.item()):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}: {parts}")
            grads = ad.backward(tape, total)
            ad.sgd_step(backbone_params, grads, config.learning_rate)
            ad.sgd_step(head_params, grads, config.offset_learning_rate)
            losses.append(total.item())
            logger.debug(f"epoch {epoch} frame {int(index)}: {parts}")
        epoch_losses.append(float(np.mean(losses)))
        logger.info(f"Epoch {epoch + 1}/{config.epochs}: mean loss {epoch_losses[-1]:.6f}")
        if run_dir is not None:
            save_run(run_dir, models, checkpoint_name=f"epoch_{epoch + 1}.bin")

    report = evaluate(models, held_out if held_out else prepared, config)
    report.epoch_losses = epoch_losses
    report.metadata = {
        "finished_at": datetime.now().isoformat(timespec="seconds"),
        "wall_clock_seconds": round(time.perf_counter() - started, 3),
    }
    if run_dir is not None:
        save_run(run_dir, models, report)
    return models, report


def write_evaluation(report: RunReport, config: PipelineConfig, report_path):
    """Evaluation CSV next to the JSON report."""
    write_report_csv(report_path, report.iou_result(), config.class_names)
