# Licensed under the MIT license. See LICENSE.md file in the project root for full license information.

"""
Configuration for lifseg: environment settings loaded from .env, the pipeline
configuration dataclass with its variant tags, and per-project JSON overrides.
"""

import os
import json
import logging
from dataclasses import dataclass, asdict, fields, replace
from typing import Optional

from dotenv import load_dotenv

from lifseg.errors import BadWindow

logger = logging.getLogger(__name__)

load_dotenv(override=True)

DEFAULT_DATA_CAP_BYTES = 1 << 30
DEFAULT_CLASS_NAMES = ("background", "ground", "vehicle", "pole")

PIPELINE_CONFIG_FILE = "pipeline_config.json"
SCENE_CONFIG_FILE = "scene_config.json"


def data_cap_bytes() -> int:
    """Per-frame read cap in bytes; LIFSEG_DATA_CAP_BYTES overrides the 1 GiB default."""
    raw = os.getenv("LIFSEG_DATA_CAP_BYTES")
    if not raw:
        return DEFAULT_DATA_CAP_BYTES
    try:
        cap = int(raw)
    except ValueError:
        logger.warning(f"Ignoring non-integer LIFSEG_DATA_CAP_BYTES={raw!r}")
        return DEFAULT_DATA_CAP_BYTES
    return max(cap, 0)


def log_dir() -> str:
    return os.getenv("LIFSEG_LOG_DIR", os.path.join(".", "logs"))


# Stage toggles per variant tag. "window" is only meaningful when "paint" is on.
VARIANTS = {
    "baseline": dict(paint=False, early_semantic=False, mid_fusion="none", offset_stage=False),
    "C+1x1": dict(paint=True, window=1, early_semantic=False, mid_fusion="none", offset_stage=False),
    "C+3x3": dict(paint=True, window=3, early_semantic=False, mid_fusion="none", offset_stage=False),
    "C+5x5": dict(paint=True, window=5, early_semantic=False, mid_fusion="none", offset_stage=False),
    "C+Sem": dict(paint=False, early_semantic=True, mid_fusion="none", offset_stage=False),
    "C+3x3+Sem": dict(paint=True, window=3, early_semantic=True, mid_fusion="none", offset_stage=False),
    "C+Mid": dict(paint=False, early_semantic=False, mid_fusion="head", offset_stage=False),
    "C+3x3+Mid": dict(paint=True, window=3, early_semantic=False, mid_fusion="head", offset_stage=False),
    "no-offset": dict(paint=True, window=3, early_semantic=False, mid_fusion="refine", offset_stage=False),
    "full": dict(paint=True, window=3, early_semantic=False, mid_fusion="refine", offset_stage=True),
}

VARIANT_ALIASES = {
    "mid": "no-offset",
    "C+3x3+Mid+Ref": "full",
}

ABLATION_VARIANTS = ("baseline", "C+1x1", "C+3x3", "C+5x5", "no-offset", "full")

_MID_FUSION_MODES = ("none", "head", "refine")
_CENTROID_MODES = ("points", "box_center", "aligned")
_OFFSET_TARGETS = ("centroid", "ground_truth")


def normalize_variant(tag: str) -> str:
    """Map a user-supplied tag (any case, '×' or 'x', aliases) to its canonical name."""
    cleaned = tag.strip().replace("×", "x").replace(" ", "")
    lookup = {name.lower(): name for name in VARIANTS}
    lookup.update({alias.lower(): target for alias, target in VARIANT_ALIASES.items()})
    try:
        return lookup[cleaned.lower()]
    except KeyError:
        raise ValueError(f"Unknown variant tag {tag!r}; expected one of {sorted(VARIANTS)}") from None


@dataclass(frozen=True)
class PipelineConfig:
    variant: str = "full"
    window: int = 3
    paint: bool = True
    early_semantic: bool = False
    mid_fusion: str = "refine"
    offset_stage: bool = True
    alpha: float = 0.01
    learning_rate: float = 0.05
    offset_learning_rate: float = 0.5
    epochs: int = 20
    seed: int = 0
    grid_resolution: tuple = (32, 32, 8)
    class_count: int = 4
    class_names: tuple = DEFAULT_CLASS_NAMES
    coarse_channels: Optional[int] = None
    image_channels: int = 16
    image_hidden: int = 16
    hidden: int = 64
    offset_hidden: int = 32
    coord_scale: float = 30.0
    supervise_coarse: bool = True
    centroid_mode: str = "aligned"
    offset_target: str = "centroid"
    foreground_only: bool = True
    force_zero_offset: bool = False
    strict_miou: bool = False

    def __post_init__(self):
        object.__setattr__(self, "grid_resolution", tuple(int(g) for g in self.grid_resolution))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if self.window < 1 or self.window % 2 == 0:
            raise BadWindow(f"window must be odd and >= 1, got {self.window}")
        if self.class_count < 2:
            raise ValueError(f"class_count must be >= 2, got {self.class_count}")
        if self.coarse_channels is not None and self.coarse_channels != self.class_count:
            raise ValueError(
                f"coarse feature width C0={self.coarse_channels} must equal the class count C={self.class_count}")
        if len(self.class_names) != self.class_count:
            raise ValueError(f"{len(self.class_names)} class names given for {self.class_count} classes")
        if self.mid_fusion not in _MID_FUSION_MODES:
            raise ValueError(f"mid_fusion must be one of {_MID_FUSION_MODES}, got {self.mid_fusion!r}")
        if self.offset_stage and self.mid_fusion == "none":
            raise ValueError("offset_stage requires mid fusion ('head' or 'refine')")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.learning_rate < 0 or self.offset_learning_rate < 0:
            raise ValueError("learning rates must be >= 0")
        if len(self.grid_resolution) != 3 or min(self.grid_resolution) < 1:
            raise ValueError(f"grid_resolution must be three positive ints, got {self.grid_resolution}")
        if self.centroid_mode not in _CENTROID_MODES:
            raise ValueError(f"centroid_mode must be one of {_CENTROID_MODES}")
        if self.offset_target not in _OFFSET_TARGETS:
            raise ValueError(f"offset_target must be one of {_OFFSET_TARGETS}")

    @property
    def c0(self) -> int:
        return self.class_count

    @property
    def uses_image(self) -> bool:
        return self.early_semantic or self.mid_fusion != "none"

    @property
    def painted_width_extra(self) -> int:
        return 3 * self.window * self.window if self.paint else 0

    @classmethod
    def for_variant(cls, tag: str, **overrides) -> "PipelineConfig":
        name = normalize_variant(tag)
        settings = dict(VARIANTS[name])
        settings.update(overrides)
        return cls(variant=name, **settings)

    def with_overrides(self, **overrides) -> "PipelineConfig":
        return replace(self, **overrides)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["grid_resolution"] = list(self.grid_resolution)
        data["class_names"] = list(self.class_names)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"Unknown pipeline config keys: {unknown}")
        return cls(**data)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def load_config(json_filepath):
    with open(json_filepath, 'r', encoding='utf-8') as f:
        return json.load(f)


def load_project_config(project_dir):
    """
    Read the optional per-project JSON overrides.

    Args:
        project_dir: directory that may contain pipeline_config.json and scene_config.json

    Returns:
        (pipeline_overrides, scene_overrides) dictionaries; empty when a file is missing.
    """
    pipeline_overrides, scene_overrides = {}, {}
    if not project_dir:
        return pipeline_overrides, scene_overrides

    pipeline_path = os.path.join(project_dir, PIPELINE_CONFIG_FILE)
    scene_path = os.path.join(project_dir, SCENE_CONFIG_FILE)
    logger.debug(f"Project directory: {project_dir}")

    if os.path.exists(pipeline_path):
        pipeline_overrides = load_config(pipeline_path)
        logger.info(f"Loaded pipeline overrides from {pipeline_path}: {sorted(pipeline_overrides)}")
    else:
        logger.warning(f"Pipeline config file not found at {pipeline_path}")

    if os.path.exists(scene_path):
        scene_overrides = load_config(scene_path)
        logger.info(f"Loaded scene overrides from {scene_path}: {sorted(scene_overrides)}")
    else:
        logger.warning(f"Scene config file not found at {scene_path}")

    return pipeline_overrides, scene_overrides
