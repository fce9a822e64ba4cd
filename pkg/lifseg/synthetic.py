# Licensed under the MIT license. See LICENSE.md file in the project root for full license information.

"""
Desk-scale synthetic scenes with a simulated LiDAR-camera synchronization defect.

The world is a ground plane with axis-aligned boxes (walls, vehicles, poles)
laid out in the "scene" frame, which is the ego frame at the LiDAR sweep time.
The ego drives at constant speed and yaw rate. Each camera fires dt seconds
after the sweep, so its true pose differs from the sweep pose; images are
rendered from the true pose while the declared calibration chain assumes the
sweep pose. The per-point difference between the two projections is recorded
as the ground-truth pixel offset.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields, replace
from typing import List, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from lifseg.config import DEFAULT_CLASS_NAMES
from lifseg.data_model import Box2D, CameraImage, CameraView, FrameBundle, PointCloud
from lifseg.errors import DegenerateScene, TooFewFrames
from lifseg.geometry import (CalibrationChain, CameraIntrinsics, RigidTransform, compose_chain,
                             in_image_mask, invert, owning_camera, project_points)

logger = logging.getLogger(__name__)

BACKGROUND, GROUND, VEHICLE, POLE = 0, 1, 2, 3
FOREGROUND_CLASSES = (VEHICLE, POLE)

CLASS_COLORS = np.array([
    [0.55, 0.45, 0.35],
    [0.35, 0.35, 0.35],
    [0.10, 0.30, 0.85],
    [0.90, 0.80, 0.10],
])
SKY_COLOR = np.array([0.60, 0.80, 0.95])
CLASS_INTENSITY = np.array([0.30, 0.20, 0.35, 0.30])

RAY_EPS = 1e-9


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    k_vehicles: int = 3
    k_poles: int = 3
    k_walls: int = 4
    speed: float = 5.0
    yaw_rate: float = 1.0
    time_skews: Tuple[float, ...] = (0.05, 0.05)
    camera_yaws_deg: Tuple[float, ...] = (0.0, -45.0)
    focal: float = 80.0
    height: int = 64
    width: int = 64
    mount_height: float = 1.8
    rays_azimuth: int = 160
    rays_elevation: int = 24
    elevation_min_deg: float = -25.0
    elevation_max_deg: float = 5.0
    max_range: float = 40.0
    intensity_noise: float = 0.08
    range_noise: float = 0.0
    texture_noise: float = 0.03
    frame_period: float = 0.5
    lidar_sector: bool = True

    def __post_init__(self):
        object.__setattr__(self, "time_skews", tuple(float(s) for s in self.time_skews))
        object.__setattr__(self, "camera_yaws_deg", tuple(float(y) for y in self.camera_yaws_deg))
        if not self.camera_yaws_deg:
            raise ValueError("at least one camera is required")
        if len(self.time_skews) != len(self.camera_yaws_deg):
            raise ValueError(f"{len(self.time_skews)} time skews given for {len(self.camera_yaws_deg)} cameras")
        if any(s < 0 for s in self.time_skews):
            raise ValueError(f"time skews must be >= 0, got {self.time_skews}")
        if self.max_range <= 0:
            raise ValueError(f"max_range must be > 0, got {self.max_range}")
        if self.height < 1 or self.width < 1 or self.focal <= 0:
            raise ValueError("image size and focal length must be positive")
        if self.rays_azimuth < 1 or self.rays_elevation < 1:
            raise ValueError("the LiDAR needs at least one ray in each direction")
        if min(self.k_vehicles, self.k_poles, self.k_walls) < 0:
            raise ValueError("object counts must be >= 0")

    @property
    def camera_count(self) -> int:
        return len(self.camera_yaws_deg)

    def with_skew(self, skew: float) -> SceneSpec:
        return replace(self, time_skews=(float(skew),) * self.camera_count)

    def half_fov(self) -> float:
        """Horizontal half field of view of every camera, radians."""
        return math.atan2(self.width / 2.0, self.focal)

    def lidar_azimuth_range(self) -> Tuple[float, float]:
        """Sweep span: the cameras' joint horizontal coverage plus 2 degrees each side, or a full turn."""
        if not self.lidar_sector:
            return -math.pi, math.pi
        yaws = np.radians(self.camera_yaws_deg)
        pad = self.half_fov() + math.radians(2.0)
        low, high = float(yaws.min()) - pad, float(yaws.max()) + pad
        if high - low >= 2.0 * math.pi:
            return -math.pi, math.pi
        return low, high

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics.from_pinhole(self.focal, self.focal, (self.width - 1) / 2.0, (self.height - 1) / 2.0)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["time_skews"] = list(self.time_skews)
        data["camera_yaws_deg"] = list(self.camera_yaws_deg)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> SceneSpec:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"Unknown scene config keys: {unknown}")
        return cls(**data)


@dataclass(frozen=True)
class SceneObject:
    low: Tuple[float, float, float]
    high: Tuple[float, float, float]
    class_id: int
    instance_id: int


def _yaw_rotation(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def ego_motion(speed: float, yaw_rate: float, t: float) -> RigidTransform:
    """Scene-from-ego pose after t seconds of constant speed and yaw rate."""
    yaw = yaw_rate * t
    if abs(yaw_rate) < 1e-12:
        x, y = speed * t, 0.0
    else:
        x = speed / yaw_rate * math.sin(yaw)
        y = speed / yaw_rate * (1.0 - math.cos(yaw))
    return RigidTransform.from_rotation_translation(_yaw_rotation(yaw), [x, y, 0.0])


def camera_mount(yaw_deg: float, height: float) -> RigidTransform:
    """Ego-from-camera for a level camera (z forward, x right, y down) at the LiDAR position."""
    yaw = math.radians(yaw_deg)
    forward = np.array([math.cos(yaw), math.sin(yaw), 0.0])
    right = np.array([math.sin(yaw), -math.cos(yaw), 0.0])
    down = np.array([0.0, 0.0, -1.0])
    return RigidTransform.from_rotation_translation(np.column_stack([right, down, forward]), [0.0, 0.0, height])


def lidar_mount(spec: SceneSpec) -> RigidTransform:
    return RigidTransform.translation([0.0, 0.0, spec.mount_height])


def _chain(spec: SceneSpec, camera: int, start_pose: RigidTransform, image_time: float) -> CalibrationChain:
    sweep_pose = start_pose.compose(ego_motion(spec.speed, spec.yaw_rate, 0.0))
    image_pose = start_pose.compose(ego_motion(spec.speed, spec.yaw_rate, image_time))
    return CalibrationChain(
        ego_from_lidar=lidar_mount(spec),
        global_from_ego_sweep=sweep_pose,
        ego_image_from_global=invert(image_pose),
        camera_from_ego_image=invert(camera_mount(spec.camera_yaws_deg[camera], spec.mount_height)),
    )


def declared_chain(spec: SceneSpec, camera: int, start_pose: RigidTransform) -> CalibrationChain:
    """The chain shipped with the frame: it assumes the camera fired at the sweep time."""
    return _chain(spec, camera, start_pose, 0.0)


def true_chain(spec: SceneSpec, camera: int, start_pose: RigidTransform) -> CalibrationChain:
    """The chain at the camera's real capture time, used for rendering."""
    return _chain(spec, camera, start_pose, spec.time_skews[camera])


def _footprint_clear(low, high, placed: List[SceneObject], margin: float, keep_out: float) -> bool:
    nearest = np.clip([0.0, 0.0], low[:2], high[:2])
    if np.hypot(*nearest) < keep_out:
        return False
    for obj in placed:
        if (low[0] - margin < obj.high[0] and obj.low[0] - margin < high[0]
                and low[1] - margin < obj.high[1] and obj.low[1] - margin < high[1]):
            return False
    return True


def place_objects(spec: SceneSpec, rng: np.random.Generator) -> List[SceneObject]:
    """Random layout: walls far out, vehicles and poles in front of the cameras."""
    objects: List[SceneObject] = []
    yaws = np.radians(spec.camera_yaws_deg)
    half_fov = spec.half_fov()
    az_low, az_high = float(yaws.min()) - half_fov * 0.9, float(yaws.max()) + half_fov * 0.9

    for _ in range(spec.k_walls):
        az = rng.uniform(az_low - 0.2, az_high + 0.2)
        dist = rng.uniform(20.0, 26.0)
        span = rng.uniform(8.0, 14.0)
        tall = rng.uniform(4.0, 8.0)
        cx, cy = dist * math.cos(az), dist * math.sin(az)
        if abs(math.cos(az)) > abs(math.sin(az)):
            low, high = (cx - 0.25, cy - span / 2, 0.0), (cx + 0.25, cy + span / 2, tall)
        else:
            low, high = (cx - span / 2, cy - 0.25, 0.0), (cx + span / 2, cy + 0.25, tall)
        objects.append(SceneObject(low, high, BACKGROUND, len(objects) + 1))

    foreground: List[SceneObject] = []
    kinds = [VEHICLE] * spec.k_vehicles + [POLE] * spec.k_poles
    for kind in kinds:
        for _attempt in range(50):
            az = rng.uniform(az_low, az_high)
            if kind == VEHICLE:
                dist = rng.uniform(8.0, 16.0)
                size = (rng.uniform(3.8, 4.6), rng.uniform(1.7, 2.0), rng.uniform(1.4, 1.8))
            else:
                dist = rng.uniform(5.0, 14.0)
                size = (0.4, 0.4, rng.uniform(3.0, 5.0))
            cx, cy = dist * math.cos(az), dist * math.sin(az)
            low = (cx - size[0] / 2, cy - size[1] / 2, 0.0)
            high = (cx + size[0] / 2, cy + size[1] / 2, size[2])
            if _footprint_clear(low, high, foreground, margin=0.5, keep_out=3.0):
                obj = SceneObject(low, high, kind, len(objects) + len(foreground) + 1)
                foreground.append(obj)
                break
        else:
            logger.debug(f"Could not place a class-{kind} object without overlap; skipping it")
    return objects + foreground


@dataclass(frozen=True, eq=False)
class RayHits:
    """Nearest hit per ray; class_id -1 and instance_id 0 on a miss."""

    distance: np.ndarray
    class_id: np.ndarray
    instance_id: np.ndarray

    @property
    def hit(self) -> np.ndarray:
        return self.class_id >= 0


def cast_rays(origins: np.ndarray, directions: np.ndarray, objects: Sequence[SceneObject],
              max_range: float = np.inf) -> RayHits:
    """Slab-test every box and the ground plane z = 0; keep the nearest hit within max_range."""
    directions = np.asarray(directions, dtype=np.float64)
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), directions.shape)
    count = directions.shape[0]
    best = np.full(count, np.inf)
    class_id = np.full(count, -1, dtype=np.int64)
    instance_id = np.zeros(count, dtype=np.int64)

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = np.where(directions[:, 2] < -RAY_EPS, -origins[:, 2] / directions[:, 2], np.inf)
    closer = (t_ground > RAY_EPS) & (t_ground < best)
    best[closer], class_id[closer] = t_ground[closer], GROUND

    safe = np.where(np.abs(directions) < 1e-12, 1e-12, directions)
    inv = 1.0 / safe
    for obj in objects:
        t1 = (np.asarray(obj.low) - origins) * inv
        t2 = (np.asarray(obj.high) - origins) * inv
        t_near = np.minimum(t1, t2).max(axis=1)
        t_far = np.maximum(t1, t2).min(axis=1)
        t_hit = np.where(t_near > RAY_EPS, t_near, t_far)
        closer = (t_far >= np.maximum(t_near, RAY_EPS)) & (t_hit < best)
        best[closer] = t_hit[closer]
        class_id[closer] = obj.class_id
        instance_id[closer] = obj.instance_id

    missed = best > max_range
    best[missed], class_id[missed], instance_id[missed] = np.inf, -1, 0
    return RayHits(distance=best, class_id=class_id, instance_id=instance_id)


def lidar_directions(spec: SceneSpec, phase: float) -> np.ndarray:
    low, high = spec.lidar_azimuth_range()
    az = np.linspace(low, high, spec.rays_azimuth, endpoint=False) + phase
    el = np.radians(np.linspace(spec.elevation_min_deg, spec.elevation_max_deg, spec.rays_elevation))
    az, el = np.meshgrid(az, el, indexing="ij")
    az, el = az.reshape(-1), el.reshape(-1)
    return np.column_stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])


def render_camera(spec: SceneSpec, camera: int, objects: Sequence[SceneObject]) -> RayHits:
    """One ray per pixel centre from the camera's true capture-time pose, in row-major pixel order."""
    scene_from_camera = ego_motion(spec.speed, spec.yaw_rate, spec.time_skews[camera]).compose(
        camera_mount(spec.camera_yaws_deg[camera], spec.mount_height))
    k = spec.intrinsics().matrix
    rows, cols = np.meshgrid(np.arange(spec.height), np.arange(spec.width), indexing="ij")
    rays = np.column_stack([
        (cols.reshape(-1) - k[0, 2]) / k[0, 0],
        (rows.reshape(-1) - k[1, 2]) / k[1, 1],
        np.ones(spec.height * spec.width),
    ])
    directions = rays @ scene_from_camera.rotation.T
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return cast_rays(scene_from_camera.offset, directions, objects)


def boxes_from_instances(instance_map: np.ndarray, class_map: np.ndarray) -> List[Box2D]:
    boxes = []
    for instance in np.unique(instance_map):
        if instance == 0:
            continue
        rows, cols = np.nonzero(instance_map == instance)
        class_id = int(class_map[rows[0], cols[0]])
        if class_id not in FOREGROUND_CLASSES:
            continue
        boxes.append(Box2D(int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max()),
                           class_id, int(instance)))
    return boxes


def ground_truth_offsets(cloud: PointCloud, declared: Sequence[CalibrationChain], true: Sequence[CalibrationChain],
                         intrinsics: CameraIntrinsics, height: int, width: int) -> np.ndarray:
    """True-pose projection minus declared-pose projection in each point's owning camera; 0 when unowned."""
    declared_coords, true_coords, masks = [], [], []
    for d_chain, t_chain in zip(declared, true):
        d = project_points(cloud, compose_chain(d_chain), intrinsics)
        declared_coords.append(d)
        true_coords.append(project_points(cloud, compose_chain(t_chain), intrinsics))
        masks.append(in_image_mask(d, height, width))
    owner = owning_camera(masks)
    offsets = np.zeros((cloud.count, 2))
    for cam, (d, t) in enumerate(zip(declared_coords, true_coords)):
        sel = owner == cam
        offsets[sel] = t.idx[sel] - d.idx[sel]
    offsets[~np.all(np.isfinite(offsets), axis=1)] = 0.0
    return offsets


def generate(spec: SceneSpec, frame_index: int = 0) -> FrameBundle:
    """
    Ray-cast one frame.

    Raises:
        DegenerateScene: if no LiDAR ray hits anything within max_range.
    """
    rng = np.random.default_rng([int(spec.seed), int(frame_index)])
    start_pose = RigidTransform.from_rotation_translation(
        _yaw_rotation(rng.uniform(0.0, 2.0 * math.pi)),
        [rng.uniform(-50.0, 50.0), rng.uniform(-50.0, 50.0), 0.0],
    )
    objects = place_objects(spec, rng)

    low, high = spec.lidar_azimuth_range()
    directions = lidar_directions(spec, rng.uniform(0.0, (high - low) / spec.rays_azimuth))
    origin = np.array([0.0, 0.0, spec.mount_height])
    hits = cast_rays(origin, directions, objects, spec.max_range)
    range_noise = rng.normal(0.0, spec.range_noise, size=directions.shape[0]) if spec.range_noise > 0 else 0.0
    intensity_noise = rng.normal(0.0, spec.intensity_noise, size=directions.shape[0])
    if not np.any(hits.hit):
        raise DegenerateScene(f"frame {frame_index}: none of {directions.shape[0]} LiDAR rays hit within "
                              f"{spec.max_range} m")
    distance = hits.distance + range_noise
    xyz = directions * distance[:, None]
    intensity = np.clip(CLASS_INTENSITY[hits.class_id.clip(0)] + intensity_noise, 0.0, 1.0)
    hit = hits.hit
    cloud = PointCloud(points=np.column_stack([xyz[hit], intensity[hit]]), labels=hits.class_id[hit])

    lidar_time = frame_index * spec.frame_period
    intrinsics = spec.intrinsics()
    views, declared, true = [], [], []
    for cam in range(spec.camera_count):
        rendered = render_camera(spec, cam, objects)
        class_map = rendered.class_id.reshape(spec.height, spec.width)
        instance_map = rendered.instance_id.reshape(spec.height, spec.width)
        colors = np.where((class_map >= 0)[..., None], CLASS_COLORS[class_map.clip(0)], SKY_COLOR)
        texture = rng.normal(0.0, spec.texture_noise, size=colors.shape)
        pixels = np.clip(colors + texture, 0.0, 1.0)
        chain = declared_chain(spec, cam, start_pose)
        declared.append(chain)
        true.append(true_chain(spec, cam, start_pose))
        views.append(CameraView(
            image=CameraImage(pixels=pixels, timestamp=lidar_time + spec.time_skews[cam]),
            chain=chain,
            intrinsics=intrinsics,
            boxes=boxes_from_instances(instance_map, class_map),
        ))

    offsets = ground_truth_offsets(cloud, declared, true, intrinsics, spec.height, spec.width)
    logger.debug(f"Generated frame {frame_index}: {cloud.count} points, "
                 f"{sum(len(v.boxes) for v in views)} boxes, mean gt offset "
                 f"{np.linalg.norm(offsets, axis=1).mean():.3f} px")
    return FrameBundle(cloud=cloud, cameras=views, class_count=len(DEFAULT_CLASS_NAMES),
                       gt_offsets=offsets, lidar_timestamp=lidar_time)


def generate_dataset(spec: SceneSpec, frames: int, progress: bool = True) -> List[FrameBundle]:
    logger.info(f"Generating {frames} frames (seed={spec.seed}, skews={spec.time_skews}, speed={spec.speed})")
    return [generate(spec, i) for i in tqdm(range(frames), desc="gen", disable=not progress)]


def split_indices(count: int, train_fraction: float, seed: int) -> Tuple[List[int], List[int]]:
    if count < 2:
        raise TooFewFrames(f"a split needs at least 2 frames, got {count}")
    order = np.random.default_rng(seed).permutation(count)
    n_train = min(max(int(round(train_fraction * count)), 1), count - 1)
    return sorted(order[:n_train].tolist()), sorted(order[n_train:].tolist())


def split(dataset: Sequence[FrameBundle], train_fraction: float, seed: int):
    """
    Seeded disjoint split; both parts hold at least one frame.

    Raises:
        TooFewFrames: if the dataset has fewer than two frames.
    """
    train_idx, held_idx = split_indices(len(dataset), train_fraction, seed)
    return [dataset[i] for i in train_idx], [dataset[i] for i in held_idx]
