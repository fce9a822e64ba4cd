import os
import tempfile

import numpy as np
import pytest

# Keep log files out of the working tree; setup_logging reads this on first use.
os.environ.setdefault("LIFSEG_LOG_DIR", os.path.join(tempfile.gettempdir(), "lifseg-test-logs"))

from lifseg.data_model import Box2D, CameraImage, CameraView, FrameBundle, PointCloud  # noqa: E402
from lifseg.geometry import CalibrationChain, CameraIntrinsics, RigidTransform  # noqa: E402
from lifseg.synthetic import SceneSpec  # noqa: E402


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_transform(rng, scale=5.0):
    return RigidTransform.from_rotation_translation(random_rotation(rng), rng.uniform(-scale, scale, size=3))


def forward_camera_chain():
    """LiDAR x forward, y left, z up -> camera z forward, x right, y down."""
    camera_from_ego = RigidTransform.from_rotation_translation(
        np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]]), [0.0, 0.0, 0.0])
    identity = RigidTransform.identity()
    return CalibrationChain(identity, identity, identity, camera_from_ego)


def make_bundle(rng, n_points=60, n_cameras=2, height=12, width=10, class_count=4, boxes=True,
                gt_offsets=True, quantized=False):
    """Random but valid FrameBundle with points in front of forward-looking cameras."""
    xyz = np.column_stack([
        rng.uniform(2.0, 20.0, n_points),
        rng.uniform(-6.0, 6.0, n_points),
        rng.uniform(-3.0, 3.0, n_points),
    ])
    points = np.column_stack([xyz, rng.uniform(0.0, 1.0, n_points)])
    labels = rng.integers(0, class_count, n_points)
    views = []
    for cam in range(n_cameras):
        pixels = rng.uniform(0.0, 1.0, size=(height, width, 3))
        if quantized:
            pixels = np.rint(pixels * 255.0) / 255.0
        cam_boxes = []
        if boxes:
            cam_boxes = [
                Box2D(1, 1, height // 2, width // 2, 2, 10 * cam + 1),
                Box2D(height // 3, width // 3, height - 2, width - 2, 3, 10 * cam + 2),
            ]
        views.append(CameraView(
            image=CameraImage(pixels=pixels, timestamp=0.05 * cam),
            chain=forward_camera_chain(),
            intrinsics=CameraIntrinsics.from_pinhole(6.0 + cam, 6.0 + cam, (width - 1) / 2.0, (height - 1) / 2.0),
            boxes=cam_boxes,
        ))
    offsets = rng.normal(0.0, 2.0, size=(n_points, 2)) if gt_offsets else None
    return FrameBundle(cloud=PointCloud(points=points, labels=labels), cameras=views, class_count=class_count,
                       gt_offsets=offsets, lidar_timestamp=1.5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def bundle(rng):
    return make_bundle(rng)


@pytest.fixture
def tiny_spec():
    """A small synthetic scene that renders in milliseconds."""
    return SceneSpec(seed=3, height=16, width=16, focal=7.0, rays_azimuth=64, rays_elevation=8,
                     k_vehicles=2, k_poles=2, k_walls=3)
