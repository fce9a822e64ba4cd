import numpy as np
import pytest

from lifseg.data_model import PointCloud
from lifseg.errors import NonRigid
from lifseg.geometry import (CalibrationChain, CameraIntrinsics, PixelCoords, RigidTransform, compose_chain,
                             in_image_mask, invert, owning_camera, pixel_ray, project_bundle, project_points,
                             VisibilityMask)

from conftest import random_transform


def scalar_projection(point, matrix, k):
    """Plain-arithmetic oracle for one point."""
    x, y, z = point
    cam = [matrix[r][0] * x + matrix[r][1] * y + matrix[r][2] * z + matrix[r][3] for r in range(3)]
    a = k[0][0] * cam[0] + k[0][1] * cam[1] + k[0][2] * cam[2] + k[0][3]
    b = k[1][0] * cam[0] + k[1][1] * cam[1] + k[1][2] * cam[2] + k[1][3]
    w = k[2][0] * cam[0] + k[2][1] * cam[1] + k[2][2] * cam[2] + k[2][3]
    return b / w, a / w, w


def test_project_points_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        transform = random_transform(rng)
        k = CameraIntrinsics.from_pinhole(*rng.uniform(20.0, 800.0, 2), *rng.uniform(0.0, 600.0, 2))
        xyz = rng.uniform(-10.0, 10.0, size=(1, 3))
        coords = project_points(PointCloud(points=xyz), transform, k)
        row, col, w = scalar_projection(xyz[0], transform.matrix, k.matrix)
        if w <= 1e-9:
            assert np.all(np.isnan(coords.idx[0]))
            continue
        if abs(w) < 0.1:
            continue
        worst = max(worst, abs(coords.idx[0, 0] - row), abs(coords.idx[0, 1] - col))
        assert coords.depth[0] == pytest.approx(w, abs=1e-12)
    assert worst < 1e-9


def test_compose_chain_matches_naive_product():
    rng = np.random.default_rng(1)
    for _ in range(200):
        parts = [random_transform(rng) for _ in range(4)]
        chain = CalibrationChain(*parts)
        expected = parts[3].matrix @ parts[2].matrix @ parts[1].matrix @ parts[0].matrix
        np.testing.assert_allclose(compose_chain(chain).matrix, expected, atol=1e-12, rtol=0)


def test_identity_chain_and_principal_point():
    identity = RigidTransform.identity()
    chain = CalibrationChain(identity, identity, identity, identity)
    np.testing.assert_array_equal(compose_chain(chain).matrix, np.eye(4))
    k = CameraIntrinsics.from_pinhole(100.0, 100.0, 320.0, 240.0)
    coords = project_points(PointCloud(points=[[0.0, 0.0, 10.0]]), compose_chain(chain), k)
    np.testing.assert_allclose(coords.idx[0], [240.0, 320.0])
    assert coords.depth[0] == 10.0


def test_point_behind_camera_is_invalid():
    k = CameraIntrinsics.from_pinhole(100.0, 100.0, 320.0, 240.0)
    coords = project_points(PointCloud(points=[[0.0, 0.0, -5.0], [1.0, 1.0, 0.0]]), RigidTransform.identity(), k)
    assert np.all(np.isnan(coords.idx))
    np.testing.assert_array_equal(coords.depth, [-5.0, 0.0])
    mask = in_image_mask(coords, 480, 640)
    assert not mask.mask.any()


def test_non_rigid_transform_rejected():
    m = np.eye(4)
    m[0, 0] = 1.01
    with pytest.raises(NonRigid):
        RigidTransform(m).validate()
    reflection = np.diag([1.0, 1.0, -1.0, 1.0])
    with pytest.raises(NonRigid):
        RigidTransform(reflection).validate()
    bad_row = np.eye(4)
    bad_row[3, 0] = 0.5
    identity = RigidTransform.identity()
    with pytest.raises(NonRigid):
        compose_chain(CalibrationChain(RigidTransform(bad_row), identity, identity, identity))


def test_invert_round_trip():
    rng = np.random.default_rng(2)
    t = random_transform(rng)
    np.testing.assert_allclose(t.compose(invert(t)).matrix, np.eye(4), atol=1e-12)


def test_in_image_mask_uses_rounded_pixels():
    coords = PixelCoords(idx=np.array([[-0.4, 0.0], [-0.6, 0.0], [9.4, 4.49], [9.6, 0.0], [0.0, 4.6]]),
                         depth=np.ones(5))
    mask = in_image_mask(coords, 10, 5)
    np.testing.assert_array_equal(mask.mask, [True, False, True, False, False])


def test_pixel_ray_inverts_projection():
    k = CameraIntrinsics.from_pinhole(50.0, 60.0, 10.0, 12.0)
    point = pixel_ray(3.5, 7.25, 4.0, k)
    coords = project_points(PointCloud(points=point[None, :]), RigidTransform.identity(), k)
    np.testing.assert_allclose(coords.idx[0], [3.5, 7.25], atol=1e-12)


def test_owning_camera_is_last_visible():
    masks = [VisibilityMask(np.array([True, True, False, False])),
             VisibilityMask(np.array([False, True, True, False]))]
    np.testing.assert_array_equal(owning_camera(masks), [0, 1, 1, -1])


def test_project_bundle_shapes(bundle):
    proj = project_bundle(bundle)
    assert proj.camera_count == bundle.camera_count
    for c, m in zip(proj.coords, proj.masks):
        assert c.idx.shape == (bundle.cloud.count, 2)
        assert m.mask.shape == (bundle.cloud.count,)
    owned = proj.owner >= 0
    assert np.all(np.isfinite(proj.owner_pixels()[owned]))
    assert np.all(np.isnan(proj.owner_pixels()[~owned]))


def test_translation_chain_and_inverse():
    identity = RigidTransform.identity()
    t = RigidTransform.translation([1.0, -2.0, 3.5])
    composed = compose_chain(CalibrationChain(identity, t, identity, identity))
    np.testing.assert_array_equal(composed.matrix, t.matrix)
    np.testing.assert_array_equal(invert(t).offset, [-1.0, 2.0, -3.5])
    np.testing.assert_array_equal(invert(identity).matrix, np.eye(4))


def test_in_image_mask_boundary_cases():
    coords = PixelCoords(idx=np.array([[-1.0, 5.0], [4.4, 9.6], [4.4, 9.4]]), depth=np.ones(3))
    np.testing.assert_array_equal(in_image_mask(coords, 10, 10).mask, [False, False, True])


def test_in_image_mask_matches_loop_oracle():
    rng = np.random.default_rng(5)
    idx = rng.uniform(-3.0, 13.0, size=(500, 2))
    depth = rng.uniform(-1.0, 5.0, size=500)
    mask = in_image_mask(PixelCoords(idx=idx, depth=depth), 10, 8).mask
    for i in range(500):
        r, c = int(np.rint(idx[i, 0])), int(np.rint(idx[i, 1]))
        assert mask[i] == (depth[i] > 1e-9 and 0 <= r < 10 and 0 <= c < 8)


def test_in_image_mask_grows_with_the_image():
    rng = np.random.default_rng(6)
    coords = PixelCoords(idx=rng.uniform(-3.0, 20.0, size=(400, 2)), depth=rng.uniform(-1.0, 5.0, size=400))
    for _ in range(50):
        h, w = (int(v) for v in rng.integers(1, 16, size=2))
        dh, dw = (int(v) for v in rng.integers(0, 6, size=2))
        small = in_image_mask(coords, h, w).mask
        large = in_image_mask(coords, h + dh, w + dw).mask
        assert not np.any(small & ~large)
