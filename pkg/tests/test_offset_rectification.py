import numpy as np
import pytest

from lifseg import autodiff as ad
from lifseg.data_model import Box2D, CameraView, FrameBundle, PointCloud
from lifseg.errors import ShapeMismatch
from lifseg.geometry import PixelCoords, VisibilityMask, owning_camera, project_bundle
from lifseg.offset_rectification import (OffsetTargets, compute_targets, fuse, ground_truth_targets, image_gather,
                                         loss_dir, loss_reg, rectified_gather, scatter_coarse)
from lifseg.synthetic import SceneSpec, generate

from conftest import make_bundle


def coords_of(pixels, depth=None):
    pixels = np.asarray(pixels, dtype=np.float64)
    depth = np.ones(pixels.shape[0]) if depth is None else np.asarray(depth, dtype=np.float64)
    return PixelCoords(idx=pixels, depth=depth)


def all_visible(n):
    return VisibilityMask(np.ones(n, dtype=bool))


def with_boxes(bundle, boxes_per_camera, labels=None):
    views = [CameraView(image=v.image, chain=v.chain, intrinsics=v.intrinsics, boxes=list(b))
             for v, b in zip(bundle.cameras, boxes_per_camera)]
    cloud = bundle.cloud if labels is None else PointCloud(points=bundle.cloud.points, labels=labels)
    return FrameBundle(cloud=cloud, cameras=views, class_count=bundle.class_count, gt_offsets=bundle.gt_offsets)


def targets_of(pixels, c_hat, mask=None):
    pixels = np.asarray(pixels, dtype=np.float64)
    mask = np.ones(pixels.shape[0], dtype=bool) if mask is None else np.asarray(mask)
    return OffsetTargets(mask=mask, c_hat=np.asarray(c_hat, dtype=np.float64), pixels=pixels,
                         box_index=np.where(mask, 0, -1))


class TestScatter:
    def test_no_visible_points(self):
        f = np.ones((3, 2))
        pseudo = scatter_coarse(f, [coords_of([[0, 0], [1, 1], [2, 2]])], [VisibilityMask(np.zeros(3, bool))], 4, 4)
        np.testing.assert_array_equal(pseudo.features.data, 0.0)
        np.testing.assert_array_equal(pseudo.source_rows, -1)

    def test_one_point_per_pixel_round_trip(self):
        rng = np.random.default_rng(0)
        f = rng.normal(size=(5, 3))
        coords = [coords_of([[0, 0], [0, 1], [1, 2], [2, 0], [2, 2]])]
        masks = [all_visible(5)]
        pseudo = scatter_coarse(f, coords, masks, 3, 3)
        assert pseudo.features.shape == (1, 3, 3, 3)
        np.testing.assert_array_equal(image_gather(pseudo.features, coords, masks).data, f)

    def test_nearest_depth_wins(self):
        f = np.array([[9.0], [5.0], [7.0]])
        coords = [coords_of([[1, 1], [1.2, 0.8], [1, 1]], depth=[9.0, 5.0, 5.0])]
        pseudo = scatter_coarse(f, coords, [all_visible(3)], 3, 3)
        assert pseudo.source_rows[0, 1, 1] == 1
        assert pseudo.features.data[0, 1, 1, 0] == 5.0

    def test_gradient_flows_to_winning_points(self):
        f = ad.parameter(np.array([[1.0], [2.0], [3.0]]))
        coords = [coords_of([[0, 0], [0, 0], [1, 1]], depth=[2.0, 1.0, 1.0])]
        with ad.Tape() as tape:
            loss = ad.mean_all(scatter_coarse(f, coords, [all_visible(3)], 2, 2).features)
        grads = ad.backward(tape, loss)
        np.testing.assert_allclose(grads[f], [[0.0], [0.25], [0.25]])


class TestTargets:
    def test_single_point_in_box(self, rng):
        bundle = with_boxes(make_bundle(rng, n_points=1, n_cameras=1), [[Box2D(0, 0, 5, 5, 2, 1)]])
        targets = compute_targets(bundle, [coords_of([[2.3, 3.1]])], [all_visible(1)])
        assert targets.mask.tolist() == [True]
        np.testing.assert_array_equal(targets.c_hat, [[2.3, 3.1]])
        np.testing.assert_array_equal(targets.residual, 0.0)

    def test_midpoint_of_two_points(self, rng):
        bundle = with_boxes(make_bundle(rng, n_points=2, n_cameras=1), [[Box2D(0, 0, 5, 5, 2, 1)]])
        targets = compute_targets(bundle, [coords_of([[0, 0], [2, 0]])], [all_visible(2)])
        np.testing.assert_array_equal(targets.c_hat, [[1.0, 0.0], [1.0, 0.0]])
        assert loss_reg(np.zeros((2, 2)), targets).item() == 1.0

    def test_box_center_mode(self, rng):
        bundle = with_boxes(make_bundle(rng, n_points=2, n_cameras=1), [[Box2D(0, 0, 5, 3, 2, 1)]])
        targets = compute_targets(bundle, [coords_of([[0, 0], [2, 0]])], [all_visible(2)], centroid_mode="box_center")
        np.testing.assert_array_equal(targets.c_hat, [[2.5, 1.5], [2.5, 1.5]])

    def test_matches_brute_force_grouping(self):
        rng = np.random.default_rng(7)
        for _ in range(30):
            n, cams, h, w = 40, 2, 12, 10
            bundle = make_bundle(rng, n_points=n, n_cameras=cams, height=h, width=w, boxes=False)
            boxes = []
            next_id = 1
            for _cam in range(cams):
                cam_boxes = []
                for _b in range(int(rng.integers(0, 4))):
                    r0, r1 = sorted(rng.integers(0, h, 2))
                    c0, c1 = sorted(rng.integers(0, w, 2))
                    cam_boxes.append(Box2D(int(r0), int(c0), int(r1), int(c1), 2, next_id))
                    next_id += 1
                boxes.append(cam_boxes)
            bundle = with_boxes(bundle, boxes)
            coords = [coords_of(np.column_stack([rng.uniform(-0.4, h - 0.6, n), rng.uniform(-0.4, w - 0.6, n)]))
                      for _ in range(cams)]
            masks = [VisibilityMask(rng.uniform(size=n) < 0.6) for _ in range(cams)]
            targets = compute_targets(bundle, coords, masks)

            owner = owning_camera(masks)
            assigned = {}
            for i in range(n):
                if owner[i] < 0:
                    continue
                r, c = (int(v) for v in np.rint(coords[owner[i]].idx[i]))
                hits = [b for b in boxes[owner[i]] if b.min_row <= r <= b.max_row and b.min_col <= c <= b.max_col]
                if hits:
                    best = min(hits, key=lambda b: (b.area, b.instance_id))
                    assigned[i] = (owner[i], best.instance_id)
            expected_mask = np.array([i in assigned for i in range(n)])
            np.testing.assert_array_equal(targets.mask, expected_mask)
            for i, key in assigned.items():
                members = [j for j, k in assigned.items() if k == key]
                centroid = np.mean([coords[owner[j]].idx[j] for j in members], axis=0)
                np.testing.assert_allclose(targets.c_hat[i], centroid, rtol=0, atol=1e-12)

    def test_foreground_only_requires_matching_label(self, rng):
        base = make_bundle(rng, n_points=2, n_cameras=1)
        bundle = with_boxes(base, [[Box2D(0, 0, 5, 5, 2, 1)]], labels=np.array([2, 1]))
        coords, masks = [coords_of([[1, 1], [3, 3]])], [all_visible(2)]
        assert compute_targets(bundle, coords, masks).mask.tolist() == [True, True]
        assert compute_targets(bundle, coords, masks, foreground_only=True).mask.tolist() == [True, False]

    def test_ground_truth_targets_residual(self, rng):
        bundle = make_bundle(rng, n_points=3, n_cameras=1)
        masks = [VisibilityMask(np.array([True, False, True]))]
        targets = ground_truth_targets(bundle, [coords_of([[1, 1], [2, 2], [3, 3]])], masks)
        np.testing.assert_allclose(targets.residual[[0, 2]], bundle.gt_offsets[[0, 2]], atol=1e-12)
        np.testing.assert_array_equal(targets.residual[1], 0.0)

    def test_aligned_mode_uses_the_class_extent(self, rng):
        base = make_bundle(rng, n_points=3, n_cameras=1)
        bundle = with_boxes(base, [[Box2D(2, 2, 6, 6, 2, 1)]], labels=np.array([2, 2, 1]))
        coords, masks = [coords_of([[1.0, 1.5], [5.0, 5.5], [3.0, 3.0]])], [all_visible(3)]
        targets = compute_targets(bundle, coords, masks, centroid_mode="aligned", foreground_only=True)
        assert targets.mask.tolist() == [False, True, False]
        np.testing.assert_allclose(targets.residual[1], [1.0, 0.5], atol=1e-12)

    def test_aligned_mode_skips_unreliable_boxes(self, rng):
        base = make_bundle(rng, n_points=3, n_cameras=1)
        coords, masks = [coords_of([[1.0, 1.5], [5.0, 5.5], [5.0, 12.0]])], [all_visible(3)]
        touching = with_boxes(base, [[Box2D(0, 2, 6, 6, 2, 1)]], labels=np.array([2, 2, 1]))
        assert not compute_targets(touching, coords, masks, centroid_mode="aligned").mask.any()
        stray = with_boxes(base, [[Box2D(2, 2, 6, 6, 2, 1)]], labels=np.array([2, 2, 2]))
        assert not compute_targets(stray, coords, masks, centroid_mode="aligned").mask.any()

    def test_aligned_targets_track_ground_truth_offsets(self):
        checked, error, magnitude = 0, 0.0, 0.0
        for frame in range(4):
            bundle = generate(SceneSpec(seed=2), frame)
            proj = project_bundle(bundle)
            targets = compute_targets(bundle, proj.coords, proj.masks, centroid_mode="aligned", foreground_only=True)
            m = targets.mask
            checked += int(m.sum())
            error += np.linalg.norm(targets.residual[m] - bundle.gt_offsets[m], axis=1).sum()
            magnitude += np.linalg.norm(bundle.gt_offsets[m], axis=1).sum()
        assert checked > 0
        assert error < 0.5 * magnitude


class TestAuxiliaryLosses:
    def test_reg_exact_residual_and_empty_mask(self):
        targets = targets_of([[0, 0], [3, 4]], [[1, 2], [0, 0]])
        assert loss_reg(targets.residual, targets).item() == 0.0
        empty = targets_of([[0, 0]], [[5, 5]], mask=[False])
        assert loss_reg(np.ones((1, 2)), empty).item() == 0.0

    def test_reg_moves_with_the_targets(self, rng):
        pixels = rng.uniform(0, 10, size=(6, 2))
        c_hat = pixels + rng.normal(size=(6, 2))
        offset = rng.normal(size=(6, 2))
        shift = np.array([1.5, -2.0])
        moved = targets_of(pixels, c_hat + shift)
        assert loss_reg(offset + shift, moved).item() == pytest.approx(loss_reg(offset, targets_of(pixels, c_hat)).item())

    def test_reg_is_smallest_at_the_residual(self, rng):
        targets = targets_of(rng.uniform(0, 10, size=(5, 2)), rng.uniform(0, 10, size=(5, 2)))
        best = loss_reg(targets.residual, targets).item()
        assert best == 0.0
        for _ in range(10):
            nudged = targets.residual + rng.normal(scale=0.1, size=(5, 2))
            assert loss_reg(nudged, targets).item() > best

    def test_dir_aligned_anti_aligned_orthogonal(self):
        targets = targets_of([[0, 0], [1, 1]], [[3, 4], [0, 2]])
        r = targets.residual
        assert loss_dir(2.0 * r, targets).item() == pytest.approx(-1.0, abs=1e-12)
        assert loss_dir(-r, targets).item() == pytest.approx(1.0, abs=1e-12)
        orthogonal = np.column_stack([-r[:, 1], r[:, 0]])
        assert loss_dir(orthogonal, targets).item() == pytest.approx(0.0, abs=1e-12)

    def test_dir_skips_zero_vectors(self):
        targets = targets_of([[0, 0], [1, 1]], [[0, 0], [1, 3]])
        assert loss_dir(np.array([[1.0, 0.0], [0.0, 5.0]]), targets).item() == pytest.approx(-1.0)

    def test_shape_mismatch(self):
        targets = targets_of([[0, 0]], [[1, 1]])
        with pytest.raises(ShapeMismatch):
            loss_reg(np.zeros((2, 2)), targets)

    @pytest.mark.parametrize("seed", range(20))
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        pixels = rng.uniform(0, 10, size=(8, 2))
        targets = targets_of(pixels, pixels + rng.normal(size=(8, 2)), mask=rng.uniform(size=8) < 0.8)
        o = ad.parameter(rng.normal(size=(8, 2)))
        assert ad.check_gradients(lambda: loss_reg(o, targets), [o]) < 1e-4
        assert ad.check_gradients(lambda: loss_dir(o, targets), [o]) < 1e-4


class TestRectifiedGather:
    def setup_method(self):
        rows = np.arange(6.0)[:, None, None] * np.ones((6, 5, 1))
        self.f_image = np.concatenate([rows, -rows], axis=2)[None]
        self.coords = [coords_of([[1.2, 1.0], [4.0, 3.0], [0.0, 4.0]])]
        self.masks = [VisibilityMask(np.array([True, True, False]))]

    def test_zero_offset_equals_plain_gather(self):
        f_prime, offset = rectified_gather(self.f_image, np.zeros((1, 6, 5, 2)), self.coords, self.masks)
        np.testing.assert_array_equal(f_prime.data, image_gather(self.f_image, self.coords, self.masks).data)
        np.testing.assert_array_equal(offset.numpy(), 0.0)

    def test_constant_row_offset_shifts_by_two(self):
        field = np.zeros((1, 6, 5, 2))
        field[..., 0] = 2.0
        f_prime, offset = rectified_gather(self.f_image, field, self.coords, self.masks)
        np.testing.assert_array_equal(f_prime.data[0], [3.0, -3.0])
        np.testing.assert_array_equal(offset.numpy()[0], [2.0, 0.0])
        np.testing.assert_array_equal(f_prime.data[2], 0.0)
        np.testing.assert_array_equal(offset.numpy()[2], 0.0)

    def test_offset_past_border_is_clamped(self):
        field = np.zeros((1, 6, 5, 2))
        field[..., 0] = 100.0
        f_prime, _ = rectified_gather(self.f_image, field, self.coords, self.masks)
        np.testing.assert_array_equal(f_prime.data[:2, 0], [5.0, 5.0])

    def test_offset_receives_gradient_through_o(self):
        field = ad.parameter(np.zeros((1, 6, 5, 2)))
        targets = targets_of([[1.2, 1.0], [4.0, 3.0], [0.0, 0.0]], [[2.2, 1.0], [4.0, 3.0], [0.0, 0.0]],
                             mask=[True, True, False])
        with ad.Tape() as tape:
            _, offset = rectified_gather(self.f_image, field, self.coords, self.masks)
            loss = loss_reg(offset, targets)
        grads = ad.backward(tape, loss)
        assert grads[field][0, 1, 1, 0] == pytest.approx(-0.5)


class TestFuse:
    def test_width_zero_tail_and_split(self):
        rng = np.random.default_rng(3)
        coarse, image = rng.normal(size=(4, 16)), np.zeros((4, 16))
        fused = fuse(coarse, image).data
        assert fused.shape == (4, 32)
        np.testing.assert_array_equal(fused[:, 16:], 0.0)
        image = rng.normal(size=(4, 16))
        fused = fuse(coarse, image).data
        np.testing.assert_array_equal(fused[:, :16], coarse)
        np.testing.assert_array_equal(fused[:, 16:], image)

    def test_row_mismatch(self):
        with pytest.raises(ShapeMismatch):
            fuse(np.zeros((3, 2)), np.zeros((4, 2)))
