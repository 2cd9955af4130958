"""
Intrinsics, pose conversions, reprojection and bilinear sampling.
"""
import numpy as np
import pytest

import ndiff as nd
from geometry import (BOUNDS_TOL, GeometryError, Intrinsics, Pose6, bilinear_sample, invert_transform,
                      matrix_to_pose, pixel_grid, pose_to_matrix, pose_vector_to_matrix, relative_transform,
                      reproject, synthesize_view)
from ndiff import Tensor
from synthscene import random_scene, random_trajectory, render_triplet


def test_intrinsics_validation():
    with pytest.raises(GeometryError):
        Intrinsics(0.0, 10.0, 5.0, 5.0)
    with pytest.raises(GeometryError):
        Intrinsics(10.0, 10.0, float("nan"), 5.0)
    with pytest.raises(GeometryError):
        Intrinsics(10.0, 10.0, 40.0, 5.0).validate_for(16, 16)
    K = Intrinsics.default_for(32, 64)
    np.testing.assert_allclose(K.matrix() @ K.inverse(), np.eye(3), atol=1e-12)
    assert K.cx == pytest.approx(31.5) and K.cy == pytest.approx(15.5)


def test_pose_to_matrix_is_rigid():
    M = pose_to_matrix(Pose6((0.1, -0.4, 0.25), (1.0, 2.0, -3.0)))
    R = M[:3, :3]
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)
    np.testing.assert_allclose(M[:3, 3], [1.0, 2.0, -3.0])
    np.testing.assert_allclose(M[3], [0, 0, 0, 1])


def test_rotation_about_z_by_quarter_turn():
    M = pose_to_matrix(Pose6((0.0, 0.0, np.pi / 2 - 1e-9), (0.0, 0.0, 0.0)))
    np.testing.assert_allclose(M[:3, :3] @ [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], atol=1e-8)


def test_pose_round_trip():
    pose = Pose6((0.3, -0.2, 0.1), (0.5, -1.5, 2.0))
    back = matrix_to_pose(pose_to_matrix(pose))
    np.testing.assert_allclose(back.vector(), pose.vector(), atol=1e-10)


def test_zero_rotation_is_identity():
    np.testing.assert_allclose(pose_to_matrix(Pose6()), np.eye(4), atol=1e-12)


@pytest.mark.parametrize("rotation", [(np.pi, 0.0, 0.0), (float("inf"), 0.0, 0.0)])
def test_pose_to_matrix_rejects_bad_rotation(rotation):
    with pytest.raises(GeometryError):
        pose_to_matrix(Pose6(rotation, (0.0, 0.0, 0.0)))


def test_batched_pose_vector_matches_single():
    vectors = np.array([[0.1, 0.2, -0.1, 1.0, 0.0, 0.5], [0.0, 0.0, 0.0, 0.0, 2.0, 0.0]])
    with nd.double_precision():
        batched = pose_vector_to_matrix(Tensor(vectors)).data
    for i, v in enumerate(vectors):
        np.testing.assert_allclose(batched[i], pose_to_matrix(Pose6.from_vector(v)), atol=1e-12)


def test_relative_transform_composes():
    a = pose_to_matrix(Pose6((0.0, 0.1, 0.0), (0.0, 0.0, 1.0)))
    b = pose_to_matrix(Pose6((0.05, 0.0, 0.0), (0.2, 0.0, 2.0)))
    T = relative_transform(a, b)
    np.testing.assert_allclose(b @ T, a, atol=1e-12)
    np.testing.assert_allclose(invert_transform(a) @ a, np.eye(4), atol=1e-12)


def test_pixel_grid_is_row_major():
    grid = pixel_grid(2, 3)
    np.testing.assert_allclose(grid[0], [0, 1, 2, 0, 1, 2])
    np.testing.assert_allclose(grid[1], [0, 0, 0, 1, 1, 1])
    np.testing.assert_allclose(grid[2], 1.0)


def test_identity_reprojection_returns_pixel_grid():
    K = Intrinsics.default_for(8, 12)
    depth = np.random.default_rng(0).uniform(1.0, 30.0, (1, 1, 8, 12))
    coords, valid = reproject(depth, K, np.eye(4))
    ys, xs = np.mgrid[0:8, 0:12]
    np.testing.assert_allclose(coords.data[0, ..., 0], xs, atol=1e-5)
    np.testing.assert_allclose(coords.data[0, ..., 1], ys, atol=1e-5)
    assert valid.shape == (1, 8, 12)
    assert valid.min() == 1.0


def test_translation_shifts_by_disparity():
    K = Intrinsics(20.0, 20.0, 7.5, 7.5)
    depth = np.full((1, 1, 16, 16), 10.0)
    T = np.eye(4)
    T[0, 3] = 0.5
    with nd.double_precision():
        coords, valid = reproject(depth, K, T)
    shift = 20.0 * 0.5 / 10.0
    np.testing.assert_allclose(coords.data[0, :, :, 0] - np.arange(16)[None, :], shift, atol=1e-9)
    # the rightmost column lands beyond the image
    assert valid[0, :, -1].max() == 0.0
    assert valid[0, :, :-1].min() == 1.0


def test_points_behind_camera_are_invalid():
    K = Intrinsics.default_for(4, 4)
    T = np.eye(4)
    T[2, 3] = -5.0
    _, valid = reproject(np.full((1, 1, 4, 4), 2.0), K, T)
    assert valid.max() == 0.0


def test_bounds_tolerance_keeps_border_pixels():
    assert BOUNDS_TOL < 1e-3
    K = Intrinsics.default_for(4, 4)
    T = np.eye(4)
    T[0, 3] = 1e-6
    _, valid = reproject(np.full((1, 1, 4, 4), 5.0), K, T)
    assert valid.min() == 1.0


def test_bilinear_sample_values():
    source = np.arange(12, dtype=np.float64).reshape(1, 1, 3, 4)
    coords = np.array([[[[1.0, 1.0], [1.5, 0.0], [0.5, 0.5], [10.0, -3.0]]]])
    with nd.double_precision():
        out = bilinear_sample(source, coords).data[0, 0, 0]
    np.testing.assert_allclose(out, [5.0, 1.5, 2.5, 3.0])


def test_bilinear_coordinate_gradient_is_zero_when_clamped():
    source = Tensor(np.arange(12, dtype=np.float64).reshape(1, 1, 3, 4))
    coords = Tensor(np.array([[[[10.0, 1.2], [1.3, 1.4]]]]), requires_grad=True)
    nd.sum_(bilinear_sample(source, coords)).backward()
    assert coords.grad[0, 0, 0, 0] == 0.0
    assert coords.grad[0, 0, 0, 1] == pytest.approx(4.0)
    np.testing.assert_allclose(coords.grad[0, 0, 1], [1.0, 4.0], rtol=1e-6)


def test_bilinear_source_gradient_sums_weights():
    source = Tensor(np.zeros((1, 1, 3, 3)), requires_grad=True)
    coords = Tensor(np.array([[[[0.25, 0.5]]]]))
    nd.sum_(bilinear_sample(source, coords)).backward()
    expected = np.zeros((3, 3))
    expected[0, 0], expected[0, 1] = 0.75 * 0.5, 0.25 * 0.5
    expected[1, 0], expected[1, 1] = 0.75 * 0.5, 0.25 * 0.5
    np.testing.assert_allclose(source.grad[0, 0], expected, rtol=1e-6)


def test_synthesize_view_identity_reproduces_source(rng):
    source = rng.uniform(0, 1, (2, 3, 8, 8))
    depth = rng.uniform(1, 5, (2, 1, 8, 8))
    recon, valid = synthesize_view(source, depth, Intrinsics.default_for(8, 8), np.eye(4))
    np.testing.assert_allclose(recon.data, source, atol=1e-4)
    assert valid.min() == 1.0


def test_synthesize_view_rejects_batch_mismatch():
    with pytest.raises(nd.ShapeMismatchError):
        synthesize_view(np.zeros((2, 3, 4, 4)), np.ones((1, 1, 4, 4)), Intrinsics.default_for(4, 4),
                        np.eye(4)[None].repeat(1, axis=0))


def _warp_error(triplet, K, depth_scale=1.0):
    target = triplet.frames[1].transpose(2, 0, 1)[None]
    depth = (triplet.depths[1] * depth_scale)[None, None].astype(np.float64)
    diffs = []
    for frame, T in ((triplet.frames[0], triplet.relative[0]), (triplet.frames[2], triplet.relative[1])):
        with nd.double_precision():
            recon, valid = synthesize_view(frame.transpose(2, 0, 1)[None].astype(np.float64), depth, K, T)
        diffs.append(np.abs(recon.data - target).mean(axis=1)[0][valid[0] > 0])
    return float(np.concatenate(diffs).mean())


def test_ground_truth_warp_reconstructs_target():
    """Warping rendered sources with true depth and motion reproduces the target; wrong depth does worse."""
    for seed in range(20):
        scene = random_scene(seed, "street", 64, 64)
        center, motion = random_trajectory(seed + 100)
        triplet = render_triplet(scene, center, motion)
        exact = _warp_error(triplet, scene.intrinsics)
        assert exact <= 0.01, f"seed {seed}: {exact:.4f}"
        for scale in (0.9, 1.1):
            assert _warp_error(triplet, scene.intrinsics, scale) > exact


@pytest.mark.parametrize("seed", range(5))
def test_ground_truth_warp_in_open_scenes(seed):
    scene = random_scene(seed, "open", 64, 64)
    center, motion = random_trajectory(seed + 200)
    assert _warp_error(render_triplet(scene, center, motion), scene.intrinsics) <= 0.01


def test_reproject_matches_point_by_point_oracle(rng):
    K = Intrinsics.default_for(8, 8)
    depth = rng.uniform(1.0, 20.0, (8, 8))
    T = pose_to_matrix(Pose6(tuple(rng.uniform(-0.1, 0.1, 3)), tuple(rng.uniform(-0.5, 0.5, 3))))
    with nd.double_precision():
        coords, valid = reproject(depth, K, T)
    for y in range(8):
        for x in range(8):
            point = depth[y, x] * np.array([(x - K.cx) / K.fx, (y - K.cy) / K.fy, 1.0])
            moved = T[:3, :3] @ point + T[:3, 3]
            u = K.fx * moved[0] / moved[2] + K.cx
            v = K.fy * moved[1] / moved[2] + K.cy
            np.testing.assert_allclose(coords.data[0, y, x], [u, v], atol=1e-5)
            inside = moved[2] > 1e-6 and -BOUNDS_TOL <= u <= 7 + BOUNDS_TOL and -BOUNDS_TOL <= v <= 7 + BOUNDS_TOL
            assert valid[0, y, x] == float(inside)


def test_projection_just_past_the_tolerance_is_invalid():
    K = Intrinsics.default_for(4, 4)
    T = np.eye(4)
    # shifts every column right by 0.01 px at depth 5
    T[0, 3] = 0.01 * 5.0 / K.fx
    with nd.double_precision():
        _, valid = reproject(np.full((1, 1, 4, 4), 5.0), K, T)
    assert valid[0, :, -1].max() == 0.0
    assert valid[0, :, :-1].min() == 1.0
