import math

import numpy as np
import pytest
import torch

from udnf.geometry import (
    CameraPose,
    GeometryError,
    Intrinsics,
    c2w_from_lookat,
    candidate_pose,
    euler_xyz,
    generate_rays,
    init_candidates,
    lookat,
    rodrigues,
    rotation_from_position,
)

D = torch.float64


def t(*xs):
    return torch.tensor(xs, dtype=D)


def random_unit(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


# -- rodrigues -------------------------------------------------------------


def test_rodrigues_zero_is_identity():
    assert torch.equal(rodrigues(t(0, 0, 0)), torch.eye(3, dtype=D))


def test_rodrigues_quarter_turn_about_z():
    R = rodrigues(t(0, 0, math.pi / 2))
    np.testing.assert_allclose((R @ t(1, 0, 0)).numpy(), [0, 1, 0], atol=1e-12)


def test_rodrigues_half_turn_about_x():
    np.testing.assert_allclose(rodrigues(t(math.pi, 0, 0)).numpy(), np.diag([1, -1, -1]), atol=1e-12)


def test_rodrigues_small_angle_branch_is_first_order():
    w = t(1e-10, -2e-10, 3e-10)
    R = rodrigues(w)
    expected = np.eye(3) + np.array([[0, -3e-10, -2e-10], [3e-10, 0, -1e-10], [2e-10, 1e-10, 0]])
    np.testing.assert_allclose(R.numpy(), expected, atol=1e-20)


def test_rodrigues_matches_matrix_exponential():
    from scipy.linalg import expm

    rng = np.random.default_rng(5)
    for _ in range(20):
        w = rng.normal(size=3)
        K = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])
        np.testing.assert_allclose(rodrigues(torch.from_numpy(w)).numpy(), expm(K), atol=1e-12)


def test_rodrigues_properties():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        w = random_unit(rng) * rng.uniform(0, math.pi)
        R = rodrigues(torch.from_numpy(w)).numpy()
        assert np.abs(R.T @ R - np.eye(3)).max() < 1e-6
        assert abs(np.linalg.det(R) - 1) < 1e-6
        assert np.abs(R @ w - w).max() < 1e-6


# -- rotation from position --------------------------------------------------


@pytest.mark.parametrize("xyz", [(0, 0, 1), (0, 0, 2)])
def test_rotation_from_position_on_z_axis(xyz):
    R = rotation_from_position(t(*xyz), t(0, 0, 0))
    np.testing.assert_allclose(R.numpy(), np.eye(3), atol=1e-15)


def test_rotation_from_position_degenerate():
    with pytest.raises(GeometryError):
        rotation_from_position(t(0, 1, 0))
    with pytest.raises(GeometryError):
        rotation_from_position(t(0, 0, 0))


def test_rotation_from_position_rows_orthonormal_and_forward():
    rng = np.random.default_rng(1)
    for _ in range(100):
        v = torch.from_numpy(random_unit(rng) * rng.uniform(0.5, 3))
        R = rotation_from_position(v)
        np.testing.assert_allclose((R @ R.T).numpy(), np.eye(3), atol=1e-12)
        np.testing.assert_allclose(R[2].numpy(), (v / v.norm()).numpy(), atol=1e-12)
        assert torch.linalg.det(R).item() == pytest.approx(1.0, abs=1e-12)


def test_in_plane_rotation_premultiplies():
    ang = t(0.1, -0.2, 0.3)
    R0 = rotation_from_position(t(1, 2, 3))
    R = rotation_from_position(t(1, 2, 3), ang)
    np.testing.assert_allclose(R.numpy(), (euler_xyz(ang) @ R0).numpy(), atol=1e-14)


def test_euler_xyz_composition_order():
    from scipy.spatial.transform import Rotation

    a = np.array([0.3, -0.7, 1.1])
    ref = Rotation.from_euler("XYZ", a).as_matrix()  # intrinsic X then Y then Z
    np.testing.assert_allclose(euler_xyz(torch.from_numpy(a)).numpy(), ref, atol=1e-12)


# -- look-at -----------------------------------------------------------------


def test_lookat_from_plus_z():
    L = lookat(t(0, 0, 4), t(0, 0, 0), t(0, 1, 0))
    np.testing.assert_allclose(L[:3, :3].numpy(), np.eye(3), atol=1e-15)
    np.testing.assert_allclose(L[3].numpy(), [0, 0, -4, 1], atol=1e-15)
    np.testing.assert_allclose(L[:3, 3].numpy(), 0)


def test_lookat_on_x_axis_is_orthonormal():
    L = lookat(t(3, 0, 0), t(0, 0, 0), t(0, 1, 0))
    B = L[:3, :3].numpy()
    np.testing.assert_allclose(B.T @ B, np.eye(3), atol=1e-12)
    # camera -z (third column negated) points from eye to target
    np.testing.assert_allclose(-B[:, 2], [-1, 0, 0], atol=1e-12)


def test_lookat_degenerate():
    with pytest.raises(GeometryError):
        lookat(t(1, 1, 1), t(1, 1, 1), t(0, 1, 0))
    with pytest.raises(GeometryError):
        lookat(t(0, 4, 0), t(0, 0, 0), t(0, 1, 0))


def test_c2w_from_lookat_examples():
    pose = c2w_from_lookat(lookat(t(0, 0, 4), t(0, 0, 0), t(0, 1, 0)))
    np.testing.assert_allclose(pose.t.numpy(), [0, 0, 4], atol=1e-15)
    pose = c2w_from_lookat(torch.eye(4, dtype=D))
    assert torch.equal(pose.R, torch.eye(3, dtype=D))
    assert torch.equal(pose.t, torch.zeros(3, dtype=D))


def test_c2w_checked_mode_rejects_non_orthonormal():
    L = torch.eye(4, dtype=D)
    L[0, 0] = 2.0
    with pytest.raises(GeometryError):
        c2w_from_lookat(L, checked=True)


def test_lookat_round_trip_recovers_center():
    rng = np.random.default_rng(2)
    for _ in range(100):
        eye = random_unit(rng) * 4.0
        if abs(eye[1]) > 3.99:
            continue
        pose = c2w_from_lookat(lookat(torch.from_numpy(eye), t(0, 0, 0), t(0, 1, 0)))
        assert np.linalg.norm(pose.t.numpy() - eye) < 1e-6
        assert np.linalg.norm(pose.t.numpy()) == pytest.approx(4.0, abs=1e-6)
        pose.check()


# -- candidates --------------------------------------------------------------


def test_init_candidates_semi12():
    spec = init_candidates("semi12")
    assert spec.K == 12 and spec.radius == 4.0
    assert spec.up == (0.0, 1.0, 0.0) and spec.target == (0.0, 0.0, 0.0)
    four = [[1, 1, 1], [1, -1, 1], [-1, 1, 1], [-1, -1, 1]]
    assert spec.eye_candidates.tolist() == four * 3


def test_init_candidates_sphere8_covers_octants():
    spec = init_candidates("sphere8")
    assert spec.K == 8
    assert {tuple(r) for r in spec.eye_candidates.tolist()} == {
        (a, b, c) for a in (1, -1) for b in (1, -1) for c in (1, -1)
    }


def test_init_candidates_custom_and_errors():
    spec = init_candidates("custom", 1, [(0, 0, 1)])
    assert spec.K == 1
    with pytest.raises(ValueError):
        init_candidates("hexagonal")
    with pytest.raises(ValueError):
        init_candidates("custom", 1, [(0, 0, 0)])


def test_candidate_pose_h1_zero_hand_trace():
    spec = init_candidates("semi12")
    pose = candidate_pose(torch.zeros(36, dtype=D), 0, spec)
    # v = normalize(0.5, 0.5, 0.5); rows of R1 are right, up, forward = v
    v = np.ones(3) / math.sqrt(3)
    right = np.cross([0, 1, 0], v)
    right /= np.linalg.norm(right)
    up = np.cross(v, right)
    eye = np.stack([right, up, v]) @ np.array([0, 0, 4.0])
    np.testing.assert_allclose(pose.t.numpy(), eye, atol=1e-12)
    pose.check()


def test_candidate_pose_properties():
    rng = np.random.default_rng(3)
    for mode in ("semi12", "sphere8"):
        spec = init_candidates(mode)
        for _ in range(1000 // spec.K):
            h1 = torch.from_numpy(rng.normal(scale=3, size=3 * spec.K))
            for i in range(spec.K):
                pose = candidate_pose(h1, i, spec)
                assert abs(pose.t.norm().item() - 4.0) < 1e-5
                pose.check(1e-5)


def test_candidate_pose_index_range():
    with pytest.raises(IndexError):
        candidate_pose(torch.zeros(36, dtype=D), 12, init_candidates("semi12"))


def test_candidate_pose_is_differentiable():
    spec = init_candidates("semi12")
    h1 = torch.randn(36, dtype=D, requires_grad=True)
    candidate_pose(h1, 5, spec).t.sum().backward()
    g = h1.grad.reshape(12, 3)
    assert g[5].abs().sum() > 0
    assert g[torch.arange(12) != 5].abs().sum() == 0


# -- rays --------------------------------------------------------------------


def test_center_pixel_of_odd_image_looks_down_minus_z():
    intr = Intrinsics(10.0, 5, 5)
    rays = generate_rays(CameraPose(torch.eye(3, dtype=D), torch.zeros(3, dtype=D)), intr)
    np.testing.assert_allclose(rays.directions[2 * 5 + 2].numpy(), [0, 0, -1], atol=1e-15)


def test_ray_origins_and_unit_directions():
    intr = Intrinsics(20.0, 8, 6)
    pose = c2w_from_lookat(lookat(t(1, 2, 3), t(0, 0, 0), t(0, 1, 0)))
    rays = generate_rays(pose, intr)
    assert len(rays) == 48
    np.testing.assert_allclose(rays.origins.numpy(), np.tile([1, 2, 3], (48, 1)), atol=1e-15)
    assert np.abs(np.linalg.norm(rays.directions.numpy(), axis=1) - 1).max() < 1e-6


def test_top_left_pixel_is_up_and_left():
    rays = generate_rays(CameraPose(torch.eye(3, dtype=D), torch.zeros(3, dtype=D)), Intrinsics(10.0, 4, 4))
    d = rays.directions[0].numpy()
    assert d[0] < 0 and d[1] > 0


def test_rays_rotate_with_pose():
    rng = np.random.default_rng(4)
    intr = Intrinsics(12.0, 6, 6)
    base = CameraPose(torch.eye(3, dtype=D), t(0.5, -1, 2))
    d0 = generate_rays(base, intr).directions
    for _ in range(10):
        R = rodrigues(torch.from_numpy(rng.normal(size=3)))
        d1 = generate_rays(CameraPose(R, base.t), intr).directions
        np.testing.assert_allclose(d1.numpy(), (d0 @ R.T).numpy(), atol=1e-12)


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        Intrinsics(0.0, 4, 4)
    with pytest.raises(ValueError):
        Intrinsics(1.0, 1, 4)
