"""Geometry and trajectory utilities, checked against independent oracles."""

import numpy as np
import pytest
from scipy.linalg import expm, logm

from fieldslam.core_math import (
    Intrinsics,
    SE3Pose,
    Sim3Transform,
    associate_timestamps,
    ate_statistics,
    backproject,
    load_trajectory,
    polar_orthonormalize,
    project,
    project_valid,
    quat_to_rotmat,
    rotmat_to_quat,
    save_trajectory,
    se3_exp,
    se3_log,
    se3_retract,
    skew,
    so3_exp,
    so3_log,
    umeyama_align,
)


def random_rotation(rng):
    return so3_exp(rng.normal(size=3))


def random_pose(rng, scale=1.0):
    return SE3Pose(random_rotation(rng), rng.normal(size=3) * scale)


# ---------------------------------------------------------------------------
# Lie group operations against the matrix exponential/logarithm oracle
# ---------------------------------------------------------------------------


def test_so3_exp_matches_matrix_exponential():
    rng = np.random.default_rng(1)
    for _ in range(200):
        omega = rng.normal(size=3) * rng.uniform(0.01, 2.5)
        assert np.allclose(so3_exp(omega), expm(skew(omega)), atol=1e-12)


def test_so3_exp_small_angle_series():
    omega = np.array([1e-10, -2e-10, 5e-11])
    assert np.allclose(so3_exp(omega), expm(skew(omega)), atol=1e-15)


def test_so3_log_roundtrip():
    rng = np.random.default_rng(2)
    for _ in range(200):
        omega = rng.normal(size=3)
        norm = np.linalg.norm(omega)
        if norm > np.pi - 1e-3:  # stay off the branch cut
            omega *= (np.pi - 1e-2) / norm
        assert np.allclose(so3_log(so3_exp(omega)), omega, atol=1e-9)


def test_so3_log_near_pi():
    axis = np.array([1.0, 2.0, -0.5])
    axis /= np.linalg.norm(axis)
    omega = axis * (np.pi - 1e-3)
    rot = so3_exp(omega)
    recovered = so3_log(rot)
    assert np.allclose(so3_exp(recovered), rot, atol=1e-8)


def test_so3_log_raises_on_branch_cut():
    rot = so3_exp(np.array([np.pi - 1e-9, 0.0, 0.0]))
    with pytest.raises(ValueError, match="branch cut"):
        so3_log(rot)


def test_se3_exp_matches_matrix_exponential():
    rng = np.random.default_rng(3)
    for _ in range(200):
        twist = rng.normal(size=6)
        mat = np.zeros((4, 4))
        mat[:3, :3] = skew(twist[3:])
        mat[:3, 3] = twist[:3]
        oracle = expm(mat)
        pose = se3_exp(twist)
        assert np.allclose(pose.rotation, oracle[:3, :3], atol=1e-12)
        assert np.allclose(pose.translation, oracle[:3, 3], atol=1e-12)


def test_se3_log_matches_matrix_logarithm():
    rng = np.random.default_rng(4)
    for _ in range(100):
        twist = rng.normal(size=6) * 0.8
        pose = se3_exp(twist)
        oracle = logm(pose.matrix())
        recovered = se3_log(pose)
        assert np.allclose(skew(recovered[3:]), oracle[:3, :3], atol=1e-9)
        assert np.allclose(recovered[:3], oracle[:3, 3], atol=1e-9)


def test_se3_exp_log_roundtrip():
    rng = np.random.default_rng(5)
    for _ in range(300):
        twist = rng.normal(size=6)
        if np.linalg.norm(twist[3:]) > np.pi - 1e-2:
            twist[3:] *= (np.pi - 1e-2) / np.linalg.norm(twist[3:])
        assert np.allclose(se3_log(se3_exp(twist)), twist, atol=1e-9)


def test_pose_compose_inverse_identity():
    rng = np.random.default_rng(6)
    for _ in range(100):
        pose = random_pose(rng)
        ident = pose.compose(pose.inverse())
        assert np.allclose(ident.rotation, np.eye(3), atol=1e-12)
        assert np.allclose(ident.translation, 0.0, atol=1e-12)


def test_pose_apply_matches_matrix():
    rng = np.random.default_rng(7)
    pose = random_pose(rng)
    pts = rng.normal(size=(50, 3))
    hom = np.concatenate([pts, np.ones((50, 1))], axis=1)
    oracle = (pose.matrix() @ hom.T).T[:, :3]
    assert np.allclose(pose.apply(pts), oracle, atol=1e-12)


def test_se3_retract_left_multiplies():
    rng = np.random.default_rng(8)
    pose = random_pose(rng)
    twist = rng.normal(size=6) * 0.1
    expected = se3_exp(twist).compose(pose)
    got = se3_retract(pose, twist)
    assert np.allclose(got.matrix(), expected.matrix(), atol=1e-12)


def test_polar_orthonormalize_restores_rotation():
    rng = np.random.default_rng(9)
    rot = random_rotation(rng)
    noisy = rot + rng.normal(size=(3, 3)) * 1e-4
    fixed = polar_orthonormalize(noisy)
    assert np.allclose(fixed @ fixed.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(fixed) > 0
    assert np.allclose(fixed, rot, atol=1e-3)


# ---------------------------------------------------------------------------
# Quaternions
# ---------------------------------------------------------------------------


def test_quaternion_roundtrip():
    rng = np.random.default_rng(10)
    for _ in range(200):
        rot = random_rotation(rng)
        assert np.allclose(quat_to_rotmat(rotmat_to_quat(rot)), rot,
                           atol=1e-12)


def test_quaternion_identity():
    q = rotmat_to_quat(np.eye(3))
    assert np.allclose(np.abs(q), [0, 0, 0, 1], atol=1e-15)


def test_quaternion_known_axis():
    # 90 degrees about z: q = (0, 0, sin45, cos45) in (x, y, z, w) order
    rot = so3_exp(np.array([0.0, 0.0, np.pi / 2]))
    q = rotmat_to_quat(rot)
    expected = np.array([0.0, 0.0, np.sin(np.pi / 4), np.cos(np.pi / 4)])
    assert np.allclose(q, expected * np.sign(q[3]) * np.sign(expected[3]),
                       atol=1e-12)


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------


K = Intrinsics(fx=100.0, fy=110.0, cx=63.5, cy=47.5, width=128, height=96)


def test_project_backproject_roundtrip():
    rng = np.random.default_rng(11)
    pixels = np.stack([rng.uniform(0, K.width - 1, 300),
                       rng.uniform(0, K.height - 1, 300)], axis=1)
    depths = rng.uniform(0.2, 5.0, 300)
    points = backproject(K, pixels, depths)
    assert np.allclose(points[:, 2], depths, atol=1e-12)
    assert np.allclose(project(K, points), pixels, atol=1e-10)


def test_project_valid_flags():
    points = np.array([[0.0, 0.0, 1.0],     # center, valid
                       [0.0, 0.0, -1.0],    # behind camera
                       [100.0, 0.0, 1.0]])  # far outside the image
    _, valid = project_valid(K, points, require_in_image=True)
    assert valid.tolist() == [True, False, False]
    _, valid_loose = project_valid(K, points, require_in_image=False)
    assert valid_loose.tolist() == [True, False, True]


# ---------------------------------------------------------------------------
# Umeyama alignment
# ---------------------------------------------------------------------------


def test_umeyama_recovers_constructed_sim3():
    rng = np.random.default_rng(12)
    for _ in range(50):
        rot = random_rotation(rng)
        t = rng.normal(size=3) * 3
        s = rng.uniform(0.3, 2.5)
        src = rng.normal(size=(40, 3))
        dst = s * (rot @ src.T).T + t
        fit = umeyama_align(src, dst, with_scale=True)
        assert abs(fit.scale - s) < 1e-9
        assert np.allclose(fit.rotation, rot, atol=1e-9)
        assert np.allclose(fit.translation, t, atol=1e-9)
        assert np.allclose(fit.apply(src), dst, atol=1e-9)


def test_umeyama_without_scale_keeps_unit_scale():
    rng = np.random.default_rng(13)
    rot = random_rotation(rng)
    t = rng.normal(size=3)
    src = rng.normal(size=(30, 3))
    dst = (rot @ src.T).T + t
    fit = umeyama_align(src, dst, with_scale=False)
    assert fit.scale == 1.0
    assert np.allclose(fit.apply(src), dst, atol=1e-9)


def test_umeyama_degenerate_input_raises():
    src = np.zeros((10, 3))
    dst = np.zeros((10, 3))
    with pytest.raises(ValueError):
        umeyama_align(src, dst, with_scale=True)


# ---------------------------------------------------------------------------
# Timestamp association
# ---------------------------------------------------------------------------


def test_associate_exact_and_threshold():
    a = np.array([0.0, 1.0, 2.0, 3.0])
    b = np.array([0.005, 1.5, 2.019, 3.021])
    pairs = associate_timestamps(a, b, max_dt=0.02)
    assert pairs == [(0, 0), (2, 2)]


def test_associate_is_injective():
    a = np.array([0.0, 0.01])
    b = np.array([0.005])
    pairs = associate_timestamps(a, b, max_dt=0.02)
    assert len(pairs) == 1
    assert pairs[0][1] == 0


def test_associate_prefers_closest():
    a = np.array([1.0])
    b = np.array([0.985, 1.002, 1.015])
    pairs = associate_timestamps(a, b, max_dt=0.02)
    assert pairs == [(0, 1)]


# ---------------------------------------------------------------------------
# Trajectory error
# ---------------------------------------------------------------------------


def _orbit(rng, n=40):
    times = np.arange(n) * 0.1
    poses = []
    for i in range(n):
        angle = 2 * np.pi * i / n
        rot = so3_exp(np.array([0.0, angle, 0.0]))
        poses.append(SE3Pose(rot, np.array([np.cos(angle), 0.1 * i,
                                            np.sin(angle)])))
    return times, poses


def test_ate_identical_trajectories_is_zero():
    rng = np.random.default_rng(14)
    times, poses = _orbit(rng)
    for mode in ("origin", "none"):
        stats = ate_statistics(times, poses, times, poses, mode=mode)
        assert stats.rmse == 0.0
        assert stats.mean == 0.0
    for mode in ("umeyama", "se3"):  # SVD alignment adds only rounding noise
        stats = ate_statistics(times, poses, times, poses, mode=mode)
        assert stats.rmse < 1e-12


def test_ate_transformed_trajectory_is_zero_after_alignment():
    rng = np.random.default_rng(15)
    times, poses = _orbit(rng)
    offset = random_pose(rng, scale=4.0)
    moved = [offset.compose(p) for p in poses]
    stats = ate_statistics(times, moved, times, poses, mode="se3")
    assert stats.rmse < 1e-9
    scaled = [SE3Pose(p.rotation, p.translation * 1.7) for p in moved]
    stats = ate_statistics(times, scaled, times, poses, mode="umeyama")
    assert stats.rmse < 1e-9


def test_ate_known_offset():
    rng = np.random.default_rng(16)
    times, poses = _orbit(rng)
    moved = [SE3Pose(p.rotation, p.translation + np.array([0.0, 0.3, 0.0]))
             for p in poses]
    stats = ate_statistics(times, moved, times, poses, mode="none")
    assert abs(stats.rmse - 0.3) < 1e-12


def test_ate_no_association_raises():
    times_a = np.array([0.0, 1.0])
    times_b = times_a + 10.0
    _, poses = _orbit(np.random.default_rng(0), n=2)
    with pytest.raises(ValueError):
        ate_statistics(times_a, poses, times_b, poses)


# ---------------------------------------------------------------------------
# Trajectory files
# ---------------------------------------------------------------------------


def test_trajectory_roundtrip(tmp_path):
    rng = np.random.default_rng(17)
    times, poses = _orbit(rng, n=12)
    path = tmp_path / "traj.txt"
    save_trajectory(path, times, poses)
    loaded_times, loaded_poses = load_trajectory(path)
    assert np.allclose(loaded_times, times, atol=1e-6)
    for a, b in zip(poses, loaded_poses):
        assert np.allclose(a.matrix(), b.matrix(), atol=1e-8)


def test_load_trajectory_reports_line_number(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("0.0 0 0 0 0 0 0 1\nnot a row\n")
    with pytest.raises(ValueError, match="2"):
        load_trajectory(path)


def test_load_trajectory_skips_comments(tmp_path):
    path = tmp_path / "traj.txt"
    path.write_text("# header\n0.0 1 2 3 0 0 0 1\n\n")
    times, poses = load_trajectory(path)
    assert len(times) == 1
    assert np.allclose(poses[0].translation, [1, 2, 3])
