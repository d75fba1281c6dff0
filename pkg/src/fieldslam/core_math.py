"""Rigid-body math, camera geometry, trajectory alignment, and trajectory IO.

Conventions:
    - Poses are SE(3) transforms stored as a 3x3 rotation matrix plus a
      3-vector translation. Keyframe poses map camera coordinates to world
      coordinates (world-from-camera).
    - Twists are 6-vectors ordered (translational, rotational): xi = [rho, omega].
    - Pixel coordinates are (u, v) with u along image width.
    - Trajectory text format per line: "timestamp tx ty tz qx qy qz qw",
      '#' starts a comment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Angles closer to pi than this are rejected by se3_log / so3_log: the
# logarithm branch cut makes the rotation axis numerically unstable there.
BRANCH_CUT_MARGIN = 1e-6

# Rotation angles below this threshold use Taylor expansions.
SMALL_ANGLE = 1e-8


def skew(v):
    """Return the 3x3 cross-product matrix of a 3-vector."""
    v = np.asarray(v, dtype=np.float64)
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def so3_exp(omega):
    """Rodrigues formula: axis-angle 3-vector to rotation matrix."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = float(np.linalg.norm(omega))
    w = skew(omega)
    if theta < SMALL_ANGLE:
        # exp(W) ~ I + W + W^2/2 for tiny angles
        return np.eye(3) + w + 0.5 * (w @ w)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + a * w + b * (w @ w)


def so3_log(rot):
    """Rotation matrix to axis-angle 3-vector.

    Raises:
        ValueError: if the rotation angle is within BRANCH_CUT_MARGIN of pi,
            where the logarithm is not numerically well defined.
    """
    rot = np.asarray(rot, dtype=np.float64)
    cos_theta = np.clip((np.trace(rot) - 1.0) * 0.5, -1.0, 1.0)
    theta = math.acos(cos_theta)
    if theta >= math.pi - BRANCH_CUT_MARGIN:
        raise ValueError(
            f"rotation angle {theta:.9f} is within {BRANCH_CUT_MARGIN} of pi; "
            "logarithm branch cut")
    vee = 0.5 * np.array([
        rot[2, 1] - rot[1, 2],
        rot[0, 2] - rot[2, 0],
        rot[1, 0] - rot[0, 1],
    ])
    if theta < SMALL_ANGLE:
        return vee
    return theta / math.sin(theta) * vee


def _so3_left_jacobian(omega):
    """V matrix coupling rotation and translation in the SE(3) exponential."""
    theta = float(np.linalg.norm(omega))
    w = skew(omega)
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * w + (w @ w) / 6.0
    t2 = theta * theta
    a = (1.0 - math.cos(theta)) / t2
    b = (theta - math.sin(theta)) / (t2 * theta)
    return np.eye(3) + a * w + b * (w @ w)


def _so3_left_jacobian_inv(omega):
    theta = float(np.linalg.norm(omega))
    w = skew(omega)
    if theta < SMALL_ANGLE:
        return np.eye(3) - 0.5 * w + (w @ w) / 12.0
    half = 0.5 * theta
    cot_term = (1.0 - half * math.cos(half) / math.sin(half)) / (theta * theta)
    return np.eye(3) - 0.5 * w + cot_term * (w @ w)


@dataclass
class SE3Pose:
    """Rigid transform: x_out = rotation @ x_in + translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @staticmethod
    def identity():
        return SE3Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(mat):
        mat = np.asarray(mat, dtype=np.float64)
        return SE3Pose(mat[:3, :3], mat[:3, 3])

    def matrix(self):
        """Return the 4x4 homogeneous matrix."""
        mat = np.eye(4)
        mat[:3, :3] = self.rotation
        mat[:3, 3] = self.translation
        return mat

    def compose(self, other):
        """Return self o other (apply other first, then self)."""
        return SE3Pose(self.rotation @ other.rotation,
                       self.rotation @ other.translation + self.translation)

    def inverse(self):
        rot_t = self.rotation.T
        return SE3Pose(rot_t, -rot_t @ self.translation)

    def apply(self, points):
        """Transform an (N, 3) array (or single 3-vector) of points."""
        points = np.asarray(points, dtype=np.float64)
        if points.ndim == 1:
            return self.rotation @ points + self.translation
        return points @ self.rotation.T + self.translation

    def adjoint(self):
        """6x6 adjoint mapping twists between frames, for [rho, omega] order."""
        adj = np.zeros((6, 6))
        adj[:3, :3] = self.rotation
        adj[3:, 3:] = self.rotation
        adj[:3, 3:] = skew(self.translation) @ self.rotation
        return adj

    def copy(self):
        return SE3Pose(self.rotation.copy(), self.translation.copy())


def se3_exp(twist):
    """Exponential map from a twist [rho, omega] to an SE3Pose."""
    twist = np.asarray(twist, dtype=np.float64).reshape(6)
    rho, omega = twist[:3], twist[3:]
    rot = so3_exp(omega)
    trans = _so3_left_jacobian(omega) @ rho
    return SE3Pose(rot, trans)


def se3_log(pose):
    """Logarithm map from an SE3Pose to a twist [rho, omega].

    Raises:
        ValueError: near the pi branch cut of the rotation logarithm.
    """
    omega = so3_log(pose.rotation)
    rho = _so3_left_jacobian_inv(omega) @ pose.translation
    return np.concatenate([rho, omega])


def se3_retract(pose, twist):
    """Left-multiplicative retraction Exp(twist) o pose, re-orthonormalized."""
    updated = se3_exp(twist).compose(pose)
    updated.rotation = polar_orthonormalize(updated.rotation)
    return updated


def polar_orthonormalize(rot):
    """Project a near-rotation matrix onto SO(3) via polar decomposition."""
    u, _, vt = np.linalg.svd(np.asarray(rot, dtype=np.float64))
    rot_on = u @ vt
    if np.linalg.det(rot_on) < 0:
        u[:, -1] = -u[:, -1]
        rot_on = u @ vt
    return rot_on


def se3_ad(twist):
    """Little adjoint ad_xi (6x6) of a twist [rho, omega]."""
    twist = np.asarray(twist, dtype=np.float64).reshape(6)
    rho_x = skew(twist[:3])
    omega_x = skew(twist[3:])
    ad = np.zeros((6, 6))
    ad[:3, :3] = omega_x
    ad[:3, 3:] = rho_x
    ad[3:, 3:] = omega_x
    return ad


# ---------------------------------------------------------------------------
# Quaternions (x, y, z, w ordering, matching the trajectory text format)
# ---------------------------------------------------------------------------


def quat_to_rotmat(quat):
    """Unit quaternion (qx, qy, qz, qw) to rotation matrix."""
    q = np.asarray(quat, dtype=np.float64).reshape(4)
    q = q / np.linalg.norm(q)
    x, y, z, w = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def rotmat_to_quat(rot):
    """Rotation matrix to unit quaternion (qx, qy, qz, qw), qw >= 0."""
    rot = np.asarray(rot, dtype=np.float64)
    trace = np.trace(rot)
    if trace > 0:
        s = math.sqrt(trace + 1.0) * 2.0
        w = 0.25 * s
        x = (rot[2, 1] - rot[1, 2]) / s
        y = (rot[0, 2] - rot[2, 0]) / s
        z = (rot[1, 0] - rot[0, 1]) / s
    else:
        i = int(np.argmax(np.diag(rot)))
        if i == 0:
            s = math.sqrt(1.0 + rot[0, 0] - rot[1, 1] - rot[2, 2]) * 2.0
            w = (rot[2, 1] - rot[1, 2]) / s
            x = 0.25 * s
            y = (rot[0, 1] + rot[1, 0]) / s
            z = (rot[0, 2] + rot[2, 0]) / s
        elif i == 1:
            s = math.sqrt(1.0 + rot[1, 1] - rot[0, 0] - rot[2, 2]) * 2.0
            w = (rot[0, 2] - rot[2, 0]) / s
            x = (rot[0, 1] + rot[1, 0]) / s
            y = 0.25 * s
            z = (rot[1, 2] + rot[2, 1]) / s
        else:
            s = math.sqrt(1.0 + rot[2, 2] - rot[0, 0] - rot[1, 1]) * 2.0
            w = (rot[1, 0] - rot[0, 1]) / s
            x = (rot[0, 2] + rot[2, 0]) / s
            y = (rot[1, 2] + rot[2, 1]) / s
            z = 0.25 * s
    quat = np.array([x, y, z, w])
    if quat[3] < 0:
        quat = -quat
    return quat / np.linalg.norm(quat)


# ---------------------------------------------------------------------------
# Camera model
# ---------------------------------------------------------------------------

MIN_PROJECT_DEPTH = 1e-8


@dataclass
class Intrinsics:
    """Pinhole camera intrinsics; width/height in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def scaled(self, factor):
        """Intrinsics for an image resized by `factor` (e.g. 0.125)."""
        return Intrinsics(self.fx * factor, self.fy * factor,
                          self.cx * factor, self.cy * factor,
                          max(1, int(round(self.width * factor))),
                          max(1, int(round(self.height * factor))))


def project(intrinsics, points):
    """Project camera-frame points to pixels.

    Args:
        points: (N, 3) or (3,) camera-frame coordinates.

    Returns:
        (N, 2) or (2,) pixel coordinates (u, v).

    Raises:
        ValueError: if any point has z <= MIN_PROJECT_DEPTH.
    """
    points = np.asarray(points, dtype=np.float64)
    single = points.ndim == 1
    pts = points.reshape(-1, 3)
    if np.any(pts[:, 2] <= MIN_PROJECT_DEPTH):
        raise ValueError("projection of points at or behind the camera plane")
    uv = np.empty((pts.shape[0], 2))
    uv[:, 0] = intrinsics.fx * pts[:, 0] / pts[:, 2] + intrinsics.cx
    uv[:, 1] = intrinsics.fy * pts[:, 1] / pts[:, 2] + intrinsics.cy
    return uv[0] if single else uv


def project_valid(intrinsics, points, require_in_image=False):
    """Masked projection that never raises.

    Returns:
        (uv, mask): uv is (N, 2) with garbage rows where mask is False;
        mask is False for points with z <= MIN_PROJECT_DEPTH (and, when
        require_in_image, for pixels outside the image rectangle).
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    z = pts[:, 2]
    mask = z > MIN_PROJECT_DEPTH
    safe_z = np.where(mask, z, 1.0)
    uv = np.empty((pts.shape[0], 2))
    uv[:, 0] = intrinsics.fx * pts[:, 0] / safe_z + intrinsics.cx
    uv[:, 1] = intrinsics.fy * pts[:, 1] / safe_z + intrinsics.cy
    if require_in_image:
        mask = mask & (uv[:, 0] >= 0) & (uv[:, 0] <= intrinsics.width - 1) \
                    & (uv[:, 1] >= 0) & (uv[:, 1] <= intrinsics.height - 1)
    return uv, mask


def backproject(intrinsics, pixels, depths):
    """Lift pixels with depths to camera-frame 3D points.

    Raises:
        ValueError: if any depth is <= 0 or not finite.
    """
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    depths = np.asarray(depths, dtype=np.float64).reshape(-1)
    if np.any(~np.isfinite(depths)) or np.any(depths <= 0):
        raise ValueError("backprojection requires positive finite depths")
    pts = np.empty((pixels.shape[0], 3))
    pts[:, 0] = (pixels[:, 0] - intrinsics.cx) / intrinsics.fx * depths
    pts[:, 1] = (pixels[:, 1] - intrinsics.cy) / intrinsics.fy * depths
    pts[:, 2] = depths
    return pts


# ---------------------------------------------------------------------------
# Trajectory alignment
# ---------------------------------------------------------------------------


@dataclass
class Sim3Transform:
    """Similarity transform: x_out = scale * rotation @ x_in + translation."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        if points.ndim == 1:
            return self.scale * (self.rotation @ points) + self.translation
        return self.scale * (points @ self.rotation.T) + self.translation

    @staticmethod
    def identity():
        return Sim3Transform(1.0, np.eye(3), np.zeros(3))


def umeyama_align(source, target, with_scale=True):
    """Closed-form least-squares Sim(3)/SE(3) alignment of point sets.

    Finds (s, R, t) minimizing sum ||target_i - (s R source_i + t)||^2.

    Args:
        source, target: (N, 3) corresponding points, N >= 3.
        with_scale: estimate scale (Sim3) or fix s = 1 (SE3).

    Raises:
        ValueError: for N < 3 or a degenerate (collinear) configuration.
    """
    src = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape:
        raise ValueError("point sets must have matching shapes")
    n = src.shape[0]
    if n < 3:
        raise ValueError("alignment needs at least 3 point pairs")
    mu_src = src.mean(axis=0)
    mu_dst = dst.mean(axis=0)
    src_c = src - mu_src
    dst_c = dst - mu_dst
    cov = dst_c.T @ src_c / n
    u, d, vt = np.linalg.svd(cov)
    if d[1] <= max(d[0] * 1e-12, 1e-300):
        raise ValueError("degenerate point configuration (collinear points)")
    sign_fix = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign_fix[2, 2] = -1.0
    rot = u @ sign_fix @ vt
    if with_scale:
        var_src = (src_c ** 2).sum() / n
        scale = float(np.trace(np.diag(d) @ sign_fix) / var_src)
    else:
        scale = 1.0
    trans = mu_dst - scale * rot @ mu_src
    return Sim3Transform(scale, rot, trans)


def associate_timestamps(times_a, times_b, max_dt=0.02):
    """Greedy nearest-neighbor timestamp association.

    Candidate pairs within max_dt are sorted by |dt| and taken greedily so
    each index is used at most once. Unmatched entries are dropped.

    Returns:
        list of (index_a, index_b) pairs sorted by index_a.
    """
    times_a = np.asarray(times_a, dtype=np.float64)
    times_b = np.asarray(times_b, dtype=np.float64)
    candidates = []
    for i, ta in enumerate(times_a):
        dts = np.abs(times_b - ta)
        j = int(np.argmin(dts)) if dts.size else -1
        if j >= 0 and dts[j] <= max_dt:
            # consider a couple of nearest options so greedy stays stable
            order = np.argsort(dts)[:3]
            for k in order:
                if dts[k] <= max_dt:
                    candidates.append((float(dts[k]), i, int(k)))
    candidates.sort()
    used_a, used_b, pairs = set(), set(), []
    for _, i, j in candidates:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j))
    pairs.sort()
    return pairs


@dataclass
class ATEResult:
    """Absolute trajectory error over associated, aligned positions."""

    rmse: float
    mean: float
    median: float
    num_pairs: int
    alignment: Sim3Transform
    errors: np.ndarray


def ate_statistics(est_times, est_poses, ref_times, ref_poses,
                   mode="umeyama", max_dt=0.02):
    """Absolute trajectory error between an estimate and a reference.

    Args:
        est_poses, ref_poses: sequences of SE3Pose (world-from-camera).
        mode: "umeyama" (Sim3), "se3" (no scale), "origin" (align the first
            associated pose exactly), or "none".

    Raises:
        ValueError: if no timestamps associate or mode is unknown.
    """
    pairs = associate_timestamps(est_times, ref_times, max_dt=max_dt)
    if not pairs:
        raise ValueError("no associated timestamps between trajectories")
    est_xyz = np.array([est_poses[i].translation for i, _ in pairs])
    ref_xyz = np.array([ref_poses[j].translation for _, j in pairs])
    if mode == "umeyama":
        alignment = umeyama_align(est_xyz, ref_xyz, with_scale=True)
    elif mode == "se3":
        alignment = umeyama_align(est_xyz, ref_xyz, with_scale=False)
    elif mode == "origin":
        i0, j0 = pairs[0]
        fix = ref_poses[j0].compose(est_poses[i0].inverse())
        alignment = Sim3Transform(1.0, fix.rotation, fix.translation)
    elif mode == "none":
        alignment = Sim3Transform.identity()
    else:
        raise ValueError(f"unknown alignment mode: {mode!r}")
    aligned = alignment.apply(est_xyz)
    errors = np.linalg.norm(aligned - ref_xyz, axis=1)
    return ATEResult(
        rmse=float(np.sqrt(np.mean(errors ** 2))),
        mean=float(np.mean(errors)),
        median=float(np.median(errors)),
        num_pairs=len(pairs),
        alignment=alignment,
        errors=errors,
    )


# ---------------------------------------------------------------------------
# Trajectory text IO
# ---------------------------------------------------------------------------


def save_trajectory(path, timestamps, poses):
    """Write "timestamp tx ty tz qx qy qz qw" lines."""
    with open(path, "w", encoding="ascii") as handle:
        for ts, pose in zip(timestamps, poses):
            q = rotmat_to_quat(pose.rotation)
            t = pose.translation
            handle.write(
                f"{ts:.6f} {t[0]:.9f} {t[1]:.9f} {t[2]:.9f} "
                f"{q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}\n")


def load_trajectory(path):
    """Read a trajectory text file.

    Returns:
        (timestamps (N,), list of SE3Pose).

    Raises:
        ValueError: naming the line number for malformed rows.
    """
    timestamps, poses = [], []
    with open(path, "r", encoding="ascii") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ValueError(
                    f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            try:
                values = [float(p) for p in parts]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            timestamps.append(values[0])
            poses.append(SE3Pose(quat_to_rotmat(values[4:8]), values[1:4]))
    return np.asarray(timestamps), poses
