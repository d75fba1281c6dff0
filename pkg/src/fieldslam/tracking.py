"""Keyframes, dense correspondence, covisibility, and bundle adjustment.

The frontend operates on a 1/8-resolution pixel lattice: lattice cell (r, c)
corresponds to full-resolution pixel (8c + 4, 8r + 4), and all pixel
coordinates (correspondence targets, flow magnitudes, thresholds) stay in
full-resolution units.

Dense bundle adjustment refines keyframe poses (world-from-camera) and
per-pixel inverse depths. The normal equations have an arrow structure:
pose-pose block B, pose-depth block E, and a diagonal depth block C, solved
by eliminating depths with the Schur complement:

    dxi = (B - E C^-1 E^T)^-1 (v - E C^-1 w)
    dd  = C^-1 (w - E^T dxi)

Accepted Gauss-Newton steps never increase the energy (step halving, up to 5
halvings); singular reduced systems escalate the depth damping by 10x up to
3 times before erroring out.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .core_math import SE3Pose, se3_retract, skew

LATTICE_STRIDE = 8
KEYFRAME_FLOW_THRESHOLD = 4.0  # pixels, mean rigid flow


def lattice_shape(intrinsics):
    """Rows/cols of the 1/8-resolution lattice for a camera."""
    return intrinsics.height // LATTICE_STRIDE, intrinsics.width // LATTICE_STRIDE


def lattice_pixels(intrinsics):
    """Full-resolution (u, v) coordinates of the lattice cell centers."""
    rows, cols = lattice_shape(intrinsics)
    v, u = np.meshgrid(
        np.arange(rows) * LATTICE_STRIDE + LATTICE_STRIDE // 2,
        np.arange(cols) * LATTICE_STRIDE + LATTICE_STRIDE // 2,
        indexing="ij")
    return np.stack([u, v], axis=-1).astype(np.float64)


def downsample_to_lattice(image):
    """Sample an (H, W[, C]) image at the lattice cell centers."""
    rows = np.arange(image.shape[0] // LATTICE_STRIDE) * LATTICE_STRIDE \
        + LATTICE_STRIDE // 2
    cols = np.arange(image.shape[1] // LATTICE_STRIDE) * LATTICE_STRIDE \
        + LATTICE_STRIDE // 2
    return image[np.ix_(rows, cols)]


@dataclass
class Keyframe:
    """A keyframe: images, pose (world-from-camera), and lattice inverse depth."""

    frame_id: int
    agent_id: int
    timestamp: float
    rgb: np.ndarray            # (H, W, 3) in [0, 1]
    depth: np.ndarray          # (H, W) meters, 0 = invalid
    pose: SE3Pose
    descriptor: np.ndarray = None
    inv_depth: np.ndarray = None  # (H/8, W/8), 0 = unknown

    def init_inv_depth(self):
        """Seed lattice inverse depth from the sensor depth image."""
        lat = downsample_to_lattice(self.depth)
        self.inv_depth = np.where(lat > 0, 1.0 / np.maximum(lat, 1e-6), 0.0)


@dataclass
class CorrespondenceField:
    """Dense lattice correspondences from a source to a target keyframe.

    targets holds full-resolution (u, v) coordinates in the target image for
    every lattice cell of the source; weights in [0, 1] per pixel per axis.
    """

    source_id: int
    target_id: int
    targets: np.ndarray   # (rows, cols, 2)
    weights: np.ndarray   # (rows, cols, 2)


class OracleFlowProvider:
    """Ground-truth-driven correspondence provider for synthetic runs.

    Projects the source keyframe's true geometry into the target frame using
    the true poses, optionally corrupted with Gaussian pixel noise.
    """

    def __init__(self, intrinsics, true_poses, noise_sigma=0.0, seed=0):
        self.intrinsics = intrinsics
        self.true_poses = dict(true_poses)
        self.noise_sigma = noise_sigma
        self.rng = np.random.default_rng(seed)

    def add_pose(self, frame_id, pose):
        self.true_poses[frame_id] = pose

    def estimate_flow(self, kf_i, kf_j):
        """CorrespondenceField from kf_i's lattice into kf_j."""
        k = self.intrinsics
        rows, cols = lattice_shape(k)
        pix = lattice_pixels(k).reshape(-1, 2)
        depth_lat = downsample_to_lattice(kf_i.depth).reshape(-1)
        valid = depth_lat > 0
        targets = np.zeros((rows * cols, 2))
        weights = np.zeros((rows * cols, 2))
        if np.any(valid):
            pose_i = self.true_poses[kf_i.frame_id]
            pose_j = self.true_poses[kf_j.frame_id]
            rel = pose_j.inverse().compose(pose_i)
            pts_i = _backproject_lattice(k, pix[valid], depth_lat[valid])
            pts_j = rel.apply(pts_i)
            in_front = pts_j[:, 2] > 1e-6
            uv = np.zeros((pts_j.shape[0], 2))
            zs = np.where(in_front, pts_j[:, 2], 1.0)
            uv[:, 0] = k.fx * pts_j[:, 0] / zs + k.cx
            uv[:, 1] = k.fy * pts_j[:, 1] / zs + k.cy
            in_img = in_front & (uv[:, 0] >= 0) & (uv[:, 0] <= k.width - 1) \
                & (uv[:, 1] >= 0) & (uv[:, 1] <= k.height - 1)
            if self.noise_sigma > 0:
                uv = uv + self.rng.normal(0.0, self.noise_sigma, uv.shape)
            tgt = targets[valid]
            wgt = weights[valid]
            tgt[in_img] = uv[in_img]
            wgt[in_img] = 1.0
            targets[valid] = tgt
            weights[valid] = wgt
        return CorrespondenceField(kf_i.frame_id, kf_j.frame_id,
                                   targets.reshape(rows, cols, 2),
                                   weights.reshape(rows, cols, 2))


class PhotometricFlowProvider:
    """Self-contained coarse-to-fine ZNCC patch matcher on the lattice.

    For each source lattice cell, searches a window in the target image at
    two pyramid levels and refines with a parabola fit. Weights are the
    clamped ZNCC scores; textureless patches get weight 0.
    """

    def __init__(self, intrinsics, patch=7, search=12, refine=2):
        self.intrinsics = intrinsics
        self.patch = patch
        self.search = search
        self.refine = refine

    def estimate_flow(self, kf_i, kf_j):
        k = self.intrinsics
        rows, cols = lattice_shape(k)
        gray_i = kf_i.rgb.mean(axis=2)
        gray_j = kf_j.rgb.mean(axis=2)
        pix = lattice_pixels(k).reshape(-1, 2)
        depth_lat = downsample_to_lattice(kf_i.depth).reshape(-1)
        targets = np.zeros((rows * cols, 2))
        weights = np.zeros((rows * cols, 2))
        half = self.patch // 2
        for idx, (u, v) in enumerate(pix):
            if depth_lat[idx] <= 0:
                continue
            ui, vi = int(u), int(v)
            ref = _extract_patch(gray_i, ui, vi, half)
            if ref is None:
                continue
            ref_n = _normalize_patch(ref)
            if ref_n is None:
                continue
            best_score, best_uv = -1.0, None
            step = max(1, self.search // 4)
            for dv in range(-self.search, self.search + 1, step):
                for du in range(-self.search, self.search + 1, step):
                    cand = _extract_patch(gray_j, ui + du, vi + dv, half)
                    if cand is None:
                        continue
                    cand_n = _normalize_patch(cand)
                    if cand_n is None:
                        continue
                    score = float(np.sum(ref_n * cand_n))
                    if score > best_score:
                        best_score, best_uv = score, (ui + du, vi + dv)
            if best_uv is None:
                continue
            bu, bv = best_uv
            for dv in range(-self.refine, self.refine + 1):
                for du in range(-self.refine, self.refine + 1):
                    cand = _extract_patch(gray_j, bu + du, bv + dv, half)
                    if cand is None:
                        continue
                    cand_n = _normalize_patch(cand)
                    if cand_n is None:
                        continue
                    score = float(np.sum(ref_n * cand_n))
                    if score > best_score:
                        best_score, best_uv = score, (bu + du, bv + dv)
            weight = max(0.0, min(1.0, best_score / ref_n.size))
            targets[idx] = best_uv
            weights[idx] = weight
        return CorrespondenceField(kf_i.frame_id, kf_j.frame_id,
                                   targets.reshape(rows, cols, 2),
                                   weights.reshape(rows, cols, 2))


def _extract_patch(gray, u, v, half):
    if u - half < 0 or v - half < 0 or u + half >= gray.shape[1] \
            or v + half >= gray.shape[0]:
        return None
    return gray[v - half:v + half + 1, u - half:u + half + 1]


def _normalize_patch(patch):
    centered = patch - patch.mean()
    norm = np.sqrt(np.sum(centered ** 2))
    if norm < 1e-8:
        return None
    return centered / norm * np.sqrt(patch.size)


def _backproject_lattice(intrinsics, pixels, depths):
    pts = np.empty((pixels.shape[0], 3))
    pts[:, 0] = (pixels[:, 0] - intrinsics.cx) / intrinsics.fx * depths
    pts[:, 1] = (pixels[:, 1] - intrinsics.cy) / intrinsics.fy * depths
    pts[:, 2] = depths
    return pts


# ---------------------------------------------------------------------------
# Induced flow and covisibility
# ---------------------------------------------------------------------------


def induced_flow(intrinsics, pose_i, pose_j, inv_depth_i):
    """Rigid reprojection of kf_i's lattice into kf_j's image.

    Args:
        pose_i, pose_j: world-from-camera poses.
        inv_depth_i: (rows, cols) lattice inverse depth, 0 = unknown.

    Returns:
        (coords (rows, cols, 2) full-res target pixels, valid (rows, cols)):
        valid is False for unknown depth or points behind the target camera.
    """
    k = intrinsics
    rows, cols = inv_depth_i.shape
    pix = lattice_pixels(k).reshape(-1, 2)
    zeta = inv_depth_i.reshape(-1)
    valid = zeta > 0
    coords = np.zeros((rows * cols, 2))
    if np.any(valid):
        depths = 1.0 / zeta[valid]
        pts_i = _backproject_lattice(k, pix[valid], depths)
        rel = pose_j.inverse().compose(pose_i)
        pts_j = rel.apply(pts_i)
        in_front = pts_j[:, 2] > 1e-6
        zs = np.where(in_front, pts_j[:, 2], 1.0)
        uv = np.empty((pts_j.shape[0], 2))
        uv[:, 0] = k.fx * pts_j[:, 0] / zs + k.cx
        uv[:, 1] = k.fy * pts_j[:, 1] / zs + k.cy
        sub = np.zeros(rows * cols, dtype=bool)
        sub[np.flatnonzero(valid)] = in_front
        coords[np.flatnonzero(valid)[in_front]] = uv[in_front]
        valid = sub
    return coords.reshape(rows, cols, 2), valid.reshape(rows, cols)


def mean_rigid_flow(intrinsics, pose_i, pose_j, inv_depth_i):
    """Mean pixel displacement of kf_i's lattice reprojected into kf_j.

    Returns:
        +inf when no lattice pixel is valid.
    """
    coords, valid = induced_flow(intrinsics, pose_i, pose_j, inv_depth_i)
    if not np.any(valid):
        return float("inf")
    pix = lattice_pixels(intrinsics)
    disp = np.linalg.norm(coords[valid] - pix[valid], axis=1)
    return float(disp.mean())


def should_create_keyframe(intrinsics, pose_last_kf, pose_frame, inv_depth_last,
                           threshold=KEYFRAME_FLOW_THRESHOLD):
    """Keyframe rule: mean rigid flow since the last keyframe >= threshold."""
    flow = mean_rigid_flow(intrinsics, pose_last_kf, pose_frame, inv_depth_last)
    return flow >= threshold, flow


# ---------------------------------------------------------------------------
# Frame graph
# ---------------------------------------------------------------------------


@dataclass
class FrameGraph:
    """Covisibility graph over keyframe ids with mean-flow edge weights."""

    edges: dict = dataclass_field(default_factory=dict)  # (i, j) -> flow
    vertices: set = dataclass_field(default_factory=set)

    def add_vertex(self, frame_id):
        self.vertices.add(frame_id)

    def add_edge(self, i, j, flow):
        if i == j:
            raise ValueError("self edges are not allowed")
        self.vertices.add(i)
        self.vertices.add(j)
        self.edges[(i, j)] = float(flow)

    def neighbors(self, i):
        out = [j for (a, j) in self.edges if a == i]
        out += [a for (a, j) in self.edges if j == i]
        return sorted(set(out))

    def connected_components(self):
        remaining = set(self.vertices)
        components = []
        while remaining:
            seed = min(remaining)
            stack, comp = [seed], set()
            while stack:
                node = stack.pop()
                if node in comp:
                    continue
                comp.add(node)
                stack.extend(n for n in self.neighbors(node) if n not in comp)
            components.append(sorted(comp))
            remaining -= comp
        return components

    def dump(self, path):
        """Write "i j mean_flow" diagnostic lines sorted by (i, j)."""
        with open(path, "w", encoding="ascii") as handle:
            for (i, j) in sorted(self.edges):
                handle.write(f"{i} {j} {self.edges[(i, j)]:.6f}\n")


def build_frame_graph(intrinsics, keyframes, covis_threshold=24.0,
                      temporal_window=1):
    """Frame graph with odometry edges plus covisibility edges.

    Consecutive keyframes (within temporal_window in sequence order) are
    always connected; other pairs connect when the mean rigid flow in either
    direction is below covis_threshold.
    """
    graph = FrameGraph()
    ordered = sorted(keyframes, key=lambda kf: kf.frame_id)
    for kf in ordered:
        graph.add_vertex(kf.frame_id)
    for a in range(len(ordered)):
        for b in range(a + 1, len(ordered)):
            kf_i, kf_j = ordered[a], ordered[b]
            flow = mean_rigid_flow(intrinsics, kf_i.pose, kf_j.pose,
                                   kf_i.inv_depth)
            if b - a <= temporal_window or flow < covis_threshold:
                graph.add_edge(kf_i.frame_id, kf_j.frame_id, flow)
    return graph


# ---------------------------------------------------------------------------
# Dense bundle adjustment
# ---------------------------------------------------------------------------


@dataclass
class DBAProblem:
    """A dense bundle adjustment problem over keyframes and lattice depths."""

    intrinsics: object
    frame_ids: list                 # ordered keyframe ids
    poses: dict                     # frame_id -> SE3Pose (world-from-camera)
    inv_depths: dict                # frame_id -> (rows, cols) inverse depth
    depth_obs: dict                 # frame_id -> (rows, cols) observed depth
    edges: list                     # list of CorrespondenceField
    gauge_ids: list                 # frame ids with fixed poses
    alpha: float = 0.05             # depth-prior weight
    damping: float = 1e-4           # pixelwise depth damping


def build_dba_problem(intrinsics, keyframes, correspondences, gauge_ids=None,
                      alpha=0.05, damping=1e-4):
    """Validate inputs and assemble a DBAProblem.

    Raises:
        ValueError: for edges naming unknown keyframes, or for a connected
            component of the edge graph that contains no gauge keyframe.
    """
    frame_ids = [kf.frame_id for kf in keyframes]
    id_set = set(frame_ids)
    if len(id_set) != len(frame_ids):
        raise ValueError("duplicate keyframe ids")
    for corr in correspondences:
        if corr.source_id not in id_set or corr.target_id not in id_set:
            raise ValueError(
                f"correspondence {corr.source_id}->{corr.target_id} names "
                "an unknown keyframe")
    if gauge_ids is None:
        gauge_ids = [frame_ids[0]]
    graph = FrameGraph()
    for fid in frame_ids:
        graph.add_vertex(fid)
    for corr in correspondences:
        if corr.source_id != corr.target_id:
            graph.add_edge(corr.source_id, corr.target_id, 0.0)
    for comp in graph.connected_components():
        if not any(g in comp for g in gauge_ids):
            raise ValueError(
                f"graph component {comp} has no gauge-fixed keyframe")
    poses = {kf.frame_id: kf.pose.copy() for kf in keyframes}
    inv_depths = {}
    depth_obs = {}
    for kf in keyframes:
        if kf.inv_depth is None:
            kf.init_inv_depth()
        inv_depths[kf.frame_id] = kf.inv_depth.copy()
        depth_obs[kf.frame_id] = downsample_to_lattice(kf.depth)
    return DBAProblem(intrinsics=intrinsics, frame_ids=frame_ids, poses=poses,
                      inv_depths=inv_depths, depth_obs=depth_obs,
                      edges=list(correspondences), gauge_ids=list(gauge_ids),
                      alpha=alpha, damping=damping)


MIN_INV_DEPTH = 0.02   # 50 m
MAX_INV_DEPTH = 100.0  # 1 cm


def _edge_terms(problem, corr):
    """Residuals and Jacobians for one correspondence edge.

    Returns None when the edge has no usable pixels, else a dict with
    residuals r (M, 2), per-axis weights (M, 2), Jacobians wrt source pose,
    target pose (M, 2, 6) and source inverse depth (M, 2), plus the flat
    lattice indices of the contributing source pixels.
    """
    k = problem.intrinsics
    zeta = problem.inv_depths[corr.source_id].reshape(-1)
    weights = corr.weights.reshape(-1, 2)
    targets = corr.targets.reshape(-1, 2)
    usable = (weights.max(axis=1) > 0) & (zeta > 0)
    if not np.any(usable):
        return None
    idx = np.flatnonzero(usable)
    pix = lattice_pixels(k).reshape(-1, 2)[idx]
    zeta_u = zeta[idx]
    depths = 1.0 / zeta_u
    dirs = np.empty((idx.size, 3))
    dirs[:, 0] = (pix[:, 0] - k.cx) / k.fx
    dirs[:, 1] = (pix[:, 1] - k.cy) / k.fy
    dirs[:, 2] = 1.0
    pts_i = dirs * depths[:, None]

    pose_i = problem.poses[corr.source_id]
    pose_j = problem.poses[corr.target_id]
    pts_w = pose_i.apply(pts_i)
    rot_j_t = pose_j.rotation.T
    pts_j = (pts_w - pose_j.translation) @ rot_j_t.T

    in_front = pts_j[:, 2] > 1e-6
    if not np.any(in_front):
        return None
    idx, pix, dirs, zeta_u = idx[in_front], pix[in_front], dirs[in_front], \
        zeta_u[in_front]
    pts_w, pts_j = pts_w[in_front], pts_j[in_front]
    wts = weights[idx]
    tgt = targets[idx]

    z = pts_j[:, 2]
    pred = np.empty((idx.size, 2))
    pred[:, 0] = k.fx * pts_j[:, 0] / z + k.cx
    pred[:, 1] = k.fy * pts_j[:, 1] / z + k.cy
    res = tgt - pred

    # d(pred)/d(pts_j)
    dproj = np.zeros((idx.size, 2, 3))
    dproj[:, 0, 0] = k.fx / z
    dproj[:, 0, 2] = -k.fx * pts_j[:, 0] / z ** 2
    dproj[:, 1, 1] = k.fy / z
    dproj[:, 1, 2] = -k.fy * pts_j[:, 1] / z ** 2

    # d(pts_j)/d(eps_i) = R_j^T [I | -skew(pts_w)]; pose j gets the negative
    dw = np.zeros((idx.size, 3, 6))
    dw[:, :, :3] = np.eye(3)
    dw[:, 0, 4], dw[:, 0, 5] = pts_w[:, 2], -pts_w[:, 1]
    dw[:, 1, 3], dw[:, 1, 5] = -pts_w[:, 2], pts_w[:, 0]
    dw[:, 2, 3], dw[:, 2, 4] = pts_w[:, 1], -pts_w[:, 0]
    dpts_deps = np.einsum("ab,nbk->nak", rot_j_t, dw)
    jac_pose_i = np.einsum("nab,nbk->nak", dproj, dpts_deps)
    jac_pose_j = -jac_pose_i

    rel_rot = rot_j_t @ pose_i.rotation
    dpts_dzeta = (dirs @ rel_rot.T) * (-1.0 / zeta_u ** 2)[:, None]
    jac_zeta = np.einsum("nab,nb->na", dproj, dpts_dzeta)

    return {"idx": idx, "res": res, "weights": wts, "jac_i": jac_pose_i,
            "jac_j": jac_pose_j, "jac_zeta": jac_zeta}


def dba_energy(problem):
    """Total DBA energy: weighted reprojection plus the depth prior."""
    energy = 0.0
    for corr in problem.edges:
        terms = _edge_terms(problem, corr)
        if terms is None:
            continue
        energy += float(np.sum(terms["weights"] * terms["res"] ** 2))
    for fid in problem.frame_ids:
        zeta = problem.inv_depths[fid]
        obs = problem.depth_obs[fid]
        mask = (obs > 0) & (zeta > 0)
        if np.any(mask):
            diff = 1.0 / zeta[mask] - obs[mask]
            energy += problem.alpha * float(np.sum(diff ** 2))
    return energy


def _assemble(problem):
    """Build the arrow-structured normal equations.

    Returns:
        (B, E, C, v, w, pose_index, depth_size): B (6P, 6P), E (6P, D),
        C (D,) diagonal before damping, rhs v (6P,), w (D,).
    """
    free_ids = [f for f in problem.frame_ids if f not in problem.gauge_ids]
    pose_index = {fid: n for n, fid in enumerate(free_ids)}
    n_pose = len(free_ids)
    rows, cols = next(iter(problem.inv_depths.values())).shape
    px_per_frame = rows * cols
    depth_offset = {fid: n * px_per_frame
                    for n, fid in enumerate(problem.frame_ids)}
    n_depth = px_per_frame * len(problem.frame_ids)

    mat_b = np.zeros((6 * n_pose, 6 * n_pose))
    mat_e = np.zeros((6 * n_pose, n_depth))
    diag_c = np.zeros(n_depth)
    rhs_v = np.zeros(6 * n_pose)
    rhs_w = np.zeros(n_depth)

    for corr in problem.edges:
        terms = _edge_terms(problem, corr)
        if terms is None:
            continue
        wts = terms["weights"]
        res = terms["res"]
        j_i, j_j, j_z = terms["jac_i"], terms["jac_j"], terms["jac_zeta"]
        d_idx = depth_offset[corr.source_id] + terms["idx"]

        wj_z = wts * j_z
        diag_c_add = np.sum(wj_z * j_z, axis=1)
        np.add.at(diag_c, d_idx, diag_c_add)
        np.add.at(rhs_w, d_idx, np.sum(wj_z * res, axis=1))

        for fid, jac in ((corr.source_id, j_i), (corr.target_id, j_j)):
            if fid not in pose_index:
                continue
            sl = slice(6 * pose_index[fid], 6 * pose_index[fid] + 6)
            wjac = wts[:, :, None] * jac
            mat_b[sl, sl] += np.einsum("nak,nal->kl", wjac, jac)
            rhs_v[sl] += np.einsum("nak,na->k", wjac, res)
            e_blk = np.einsum("nak,na->nk", wjac, j_z)  # (M, 6)
            for col, val in zip(d_idx, e_blk):
                mat_e[sl, col] += val
        if corr.source_id in pose_index and corr.target_id in pose_index \
                and corr.source_id != corr.target_id:
            sl_i = slice(6 * pose_index[corr.source_id],
                         6 * pose_index[corr.source_id] + 6)
            sl_j = slice(6 * pose_index[corr.target_id],
                         6 * pose_index[corr.target_id] + 6)
            wj_i = wts[:, :, None] * j_i
            cross = np.einsum("nak,nal->kl", wj_i, j_j)
            mat_b[sl_i, sl_j] += cross
            mat_b[sl_j, sl_i] += cross.T

    for fid in problem.frame_ids:
        zeta = problem.inv_depths[fid].reshape(-1)
        obs = problem.depth_obs[fid].reshape(-1)
        mask = (obs > 0) & (zeta > 0)
        if not np.any(mask):
            continue
        idx = depth_offset[fid] + np.flatnonzero(mask)
        jac = -1.0 / zeta[mask] ** 2
        res = obs[mask] - 1.0 / zeta[mask]
        diag_c[idx] += problem.alpha * jac ** 2
        rhs_w[idx] += problem.alpha * jac * res

    return mat_b, mat_e, diag_c, rhs_v, rhs_w, pose_index, n_depth


def solve_dba_normal_equations(mat_b, mat_e, diag_c, rhs_v, rhs_w, damping):
    """Schur-complement solve of the arrow system.

    Returns:
        (dxi (6P,), ddepth (D,)).

    Raises:
        np.linalg.LinAlgError: if the reduced pose system is singular.
    """
    c_damped = diag_c + damping
    c_inv = 1.0 / c_damped
    if mat_b.shape[0] == 0:
        return np.zeros(0), c_inv * rhs_w
    ec_inv = mat_e * c_inv[None, :]
    schur = mat_b - ec_inv @ mat_e.T
    rhs = rhs_v - ec_inv @ rhs_w
    dxi = np.linalg.solve(schur, rhs)
    ddepth = c_inv * (rhs_w - mat_e.T @ dxi)
    return dxi, ddepth


@dataclass
class DBAReport:
    iterations: int
    initial_energy: float
    final_energy: float
    converged: bool
    halvings: int
    damping_escalations: int


def solve_dba(problem, iterations=8, tol=1e-12):
    """Run damped Gauss-Newton with Schur elimination on a DBAProblem.

    Mutates problem.poses and problem.inv_depths in place.

    Returns:
        DBAReport.
    """
    energy = dba_energy(problem)
    initial = energy
    damping = problem.damping
    total_halvings = 0
    escalations = 0
    converged = False
    rows, cols = next(iter(problem.inv_depths.values())).shape
    px_per_frame = rows * cols

    for it in range(iterations):
        mat_b, mat_e, diag_c, rhs_v, rhs_w, pose_index, _ = _assemble(problem)
        dxi = dd = None
        while True:
            try:
                dxi, dd = solve_dba_normal_equations(
                    mat_b, mat_e, diag_c, rhs_v, rhs_w, damping)
                break
            except np.linalg.LinAlgError:
                if escalations >= 3:
                    raise
                damping *= 10.0
                escalations += 1
        if dxi.size and not np.all(np.isfinite(dxi)):
            raise np.linalg.LinAlgError("non-finite pose update")

        saved_poses = {f: problem.poses[f].copy() for f in problem.frame_ids}
        saved_depths = {f: problem.inv_depths[f].copy()
                        for f in problem.frame_ids}
        step = 1.0
        accepted = False
        for _ in range(6):  # full step plus up to 5 halvings
            for fid, n in pose_index.items():
                problem.poses[fid] = se3_retract(
                    saved_poses[fid], step * dxi[6 * n:6 * n + 6])
            for n, fid in enumerate(problem.frame_ids):
                seg = dd[n * px_per_frame:(n + 1) * px_per_frame]
                updated = saved_depths[fid].reshape(-1) + step * seg
                known = saved_depths[fid].reshape(-1) > 0
                updated = np.where(
                    known, np.clip(updated, MIN_INV_DEPTH, MAX_INV_DEPTH), 0.0)
                problem.inv_depths[fid] = updated.reshape(rows, cols)
            new_energy = dba_energy(problem)
            if new_energy <= energy + 1e-15:
                accepted = True
                break
            step *= 0.5
            total_halvings += 1
        if not accepted:
            for fid in problem.frame_ids:
                problem.poses[fid] = saved_poses[fid]
                problem.inv_depths[fid] = saved_depths[fid]
            if escalations >= 3:
                break
            damping *= 10.0
            escalations += 1
            continue
        improvement = energy - new_energy
        energy = new_energy
        if improvement < tol * max(energy, 1.0):
            converged = True
            break
    return DBAReport(iterations=it + 1, initial_energy=initial,
                     final_energy=energy, converged=converged,
                     halvings=total_halvings,
                     damping_escalations=escalations)
