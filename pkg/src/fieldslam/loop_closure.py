"""Loop detection, relative-transform estimation, pose-graph optimization,
and cross-field rendering consistency refinement.

Loop detection is covisibility-driven: a keyframe pair is covisible when the
mean rigid flow of one frame's lattice reprojected into the other stays below
a pixel threshold. Cross-agent candidates are prefiltered with a compact
appearance descriptor before the geometric check.

Pose-graph optimization runs Gauss-Newton on SE(3) with left-multiplicative
updates; loop edges are robustified with a Huber kernel via iteratively
reweighted least squares.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .core_math import (SE3Pose, quat_to_rotmat, rotmat_to_quat, se3_ad,
                        se3_log, se3_retract)
from .renderer import (EMPTY_WEIGHT_EPS, render_rays, sample_ray_depths,
                       _density_sdf_grad, _weights_backward)
from .tracking import (downsample_to_lattice, lattice_pixels, mean_rigid_flow)

DESCRIPTOR_DIM = 256
GRAY_BLOCK_WEIGHT = 0.95
HIST_BLOCK_WEIGHT = float(np.sqrt(1.0 - GRAY_BLOCK_WEIGHT ** 2))

TAU_COV_DEFAULT = 24.0     # pixels
TAU_DESC_DEFAULT = 0.85
R_LOCAL_DEFAULT = 3        # keyframe-order suppression radius, temporal
R_GLOBAL_DEFAULT = 5       # keyframe-order suppression radius, near-duplicate
N_LOCAL_DEFAULT = 12
HUBER_SCALE_DEFAULT = 0.1
MIN_HORN_INLIERS = 20


# ---------------------------------------------------------------------------
# Appearance descriptor
# ---------------------------------------------------------------------------


def _block_pool(image, out_rows, out_cols):
    """Average-pool a 2D image onto an out_rows x out_cols grid."""
    row_chunks = np.array_split(np.arange(image.shape[0]), out_rows)
    col_chunks = np.array_split(np.arange(image.shape[1]), out_cols)
    pooled = np.empty((out_rows, out_cols))
    for r, rows in enumerate(row_chunks):
        strip = image[rows]
        for c, cols in enumerate(col_chunks):
            pooled[r, c] = strip[:, cols].mean()
    return pooled


def compute_descriptor(rgb):
    """Compact appearance descriptor of an RGB image, unit L2 norm.

    Layout: 64 dims of contrast-normalized 8x8 average-pooled grayscale
    (weight 0.95) followed by 3x64-bin per-channel intensity histograms
    normalized jointly (weight sqrt(1 - 0.95^2)). The grayscale block is
    invariant to affine brightness changes; the histogram block anchors
    overall color statistics.

    Args:
        rgb: (H, W, 3) image in [0, 1].

    Returns:
        (256,) float64 descriptor with unit L2 norm (zero-signal blocks
        contribute zeros; the result is normalized if any block is nonzero).
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.shape[0] == 0 \
            or rgb.shape[1] == 0:
        raise ValueError("expected a nonempty (H, W, 3) image")
    gray = rgb.mean(axis=2)
    pooled = _block_pool(gray, 8, 8).reshape(-1)
    pooled = pooled - pooled.mean()
    norm = np.linalg.norm(pooled)
    gray_block = pooled / norm if norm > 1e-12 else np.zeros(64)

    hist = np.empty(192)
    for ch in range(3):
        counts, _ = np.histogram(rgb[:, :, ch], bins=64, range=(0.0, 1.0))
        hist[64 * ch:64 * (ch + 1)] = counts / rgb[:, :, ch].size
    norm = np.linalg.norm(hist)
    hist_block = hist / norm if norm > 1e-12 else hist

    desc = np.concatenate([GRAY_BLOCK_WEIGHT * gray_block,
                           HIST_BLOCK_WEIGHT * hist_block])
    norm = np.linalg.norm(desc)
    return desc / norm if norm > 1e-12 else desc


def descriptor_similarity(desc_a, desc_b):
    """Cosine similarity of two unit descriptors (plain dot product)."""
    return float(np.dot(desc_a, desc_b))


# ---------------------------------------------------------------------------
# Covisibility and loop detection
# ---------------------------------------------------------------------------


@dataclass
class CovisibilityMatrix:
    """Dense matrix of mean rigid flow between keyframe sets (pixels)."""

    row_ids: list
    col_ids: list
    flow: np.ndarray  # (R, C), +inf where unknown

    def __post_init__(self):
        if self.flow.shape != (len(self.row_ids), len(self.col_ids)):
            raise ValueError("flow shape does not match id lists")


def compute_covisibility(intrinsics, row_keyframes, col_poses):
    """Mean rigid flow from each row keyframe's lattice into each column pose.

    Args:
        row_keyframes: keyframes with pose and inv_depth set.
        col_poses: list of (kf_id, SE3Pose) in the same world frame.

    Returns:
        CovisibilityMatrix; the diagonal of a self-comparison is 0.
    """
    row_ids = [kf.frame_id for kf in row_keyframes]
    col_ids = [cid for cid, _ in col_poses]
    flow = np.full((len(row_ids), len(col_ids)), np.inf)
    for r, kf in enumerate(row_keyframes):
        for c, (_, pose) in enumerate(col_poses):
            flow[r, c] = mean_rigid_flow(intrinsics, kf.pose, pose,
                                         kf.inv_depth)
    return CovisibilityMatrix(row_ids=row_ids, col_ids=col_ids, flow=flow)


@dataclass
class LoopEdge:
    """A detected loop constraint between two keyframes."""

    kind: str                 # "intra" or "inter"
    agent_i: int
    kf_i: int
    agent_j: int
    kf_j: int
    transform: SE3Pose        # measured T_i^-1 T_j (camera i from camera j)
    weight: float = 1.0
    flow: float = 0.0

    def __post_init__(self):
        if (self.agent_i, self.kf_i) == (self.agent_j, self.kf_j):
            raise ValueError("loop edge endpoints must be distinct")


def detect_intra_loops(intrinsics, keyframes, n_local=N_LOCAL_DEFAULT,
                       tau_cov=TAU_COV_DEFAULT, r_local=R_LOCAL_DEFAULT,
                       r_global=R_GLOBAL_DEFAULT, transform_estimator=None):
    """Detect loop edges inside one agent's keyframe database.

    The last n_local keyframes form the local window; their covisibility
    against the full database yields candidate pairs with mean flow below
    tau_cov. Temporal neighbors within r_local keyframe positions are
    excluded, and greedy non-maximum suppression (best flow first) drops
    pairs within r_global positions of an already emitted edge's endpoints.

    Args:
        transform_estimator: optional callable (kf_i, kf_j) -> SE3Pose or
            None; by default the measurement is taken from current poses.

    Returns:
        list of intra LoopEdge sorted by ascending flow.
    """
    ordered = sorted(keyframes, key=lambda kf: kf.frame_id)
    if len(ordered) < 2:
        return []
    order_index = {kf.frame_id: n for n, kf in enumerate(ordered)}
    by_id = {kf.frame_id: kf for kf in ordered}
    local = ordered[-n_local:]
    cov = compute_covisibility(intrinsics, local,
                               [(kf.frame_id, kf.pose) for kf in ordered])
    candidates = {}
    for r, rid in enumerate(cov.row_ids):
        for c, cid in enumerate(cov.col_ids):
            if rid == cid or not np.isfinite(cov.flow[r, c]):
                continue
            if abs(order_index[rid] - order_index[cid]) <= r_local:
                continue
            if cov.flow[r, c] >= tau_cov:
                continue
            key = (min(rid, cid), max(rid, cid))
            prev = candidates.get(key)
            if prev is None or cov.flow[r, c] < prev:
                candidates[key] = float(cov.flow[r, c])

    emitted = []
    edges = []
    for (a, b), flow in sorted(candidates.items(), key=lambda kv: kv[1]):
        ia, ib = order_index[a], order_index[b]
        if any(abs(ia - ea) <= r_global and abs(ib - eb) <= r_global
               for ea, eb in emitted):
            continue
        kf_a, kf_b = by_id[a], by_id[b]
        if transform_estimator is not None:
            measured = transform_estimator(kf_a, kf_b)
            if measured is None:
                continue
        else:
            measured = kf_a.pose.inverse().compose(kf_b.pose)
        emitted.append((ia, ib))
        edges.append(LoopEdge(kind="intra", agent_i=kf_a.agent_id, kf_i=a,
                              agent_j=kf_b.agent_id, kf_j=b,
                              transform=measured, flow=flow))
    return edges


@dataclass
class RemoteKeyframeEntry:
    """A peer keyframe as known from received announcements."""

    kf_id: int
    descriptor: np.ndarray
    pose: SE3Pose  # in the peer's own world frame


@dataclass
class InterLoopCandidate:
    """A verified cross-agent keyframe pair."""

    local_id: int
    remote_id: int
    similarity: float
    flow: float
    pair_transform: SE3Pose      # T_{local cam <- remote cam}, provisional
    world_alignment: SE3Pose     # T_{local world <- remote world}


def detect_inter_loops(intrinsics, local_keyframes, remote_entries,
                       tau_desc=TAU_DESC_DEFAULT, tau_cov=TAU_COV_DEFAULT,
                       pair_transform_estimator=None):
    """Detect verified cross-agent loop pairs.

    Stage 1 prefilters all (local, remote) pairs by descriptor similarity
    >= tau_desc. Stage 2 derives a world alignment from the best-scoring
    candidate's provisional camera-to-camera transform (identity unless
    pair_transform_estimator supplies one) and keeps candidates whose mean
    rigid flow under that shared alignment stays below tau_cov.

    Args:
        local_keyframes: keyframes with descriptor, pose, inv_depth set.
        remote_entries: list of RemoteKeyframeEntry.
        pair_transform_estimator: optional callable
            (local_kf, remote_entry) -> SE3Pose or None (drops the pair).

    Returns:
        list of InterLoopCandidate sorted by descending similarity.
    """
    prelim = []
    for kf in local_keyframes:
        if kf.descriptor is None:
            continue
        for entry in remote_entries:
            sim = descriptor_similarity(kf.descriptor, entry.descriptor)
            if sim >= tau_desc:
                prelim.append((sim, kf, entry))
    if not prelim:
        return []
    prelim.sort(key=lambda item: (-item[0], item[1].frame_id, item[2].kf_id))

    candidates = []
    for sim, kf, entry in prelim:
        if pair_transform_estimator is not None:
            pair_t = pair_transform_estimator(kf, entry)
            if pair_t is None:
                continue
        else:
            pair_t = SE3Pose.identity()
        candidates.append((sim, kf, entry, pair_t))
    if not candidates:
        return []

    best_sim, best_kf, best_entry, best_pair = candidates[0]
    alignment = compose_inter_frame_transform(best_kf.pose, best_pair,
                                              best_entry.pose)
    verified = []
    for sim, kf, entry, pair_t in candidates:
        remote_in_local = alignment.compose(entry.pose)
        flow = mean_rigid_flow(intrinsics, kf.pose, remote_in_local,
                               kf.inv_depth)
        if flow < tau_cov:
            verified.append(InterLoopCandidate(
                local_id=kf.frame_id, remote_id=entry.kf_id, similarity=sim,
                flow=float(flow), pair_transform=pair_t,
                world_alignment=alignment))
    return verified


# ---------------------------------------------------------------------------
# Relative transform estimation
# ---------------------------------------------------------------------------


def _bilinear_depth(depth, pixels):
    """Bilinearly sampled depth at float pixels.

    Returns (values, ok); ok is False when any of the four touched texels
    is invalid (depth 0) or the pixel falls outside the image.
    """
    h, w = depth.shape
    u = np.clip(pixels[:, 0], 0.0, w - 1.0)
    v = np.clip(pixels[:, 1], 0.0, h - 1.0)
    c0 = np.clip(np.floor(u).astype(int), 0, w - 2)
    r0 = np.clip(np.floor(v).astype(int), 0, h - 2)
    fu = u - c0
    fv = v - r0
    d00 = depth[r0, c0]
    d01 = depth[r0, c0 + 1]
    d10 = depth[r0 + 1, c0]
    d11 = depth[r0 + 1, c0 + 1]
    ok = (d00 > 0) & (d01 > 0) & (d10 > 0) & (d11 > 0)
    vals = (d00 * (1 - fu) * (1 - fv) + d01 * fu * (1 - fv)
            + d10 * (1 - fu) * fv + d11 * fu * fv)
    return vals, ok


def _weighted_rigid_align(src, dst, weights):
    """Closed-form weighted rigid fit: dst ~= R src + t.

    Returns None when the weighted point sets are degenerate.
    """
    wsum = weights.sum()
    if wsum <= 0:
        return None
    mu_src = (weights[:, None] * src).sum(axis=0) / wsum
    mu_dst = (weights[:, None] * dst).sum(axis=0) / wsum
    cs = src - mu_src
    cd = dst - mu_dst
    cov = (weights[:, None] * cd).T @ cs / wsum
    u, d, vt = np.linalg.svd(cov)
    if d[1] <= max(d[0] * 1e-12, 1e-300):
        return None
    sign = np.sign(np.linalg.det(u @ vt))
    if sign == 0:
        return None
    fix = np.diag([1.0, 1.0, sign])
    rot = u @ fix @ vt
    return SE3Pose(rotation=rot, translation=mu_dst - rot @ mu_src)


def estimate_relative_transform(intrinsics, kf_a, kf_b, correspondence=None):
    """Camera-to-camera transform T such that p_A ~= T p_B from depth points.

    Back-projects matched lattice pixels of both frames and solves the
    weighted rigid alignment in closed form, with two rounds of 3-sigma
    outlier rejection.

    Args:
        correspondence: optional CorrespondenceField from kf_a into kf_b;
            identity pixel correspondence is used when omitted.

    Returns:
        (SE3Pose, inlier_count), or None when fewer than 20 inliers remain.
    """
    k = intrinsics
    pix_a = lattice_pixels(k).reshape(-1, 2)
    depth_a = downsample_to_lattice(kf_a.depth).reshape(-1)
    if correspondence is None:
        pix_b = pix_a.copy()
        weights = np.ones(pix_a.shape[0])
    else:
        pix_b = correspondence.targets.reshape(-1, 2)
        weights = correspondence.weights.reshape(-1, 2).mean(axis=1)

    depth_b, depth_b_ok = _bilinear_depth(kf_b.depth, pix_b)
    in_img = (pix_b[:, 0] >= 0) & (pix_b[:, 0] <= k.width - 1) \
        & (pix_b[:, 1] >= 0) & (pix_b[:, 1] <= k.height - 1)
    valid = (depth_a > 0) & depth_b_ok & (weights > 0) & in_img
    if valid.sum() < MIN_HORN_INLIERS:
        return None

    pts_a = np.empty((int(valid.sum()), 3))
    pts_a[:, 0] = (pix_a[valid, 0] - k.cx) / k.fx * depth_a[valid]
    pts_a[:, 1] = (pix_a[valid, 1] - k.cy) / k.fy * depth_a[valid]
    pts_a[:, 2] = depth_a[valid]
    pts_b = np.empty_like(pts_a)
    pts_b[:, 0] = (pix_b[valid, 0] - k.cx) / k.fx * depth_b[valid]
    pts_b[:, 1] = (pix_b[valid, 1] - k.cy) / k.fy * depth_b[valid]
    pts_b[:, 2] = depth_b[valid]
    wts = weights[valid]

    keep = np.ones(pts_a.shape[0], dtype=bool)
    transform = None
    for _ in range(3):  # initial fit + 2 rejection rounds
        if keep.sum() < MIN_HORN_INLIERS:
            return None
        transform = _weighted_rigid_align(pts_b[keep], pts_a[keep], wts[keep])
        if transform is None:
            return None
        residual = np.linalg.norm(pts_a - transform.apply(pts_b), axis=1)
        # robust scale: 1.4826 * median absolute deviation of kept residuals,
        # floored at sensor-noise scale so exact data cannot cascade-reject;
        # cut above the median so a biased initial fit keeps half the points
        med = np.median(residual[keep])
        sigma = 1.4826 * np.median(np.abs(residual[keep] - med))
        keep = residual <= med + max(3.0 * sigma, 1e-3)
    inliers = int(keep.sum())
    if inliers < MIN_HORN_INLIERS:
        return None
    return transform, inliers


def compose_inter_frame_transform(world_from_local_kf, local_from_remote_kf,
                                  world_from_remote_kf):
    """World-frame alignment implied by one matched cross-agent pair.

    Returns T mapping the remote agent's world frame into the local one:
    T = T_w^(a_i) . T_(a_i)^(b_j) . (T_w'^(b_j))^-1.
    """
    return world_from_local_kf.compose(local_from_remote_kf).compose(
        world_from_remote_kf.inverse())


# ---------------------------------------------------------------------------
# Pose-graph optimization
# ---------------------------------------------------------------------------


@dataclass
class PoseGraphEdge:
    kind: str            # "odometry", "intra", "inter"
    key_i: tuple         # (agent_id, kf_id)
    key_j: tuple
    measurement: SE3Pose  # measured T_i^-1 T_j
    weight: float = 1.0

    @property
    def is_loop(self):
        return self.kind != "odometry"


@dataclass
class PoseGraph:
    """Pose vertices keyed by (agent_id, kf_id) plus odometry/loop edges."""

    vertices: dict = dataclass_field(default_factory=dict)
    edges: list = dataclass_field(default_factory=list)

    def add_vertex(self, agent_id, kf_id, pose):
        self.vertices[(agent_id, kf_id)] = pose.copy()

    def add_edge(self, kind, key_i, key_j, measurement, weight=1.0):
        if key_i not in self.vertices or key_j not in self.vertices:
            raise ValueError(f"edge {key_i}->{key_j} names unknown vertices")
        if key_i == key_j:
            raise ValueError("edge endpoints must be distinct")
        self.edges.append(PoseGraphEdge(kind=kind, key_i=key_i, key_j=key_j,
                                        measurement=measurement.copy(),
                                        weight=float(weight)))

    def add_loop_edge(self, edge: LoopEdge):
        self.add_edge(edge.kind, (edge.agent_i, edge.kf_i),
                      (edge.agent_j, edge.kf_j), edge.transform, edge.weight)

    def connected_components(self):
        remaining = set(self.vertices)
        adjacency = {key: set() for key in self.vertices}
        for edge in self.edges:
            adjacency[edge.key_i].add(edge.key_j)
            adjacency[edge.key_j].add(edge.key_i)
        components = []
        while remaining:
            seed = min(remaining)
            stack, comp = [seed], set()
            while stack:
                node = stack.pop()
                if node in comp:
                    continue
                comp.add(node)
                stack.extend(adjacency[node] - comp)
            components.append(sorted(comp))
            remaining -= comp
        return components

    def dump(self, path):
        """Text dump: VERTEX/EDGE lines for offline inspection."""
        with open(path, "w", encoding="ascii") as handle:
            for (agent, kf) in sorted(self.vertices):
                pose = self.vertices[(agent, kf)]
                q = rotmat_to_quat(pose.rotation)
                t = pose.translation
                handle.write(
                    f"VERTEX {agent} {kf} {t[0]:.9f} {t[1]:.9f} {t[2]:.9f} "
                    f"{q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}\n")
            for edge in self.edges:
                q = rotmat_to_quat(edge.measurement.rotation)
                t = edge.measurement.translation
                handle.write(
                    f"EDGE {edge.kind} {edge.key_i[0]} {edge.key_i[1]} "
                    f"{edge.key_j[0]} {edge.key_j[1]} "
                    f"{t[0]:.9f} {t[1]:.9f} {t[2]:.9f} "
                    f"{q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f} "
                    f"{edge.weight:.9f}\n")

    @classmethod
    def load(cls, path):
        graph = cls()
        with open(path, "r", encoding="ascii") as handle:
            for line in handle:
                parts = line.split()
                if not parts:
                    continue
                if parts[0] == "VERTEX":
                    agent, kf = int(parts[1]), int(parts[2])
                    vals = np.array([float(x) for x in parts[3:10]])
                    pose = SE3Pose(rotation=quat_to_rotmat(vals[3:7]),
                                   translation=vals[:3])
                    graph.vertices[(agent, kf)] = pose
                elif parts[0] == "EDGE":
                    kind = parts[1]
                    key_i = (int(parts[2]), int(parts[3]))
                    key_j = (int(parts[4]), int(parts[5]))
                    vals = np.array([float(x) for x in parts[6:13]])
                    meas = SE3Pose(rotation=quat_to_rotmat(vals[3:7]),
                                   translation=vals[:3])
                    graph.edges.append(PoseGraphEdge(
                        kind=kind, key_i=key_i, key_j=key_j,
                        measurement=meas, weight=float(parts[13])))
        return graph


def _jr_inv(twist):
    """Second-order inverse right Jacobian of SE(3) at a twist."""
    ad = se3_ad(twist)
    return np.eye(6) + 0.5 * ad + (1.0 / 12.0) * (ad @ ad)


@dataclass
class PGOResult:
    poses: dict
    chi2: float
    iterations: int
    converged: bool


def pose_graph_chi2(graph, poses, robust_scale=HUBER_SCALE_DEFAULT):
    """Robustified chi-square of a pose assignment."""
    chi2 = 0.0
    for edge in graph.edges:
        rel = poses[edge.key_i].inverse().compose(poses[edge.key_j])
        res = se3_log(edge.measurement.inverse().compose(rel))
        norm = np.linalg.norm(res)
        kappa = edge.weight
        if edge.is_loop and norm > robust_scale:
            kappa *= robust_scale / norm
        chi2 += kappa * float(res @ res)
    return chi2


def optimize_pose_graph(graph, robust_scale=HUBER_SCALE_DEFAULT,
                        iterations=25, gauge_keys=None, tol=1e-14):
    """Gauss-Newton pose-graph optimization with Huber-robust loop edges.

    The first vertex (by key order) of every connected component lacking an
    entry in gauge_keys is held fixed. Left-multiplicative updates; on a
    chi-square increase the step is rejected and damping grows tenfold.

    Returns:
        PGOResult with the best iterate found; converged is False when the
        iteration budget ran out before the relative improvement fell below
        tol.
    """
    poses = {key: pose.copy() for key, pose in graph.vertices.items()}
    gauge = set(gauge_keys or [])
    for comp in graph.connected_components():
        if not any(key in gauge for key in comp):
            gauge.add(comp[0])
    free_keys = [key for key in sorted(poses) if key not in gauge]
    index = {key: n for n, key in enumerate(free_keys)}

    chi2 = pose_graph_chi2(graph, poses, robust_scale)
    best = ({key: p.copy() for key, p in poses.items()}, chi2)
    converged = False
    damping = 0.0
    it = 0
    for it in range(1, iterations + 1):
        if not free_keys:
            converged = True
            break
        dim = 6 * len(free_keys)
        hess = np.zeros((dim, dim))
        grad = np.zeros(dim)
        for edge in graph.edges:
            pose_i, pose_j = poses[edge.key_i], poses[edge.key_j]
            rel = pose_i.inverse().compose(pose_j)
            res = se3_log(edge.measurement.inverse().compose(rel))
            norm = np.linalg.norm(res)
            kappa = edge.weight
            if edge.is_loop and norm > robust_scale:
                kappa *= robust_scale / norm
            jac_j = _jr_inv(res) @ pose_j.inverse().adjoint()
            blocks = []
            if edge.key_j in index:
                blocks.append((index[edge.key_j], jac_j))
            if edge.key_i in index:
                blocks.append((index[edge.key_i], -jac_j))
            for bi, jac_a in blocks:
                sl_a = slice(6 * bi, 6 * bi + 6)
                grad[sl_a] += kappa * (jac_a.T @ res)
                for bj, jac_b in blocks:
                    sl_b = slice(6 * bj, 6 * bj + 6)
                    hess[sl_a, sl_b] += kappa * (jac_a.T @ jac_b)
        try:
            delta = np.linalg.solve(
                hess + (damping + 1e-12) * np.eye(dim), -grad)
        except np.linalg.LinAlgError:
            damping = max(damping * 10.0, 1e-6)
            continue
        trial = {key: p.copy() for key, p in poses.items()}
        for key, n in index.items():
            trial[key] = se3_retract(trial[key], delta[6 * n:6 * n + 6])
        trial_chi2 = pose_graph_chi2(graph, trial, robust_scale)
        if trial_chi2 <= chi2 + 1e-15:
            improvement = chi2 - trial_chi2
            poses, chi2 = trial, trial_chi2
            damping *= 0.1
            if chi2 < best[1]:
                best = ({key: p.copy() for key, p in poses.items()}, chi2)
            if improvement < tol * max(chi2, 1.0):
                converged = True
                break
        else:
            damping = max(damping * 10.0, 1e-6)
    return PGOResult(poses=best[0], chi2=best[1], iterations=it,
                     converged=converged)


# ---------------------------------------------------------------------------
# Rendering-based consistency refinement
# ---------------------------------------------------------------------------


@dataclass
class ConsistencyFrame:
    """One keyframe entering consistency refinement.

    anchor_pose is the target pose implied by the aligned loop pairs plus
    odometry (own world frame); pose is the current estimate, optimized
    unless fixed.
    """

    frame_id: int
    pose: SE3Pose
    anchor_pose: SE3Pose
    depth: np.ndarray     # (H, W) observed depth for sample placement
    fixed: bool = False


@dataclass
class ConsistencyResult:
    poses: dict           # frame_id -> SE3Pose
    loss_history: dict    # frame_id -> list of accepted losses
    no_overlap: bool
    updated: bool


def _pose_twist_gradient(field, result, grads_buffer, d_color, d_depth,
                         d_sdf_direct, points):
    """Twist gradient of a render-matching loss at the rendering pose.

    Backpropagates per-ray color/depth gradients and per-sample direct sdf
    gradients to the sample points, then aggregates the left-perturbation
    twist gradient [sum dL/dx, sum x cross dL/dx].
    """
    n, k = result.tvals.shape
    d_weights = d_depth[:, None] * result.tvals
    d_rgb = None
    if d_color is not None:
        rgb = result.cache.rgb.reshape(n, k, 3)
        d_weights = d_weights + np.einsum("nc,nkc->nk", d_color, rgb)
        d_rgb = (result.weights[:, :, None] * d_color[:, None, :]) \
            .reshape(-1, 3)
    d_sigma, _ = _weights_backward(result, d_weights, field.beta_value)
    d_sdf = d_sigma * _density_sdf_grad(result.sdf, field.beta_value)
    d_sdf = (d_sdf + d_sdf_direct).reshape(-1)
    grads_buffer.zero()
    d_points = field.accumulate_gradients(result.cache, d_sdf, grads_buffer,
                                          d_rgb=d_rgb,
                                          compute_point_grad=True)
    twist = np.zeros(6)
    twist[:3] = d_points.sum(axis=0)
    twist[3:] = np.cross(points.reshape(-1, 3), d_points).sum(axis=0)
    return twist


def consistency_refine(field_own, field_peer, peer_from_own, frames,
                       intrinsics, render_config, n_rays=192, iterations=40,
                       lr=3e-3, seed=0,
                       min_weight_sum=None):
    """Refine non-fixed keyframe poses against a peer agent's field.

    For each non-fixed frame, a fixed bundle of rays is rendered in the peer
    field at the frame's anchor pose (constant targets) and in the own field
    at the variable pose; gradient descent on the pose twist minimizes the
    mean squared color, depth, and per-ray mean signed-distance differences
    over overlap rays (rays where both initial renders carry weight). Steps
    that increase the loss are rejected and the learning rate halves, so the
    recorded loss history is strictly decreasing.

    Args:
        peer_from_own: SE3Pose mapping own-world points into the peer world.
        frames: list of ConsistencyFrame; fixed frames pass through bitwise
            unchanged.

    Returns:
        ConsistencyResult; no_overlap is True when no non-fixed frame had
        any overlap ray (poses then returned unchanged, updated False).
    """
    if min_weight_sum is None:
        min_weight_sum = render_config.min_weight_sum_for_depth
    out_poses = {}
    history = {}
    any_overlap = False
    updated = False
    grads_buffer = field_own.new_gradients()
    k = intrinsics

    for frame in frames:
        if frame.fixed:
            out_poses[frame.frame_id] = frame.pose
            continue
        rng = np.random.default_rng(seed * 1000003 + frame.frame_id)
        us = rng.integers(0, k.width, n_rays)
        vs = rng.integers(0, k.height, n_rays)
        dirs_cam = np.stack([(us - k.cx) / k.fx, (vs - k.cy) / k.fy,
                             np.ones(n_rays)], axis=1)
        depth_sel = frame.depth[vs, us]
        tvals = sample_ray_depths(rng, n_rays, depth_sel, render_config)

        anchor = frame.anchor_pose
        origins_peer = np.broadcast_to(
            peer_from_own.apply(anchor.translation[None, :]), (n_rays, 3))
        dirs_peer = (peer_from_own.rotation @ anchor.rotation
                     @ dirs_cam.T).T
        peer_res = render_rays(field_peer, origins_peer, dirs_peer, tvals,
                               render_config)
        target_color = peer_res.color
        target_depth = peer_res.depth
        target_sdf = peer_res.sdf.mean(axis=1)

        def render_own(pose):
            origins = np.broadcast_to(pose.translation[None, :], (n_rays, 3))
            dirs = (pose.rotation @ dirs_cam.T).T
            points = origins[:, None, :] + tvals[:, :, None] * dirs[:, None, :]
            return render_rays(field_own, origins, dirs, tvals,
                               render_config), points

        pose = frame.pose.copy()
        own_res, points = render_own(pose)
        overlap = (peer_res.weight_sum >= min_weight_sum) \
            & (own_res.weight_sum >= min_weight_sum)
        m = int(overlap.sum())
        if m == 0:
            out_poses[frame.frame_id] = frame.pose
            history[frame.frame_id] = []
            continue
        any_overlap = True

        def loss_of(res):
            dc = (res.color - target_color)[overlap]
            dd = (res.depth - target_depth)[overlap]
            ds = (res.sdf.mean(axis=1) - target_sdf)[overlap]
            return float((dc ** 2).sum() + (dd ** 2).sum()
                         + (ds ** 2).sum()) / m

        loss = loss_of(own_res)
        losses = [loss]
        adam_m = np.zeros(6)
        adam_v = np.zeros(6)
        adam_t = 0
        step_lr = lr
        n_samples = tvals.shape[1]
        for _ in range(iterations):
            if loss < 1e-14:
                break
            d_color = np.where(overlap[:, None],
                               2.0 * (own_res.color - target_color) / m, 0.0)
            d_depth = np.where(overlap,
                               2.0 * (own_res.depth - target_depth) / m, 0.0)
            d_sdf_mean = np.where(
                overlap,
                2.0 * (own_res.sdf.mean(axis=1) - target_sdf) / m, 0.0)
            d_sdf_direct = np.repeat(d_sdf_mean / n_samples,
                                     n_samples).reshape(own_res.sdf.shape)
            twist_grad = _pose_twist_gradient(
                field_own, own_res, grads_buffer, d_color, d_depth,
                d_sdf_direct, points)
            gnorm = np.linalg.norm(twist_grad)
            if gnorm == 0.0:
                break
            adam_t += 1
            adam_m = 0.9 * adam_m + 0.1 * twist_grad
            adam_v = 0.999 * adam_v + 0.001 * twist_grad ** 2
            m_hat = adam_m / (1.0 - 0.9 ** adam_t)
            v_hat = adam_v / (1.0 - 0.999 ** adam_t)
            delta = -step_lr * m_hat / (np.sqrt(v_hat) + 1e-8)
            trial_pose = se3_retract(pose, delta)
            trial_res, trial_points = render_own(trial_pose)
            trial_loss = loss_of(trial_res)
            if trial_loss < loss:
                pose, own_res, points, loss = trial_pose, trial_res, \
                    trial_points, trial_loss
                losses.append(loss)
                updated = True
                step_lr = min(step_lr * 1.3, lr)
            else:
                step_lr *= 0.5
                if step_lr < 1e-10:
                    break
        out_poses[frame.frame_id] = pose
        history[frame.frame_id] = losses

    no_overlap = not any_overlap and any(not f.fixed for f in frames)
    if no_overlap:
        return ConsistencyResult(
            poses={f.frame_id: f.pose for f in frames},
            loss_history=history, no_overlap=True, updated=False)
    return ConsistencyResult(poses=out_poses, loss_history=history,
                             no_overlap=False, updated=updated)
