"""Deterministic multi-agent run orchestration.

Drives N agents through a shared round-robin of frames. Per frame each
agent tracks against its last keyframe, decides on keyframe creation,
refines a keyframe window by dense bundle adjustment, detects intra-agent
loops, and runs a few mapping iterations on its own field. Keyframe
descriptors are announced over the simulated network; a cross-agent
descriptor hit triggers the fusion sequence: exchange (signal, poses,
field parameters), render-based alignment refinement, joint pose-graph
optimization, consistency refinement, and online distillation.

Every agent keeps its own world frame (first keyframe at identity); the
relative transforms discovered during fusion are reported separately, so
repeated runs with one seed write byte-identical outputs.
"""

import os
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from ..comms import BandwidthLedger, CommsEndpoint, MessageKind, PeerLink, \
    SimulatedNetwork, decode_descriptor_announcement, decode_keyframe_poses
from ..core_math import SE3Pose, ate_statistics, rotmat_to_quat, \
    save_trajectory, se3_exp, se3_log
from ..fusion import compute_overlap, distill
from ..loop_closure import ConsistencyFrame, PoseGraph, RemoteKeyframeEntry, \
    compute_descriptor, consistency_refine, descriptor_similarity, \
    detect_inter_loops, detect_intra_loops, estimate_relative_transform, \
    optimize_pose_graph
from ..renderer import render_rays, sample_ray_depths
from ..tracking import Keyframe, OracleFlowProvider, PhotometricFlowProvider, \
    build_dba_problem, should_create_keyframe, solve_dba
from ..scene_field import SceneBounds, SceneField
from .datasets import load_replica_sequence, load_tum_sequence
from .fieldio import field_from_bytes, field_to_bytes, save_field
from .meshing import extract_mesh, merge_meshes, transform_mesh, write_ply
from .synthetic import arc_split_trajectories, generate_synthetic_sequence, \
    make_room_scene, make_sphere_wall_scene, orbit_trajectory

__all__ = ["FusionEvent", "AgentOutput", "RunResult", "run_agents"]


@dataclass
class FusionEvent:
    """One completed cross-agent fusion, as seen by `agent_id`."""

    agent_id: int
    peer_id: int
    time: float
    verified_pairs: int
    alignment: SE3Pose            # own world <- peer world, or None
    pre_depth_rms: float = float("nan")
    post_depth_rms: float = float("nan")
    distill_initial: float = float("nan")
    distill_final: float = float("nan")
    distill_iterations: int = 0
    distill_aborted: bool = False
    pgo_chi2: float = float("nan")


@dataclass
class AgentOutput:
    agent_id: int
    timestamps: np.ndarray
    poses: list                   # per-frame SE3Pose in the agent frame
    keyframes: list
    field: SceneField
    alignments: dict              # peer id -> SE3Pose (own <- peer)
    ate_rmse: float = None


@dataclass
class RunResult:
    config: object
    agents: list
    fusion_events: list
    ledger: BandwidthLedger
    network: SimulatedNetwork
    out_dir: str = None
    partial: bool = False
    meshes: dict = dataclass_field(default_factory=dict)


class _FrameAnchor:
    """Trajectory bookkeeping: a frame pose relative to its keyframe."""

    __slots__ = ("timestamp", "kf_index", "relative")

    def __init__(self, timestamp, kf_index, relative):
        self.timestamp = timestamp
        self.kf_index = kf_index
        self.relative = relative


class _AgentState:
    def __init__(self, agent_id, dataset, field, flow, endpoint, map_rng):
        self.agent_id = agent_id
        self.dataset = dataset
        self.field = field
        self.flow = flow
        self.endpoint = endpoint
        self.map_rng = map_rng
        self.adam = None
        self.keyframes = []
        self.anchors = []             # one _FrameAnchor per processed frame
        self.current_pose = SE3Pose.identity()
        self.pose_graph = PoseGraph()
        self.intra_edges = set()
        self.map_steps = 0
        self.remote_desc = {}         # peer -> {kf_id: descriptor}
        self.remote_poses = {}        # peer -> {kf_id: SE3Pose}
        self.remote_blob = {}         # peer -> bytes
        self.fusion_state = {}        # peer -> idle | signaled | fused
        self.alignments = {}          # peer -> SE3Pose own <- peer
        self.kf_at_last_fusion = {}

    @property
    def last_kf(self):
        return self.keyframes[-1]

    def frame_poses(self):
        poses = []
        for anchor in self.anchors:
            base = self.keyframes[anchor.kf_index].pose
            poses.append(base.compose(anchor.relative))
        return poses


def _build_scene(config):
    name = config["scene.name"]
    if name == "room":
        return make_room_scene()
    return make_sphere_wall_scene()


def _intrinsics_from_config(config):
    from ..core_math import Intrinsics

    width = config["scene.width"]
    height = config["scene.height"]
    fx = 0.5 * width / np.tan(0.5 * np.radians(config["scene.fov_deg"]))
    return Intrinsics(fx=fx, fy=fx, cx=(width - 1) / 2.0,
                      cy=(height - 1) / 2.0, width=width, height=height)


def _make_datasets(config):
    """Per-agent datasets plus the synthetic scene (None for real data)."""
    n_agents = config["run.agents"]
    kind = config["run.dataset"]
    if kind != "synthetic":
        roots = [r.strip() for r in config["run.dataset_root"].split(",")
                 if r.strip()]
        if len(roots) != n_agents:
            raise ValueError(f"run.dataset_root lists {len(roots)} roots "
                             f"for {n_agents} agents")
        loader = load_tum_sequence if kind == "tum" else load_replica_sequence
        return [loader(root) for root in roots], None

    scene = _build_scene(config)
    intrinsics = _intrinsics_from_config(config)
    frames = config["scene.frames"]
    radius = config["scene.orbit_radius"]
    height = config["scene.orbit_height"]
    if n_agents == 1:
        trajectories = [orbit_trajectory((0.0, 0.0, 0.0), radius, height,
                                         frames)]
    else:
        trajectories = arc_split_trajectories(
            (0.0, 0.0, 0.0), radius, height, frames, n_agents=n_agents,
            overlap_deg=config["scene.overlap_deg"])
    datasets = []
    for a, poses in enumerate(trajectories):
        datasets.append(generate_synthetic_sequence(
            scene, poses, intrinsics,
            noise_sigma=config["scene.noise_sigma"],
            seed=config["run.seed"] * 977 + 31 * a + 1,
            fps=config["scene.fps"], agent_tag=f"_agent{a}"))
    return datasets, scene


class _Runner:
    def __init__(self, config, out_dir=None):
        self.cfg = config
        self.out_dir = out_dir
        self.datasets, self.scene = _make_datasets(config)
        self.intrinsics = self.datasets[0].intrinsics
        self.rconfig = config.render_config()
        self.fusion_events = []
        self.ledger = BandwidthLedger()
        self.network = SimulatedNetwork()
        self._dba_active = False
        self._now = 0.0

        n_agents = config["run.agents"]
        seed = config["run.seed"]
        link = PeerLink(latency=config["comms.latency"],
                        bandwidth=config["comms.bandwidth"])
        for a in range(n_agents):
            for b in range(a + 1, n_agents):
                self.network.add_link(a, b, PeerLink(latency=link.latency,
                                                     bandwidth=link.bandwidth))
        bounds = self._field_bounds()
        self.agents = []
        for a in range(n_agents):
            field = SceneField(bounds, config.field_config(),
                               seed=seed * 65537 + a)
            flow = self._make_flow_provider(a, seed)
            endpoint = CommsEndpoint(a, self.network, self.ledger)
            map_rng = np.random.default_rng(seed * 1000003 + 7 * a + 3)
            state = _AgentState(a, self.datasets[a], field, flow, endpoint,
                                map_rng)
            from ..optim import Adam

            state.adam = Adam(field.parameter_count, lr=config["mapping.lr"])
            for b in range(n_agents):
                if b != a:
                    state.fusion_state[b] = "idle"
                    state.kf_at_last_fusion[b] = -10 ** 9
            self.agents.append(state)

    def _field_bounds(self):
        margin = self.cfg["mesh.bounds_margin"]
        if self.scene is not None:
            lo = self.scene.bounds_min - margin
            hi = self.scene.bounds_max + margin
        else:
            # Real data: derive bounds from the ground-truth trajectory
            # footprint grown by the far plane, or a generic box.
            far = self.rconfig.far
            eyes = []
            for ds in self.datasets:
                if ds.gt_poses:
                    eyes.extend(p.translation for p in ds.gt_poses
                                if p is not None)
            if eyes:
                eyes = np.array(eyes)
                lo = eyes.min(axis=0) - far - margin
                hi = eyes.max(axis=0) + far + margin
            else:
                lo = np.full(3, -far - margin)
                hi = np.full(3, far + margin)
        return SceneBounds(np.asarray(lo), np.asarray(hi))

    def _make_flow_provider(self, agent_id, seed):
        if self.cfg["tracking.flow"] == "photometric":
            return PhotometricFlowProvider(self.intrinsics)
        dataset = self.datasets[agent_id]
        if dataset.gt_poses is None:
            raise ValueError("oracle flow requires ground-truth poses; "
                             "set tracking.flow = photometric")
        first = None
        local = {}
        for idx, pose in enumerate(dataset.gt_poses):
            if pose is None:
                continue
            if first is None:
                first = pose.inverse()
            local[idx] = first.compose(pose)
        return OracleFlowProvider(
            self.intrinsics, local,
            noise_sigma=self.cfg["tracking.oracle_noise"],
            seed=seed * 1000003 + 7 * agent_id + 5)

    # -- main loop ----------------------------------------------------------

    def run(self):
        max_frames = max(len(ds) for ds in self.datasets)
        limit = self.cfg["run.frames"]
        if limit > 0:
            max_frames = min(max_frames, limit)
        dt = 1.0 / self.cfg["scene.fps"]
        for step in range(max_frames):
            self._now = step * dt
            for ag in self.agents:
                if step < len(ag.dataset):
                    self._process_frame(ag, step)
            self._deliver(self._now)
        self._drain()

    def _deliver(self, now):
        for _, msg in self.network.step(now):
            self._handle_message(self.agents[msg.recipient], msg, now)

    def _drain(self):
        """Deliver everything still in flight (handlers may send more)."""
        for _ in range(32):
            if self.network.pending_count == 0:
                break
            self._now += 1.0
            self._deliver(self._now)

    # -- per-frame processing -------------------------------------------

    def _process_frame(self, ag, idx):
        rgb, depth = ag.dataset.load(idx)
        ts = ag.dataset.frames[idx].timestamp
        if not ag.keyframes:
            kf = Keyframe(frame_id=idx, agent_id=ag.agent_id, timestamp=ts,
                          rgb=rgb, depth=depth, pose=SE3Pose.identity(),
                          descriptor=compute_descriptor(rgb))
            kf.init_inv_depth()
            self._add_keyframe(ag, kf, first=True)
            ag.anchors.append(_FrameAnchor(ts, 0, SE3Pose.identity()))
            ag.current_pose = kf.pose.copy()
            self._map_frame(ag, self.cfg["mapping.first_frame_iterations"])
            return

        pose, frame_kf = self._track(ag, idx, rgb, depth, ts)
        ag.current_pose = pose
        make_kf, _ = should_create_keyframe(
            self.intrinsics, ag.last_kf.pose, pose, ag.last_kf.inv_depth,
            threshold=self.cfg["tracking.keyframe_flow"])
        if make_kf:
            frame_kf.pose = pose
            frame_kf.descriptor = compute_descriptor(rgb)
            self._add_keyframe(ag, frame_kf)
            ag.anchors.append(_FrameAnchor(ts, len(ag.keyframes) - 1,
                                           SE3Pose.identity()))
            ag.current_pose = ag.last_kf.pose.copy()
        else:
            rel = ag.last_kf.pose.inverse().compose(pose)
            ag.anchors.append(_FrameAnchor(ts, len(ag.keyframes) - 1, rel))
        self._map_frame(ag, self.cfg["mapping.iterations"])

    def _track(self, ag, idx, rgb, depth, ts):
        """Frame pose by two-frame bundle adjustment against the last
        keyframe (the keyframe pose is gauge-fixed)."""
        frame_kf = Keyframe(frame_id=idx, agent_id=ag.agent_id, timestamp=ts,
                            rgb=rgb, depth=depth, pose=ag.current_pose.copy())
        frame_kf.init_inv_depth()
        corr = ag.flow.estimate_flow(ag.last_kf, frame_kf)
        problem = build_dba_problem(
            self.intrinsics, [ag.last_kf, frame_kf], [corr],
            gauge_ids=[ag.last_kf.frame_id],
            alpha=self.cfg["tracking.depth_prior_weight"])
        self._dba_active = True
        solve_dba(problem, iterations=self.cfg["tracking.dba_iterations"])
        self._dba_active = False
        return problem.poses[idx], frame_kf

    def _add_keyframe(self, ag, kf, first=False):
        prev = ag.keyframes[-1] if ag.keyframes else None
        ag.keyframes.append(kf)
        ag.pose_graph.add_vertex(ag.agent_id, kf.frame_id, kf.pose.copy())
        if prev is not None:
            meas = prev.pose.inverse().compose(kf.pose)
            ag.pose_graph.add_edge("odometry",
                                   (ag.agent_id, prev.frame_id),
                                   (ag.agent_id, kf.frame_id), meas)
            self._window_dba(ag)
            if self.cfg["loops.enabled"]:
                self._intra_loops(ag)
        if not first and self.cfg["comms.enabled"]:
            entries = [(k.frame_id, k.descriptor) for k in ag.keyframes]
            for peer in range(self.cfg["run.agents"]):
                if peer != ag.agent_id:
                    ag.endpoint.announce_descriptors(entries, peer, self._now)

    def _window_dba(self, ag):
        window = ag.keyframes[-self.cfg["tracking.window"]:]
        if len(window) < 2:
            return
        corrs = []
        for i in range(len(window)):
            for j in range(i + 1, min(i + 3, len(window))):
                corrs.append(ag.flow.estimate_flow(window[i], window[j]))
                corrs.append(ag.flow.estimate_flow(window[j], window[i]))
        problem = build_dba_problem(
            self.intrinsics, window, corrs,
            gauge_ids=[window[0].frame_id],
            alpha=self.cfg["tracking.depth_prior_weight"])
        self._dba_active = True
        solve_dba(problem,
                  iterations=self.cfg["tracking.window_dba_iterations"])
        self._dba_active = False
        for kf in window:
            kf.pose = problem.poses[kf.frame_id]
            kf.inv_depth = problem.inv_depths[kf.frame_id]
            ag.pose_graph.vertices[(ag.agent_id, kf.frame_id)] = \
                kf.pose.copy()
        # Refresh odometry measurements the refinement just improved, so
        # later pose-graph solves do not pull poses back to stale values.
        ids = {kf.frame_id for kf in window}
        by_id = {kf.frame_id: kf for kf in window}
        for edge in ag.pose_graph.edges:
            if edge.kind == "odometry" and edge.key_i[1] in ids \
                    and edge.key_j[1] in ids:
                edge.measurement = by_id[edge.key_i[1]].pose.inverse() \
                    .compose(by_id[edge.key_j[1]].pose)

    def _intra_loops(self, ag):
        edges = detect_intra_loops(
            self.intrinsics, ag.keyframes,
            n_local=self.cfg["loops.n_local"],
            tau_cov=self.cfg["loops.tau_cov"],
            r_local=self.cfg["loops.r_local"],
            r_global=self.cfg["loops.r_global"],
            transform_estimator=lambda a, b: self._horn_estimator(ag, a, b))
        fresh = 0
        for edge in edges:
            key = (edge.kf_i, edge.kf_j)
            if key in ag.intra_edges:
                continue
            ag.intra_edges.add(key)
            ag.pose_graph.add_loop_edge(edge)
            fresh += 1
        if fresh:
            self._run_own_pgo(ag)

    def _horn_estimator(self, ag, kf_a, kf_b):
        corr = ag.flow.estimate_flow(kf_a, kf_b)
        fit = estimate_relative_transform(self.intrinsics, kf_a, kf_b,
                                          correspondence=corr)
        return None if fit is None else fit[0]

    def _run_own_pgo(self, ag):
        result = optimize_pose_graph(
            ag.pose_graph, robust_scale=self.cfg["loops.huber"],
            iterations=self.cfg["loops.pgo_iterations"])
        self._apply_pgo_poses(ag, result.poses)
        return result

    def _apply_pgo_poses(self, ag, poses):
        for kf in ag.keyframes:
            key = (ag.agent_id, kf.frame_id)
            if key in poses:
                kf.pose = poses[key].copy()
                ag.pose_graph.vertices[key] = kf.pose.copy()
        ag.current_pose = ag.last_kf.pose.copy()

    # -- mapping ----------------------------------------------------------

    def _map_frame(self, ag, iterations):
        assert not self._dba_active, \
            "mapping started while a bundle-adjustment solve was active"
        if iterations <= 0 or not ag.keyframes:
            return
        from ..renderer import mapping_loss

        n_rays = self.cfg["mapping.rays"]
        for _ in range(iterations):
            if len(ag.keyframes) == 1 or ag.map_steps % 2 == 0:
                kf = ag.keyframes[-1]
            else:
                kf = ag.keyframes[int(ag.map_rng.integers(
                    len(ag.keyframes)))]
            origins, dirs, colors, depth_obs = self._sample_rays(
                ag, kf, n_rays)
            tvals = sample_ray_depths(ag.map_rng, origins.shape[0],
                                      depth_obs, self.rconfig)
            grads = ag.field.new_gradients()
            mapping_loss(ag.field, origins, dirs, colors, depth_obs, tvals,
                         self.rconfig, grads=grads)
            ag.adam.step(ag.field.flat, grads.flat)
            ag.map_steps += 1

    def _sample_rays(self, ag, kf, n_rays):
        k = self.intrinsics
        valid = np.flatnonzero(kf.depth.reshape(-1) > 0)
        pool = valid if valid.size else np.arange(kf.depth.size)
        pick = ag.map_rng.choice(pool, size=min(n_rays, pool.size),
                                 replace=pool.size < n_rays)
        vs, us = np.divmod(pick, k.width)
        dirs_cam = np.stack([(us - k.cx) / k.fx, (vs - k.cy) / k.fy,
                             np.ones(pick.size)], axis=1)
        dirs = (kf.pose.rotation @ dirs_cam.T).T
        origins = np.broadcast_to(kf.pose.translation, dirs.shape).copy()
        return origins, dirs, kf.rgb[vs, us], kf.depth[vs, us]

    # -- comms handling ----------------------------------------------------

    def _handle_message(self, ag, msg, now):
        sender = msg.sender
        if msg.kind == MessageKind.DESCRIPTOR_ANNOUNCEMENT:
            table = ag.remote_desc.setdefault(sender, {})
            for kf_id, desc in decode_descriptor_announcement(msg.payload):
                table[kf_id] = desc
            self._maybe_signal(ag, sender, now)
        elif msg.kind == MessageKind.LOOP_CLOSURE_SIGNAL:
            pass  # advisory; the poses/parameters that follow drive fusion
        elif msg.kind == MessageKind.KEYFRAME_POSES:
            ag.remote_poses[sender] = dict(decode_keyframe_poses(msg.payload))
        elif msg.kind == MessageKind.NETWORK_PARAMETERS:
            ag.remote_blob[sender] = msg.payload
            self._on_exchange(ag, sender, now)

    def _descriptor_matches(self, ag, peer):
        table = ag.remote_desc.get(peer, {})
        tau = self.cfg["loops.tau_desc"]
        matches = []
        for kf in ag.keyframes:
            if kf.descriptor is None:
                continue
            for rid in sorted(table):
                sim = descriptor_similarity(kf.descriptor, table[rid])
                if sim >= tau:
                    matches.append((kf.frame_id, rid, float(sim)))
        matches.sort(key=lambda m: -m[2])
        return matches

    def _maybe_signal(self, ag, peer, now):
        if not self.cfg["fusion.enabled"]:
            return
        if ag.fusion_state.get(peer) != "idle":
            return
        cooldown = self.cfg["fusion.cooldown_keyframes"]
        if len(ag.keyframes) - ag.kf_at_last_fusion[peer] < cooldown:
            return
        matches = self._descriptor_matches(ag, peer)
        if not matches:
            return
        self._send_exchange(ag, peer, matches, now)
        ag.fusion_state[peer] = "signaled"

    def _send_exchange(self, ag, peer, matches, now):
        pose_entries = [(kf.frame_id, kf.pose) for kf in ag.keyframes]
        ag.endpoint.signal_loop_and_exchange(
            peer, matches[:8], pose_entries, field_to_bytes(ag.field), now)

    def _on_exchange(self, ag, peer, now):
        if peer not in ag.remote_poses or peer not in ag.remote_blob:
            return
        state = ag.fusion_state.get(peer)
        if state == "idle":
            matches = self._descriptor_matches(ag, peer)
            self._send_exchange(ag, peer, matches, now)
            ag.fusion_state[peer] = "signaled"
        elif state != "signaled":
            return
        self._fuse(ag, peer, now)
        ag.fusion_state[peer] = "idle"
        ag.kf_at_last_fusion[peer] = len(ag.keyframes)

    # -- fusion sequence ----------------------------------------------------

    def _fuse(self, ag, peer, now):
        peer_field = field_from_bytes(ag.remote_blob[peer])
        desc = ag.remote_desc.get(peer, {})
        poses = ag.remote_poses[peer]
        entries = [RemoteKeyframeEntry(kf_id=rid, descriptor=desc[rid],
                                       pose=poses[rid])
                   for rid in sorted(desc) if rid in poses]
        candidates = detect_inter_loops(
            self.intrinsics, ag.keyframes, entries,
            tau_desc=self.cfg["loops.tau_desc"],
            tau_cov=self.cfg["loops.tau_cov"])
        event = FusionEvent(agent_id=ag.agent_id, peer_id=peer, time=now,
                            verified_pairs=len(candidates), alignment=None)
        self.fusion_events.append(event)
        if not candidates:
            return
        alignment = candidates[0].world_alignment
        if self.cfg["refine.enabled"]:
            alignment = self._refine_alignment(ag, peer_field, alignment,
                                               candidates)
        alignment = self._joint_pgo(ag, peer, candidates, alignment, event)
        if self.cfg["refine.enabled"]:
            self._consistency_polish(ag, peer_field, alignment, candidates)
        ag.alignments[peer] = alignment
        event.alignment = alignment
        self._distill_overlap(ag, peer, peer_field, alignment, candidates,
                              event)

    def _probe_keyframes(self, ag, candidates):
        seen = []
        for cand in candidates:
            if cand.local_id not in seen:
                seen.append(cand.local_id)
            if len(seen) >= self.cfg["refine.probes"]:
                break
        by_id = {kf.frame_id: kf for kf in ag.keyframes}
        return [by_id[i] for i in seen]

    def _refine_alignment(self, ag, peer_field, alignment, candidates):
        """Sharpen the inter-agent alignment by matching renders.

        Each probe keyframe's own-field render is steered onto the peer
        field's render at the aligned pose; the pose corrections translate
        into a left-composed alignment update averaged over probes.
        """
        probes = self._probe_keyframes(ag, candidates)
        frames = [ConsistencyFrame(frame_id=kf.frame_id, pose=kf.pose.copy(),
                                   anchor_pose=kf.pose.copy(),
                                   depth=kf.depth)
                  for kf in probes]
        result = consistency_refine(
            ag.field, peer_field, alignment.inverse(), frames,
            self.intrinsics, self.rconfig,
            n_rays=self.cfg["refine.rays"],
            iterations=self.cfg["refine.iterations"],
            lr=self.cfg["refine.lr"],
            seed=self.cfg["run.seed"] * 131 + 17 * ag.agent_id)
        if result.no_overlap or not result.updated:
            return alignment
        twists = []
        for frame in frames:
            refined = result.poses[frame.frame_id]
            correction = refined.compose(frame.anchor_pose.inverse())
            twists.append(se3_log(correction))
        return se3_exp(np.mean(twists, axis=0)).compose(alignment)

    def _joint_pgo(self, ag, peer, candidates, alignment, event):
        """Pose-graph optimization over both agents' keyframe graphs."""
        graph = PoseGraph()
        for key, pose in ag.pose_graph.vertices.items():
            graph.add_vertex(key[0], key[1], pose.copy())
        for edge in ag.pose_graph.edges:
            graph.add_edge(edge.kind, edge.key_i, edge.key_j,
                           edge.measurement, weight=edge.weight)
        peer_poses = ag.remote_poses[peer]
        peer_ids = sorted(peer_poses)
        for rid in peer_ids:
            graph.add_vertex(peer, rid, alignment.compose(peer_poses[rid]))
        for i, j in zip(peer_ids, peer_ids[1:]):
            meas = peer_poses[i].inverse().compose(peer_poses[j])
            graph.add_edge("odometry", (peer, i), (peer, j), meas)
        local_pose = {kf.frame_id: kf.pose for kf in ag.keyframes}
        for cand in candidates:
            meas = local_pose[cand.local_id].inverse() \
                .compose(alignment) \
                .compose(peer_poses[cand.remote_id])
            graph.add_edge("inter", (ag.agent_id, cand.local_id),
                           (peer, cand.remote_id), meas)
        first = (ag.agent_id, ag.keyframes[0].frame_id)
        result = optimize_pose_graph(
            graph, robust_scale=self.cfg["loops.huber"],
            iterations=self.cfg["loops.pgo_iterations"], gauge_keys=[first])
        event.pgo_chi2 = result.chi2
        self._apply_pgo_poses(ag, result.poses)
        # Re-estimate the alignment from the optimized peer vertices.
        twists = []
        for rid in peer_ids:
            est = result.poses[(peer, rid)].compose(peer_poses[rid].inverse())
            twists.append(se3_log(alignment.inverse().compose(est)))
        return alignment.compose(se3_exp(np.mean(twists, axis=0)))

    def _consistency_polish(self, ag, peer_field, alignment, candidates):
        """Refine own overlap keyframe poses against the peer's renders."""
        probes = self._probe_keyframes(ag, candidates)
        frames = [ConsistencyFrame(frame_id=kf.frame_id, pose=kf.pose.copy(),
                                   anchor_pose=kf.pose.copy(),
                                   depth=kf.depth)
                  for kf in probes]
        result = consistency_refine(
            ag.field, peer_field, alignment.inverse(), frames,
            self.intrinsics, self.rconfig,
            n_rays=self.cfg["refine.rays"],
            iterations=max(1, self.cfg["refine.iterations"] // 2),
            lr=0.5 * self.cfg["refine.lr"],
            seed=self.cfg["run.seed"] * 131 + 17 * ag.agent_id + 7)
        if result.no_overlap or not result.updated:
            return
        by_id = {kf.frame_id: kf for kf in ag.keyframes}
        for frame_id, pose in result.poses.items():
            kf = by_id[frame_id]
            kf.pose = pose.copy()
            ag.pose_graph.vertices[(ag.agent_id, frame_id)] = pose.copy()
        ag.current_pose = ag.last_kf.pose.copy()

    def _pseudo_remote_keyframes(self, ag, peer, peer_field, candidates,
                                 limit=4):
        """Remote keyframes reconstructed from the exchanged field: poses
        from the pose message, depth rendered from the peer's parameters
        (raw images are never transmitted)."""
        k = self.intrinsics
        poses = ag.remote_poses[peer]
        ids = []
        for cand in candidates:
            if cand.remote_id not in ids:
                ids.append(cand.remote_id)
            if len(ids) >= limit:
                break
        pseudo = []
        us, vs = np.meshgrid(np.arange(k.width), np.arange(k.height))
        dirs_cam = np.stack([(us.reshape(-1) - k.cx) / k.fx,
                             (vs.reshape(-1) - k.cy) / k.fy,
                             np.ones(us.size)], axis=1)
        flat_depth = np.full(us.size, 0.5 * (self.rconfig.near
                                             + self.rconfig.far))
        for rid in ids:
            pose = poses[rid]
            dirs = (pose.rotation @ dirs_cam.T).T
            origins = np.broadcast_to(pose.translation, dirs.shape).copy()
            tvals = sample_ray_depths(
                np.random.default_rng(911 * rid + 13),
                us.size, flat_depth, self.rconfig)
            result = render_rays(peer_field, origins, dirs, tvals,
                                 self.rconfig, with_color=False)
            depth = result.normalized_depth()
            depth = np.where(
                result.weight_sum >= self.rconfig.min_weight_sum_for_depth,
                np.clip(depth, self.rconfig.near, self.rconfig.far), 0.0)
            pseudo.append(Keyframe(
                frame_id=rid, agent_id=peer, timestamp=0.0,
                rgb=np.zeros((k.height, k.width, 3)),
                depth=depth.reshape(k.height, k.width), pose=pose))
        return pseudo

    def _depth_rms(self, field_a, field_b, origins, dirs, tvals,
                   peer_from_common):
        res_a = render_rays(field_a, origins, dirs, tvals, self.rconfig,
                            with_color=False)
        if peer_from_common is None:
            ob, db = origins, dirs
        else:
            ob = peer_from_common.apply(origins)
            db = (peer_from_common.rotation @ dirs.T).T
        res_b = render_rays(field_b, ob, db, tvals, self.rconfig,
                            with_color=False)
        lo, hi = self.rconfig.near, self.rconfig.far
        da = np.clip(res_a.normalized_depth(), lo, hi)
        db_ = np.clip(res_b.normalized_depth(), lo, hi)
        mask = res_a.weight_sum >= self.rconfig.min_weight_sum_for_depth
        if not np.any(mask):
            return float("nan")
        return float(np.sqrt(np.mean((da[mask] - db_[mask]) ** 2)))

    def _distill_overlap(self, ag, peer, peer_field, alignment, candidates,
                         event):
        locals_ = self._probe_keyframes(ag, candidates) or ag.keyframes
        overlap = compute_overlap(
            self.intrinsics, ag.keyframes,
            self._pseudo_remote_keyframes(ag, peer, peer_field, candidates),
            b_to_a=alignment,
            max_rays=self.cfg["fusion.max_rays"],
            stride=self.cfg["fusion.stride"])
        if overlap.is_empty:
            return
        pair_rng = np.random.default_rng(
            104729 + 31 * min(ag.agent_id, peer) + max(ag.agent_id, peer))
        n_eval = min(self.cfg["fusion.eval_rays"], overlap.origins.shape[0])
        sel = pair_rng.choice(overlap.origins.shape[0], n_eval, replace=False)
        origins = overlap.origins[sel]
        dirs = overlap.dirs[sel]
        tvals = sample_ray_depths(pair_rng, n_eval, overlap.depths[sel],
                                  self.rconfig)
        event.pre_depth_rms = self._depth_rms(ag.field, peer_field, origins,
                                              dirs, tvals, None)
        report = distill(ag.field, peer_field, overlap, self.rconfig,
                         world_from_a=None, world_from_b=alignment,
                         iterations=self.cfg["fusion.iterations"],
                         ray_budget=self.cfg["fusion.ray_budget"],
                         lr=self.cfg["fusion.lr"],
                         eval_rays=self.cfg["fusion.eval_rays"])
        event.post_depth_rms = self._depth_rms(ag.field, peer_field, origins,
                                               dirs, tvals,
                                               alignment.inverse())
        event.distill_initial = report.initial_loss
        event.distill_final = report.final_loss
        event.distill_iterations = report.iterations
        event.distill_aborted = report.aborted

    # -- outputs -------------------------------------------------------------

    def result(self, partial=False):
        agents = []
        for ag in self.agents:
            times = np.array([a.timestamp for a in ag.anchors])
            poses = ag.frame_poses()
            ate = None
            gt = ag.dataset.gt_poses
            if gt is not None and len(ag.anchors):
                gt_pairs = [(t, p) for t, p in
                            zip(ag.dataset.timestamps, gt) if p is not None]
                if len(gt_pairs) >= 3:
                    gt_times = np.array([t for t, _ in gt_pairs])
                    gt_poses = [p for _, p in gt_pairs]
                    try:
                        ate = ate_statistics(times, poses, gt_times,
                                             gt_poses, mode="se3").rmse
                    except (ValueError, np.linalg.LinAlgError):
                        ate = None
            agents.append(AgentOutput(
                agent_id=ag.agent_id, timestamps=times, poses=poses,
                keyframes=ag.keyframes, field=ag.field,
                alignments=dict(ag.alignments), ate_rmse=ate))
        return RunResult(config=self.cfg, agents=agents,
                         fusion_events=self.fusion_events,
                         ledger=self.ledger, network=self.network,
                         out_dir=self.out_dir, partial=partial)

    def flush_outputs(self, partial=False):
        if self.out_dir is None:
            return None
        os.makedirs(self.out_dir, exist_ok=True)
        result = self.result(partial=partial)
        out = self.out_dir
        with open(os.path.join(out, "config.txt"), "w",
                  encoding="ascii") as handle:
            handle.write(self.cfg.to_text())
        for agent in result.agents:
            tag = f"agent{agent.agent_id}"
            if len(agent.timestamps):
                save_trajectory(os.path.join(out, f"trajectory_{tag}.txt"),
                                agent.timestamps, agent.poses)
                kf_times = [kf.timestamp for kf in agent.keyframes]
                kf_poses = [kf.pose for kf in agent.keyframes]
                save_trajectory(os.path.join(out, f"keyframes_{tag}.txt"),
                                kf_times, kf_poses)
            save_field(agent.field, os.path.join(out, f"field_{tag}.fldf"))
        self.ledger.to_csv(os.path.join(out, "ledger.csv"))
        self.network.export_trace(os.path.join(out, "trace.txt"))
        self._write_fusion_report(os.path.join(out, "fusion_report.txt"),
                                  result)
        self._write_run_report(os.path.join(out, "run_report.txt"), result,
                               partial)
        if self.cfg["mesh.export"] and not partial:
            self._export_meshes(result)
        return result

    def _write_fusion_report(self, path, result):
        with open(path, "w", encoding="ascii") as handle:
            for ev in result.fusion_events:
                handle.write(
                    f"event agent={ev.agent_id} peer={ev.peer_id} "
                    f"t={ev.time:.3f} verified={ev.verified_pairs} "
                    f"pre_rms={ev.pre_depth_rms:.6f} "
                    f"post_rms={ev.post_depth_rms:.6f} "
                    f"pgo_chi2={ev.pgo_chi2:.3e} "
                    f"distill_initial={ev.distill_initial:.6e} "
                    f"distill_final={ev.distill_final:.6e} "
                    f"distill_iters={ev.distill_iterations} "
                    f"aborted={ev.distill_aborted}\n")
            for agent in result.agents:
                for peer, pose in sorted(agent.alignments.items()):
                    q = rotmat_to_quat(pose.rotation)
                    t = pose.translation
                    handle.write(
                        f"alignment agent={agent.agent_id} peer={peer} "
                        f"{t[0]:.9f} {t[1]:.9f} {t[2]:.9f} "
                        f"{q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}\n")

    def _write_run_report(self, path, result, partial):
        with open(path, "w", encoding="ascii") as handle:
            if partial:
                handle.write("status: partial (run aborted)\n")
            else:
                handle.write("status: complete\n")
            for agent in result.agents:
                ate = "n/a" if agent.ate_rmse is None \
                    else f"{agent.ate_rmse:.6f}"
                handle.write(f"agent {agent.agent_id}: "
                             f"frames={len(agent.timestamps)} "
                             f"keyframes={len(agent.keyframes)} "
                             f"ate_rmse={ate}\n")
            handle.write(self.ledger.format_table())

    def _export_meshes(self, result):
        voxel = self.cfg["mesh.voxel"]
        parts = {}
        for agent in result.agents:
            extraction = extract_mesh(agent.field, voxel_size=voxel,
                                      keyframes=agent.keyframes,
                                      intrinsics=self.intrinsics)
            parts[agent.agent_id] = extraction.mesh
            write_ply(os.path.join(self.out_dir,
                                   f"mesh_agent{agent.agent_id}.ply"),
                      extraction.mesh)
            result.meshes[agent.agent_id] = extraction.mesh
        base = result.agents[0]
        pieces = [parts[base.agent_id]]
        complete = True
        for agent in result.agents[1:]:
            alignment = base.alignments.get(agent.agent_id)
            if alignment is None:
                complete = False
                continue
            pieces.append(transform_mesh(parts[agent.agent_id], alignment))
        if len(result.agents) > 1 and complete:
            merged = merge_meshes(pieces)
            write_ply(os.path.join(self.out_dir, "mesh_global.ply"), merged)
            result.meshes["global"] = merged


def run_agents(config, out_dir=None):
    """Run the full multi-agent pipeline described by a RunConfig.

    Writes, when out_dir is given: per-agent trajectories and keyframe
    trajectories (timestamp tx ty tz qx qy qz qw), serialized fields, the
    bandwidth ledger CSV, the message trace, fusion and run reports, a
    config echo, and (when mesh.export is on) per-agent plus merged
    meshes. On error the partial outputs are flushed before re-raising.

    Returns:
        RunResult.
    """
    runner = _Runner(config, out_dir)
    try:
        runner.run()
    except BaseException:
        try:
            runner.flush_outputs(partial=True)
        except Exception:
            pass
        raise
    runner.flush_outputs()
    return runner.result()
