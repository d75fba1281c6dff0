"""Overlap-region computation and symmetric online distillation.

After two agents align their world frames, the overlap region is the
intersection of their depth-derived occupancy bounds. Distillation then
reconciles the two implicit fields by rendering both along a shared ray set
drawn from the overlap keyframes and stepping both parameter vectors down
the mean squared color / depth / signed-distance discrepancy; no images are
exchanged, only rendered quantities of the locally available parameter
copies.

Both agents replicate the procedure deterministically (rays and seeds are
derived from the sorted agent pair), so they converge to identical merged
fields without a coordinator.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .optim import Adam, cosine_decay
from .renderer import (render_rays, sample_ray_depths, _density_sdf_grad,
                       _weights_backward)

MAX_OVERLAP_RAYS = 8192
DISTILL_RAY_BUDGET = 2048
DISTILL_LR = 1e-3
DIVERGENCE_PATIENCE = 5


@dataclass
class OverlapRegion:
    """Axis-aligned overlap volume with its contributing rays.

    Rays live in the common (aligned) world frame; depths are the observed
    sensor depths along them, used for surface-band sampling.
    """

    bounds_min: np.ndarray
    bounds_max: np.ndarray
    agent_pair: tuple
    kf_ids_a: list
    kf_ids_b: list
    origins: np.ndarray   # (M, 3)
    dirs: np.ndarray      # (M, 3)
    depths: np.ndarray    # (M,)

    @property
    def is_empty(self):
        return self.origins.shape[0] == 0

    @property
    def volume(self):
        if np.any(self.bounds_max <= self.bounds_min):
            return 0.0
        return float(np.prod(self.bounds_max - self.bounds_min))

    @classmethod
    def empty(cls, agent_pair=(0, 0)):
        return cls(bounds_min=np.zeros(3), bounds_max=np.zeros(3),
                   agent_pair=agent_pair, kf_ids_a=[], kf_ids_b=[],
                   origins=np.zeros((0, 3)), dirs=np.zeros((0, 3)),
                   depths=np.zeros(0))


def _depth_point_samples(intrinsics, keyframe, transform, stride):
    """Back-projected valid-depth pixels of one keyframe, subsampled on a
    stride grid, mapped to the common frame. Returns (points, origins, dirs,
    depths), where dirs carry the sample depth at unit z-step scaling."""
    k = intrinsics
    vs, us = np.meshgrid(np.arange(0, k.height, stride),
                         np.arange(0, k.width, stride), indexing="ij")
    us = us.reshape(-1)
    vs = vs.reshape(-1)
    depth = keyframe.depth[vs, us]
    good = depth > 0
    us, vs, depth = us[good], vs[good], depth[good]
    dirs_cam = np.stack([(us - k.cx) / k.fx, (vs - k.cy) / k.fy,
                         np.ones(us.size)], axis=1)
    pose = keyframe.pose if transform is None \
        else transform.compose(keyframe.pose)
    dirs = (pose.rotation @ dirs_cam.T).T
    origins = np.broadcast_to(pose.translation, dirs.shape).copy()
    points = origins + depth[:, None] * dirs
    return points, origins, dirs, depth


def compute_overlap(intrinsics, keyframes_a, keyframes_b, b_to_a=None,
                    max_rays=MAX_OVERLAP_RAYS, margin=0.0, stride=4):
    """Overlap region between two agents' observed volumes.

    Each agent's occupancy bounds are the axis-aligned box of its
    back-projected depth points (agent B's mapped through b_to_a into the
    common frame); the region is their intersection grown by margin. The
    ray set collects, from every keyframe with at least one depth point
    inside the region, the rays ending inside it, downsampled to max_rays
    with a pair-seeded generator shared by both agents.

    Returns:
        OverlapRegion; empty (fusion skipped) when the boxes do not
        intersect or either agent contributes no keyframe.
    """
    if not keyframes_a or not keyframes_b:
        return OverlapRegion.empty()
    agent_pair = (min(kf.agent_id for kf in keyframes_a + keyframes_b),
                  max(kf.agent_id for kf in keyframes_a + keyframes_b))
    per_kf = []
    lo = {0: None, 1: None}
    hi = {0: None, 1: None}
    for side, (kfs, transform) in enumerate(
            ((keyframes_a, None), (keyframes_b, b_to_a))):
        for kf in sorted(kfs, key=lambda kf: (kf.agent_id, kf.frame_id)):
            pts, origins, dirs, depth = _depth_point_samples(
                intrinsics, kf, transform, stride)
            if pts.shape[0] == 0:
                continue
            per_kf.append((side, kf, pts, origins, dirs, depth))
            pmin, pmax = pts.min(axis=0), pts.max(axis=0)
            lo[side] = pmin if lo[side] is None else np.minimum(lo[side], pmin)
            hi[side] = pmax if hi[side] is None else np.maximum(hi[side], pmax)
    if lo[0] is None or lo[1] is None:
        return OverlapRegion.empty(agent_pair)
    bmin = np.maximum(lo[0], lo[1]) - margin
    bmax = np.minimum(hi[0], hi[1]) + margin
    if np.any(bmax < bmin):
        return OverlapRegion.empty(agent_pair)

    kf_ids = {0: [], 1: []}
    ray_parts = []
    for side, kf, pts, origins, dirs, depth in per_kf:
        inside = np.all((pts >= bmin) & (pts <= bmax), axis=1)
        if not np.any(inside):
            continue
        kf_ids[side].append(kf.frame_id)
        ray_parts.append((origins[inside], dirs[inside], depth[inside]))
    if not kf_ids[0] or not kf_ids[1]:
        return OverlapRegion.empty(agent_pair)
    origins = np.concatenate([p[0] for p in ray_parts])
    dirs = np.concatenate([p[1] for p in ray_parts])
    depths = np.concatenate([p[2] for p in ray_parts])
    if origins.shape[0] > max_rays:
        rng = np.random.default_rng(1000003 * agent_pair[0] + agent_pair[1])
        sel = np.sort(rng.choice(origins.shape[0], max_rays, replace=False))
        origins, dirs, depths = origins[sel], dirs[sel], depths[sel]
    return OverlapRegion(bounds_min=bmin, bounds_max=bmax,
                         agent_pair=agent_pair, kf_ids_a=kf_ids[0],
                         kf_ids_b=kf_ids[1], origins=origins, dirs=dirs,
                         depths=depths)


# ---------------------------------------------------------------------------
# Distillation
# ---------------------------------------------------------------------------


@dataclass
class DistillationReport:
    """Loss bookkeeping of one distillation run."""

    initial_loss: float
    final_loss: float
    iterations: int
    aborted: bool
    empty: bool
    curve: list = dataclass_field(default_factory=list)
    # curve rows: (iteration, total, color, depth, sdf), evaluation-set loss

    def write(self, path):
        """Structured text: key: value lines followed by a CSV curve."""
        with open(path, "w", encoding="ascii") as handle:
            handle.write(f"initial_loss: {self.initial_loss:.12g}\n")
            handle.write(f"final_loss: {self.final_loss:.12g}\n")
            handle.write(f"iterations: {self.iterations}\n")
            handle.write(f"aborted: {self.aborted}\n")
            handle.write(f"empty: {self.empty}\n")
            handle.write("curve:\n")
            handle.write("iter,total,color,depth,sdf\n")
            for row in self.curve:
                handle.write(f"{row[0]},{row[1]:.12g},{row[2]:.12g},"
                             f"{row[3]:.12g},{row[4]:.12g}\n")


def _field_frame_rays(origins, dirs, world_from_field):
    """Map common-frame rays into a field's own frame."""
    if world_from_field is None:
        return origins, dirs
    field_from_world = world_from_field.inverse()
    return (field_from_world.apply(origins),
            (field_from_world.rotation @ dirs.T).T)


def _pair_losses(res_a, res_b):
    """(per-ray color, depth, sdf squared discrepancies) of two renders."""
    lc = np.sum((res_a.color - res_b.color) ** 2, axis=1)
    ld = (res_a.depth - res_b.depth) ** 2
    ls = np.mean((res_a.sdf - res_b.sdf) ** 2, axis=1)
    return lc, ld, ls


def _render_param_backward(field, result, d_color, d_depth, d_sdf_direct,
                           grads):
    """Scatter render-output gradients into a field's parameter gradients."""
    n, k = result.tvals.shape
    rgb = result.cache.rgb.reshape(n, k, 3)
    d_weights = d_depth[:, None] * result.tvals \
        + np.einsum("nc,nkc->nk", d_color, rgb)
    d_rgb = (result.weights[:, :, None] * d_color[:, None, :]).reshape(-1, 3)
    d_sigma, d_beta = _weights_backward(result, d_weights, field.beta_value)
    d_sdf = d_sigma * _density_sdf_grad(result.sdf, field.beta_value)
    d_sdf = (d_sdf + d_sdf_direct).reshape(-1)
    field.accumulate_gradients(result.cache, d_sdf, grads, d_rgb=d_rgb)
    grads.beta[0] += d_beta


def distill(field_a, field_b, overlap, render_config, world_from_a=None,
            world_from_b=None, iterations=500, ray_budget=DISTILL_RAY_BUDGET,
            lr=DISTILL_LR, eval_rays=512, seed=None,
            patience=DIVERGENCE_PATIENCE):
    """Symmetric online distillation of two fields over an overlap region.

    Every iteration renders both fields along a fresh pair-seeded ray batch
    (identical rays, identical sample depths) and applies one Adam step with
    cosine-decayed learning rate to each parameter vector, driven by the
    mean over rays of squared color, depth, and pointwise signed-distance
    differences. A fixed evaluation batch tracks progress: parameters are
    snapshotted whenever the evaluation loss improves, and the run aborts
    after `patience` consecutive evaluation increases, restoring the best
    snapshot. Both fields are mutated in place.

    Args:
        world_from_a, world_from_b: poses mapping each field's own frame to
            the common frame of the overlap rays (None = identity).
        seed: overrides the pair-derived generator seed (tests only).

    Returns:
        DistillationReport; empty=True (and untouched fields) when the
        overlap is empty, the ray budget is 0, or iterations is 0.
    """
    if overlap.is_empty or ray_budget <= 0 or iterations <= 0:
        return DistillationReport(initial_loss=0.0, final_loss=0.0,
                                  iterations=0, aborted=False, empty=True)
    if seed is None:
        seed = 7919 * overlap.agent_pair[0] + overlap.agent_pair[1]
    rng = np.random.default_rng(seed)
    n_rays = overlap.origins.shape[0]

    eval_sel = rng.choice(n_rays, min(eval_rays, n_rays), replace=False)
    eval_tvals = sample_ray_depths(rng, eval_sel.size,
                                   overlap.depths[eval_sel], render_config)

    def eval_losses():
        o = overlap.origins[eval_sel]
        d = overlap.dirs[eval_sel]
        oa, da = _field_frame_rays(o, d, world_from_a)
        ob, db = _field_frame_rays(o, d, world_from_b)
        res_a = render_rays(field_a, oa, da, eval_tvals, render_config)
        res_b = render_rays(field_b, ob, db, eval_tvals, render_config)
        lc, ld, ls = _pair_losses(res_a, res_b)
        return float(np.mean(lc + ld + ls)), float(np.mean(lc)), \
            float(np.mean(ld)), float(np.mean(ls))

    adam_a = Adam(field_a.parameter_count)
    adam_b = Adam(field_b.parameter_count)
    grads_a = field_a.new_gradients()
    grads_b = field_b.new_gradients()

    total0, c0, d0, s0 = eval_losses()
    curve = [(0, total0, c0, d0, s0)]
    best_loss = total0
    best_params = (field_a.flatten_parameters(), field_b.flatten_parameters())
    streak = 0
    aborted = False
    prev_eval = total0
    it = 0
    for it in range(1, iterations + 1):
        sel = rng.choice(n_rays, min(ray_budget, n_rays), replace=False)
        o = overlap.origins[sel]
        d = overlap.dirs[sel]
        tvals = sample_ray_depths(rng, sel.size, overlap.depths[sel],
                                  render_config)
        oa, da = _field_frame_rays(o, d, world_from_a)
        ob, db = _field_frame_rays(o, d, world_from_b)
        res_a = render_rays(field_a, oa, da, tvals, render_config)
        res_b = render_rays(field_b, ob, db, tvals, render_config)
        m = sel.size
        k = tvals.shape[1]
        d_color = 2.0 * (res_a.color - res_b.color) / m
        d_depth = 2.0 * (res_a.depth - res_b.depth) / m
        d_sdf = 2.0 * (res_a.sdf - res_b.sdf) / (m * k)
        grads_a.flat[:] = 0.0
        grads_b.flat[:] = 0.0
        _render_param_backward(field_a, res_a, d_color, d_depth, d_sdf,
                               grads_a)
        _render_param_backward(field_b, res_b, -d_color, -d_depth, -d_sdf,
                               grads_b)
        step_lr = cosine_decay(lr, it - 1, iterations)
        adam_a.step(field_a.flat, grads_a.flat, lr=step_lr)
        adam_b.step(field_b.flat, grads_b.flat, lr=step_lr)
        field_a.clamp_beta()
        field_b.clamp_beta()

        total, lc, ld, ls = eval_losses()
        curve.append((it, total, lc, ld, ls))
        if total < best_loss:
            best_loss = total
            best_params = (field_a.flatten_parameters(),
                           field_b.flatten_parameters())
        if total > prev_eval:
            streak += 1
            if streak >= patience:
                aborted = True
                break
        else:
            streak = 0
        prev_eval = total

    field_a.set_parameters(best_params[0])
    field_b.set_parameters(best_params[1])
    return DistillationReport(initial_loss=total0, final_loss=best_loss,
                              iterations=it, aborted=aborted, empty=False,
                              curve=curve)
