"""Tests for overlap-region computation and symmetric field distillation."""

import numpy as np
import pytest

from fieldslam.core_math import Intrinsics, SE3Pose, se3_exp
from fieldslam.fusion import (
    OverlapRegion,
    compute_overlap,
    distill,
)
from fieldslam.renderer import RenderConfig
from fieldslam.scene_field import FieldConfig, SceneBounds, SceneField
from fieldslam.tracking import Keyframe

CAM = Intrinsics(fx=40.0, fy=40.0, cx=19.5, cy=14.5, width=40, height=30)

SMALL_FIELD = FieldConfig(plane_cell_size=0.6, plane_channels=4,
                          grid_levels=3, log2_table_size=8,
                          grid_base_resolution=4, grid_max_voxel_size=0.4,
                          oneblob_bins=4, hidden_width=12, geo_feature_dim=5)

FAST_RENDER = RenderConfig(k_stratified=12, k_surface=4, near=0.05, far=4.0,
                           truncation=0.1, surface_band=0.1)


def _flat_depth_keyframe(frame_id, agent_id, pose, depth_value=2.0):
    depth = np.full((CAM.height, CAM.width), depth_value)
    rgb = np.full((CAM.height, CAM.width, 3), 0.5)
    return Keyframe(frame_id=frame_id, agent_id=agent_id,
                    timestamp=float(frame_id), rgb=rgb, depth=depth,
                    pose=pose)


def _backprojected_box(keyframes, transform=None, stride=4):
    """Axis-aligned bounds of the stride-sampled depth points (oracle)."""
    pts = []
    for kf in keyframes:
        vs, us = np.meshgrid(np.arange(0, CAM.height, stride),
                             np.arange(0, CAM.width, stride), indexing="ij")
        us, vs = us.reshape(-1), vs.reshape(-1)
        z = kf.depth[vs, us]
        keep = z > 0
        us, vs, z = us[keep], vs[keep], z[keep]
        d_cam = np.stack([(us - CAM.cx) / CAM.fx, (vs - CAM.cy) / CAM.fy,
                          np.ones(us.size)], axis=1)
        pose = kf.pose if transform is None else transform.compose(kf.pose)
        p = pose.translation + z[:, None] * (d_cam @ pose.rotation.T)
        pts.append(p)
    pts = np.concatenate(pts)
    return pts.min(axis=0), pts.max(axis=0)


def _random_field(seed, bounds=None):
    if bounds is None:
        bounds = SceneBounds(np.array([-2.0, -2.0, -1.0]),
                             np.array([2.0, 2.0, 3.0]))
    return SceneField(bounds, SMALL_FIELD, seed=seed)


def _synthetic_overlap(n_rays=96, seed=5, pair=(0, 1)):
    rng = np.random.default_rng(seed)
    origins = rng.uniform(-0.3, 0.3, size=(n_rays, 3))
    dirs = rng.normal(size=(n_rays, 3))
    dirs[:, 2] = np.abs(dirs[:, 2]) + 0.5
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    depths = rng.uniform(1.0, 2.0, size=n_rays)
    ends = origins + depths[:, None] * dirs
    return OverlapRegion(bounds_min=ends.min(axis=0),
                         bounds_max=ends.max(axis=0), agent_pair=pair,
                         kf_ids_a=[0], kf_ids_b=[1], origins=origins,
                         dirs=dirs, depths=depths)


# ---------------------------------------------------------------------------
# Overlap region
# ---------------------------------------------------------------------------


def test_overlap_bounds_are_intersection_of_occupancy_boxes():
    kf_a = _flat_depth_keyframe(0, 0, SE3Pose.identity())
    shift = SE3Pose(rotation=np.eye(3),
                    translation=np.array([0.8, 0.0, 0.0]))
    kf_b = _flat_depth_keyframe(1, 1, shift)
    region = compute_overlap(CAM, [kf_a], [kf_b])
    lo_a, hi_a = _backprojected_box([kf_a])
    lo_b, hi_b = _backprojected_box([kf_b])
    assert np.allclose(region.bounds_min, np.maximum(lo_a, lo_b), atol=1e-12)
    assert np.allclose(region.bounds_max, np.minimum(hi_a, hi_b), atol=1e-12)
    assert not region.is_empty
    assert region.agent_pair == (0, 1)
    assert region.kf_ids_a == [0] and region.kf_ids_b == [1]
    # Every collected ray ends inside the overlap box.
    ends = region.origins + region.depths[:, None] * region.dirs
    assert np.all(ends >= region.bounds_min - 1e-12)
    assert np.all(ends <= region.bounds_max + 1e-12)
    assert region.volume == pytest.approx(
        np.prod(np.minimum(hi_a, hi_b) - np.maximum(lo_a, lo_b)))


def test_overlap_applies_alignment_to_second_agent():
    kf_a = _flat_depth_keyframe(0, 0, SE3Pose.identity())
    kf_b = _flat_depth_keyframe(1, 1, SE3Pose.identity())
    b_to_a = se3_exp(np.array([0.4, -0.2, 0.1, 0.05, -0.04, 0.08]))
    region = compute_overlap(CAM, [kf_a], [kf_b], b_to_a=b_to_a)
    lo_a, hi_a = _backprojected_box([kf_a])
    lo_b, hi_b = _backprojected_box([kf_b], transform=b_to_a)
    assert np.allclose(region.bounds_min, np.maximum(lo_a, lo_b), atol=1e-12)
    assert np.allclose(region.bounds_max, np.minimum(hi_a, hi_b), atol=1e-12)


def test_overlap_empty_when_boxes_disjoint_or_no_keyframes():
    kf_a = _flat_depth_keyframe(0, 0, SE3Pose.identity())
    far = SE3Pose(rotation=np.eye(3),
                  translation=np.array([100.0, 0.0, 0.0]))
    kf_b = _flat_depth_keyframe(1, 1, far)
    region = compute_overlap(CAM, [kf_a], [kf_b])
    assert region.is_empty
    assert region.volume == 0.0
    assert compute_overlap(CAM, [], [kf_b]).is_empty
    assert compute_overlap(CAM, [kf_a], []).is_empty
    # Keyframes whose depth is entirely invalid contribute nothing.
    blank = _flat_depth_keyframe(2, 1, SE3Pose.identity(), depth_value=0.0)
    assert compute_overlap(CAM, [kf_a], [blank]).is_empty


def test_overlap_ray_downsampling_is_pair_seeded_and_capped():
    kf_a = _flat_depth_keyframe(0, 0, SE3Pose.identity())
    kf_b = _flat_depth_keyframe(1, 1, SE3Pose.identity())
    full = compute_overlap(CAM, [kf_a], [kf_b], stride=1)
    capped = compute_overlap(CAM, [kf_a], [kf_b], stride=1, max_rays=100)
    again = compute_overlap(CAM, [kf_a], [kf_b], stride=1, max_rays=100)
    assert full.origins.shape[0] > 100
    assert capped.origins.shape[0] == 100
    assert np.array_equal(capped.origins, again.origins)
    assert np.array_equal(capped.depths, again.depths)


# ---------------------------------------------------------------------------
# Distillation
# ---------------------------------------------------------------------------


def _noisy_clone(field, scale, seed):
    other = field.clone()
    rng = np.random.default_rng(seed)
    noise = rng.normal(scale=scale, size=other.flat.size)
    beta = other.beta[0]
    other.flat += noise
    other.beta[0] = beta
    return other


def test_distill_reduces_pairwise_render_discrepancy():
    field_a = _random_field(seed=1)
    field_b = _noisy_clone(field_a, scale=0.25, seed=2)
    overlap = _synthetic_overlap()
    before_a = field_a.flatten_parameters()
    report = distill(field_a, field_b, overlap, FAST_RENDER, iterations=25,
                     ray_budget=64, eval_rays=48, lr=3e-3)
    assert not report.empty
    assert report.initial_loss > 0.0
    assert report.final_loss < report.initial_loss
    assert report.final_loss == pytest.approx(
        min(row[1] for row in report.curve))
    assert len(report.curve) == report.iterations + 1
    # Both parameter vectors moved (symmetric updates).
    assert not np.array_equal(field_a.flatten_parameters(), before_a)


def test_distill_is_deterministic_for_a_fixed_pair():
    results = []
    for _ in range(2):
        field_a = _random_field(seed=1)
        field_b = _noisy_clone(field_a, scale=0.25, seed=2)
        overlap = _synthetic_overlap()
        report = distill(field_a, field_b, overlap, FAST_RENDER,
                         iterations=12, ray_budget=64, eval_rays=48, lr=3e-3)
        results.append((field_a.flatten_parameters(),
                        field_b.flatten_parameters(), report.final_loss))
    assert np.array_equal(results[0][0], results[1][0])
    assert np.array_equal(results[0][1], results[1][1])
    assert results[0][2] == results[1][2]


def test_distill_identical_fields_is_a_noop_loss():
    field_a = _random_field(seed=4)
    field_b = field_a.clone()
    overlap = _synthetic_overlap(seed=6)
    report = distill(field_a, field_b, overlap, FAST_RENDER, iterations=3,
                     ray_budget=32, eval_rays=32)
    assert report.initial_loss < 1e-20
    assert report.final_loss < 1e-20


def test_distill_world_frame_transforms_match_pretransformed_rays():
    # Rendering common-frame rays through world_from_* must equal rendering
    # the pre-transformed rays with no alignment at all.
    field_a = _random_field(seed=1)
    field_b = _noisy_clone(field_a, scale=0.2, seed=3)
    align = se3_exp(np.array([0.2, -0.1, 0.3, 0.1, -0.05, 0.07]))
    base = _synthetic_overlap(seed=9)
    moved = OverlapRegion(
        bounds_min=base.bounds_min, bounds_max=base.bounds_max,
        agent_pair=base.agent_pair, kf_ids_a=base.kf_ids_a,
        kf_ids_b=base.kf_ids_b, origins=align.apply(base.origins),
        dirs=(align.rotation @ base.dirs.T).T, depths=base.depths)

    report_plain = distill(field_a.clone(), field_b.clone(), base,
                           FAST_RENDER, iterations=0, ray_budget=32)
    assert report_plain.empty  # iterations=0 short-circuits

    r1 = distill(field_a.clone(), field_b.clone(), base, FAST_RENDER,
                 iterations=1, ray_budget=32, eval_rays=32)
    r2 = distill(field_a.clone(), field_b.clone(), moved, FAST_RENDER,
                 iterations=1, ray_budget=32, eval_rays=32,
                 world_from_a=align, world_from_b=align)
    assert r2.initial_loss == pytest.approx(r1.initial_loss, rel=1e-9)


def test_distill_empty_overlap_returns_empty_report_and_touches_nothing():
    field_a = _random_field(seed=1)
    field_b = _random_field(seed=2)
    before = (field_a.flatten_parameters(), field_b.flatten_parameters())
    report = distill(field_a, field_b, OverlapRegion.empty((0, 1)),
                     FAST_RENDER, iterations=50)
    assert report.empty and report.iterations == 0
    assert np.array_equal(field_a.flatten_parameters(), before[0])
    assert np.array_equal(field_b.flatten_parameters(), before[1])


def test_distill_divergence_aborts_and_restores_best_snapshot():
    field_a = _random_field(seed=1)
    field_b = _noisy_clone(field_a, scale=0.25, seed=2)
    overlap = _synthetic_overlap()
    report = distill(field_a, field_b, overlap, FAST_RENDER, iterations=200,
                     ray_budget=64, eval_rays=48, lr=5.0, patience=3)
    assert report.aborted
    assert report.iterations < 200
    assert report.final_loss == pytest.approx(
        min(row[1] for row in report.curve))


def test_distillation_report_write_roundtrip(tmp_path):
    field_a = _random_field(seed=1)
    field_b = _noisy_clone(field_a, scale=0.2, seed=2)
    overlap = _synthetic_overlap()
    report = distill(field_a, field_b, overlap, FAST_RENDER, iterations=5,
                     ray_budget=32, eval_rays=32)
    path = tmp_path / "distill_report.txt"
    report.write(path)
    text = path.read_text(encoding="ascii").splitlines()
    assert text[0] == f"initial_loss: {report.initial_loss:.12g}"
    assert text[1] == f"final_loss: {report.final_loss:.12g}"
    assert f"iterations: {report.iterations}" in text
    header = text.index("iter,total,color,depth,sdf")
    rows = text[header + 1:]
    assert len(rows) == len(report.curve)
    first = rows[0].split(",")
    assert int(first[0]) == 0
    assert float(first[1]) == pytest.approx(report.initial_loss)
