"""Hybrid field: encodings, serialization, and the gradient suite."""

import numpy as np
import pytest

from fieldslam.scene_field import (FieldConfig, SceneBounds, SceneField,
                                   grid_level_resolutions, plane_node_counts)

from gradcheck import run_gradient_suite

SMALL = FieldConfig(plane_cell_size=0.5, plane_channels=4, grid_levels=3,
                    log2_table_size=6, grid_base_resolution=4,
                    grid_max_voxel_size=0.25, oneblob_bins=4, hidden_width=8,
                    geo_feature_dim=5)


def _small_field(seed=0):
    bounds = SceneBounds(np.array([-1.0, -1.0, -1.0]),
                         np.array([1.0, 1.0, 1.0]))
    return SceneField(bounds, SMALL, seed=seed)


def test_bounds_reject_empty_extent():
    with pytest.raises(ValueError, match="bounds"):
        SceneBounds(np.zeros(3), np.array([1.0, 0.0, 1.0]))


def test_bounds_normalize_roundtrip():
    bounds = SceneBounds(np.array([-2.0, 0.0, 1.0]),
                         np.array([3.0, 4.0, 1.5]))
    rng = np.random.default_rng(0)
    pts = rng.uniform(-1.0, 4.0, size=(50, 3))
    normed = bounds.normalize(pts)
    assert np.allclose(bounds.denormalize(normed), pts, atol=1e-12)
    assert np.allclose(bounds.normalize(bounds.minimum), -1.0)
    assert np.allclose(bounds.normalize(bounds.maximum), 1.0)


def test_grid_level_resolutions_increasing_and_fine_enough():
    bounds = SceneBounds(np.full(3, -3.0), np.full(3, 3.0))
    cfg = FieldConfig(grid_levels=6, grid_base_resolution=8,
                      grid_max_voxel_size=0.05)
    res = grid_level_resolutions(bounds, cfg)
    assert res.shape == (6,)
    assert res[0] == 8
    assert np.all(np.diff(res) > 0)
    # finest level must resolve the requested voxel size
    assert 6.0 / res[-1] <= cfg.grid_max_voxel_size + 1e-12


def test_plane_node_counts_cover_extent():
    bounds = SceneBounds(np.zeros(3), np.array([2.0, 1.0, 3.0]))
    counts = plane_node_counts(bounds, 0.5)
    # axis pairs xy, xz, yz with >= extent/cell cells, so cells never
    # exceed the requested metric size
    assert counts == [(5, 3), (5, 7), (3, 7)]


def test_query_shapes_and_determinism():
    field = _small_field(seed=3)
    rng = np.random.default_rng(1)
    pts = rng.uniform(-0.9, 0.9, size=(17, 3))
    q1 = field.query(pts)
    q2 = field.query(pts)
    assert q1.sdf.shape == (17,)
    assert q1.geo_feature.shape == (17, SMALL.geo_feature_dim)
    assert q1.rgb.shape == (17, 3)
    assert np.array_equal(q1.sdf, q2.sdf)
    assert np.array_equal(q1.rgb, q2.rgb)
    assert np.all(q1.rgb >= 0.0) and np.all(q1.rgb <= 1.0)
    assert np.all(np.abs(q1.sdf) <= 1.0)
    assert not q1.clamped


def test_same_seed_same_parameters_distinct_seeds_differ():
    a = _small_field(seed=7)
    b = _small_field(seed=7)
    c = _small_field(seed=8)
    assert np.array_equal(a.flat, b.flat)
    assert not np.array_equal(a.flat, c.flat)


def test_query_outside_bounds_clamps():
    field = _small_field()
    inside = field.query(np.array([[0.99, 0.0, 0.0]]))
    outside = field.query(np.array([[5.0, 0.0, 0.0]]))
    boundary = field.query(np.array([[1.0, 0.0, 0.0]]))
    assert outside.clamped
    assert not inside.clamped
    assert np.allclose(outside.sdf, boundary.sdf, atol=1e-12)


def test_query_color_reuses_geometry_features():
    field = _small_field(seed=11)
    pts = np.random.default_rng(2).uniform(-0.8, 0.8, size=(9, 3))
    full = field.query(pts)
    sdf, geo_feature = field.query_geometry(pts)
    rgb = field.query_color(pts, geo_feature=geo_feature)
    assert np.allclose(full.rgb, rgb, atol=1e-12)
    assert np.array_equal(full.sdf, sdf)


def test_clone_copies_parameters_without_aliasing():
    field = _small_field(seed=4)
    other = field.clone(seed=99)
    assert np.array_equal(other.flat, field.flat)
    other.flat[0] += 1.0
    assert other.flat[0] != field.flat[0]


def test_set_parameters_roundtrip_and_size_check():
    field = _small_field(seed=5)
    theta = field.flatten_parameters()
    assert theta.base is None  # a copy, not a view
    field.flat[:] = 0.0
    field.set_parameters(theta)
    assert np.array_equal(field.flat, theta)
    with pytest.raises(ValueError, match="expects"):
        field.set_parameters(theta[:-1])


def test_manifest_counts_sum_to_parameter_count():
    field = _small_field()
    assert sum(field.manifest_counts()) == field.parameter_count
    assert field.flat.shape == (field.parameter_count,)


def test_serialize_roundtrip_is_float32_exact():
    field = _small_field(seed=6)
    field.flat[:] += np.random.default_rng(3).normal(
        scale=0.03, size=field.flat.shape)
    blob = field.serialize_parameters()
    assert field.serialized_byte_size() == len(blob)
    other = _small_field(seed=0)
    other.deserialize_parameters(blob)
    assert np.array_equal(other.flat,
                          field.flat.astype("<f4").astype(np.float64))


def test_deserialize_rejects_malformed_blobs():
    field = _small_field()
    blob = field.serialize_parameters()
    with pytest.raises(ValueError, match="magic"):
        field.deserialize_parameters(b"XXXX" + blob[4:])
    with pytest.raises(ValueError, match="version"):
        field.deserialize_parameters(blob[:4] + b"\x63\x00" + blob[6:])
    with pytest.raises(ValueError, match="length"):
        field.deserialize_parameters(blob[:-4])
    bigger = SceneField(field.bounds,
                        FieldConfig(**{**SMALL.__dict__, "hidden_width": 16}),
                        seed=0)
    with pytest.raises(ValueError, match="manifest"):
        bigger.deserialize_parameters(blob)


def test_clamp_beta_projects_to_positive():
    field = _small_field()
    field.beta[0] = -0.5
    field.clamp_beta(minimum=1e-4)
    assert field.beta[0] == 1e-4
    field.beta[0] = 0.2
    field.clamp_beta(minimum=1e-4)
    assert field.beta[0] == 0.2


def test_gradient_suite_matches_finite_differences():
    errors, elapsed = run_gradient_suite(n_configs=64, seed=20260401)
    assert len(errors) >= 64
    assert max(errors) < 1e-4
    assert elapsed < 60.0
