"""Hybrid implicit scene representation.

A scene field combines, per query point:
    - three coarse axis-aligned feature planes (bilinear, summed) for
      geometry and another three for appearance,
    - a multiresolution hash grid for geometry and one for appearance,
    - a one-blob coordinate encoding of the normalized position,
and decodes them with two small MLPs:
    - geometry head -> (feature vector z, truncated signed distance phi in
      truncation units, Tanh output),
    - appearance head -> RGB in [0, 1] (Sigmoid output).

All parameters live in one flat float64 vector; the named arrays are views
into it, so flatten/unflatten and optimizer steps are trivial and the
serialized layout is fixed by the manifest. Gradients mirror the same layout.
Reverse-mode gradients are exact for every parameter and for the query point.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from . import kernels

PARAM_MAGIC = b"MCNF"
PARAM_VERSION = 1

# Decoder, plane, and grid sizing shared by both agents of a run.
PLANE_AXES = ((0, 1), (0, 2), (1, 2))  # xy, xz, yz


@dataclass
class SceneBounds:
    """Axis-aligned scene bounds with the normalization map to [-1, 1]^3."""

    minimum: np.ndarray
    maximum: np.ndarray

    def __post_init__(self):
        self.minimum = np.asarray(self.minimum, dtype=np.float64).reshape(3)
        self.maximum = np.asarray(self.maximum, dtype=np.float64).reshape(3)
        if np.any(self.maximum <= self.minimum):
            raise ValueError("bounds must satisfy maximum > minimum per axis")

    @property
    def extent(self):
        return self.maximum - self.minimum

    @property
    def scale(self):
        """Norm of the bound extent (isotropic scene scale)."""
        return float(np.linalg.norm(self.extent))

    def normalize(self, points):
        """Affine map sending the bounds onto the cube [-1, 1]^3."""
        points = np.asarray(points, dtype=np.float64)
        return 2.0 * (points - self.minimum) / self.extent - 1.0

    def denormalize(self, normed):
        normed = np.asarray(normed, dtype=np.float64)
        return (normed + 1.0) * 0.5 * self.extent + self.minimum


@dataclass
class FieldConfig:
    """Architecture hyperparameters of the hybrid field."""

    plane_cell_size: float = 0.24
    plane_channels: int = 32
    grid_levels: int = 16
    grid_channels: int = 2
    log2_table_size: int = 15
    grid_base_resolution: int = 16
    grid_max_voxel_size: float = 0.02
    oneblob_bins: int = 16
    hidden_width: int = 32
    geo_feature_dim: int = 15
    beta_init: float = 0.1
    feature_init_range: float = 1e-4

    @property
    def table_size(self):
        return 1 << self.log2_table_size

    @property
    def grid_feature_dim(self):
        return self.grid_levels * self.grid_channels

    @property
    def oneblob_dim(self):
        return 3 * self.oneblob_bins

    @property
    def geometry_input_dim(self):
        return self.oneblob_dim + self.plane_channels + self.grid_feature_dim

    @property
    def color_input_dim(self):
        return (self.oneblob_dim + self.geo_feature_dim
                + 2 * self.plane_channels + 2 * self.grid_feature_dim)


def plane_node_counts(bounds, cell_size):
    """Grid node counts (per plane axis pair) for a given metric cell size."""
    counts = [max(2, int(math.ceil(e / cell_size)) + 1) for e in bounds.extent]
    return [(counts[a], counts[b]) for a, b in PLANE_AXES]


def grid_level_resolutions(bounds, config):
    """Strictly increasing per-level cell counts along the largest axis.

    The coarsest level has grid_base_resolution cells; the finest is chosen
    so its cells are no larger than grid_max_voxel_size meters.
    """
    largest = float(np.max(bounds.extent))
    r_min = config.grid_base_resolution
    r_max = max(r_min + config.grid_levels,
                int(math.ceil(largest / config.grid_max_voxel_size)))
    if config.grid_levels == 1:
        return np.array([r_max], dtype=np.int64)
    growth = math.exp(math.log(r_max / r_min) / (config.grid_levels - 1))
    res = []
    for lvl in range(config.grid_levels):
        r = int(math.floor(r_min * growth ** lvl + 1e-9))
        if res and r <= res[-1]:
            r = res[-1] + 1
        res.append(r)
    return np.array(res, dtype=np.int64)


class FieldGradients:
    """Gradient buffer with the same layout/views as the field parameters."""

    def __init__(self, field):
        self.flat = np.zeros(field.parameter_count)
        field._attach_views(self)

    def zero(self):
        self.flat[:] = 0.0


@dataclass
class FieldQueryCache:
    """Forward intermediates needed by the backward pass."""

    points: np.ndarray
    normed: np.ndarray          # clamped normalized coordinates (N, 3)
    inside: np.ndarray          # (N, 3) bool, False where clamping applied
    unit: np.ndarray            # (normed + 1) / 2 in [0, 1]
    plane_coords: list          # per plane set: [(u, v) x3 planes]
    oneblob_gauss: np.ndarray   # (N, 3, B) unnormalized bumps
    oneblob_sum: np.ndarray     # (N, 3)
    gamma: np.ndarray           # (N, 3*B)
    tri_geo: np.ndarray
    tri_col: np.ndarray
    grid_geo: np.ndarray
    grid_col: np.ndarray
    geo_in: np.ndarray
    geo_pre1: np.ndarray
    geo_hidden: np.ndarray
    geo_z: np.ndarray
    sdf: np.ndarray
    col_in: np.ndarray = None
    col_pre1: np.ndarray = None
    col_hidden: np.ndarray = None
    rgb: np.ndarray = None


@dataclass
class FieldQuery:
    """Result of querying the field at a batch of points."""

    sdf: np.ndarray             # (N,) truncated signed distance, trunc units
    geo_feature: np.ndarray     # (N, geo_feature_dim)
    rgb: np.ndarray             # (N, 3) or None for geometry-only queries
    clamped: bool               # True if any point fell outside the bounds
    cache: FieldQueryCache


class SceneField:
    """Hybrid tri-plane + hash-grid + one-blob field with two MLP heads."""

    def __init__(self, bounds, config=None, seed=0):
        self.bounds = bounds
        self.config = config or FieldConfig()
        cfg = self.config
        self.plane_shapes = plane_node_counts(bounds, cfg.plane_cell_size)
        self.grid_resolutions = grid_level_resolutions(bounds, cfg)
        self._build_manifest()
        self.flat = np.zeros(self.parameter_count)
        self._attach_views(self)
        self._init_parameters(np.random.default_rng(seed))

    # -- parameter layout ---------------------------------------------------

    def _build_manifest(self):
        cfg = self.config
        entries = []
        for tag, (n0, n1) in zip(("xy", "xz", "yz"), self.plane_shapes):
            entries.append((f"geo_plane_{tag}", (n0, n1, cfg.plane_channels)))
        for tag, (n0, n1) in zip(("xy", "xz", "yz"), self.plane_shapes):
            entries.append((f"col_plane_{tag}", (n0, n1, cfg.plane_channels)))
        entries.append(("geo_grid",
                        (cfg.grid_levels, cfg.table_size, cfg.grid_channels)))
        entries.append(("col_grid",
                        (cfg.grid_levels, cfg.table_size, cfg.grid_channels)))
        entries.append(("geo_w1", (cfg.hidden_width, cfg.geometry_input_dim)))
        entries.append(("geo_b1", (cfg.hidden_width,)))
        entries.append(("geo_w2", (cfg.geo_feature_dim + 1, cfg.hidden_width)))
        entries.append(("geo_b2", (cfg.geo_feature_dim + 1,)))
        entries.append(("col_w1", (cfg.hidden_width, cfg.color_input_dim)))
        entries.append(("col_b1", (cfg.hidden_width,)))
        entries.append(("col_w2", (3, cfg.hidden_width)))
        entries.append(("col_b2", (3,)))
        entries.append(("beta", (1,)))
        offset = 0
        self.manifest = []
        for name, shape in entries:
            size = int(np.prod(shape))
            self.manifest.append((name, shape, offset, size))
            offset += size
        self.parameter_count = offset

    def _attach_views(self, target):
        """Attach named reshaped views of target.flat per the manifest."""
        for name, shape, offset, size in self.manifest:
            setattr(target, name, target.flat[offset:offset + size].reshape(shape))
        target.geo_planes = [target.geo_plane_xy, target.geo_plane_xz,
                             target.geo_plane_yz]
        target.col_planes = [target.col_plane_xy, target.col_plane_xz,
                             target.col_plane_yz]

    def _init_parameters(self, rng):
        cfg = self.config
        r = cfg.feature_init_range
        for plane in self.geo_planes + self.col_planes:
            plane[:] = rng.uniform(-r, r, size=plane.shape)
        self.geo_grid[:] = rng.uniform(-r, r, size=self.geo_grid.shape)
        self.col_grid[:] = rng.uniform(-r, r, size=self.col_grid.shape)
        for w, b in ((self.geo_w1, self.geo_b1), (self.geo_w2, self.geo_b2),
                     (self.col_w1, self.col_b1), (self.col_w2, self.col_b2)):
            bound = math.sqrt(6.0 / w.shape[1])
            w[:] = rng.uniform(-bound, bound, size=w.shape)
            b[:] = 0.0
        self.beta[0] = cfg.beta_init

    def new_gradients(self):
        return FieldGradients(self)

    def flatten_parameters(self):
        """Copy of the flat parameter vector (manifest order)."""
        return self.flat.copy()

    def set_parameters(self, vector):
        vector = np.asarray(vector, dtype=np.float64).reshape(-1)
        if vector.shape[0] != self.parameter_count:
            raise ValueError(
                f"parameter vector has {vector.shape[0]} entries, "
                f"field expects {self.parameter_count}")
        self.flat[:] = vector

    def manifest_counts(self):
        return [size for _, _, _, size in self.manifest]

    def serialize_parameters(self):
        """Binary parameter blob: magic, version, group counts, float32 data."""
        counts = self.manifest_counts()
        header = PARAM_MAGIC + struct.pack("<HI", PARAM_VERSION, len(counts))
        header += struct.pack(f"<{len(counts)}I", *counts)
        data = self.flat.astype("<f4").tobytes()
        return header + data

    def deserialize_parameters(self, blob):
        """Load a parameter blob produced by serialize_parameters.

        Raises:
            ValueError: on bad magic/version or mismatched manifest counts.
        """
        if blob[:4] != PARAM_MAGIC:
            raise ValueError("bad parameter blob magic")
        version, ngroups = struct.unpack_from("<HI", blob, 4)
        if version != PARAM_VERSION:
            raise ValueError(f"unsupported parameter blob version {version}")
        counts = struct.unpack_from(f"<{ngroups}I", blob, 10)
        if list(counts) != self.manifest_counts():
            raise ValueError("parameter blob manifest does not match field")
        offset = 10 + 4 * ngroups
        data = np.frombuffer(blob, dtype="<f4", offset=offset)
        if data.shape[0] != self.parameter_count:
            raise ValueError("parameter blob data length mismatch")
        self.flat[:] = data.astype(np.float64)

    def serialized_byte_size(self):
        return len(self.serialize_parameters())

    # -- forward ------------------------------------------------------------

    def _encode(self, points):
        """Shared encoding stage: normalization, planes, grids, one-blob."""
        cfg = self.config
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        raw = self.bounds.normalize(points)
        inside = np.abs(raw) <= 1.0
        normed = np.clip(raw, -1.0, 1.0)
        unit = (normed + 1.0) * 0.5

        plane_coords = []
        tri_geo = np.zeros((points.shape[0], cfg.plane_channels))
        tri_col = np.zeros((points.shape[0], cfg.plane_channels))
        for plane_idx, (a, b) in enumerate(PLANE_AXES):
            n0, n1 = self.plane_shapes[plane_idx]
            u = unit[:, a] * (n0 - 1)
            v = unit[:, b] * (n1 - 1)
            plane_coords.append((u, v))
            tri_geo += kernels.bilinear_forward(self.geo_planes[plane_idx], u, v)
            tri_col += kernels.bilinear_forward(self.col_planes[plane_idx], u, v)

        grid_geo = kernels.hashgrid_forward(self.geo_grid, unit,
                                            self.grid_resolutions)
        grid_col = kernels.hashgrid_forward(self.col_grid, unit,
                                            self.grid_resolutions)

        centers = (np.arange(cfg.oneblob_bins) + 0.5) / cfg.oneblob_bins
        sigma = 1.0 / cfg.oneblob_bins
        diff = unit[:, :, None] - centers[None, None, :]
        gauss = np.exp(-0.5 * (diff / sigma) ** 2)
        gsum = gauss.sum(axis=2)
        gamma = (gauss / gsum[:, :, None]).reshape(points.shape[0], -1)

        return FieldQueryCache(
            points=points, normed=normed, inside=inside, unit=unit,
            plane_coords=plane_coords, oneblob_gauss=gauss, oneblob_sum=gsum,
            gamma=gamma, tri_geo=tri_geo, tri_col=tri_col,
            grid_geo=grid_geo, grid_col=grid_col,
            geo_in=None, geo_pre1=None, geo_hidden=None, geo_z=None, sdf=None)

    def _geometry_head(self, cache):
        cache.geo_in = np.concatenate(
            [cache.gamma, cache.tri_geo, cache.grid_geo], axis=1)
        cache.geo_pre1 = cache.geo_in @ self.geo_w1.T + self.geo_b1
        cache.geo_hidden = np.maximum(cache.geo_pre1, 0.0)
        out = cache.geo_hidden @ self.geo_w2.T + self.geo_b2
        cache.geo_z = out[:, :-1]
        cache.sdf = np.tanh(out[:, -1])

    def _color_head(self, cache):
        cache.col_in = np.concatenate(
            [cache.gamma, cache.geo_z, cache.tri_col, cache.tri_geo,
             cache.grid_col, cache.grid_geo], axis=1)
        cache.col_pre1 = cache.col_in @ self.col_w1.T + self.col_b1
        cache.col_hidden = np.maximum(cache.col_pre1, 0.0)
        pre = cache.col_hidden @ self.col_w2.T + self.col_b2
        cache.rgb = 1.0 / (1.0 + np.exp(-pre))

    def query(self, points, with_color=True):
        """Evaluate the field at (N, 3) world points.

        Points outside the bounds are clamped to the boundary of the
        normalized cube; FieldQuery.clamped reports whether that happened.
        """
        cache = self._encode(points)
        self._geometry_head(cache)
        if with_color:
            self._color_head(cache)
        return FieldQuery(sdf=cache.sdf, geo_feature=cache.geo_z,
                          rgb=cache.rgb, clamped=bool(~cache.inside.all()),
                          cache=cache)

    def query_geometry(self, points):
        """Geometry-only query: (sdf (N,), z (N, geo_feature_dim))."""
        result = self.query(points, with_color=False)
        return result.sdf, result.geo_feature

    def query_color(self, points, geo_feature=None):
        """Appearance query at (N, 3) points.

        Args:
            geo_feature: optional (N, z) geometry features to condition on;
                derived from the geometry head when omitted.
        """
        cache = self._encode(points)
        if geo_feature is None:
            self._geometry_head(cache)
        else:
            cache.geo_z = np.asarray(geo_feature, dtype=np.float64)
        self._color_head(cache)
        return cache.rgb

    # -- backward -----------------------------------------------------------

    def accumulate_gradients(self, cache, d_sdf, grads, d_rgb=None,
                             d_geo_feature=None, compute_point_grad=False):
        """Reverse-mode pass: scatter loss gradients into a gradient buffer.

        Args:
            cache: FieldQueryCache from a forward query on this field.
            d_sdf: (N,) upstream dL/d(sdf).
            grads: FieldGradients to accumulate into.
            d_rgb: optional (N, 3) upstream dL/d(rgb); requires a forward
                query that included the color head.
            d_geo_feature: optional (N, z) upstream dL/dz.
            compute_point_grad: also return dL/d(world point).

        Returns:
            (N, 3) dL/dpoints when compute_point_grad is True, else None.
        """
        cfg = self.config
        n = cache.points.shape[0]
        d_sdf = np.asarray(d_sdf, dtype=np.float64).reshape(n)
        d_gamma = np.zeros_like(cache.gamma)
        d_tri_geo = np.zeros_like(cache.tri_geo)
        d_tri_col = np.zeros_like(cache.tri_col)
        d_grid_geo = np.zeros_like(cache.grid_geo)
        d_grid_col = np.zeros_like(cache.grid_col)
        d_z = np.zeros((n, cfg.geo_feature_dim))
        if d_geo_feature is not None:
            d_z += d_geo_feature

        if d_rgb is not None:
            if cache.rgb is None:
                raise ValueError("color gradients need a color forward pass")
            d_pre2 = d_rgb * cache.rgb * (1.0 - cache.rgb)
            grads.col_w2 += d_pre2.T @ cache.col_hidden
            grads.col_b2 += d_pre2.sum(axis=0)
            d_hidden = d_pre2 @ self.col_w2
            d_pre1 = d_hidden * (cache.col_pre1 > 0.0)
            grads.col_w1 += d_pre1.T @ cache.col_in
            grads.col_b1 += d_pre1.sum(axis=0)
            d_col_in = d_pre1 @ self.col_w1
            ob = cfg.oneblob_dim
            z = cfg.geo_feature_dim
            pc = cfg.plane_channels
            gc = cfg.grid_feature_dim
            d_gamma += d_col_in[:, :ob]
            d_z += d_col_in[:, ob:ob + z]
            d_tri_col += d_col_in[:, ob + z:ob + z + pc]
            d_tri_geo += d_col_in[:, ob + z + pc:ob + z + 2 * pc]
            d_grid_col += d_col_in[:, ob + z + 2 * pc:ob + z + 2 * pc + gc]
            d_grid_geo += d_col_in[:, ob + z + 2 * pc + gc:]

        d_out = np.concatenate(
            [d_z, (d_sdf * (1.0 - cache.sdf ** 2))[:, None]], axis=1)
        grads.geo_w2 += d_out.T @ cache.geo_hidden
        grads.geo_b2 += d_out.sum(axis=0)
        d_hidden = d_out @ self.geo_w2
        d_pre1 = d_hidden * (cache.geo_pre1 > 0.0)
        grads.geo_w1 += d_pre1.T @ cache.geo_in
        grads.geo_b1 += d_pre1.sum(axis=0)
        d_geo_in = d_pre1 @ self.geo_w1
        ob = cfg.oneblob_dim
        pc = cfg.plane_channels
        d_gamma += d_geo_in[:, :ob]
        d_tri_geo += d_geo_in[:, ob:ob + pc]
        d_grid_geo += d_geo_in[:, ob + pc:]

        d_unit = np.zeros((n, 3)) if compute_point_grad else None

        for plane_idx, (a, b) in enumerate(PLANE_AXES):
            u, v = cache.plane_coords[plane_idx]
            n0, n1 = self.plane_shapes[plane_idx]
            kernels.bilinear_backward(grads.geo_planes[plane_idx],
                                      u, v, d_tri_geo)
            kernels.bilinear_backward(grads.col_planes[plane_idx],
                                      u, v, d_tri_col)
            if compute_point_grad:
                g0, g1 = kernels.bilinear_input_grad(
                    self.geo_planes[plane_idx], u, v, d_tri_geo)
                c0, c1 = kernels.bilinear_input_grad(
                    self.col_planes[plane_idx], u, v, d_tri_col)
                d_unit[:, a] += (g0 + c0) * (n0 - 1)
                d_unit[:, b] += (g1 + c1) * (n1 - 1)

        kernels.hashgrid_backward(grads.geo_grid, cache.unit,
                                  self.grid_resolutions, d_grid_geo)
        kernels.hashgrid_backward(grads.col_grid, cache.unit,
                                  self.grid_resolutions, d_grid_col)
        if compute_point_grad:
            d_unit += kernels.hashgrid_input_grad(
                self.geo_grid, cache.unit, self.grid_resolutions, d_grid_geo)
            d_unit += kernels.hashgrid_input_grad(
                self.col_grid, cache.unit, self.grid_resolutions, d_grid_col)

        # one-blob backward: y = g / sum(g)
        bins = cfg.oneblob_bins
        d_y = d_gamma.reshape(n, 3, bins)
        gauss, gsum = cache.oneblob_gauss, cache.oneblob_sum
        y = gauss / gsum[:, :, None]
        d_g = (d_y - np.sum(d_y * y, axis=2, keepdims=True)) / gsum[:, :, None]
        if compute_point_grad:
            centers = (np.arange(bins) + 0.5) / bins
            sigma = 1.0 / bins
            dg_ds = gauss * (-(cache.unit[:, :, None] - centers[None, None, :])
                             / sigma ** 2)
            d_unit += np.sum(d_g * dg_ds, axis=2)

        if not compute_point_grad:
            return None
        # unit = (normed + 1) / 2, normed = 2 (x - min) / extent - 1
        d_normed = d_unit * 0.5
        d_points = d_normed * (2.0 / self.bounds.extent)[None, :]
        d_points *= cache.inside  # clamped coordinates stop the gradient
        return d_points

    # -- misc ---------------------------------------------------------------

    @property
    def beta_value(self):
        return float(self.beta[0])

    def clamp_beta(self, minimum=1e-4):
        """Project the sharpness scalar back to the positive range."""
        if self.beta[0] < minimum:
            self.beta[0] = minimum

    def clone(self, seed=0):
        """New field with identical architecture and copied parameters."""
        other = SceneField(self.bounds, self.config, seed=seed)
        other.flat[:] = self.flat
        return other
