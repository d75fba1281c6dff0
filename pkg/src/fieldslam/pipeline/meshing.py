"""Mesh extraction from scene fields and binary PLY input/output."""

import struct
from dataclasses import dataclass

import numpy as np
from skimage import measure

__all__ = [
    "TriangleMesh", "MeshExtraction", "marching_cubes_volume",
    "mesh_from_sdf_function", "extract_mesh", "cull_mesh",
    "transform_mesh", "merge_meshes", "write_ply", "read_ply",
]

DEFAULT_VOXEL_SIZE = 0.02


@dataclass
class TriangleMesh:
    """Triangle soup in meters with optional per-vertex colors in [0, 1]."""

    vertices: np.ndarray                 # (V, 3) float64
    faces: np.ndarray                    # (F, 3) int64
    colors: np.ndarray = None            # (V, 3) float64 or None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices,
                                   dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0
                                or self.faces.max() >= len(self.vertices)):
            raise ValueError("face indices out of vertex range")
        if self.colors is not None:
            self.colors = np.asarray(self.colors,
                                     dtype=np.float64).reshape(-1, 3)
            if self.colors.shape[0] != self.vertices.shape[0]:
                raise ValueError("per-vertex color count mismatch")

    @property
    def is_empty(self):
        return self.faces.shape[0] == 0

    @classmethod
    def empty(cls):
        return cls(vertices=np.zeros((0, 3)),
                   faces=np.zeros((0, 3), dtype=np.int64))

    def triangle_areas(self):
        a = self.vertices[self.faces[:, 0]]
        b = self.vertices[self.faces[:, 1]]
        c = self.vertices[self.faces[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


@dataclass
class MeshExtraction:
    """extract_mesh output: the mesh plus what happened on the way."""

    mesh: TriangleMesh
    empty_isosurface: bool
    culled_faces: int = 0


def _drop_unused_vertices(vertices, faces, colors=None):
    used = np.unique(faces.reshape(-1))
    remap = np.full(len(vertices), -1, dtype=np.int64)
    remap[used] = np.arange(used.size)
    new_colors = colors[used] if colors is not None else None
    return vertices[used], remap[faces], new_colors


def _drop_degenerate_faces(mesh, min_area=1e-14):
    keep = mesh.triangle_areas() > min_area
    if np.all(keep):
        return mesh
    if not np.any(keep):
        return TriangleMesh.empty()
    verts, faces, colors = _drop_unused_vertices(
        mesh.vertices, mesh.faces[keep], mesh.colors)
    return TriangleMesh(vertices=verts, faces=faces, colors=colors)


def marching_cubes_volume(volume, origin, voxel_size):
    """Zero-isosurface triangulation of a sampled scalar volume.

    Returns:
        TriangleMesh (empty when the volume does not cross zero),
        degenerate triangles removed.
    """
    volume = np.asarray(volume, dtype=np.float64)
    try:
        verts, faces, _, _ = measure.marching_cubes(
            volume, level=0.0,
            spacing=(voxel_size, voxel_size, voxel_size))
    except (ValueError, RuntimeError):
        return TriangleMesh.empty()
    mesh = TriangleMesh(vertices=verts + np.asarray(origin, dtype=np.float64),
                        faces=faces.astype(np.int64))
    return _drop_degenerate_faces(mesh)


def _lattice_axes(bounds_min, bounds_max, voxel_size):
    axes = []
    for lo, hi in zip(bounds_min, bounds_max):
        count = int(np.ceil((hi - lo) / voxel_size)) + 1
        axes.append(lo + voxel_size * np.arange(max(2, count)))
    return axes


def mesh_from_sdf_function(sdf_fn, bounds_min, bounds_max,
                           voxel_size=DEFAULT_VOXEL_SIZE, chunk=262144):
    """Triangulate the zero level set of an arbitrary signed-distance
    function sampled on a regular lattice over the given bounds."""
    xs, ys, zs = _lattice_axes(bounds_min, bounds_max, voxel_size)
    grid = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"),
                    axis=-1).reshape(-1, 3)
    values = np.empty(grid.shape[0])
    for start in range(0, grid.shape[0], chunk):
        stop = min(start + chunk, grid.shape[0])
        values[start:stop] = np.asarray(sdf_fn(grid[start:stop])).reshape(-1)
    volume = values.reshape(len(xs), len(ys), len(zs))
    origin = np.array([xs[0], ys[0], zs[0]])
    return marching_cubes_volume(volume, origin, voxel_size)


def cull_mesh(mesh, intrinsics, keyframes, occlusion_margin=0.05,
              near=1e-4):
    """Remove triangles not observed by any keyframe.

    A vertex counts as observed by a keyframe when it projects inside the
    image with positive depth and sits no farther than the stored depth at
    that pixel plus the occlusion margin (pixels without valid depth
    observe nothing). A triangle survives when some keyframe observes all
    three of its vertices.

    Returns:
        (culled TriangleMesh, number of removed faces).
    """
    if mesh.is_empty or not keyframes:
        return mesh, 0
    k = intrinsics
    observed = np.zeros(len(mesh.vertices), dtype=bool)
    for kf in keyframes:
        local = kf.pose.inverse().apply(mesh.vertices)
        z = local[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = k.fx * local[:, 0] / z + k.cx
            v = k.fy * local[:, 1] / z + k.cy
        valid = (z > near) & (u >= 0) & (u <= k.width - 1) \
            & (v >= 0) & (v <= k.height - 1)
        if not np.any(valid):
            continue
        ui = np.clip(np.round(u[valid]).astype(int), 0, k.width - 1)
        vi = np.clip(np.round(v[valid]).astype(int), 0, k.height - 1)
        sensor = kf.depth[vi, ui]
        seen = (sensor > 0) & (z[valid] <= sensor + occlusion_margin)
        idx = np.flatnonzero(valid)
        observed[idx[seen]] = True
    keep = observed[mesh.faces].all(axis=1)
    removed = int(np.sum(~keep))
    if removed == 0:
        return mesh, 0
    if not np.any(keep):
        return TriangleMesh.empty(), removed
    verts, faces, colors = _drop_unused_vertices(
        mesh.vertices, mesh.faces[keep], mesh.colors)
    return TriangleMesh(vertices=verts, faces=faces, colors=colors), removed


def extract_mesh(field, voxel_size=DEFAULT_VOXEL_SIZE, bounds=None,
                 keyframes=None, intrinsics=None, occlusion_margin=0.05,
                 chunk=262144):
    """Mesh the zero level set of a trained field's geometry head.

    The signed-distance head is sampled on a voxel lattice over `bounds`
    (default: the field's own bounds), triangulated at the zero isolevel,
    and, when keyframes with depth maps are supplied, culled to triangles
    observed by at least one keyframe.

    Returns:
        MeshExtraction; empty_isosurface is set when the lattice never
        crosses zero (the mesh is then empty rather than an error).
    """
    if bounds is None:
        bounds_min, bounds_max = field.bounds.minimum, field.bounds.maximum
    else:
        bounds_min, bounds_max = bounds
    mesh = mesh_from_sdf_function(
        lambda pts: field.query_geometry(pts)[0],
        bounds_min, bounds_max, voxel_size=voxel_size, chunk=chunk)
    if mesh.is_empty:
        return MeshExtraction(mesh=mesh, empty_isosurface=True)
    culled = 0
    if keyframes and intrinsics is not None:
        mesh, culled = cull_mesh(mesh, intrinsics, keyframes,
                                 occlusion_margin=occlusion_margin)
    return MeshExtraction(mesh=mesh, empty_isosurface=False,
                          culled_faces=culled)


def transform_mesh(mesh, pose):
    """Mesh with vertices mapped through an SE3Pose."""
    if mesh.is_empty:
        return mesh
    return TriangleMesh(vertices=pose.apply(mesh.vertices),
                        faces=mesh.faces.copy(),
                        colors=None if mesh.colors is None
                        else mesh.colors.copy())


def merge_meshes(meshes):
    """Concatenate meshes into one (vertex indices offset per part)."""
    parts = [m for m in meshes if not m.is_empty]
    if not parts:
        return TriangleMesh.empty()
    verts, faces, colors, offset = [], [], [], 0
    with_colors = all(m.colors is not None for m in parts)
    for m in parts:
        verts.append(m.vertices)
        faces.append(m.faces + offset)
        if with_colors:
            colors.append(m.colors)
        offset += len(m.vertices)
    return TriangleMesh(vertices=np.vstack(verts), faces=np.vstack(faces),
                        colors=np.vstack(colors) if with_colors else None)


# ---------------------------------------------------------------------------
# Binary little-endian PLY
# ---------------------------------------------------------------------------


def write_ply(path, mesh):
    """Write a mesh as binary little-endian PLY (optionally with colors)."""
    has_colors = mesh.colors is not None
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {len(mesh.vertices)}",
              "property float x", "property float y", "property float z"]
    if has_colors:
        header += ["property uchar red", "property uchar green",
                   "property uchar blue"]
    header += [f"element face {len(mesh.faces)}",
               "property list uchar int vertex_indices", "end_header"]
    with open(path, "wb") as handle:
        handle.write(("\n".join(header) + "\n").encode("ascii"))
        if has_colors:
            rgb8 = np.clip(np.round(mesh.colors * 255.0), 0,
                           255).astype(np.uint8)
            for vert, col in zip(mesh.vertices, rgb8):
                handle.write(struct.pack("<3f", *vert))
                handle.write(struct.pack("<3B", *col))
        else:
            handle.write(mesh.vertices.astype("<f4").tobytes())
        counts = np.full((len(mesh.faces), 1), 3, dtype=np.uint8)
        face_rows = mesh.faces.astype("<i4")
        body = b"".join(
            counts[i].tobytes() + face_rows[i].tobytes()
            for i in range(len(mesh.faces)))
        handle.write(body)
    return path


def read_ply(path):
    """Read a binary little-endian PLY produced by write_ply.

    Raises:
        ValueError: on unsupported layout or a corrupt body.
    """
    with open(path, "rb") as handle:
        data = handle.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    header_lines = data[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header_lines:
        raise ValueError(f"{path}: only binary little-endian PLY supported")
    n_verts = n_faces = 0
    vertex_props = []
    current = None
    for line in header_lines:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n_verts = int(parts[2])
            current = "vertex"
        elif parts[:2] == ["element", "face"]:
            n_faces = int(parts[2])
            current = "face"
        elif parts[:1] == ["property"] and current == "vertex":
            vertex_props.append((parts[1], parts[2]))
    has_colors = ("uchar", "red") in vertex_props
    offset = end + len(b"end_header\n")
    verts = np.empty((n_verts, 3))
    colors = np.empty((n_verts, 3)) if has_colors else None
    stride = 12 + (3 if has_colors else 0)
    if len(data) < offset + n_verts * stride:
        raise ValueError(f"{path}: truncated vertex block")
    for i in range(n_verts):
        verts[i] = struct.unpack_from("<3f", data, offset)
        offset += 12
        if has_colors:
            colors[i] = np.frombuffer(data, dtype=np.uint8, count=3,
                                      offset=offset) / 255.0
            offset += 3
    faces = np.empty((n_faces, 3), dtype=np.int64)
    for i in range(n_faces):
        if data[offset] != 3:
            raise ValueError(f"{path}: face {i} is not a triangle")
        faces[i] = struct.unpack_from("<3i", data, offset + 1)
        offset += 13
    return TriangleMesh(vertices=verts, faces=faces, colors=colors)
