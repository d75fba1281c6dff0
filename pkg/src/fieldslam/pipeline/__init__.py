"""End-to-end pipeline: data, configuration, orchestration, and evaluation."""

from .config import RunConfig, parse_config_text
from .datasets import FrameRecord, SequenceDataset, load_replica_sequence, \
    load_tum_sequence, save_tum_sequence
from .fieldio import field_from_bytes, field_to_bytes, load_field, save_field
from .meshing import MeshExtraction, TriangleMesh, cull_mesh, extract_mesh, \
    marching_cubes_volume, merge_meshes, mesh_from_sdf_function, read_ply, \
    transform_mesh, write_ply
from .metrics import DepthError, ReconstructionMetrics, \
    compute_image_metrics, compute_psnr, compute_reconstruction_metrics, \
    compute_ssim, depth_l1, nearest_distances, sample_mesh_points
from .orchestrator import AgentOutput, FusionEvent, RunResult, run_agents
from .synthetic import SyntheticScene, arc_split_trajectories, \
    generate_synthetic_sequence, look_at_pose, make_room_scene, \
    make_sphere_wall_scene, orbit_trajectory, render_frame, sphere_trace

__all__ = [
    "RunConfig", "parse_config_text",
    "FrameRecord", "SequenceDataset", "load_replica_sequence",
    "load_tum_sequence", "save_tum_sequence",
    "field_from_bytes", "field_to_bytes", "load_field", "save_field",
    "MeshExtraction", "TriangleMesh", "cull_mesh", "extract_mesh",
    "marching_cubes_volume", "merge_meshes", "mesh_from_sdf_function",
    "read_ply", "transform_mesh", "write_ply",
    "DepthError", "ReconstructionMetrics", "compute_image_metrics",
    "compute_psnr", "compute_reconstruction_metrics", "compute_ssim",
    "depth_l1", "nearest_distances", "sample_mesh_points",
    "AgentOutput", "FusionEvent", "RunResult", "run_agents",
    "SyntheticScene", "arc_split_trajectories",
    "generate_synthetic_sequence", "look_at_pose", "make_room_scene",
    "make_sphere_wall_scene", "orbit_trajectory", "render_frame",
    "sphere_trace",
]
