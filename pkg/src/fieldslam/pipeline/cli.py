"""Command-line interface.

Subcommands:
    run        full multi-agent pipeline from a config file
    mesh       extract a triangle mesh from a serialized field
    eval       trajectory error between two trajectory files
    eval-mesh  reconstruction metrics between two PLY meshes
    synth      render a synthetic sequence to disk
"""

import argparse
import csv
import os
import sys

from ..core_math import ate_statistics, load_trajectory
from .config import RunConfig
from .datasets import save_tum_sequence
from .fieldio import load_field
from .meshing import extract_mesh, read_ply, write_ply
from .metrics import compute_reconstruction_metrics
from .orchestrator import run_agents
from .synthetic import generate_synthetic_sequence, make_room_scene, \
    make_sphere_wall_scene, orbit_trajectory

__all__ = ["main"]


def _print_metrics(pairs, csv_path=None):
    """Emit `name: value` lines, optionally mirrored into a CSV file."""
    for name, value in pairs:
        if isinstance(value, float):
            print(f"{name}: {value:.6f}")
        else:
            print(f"{name}: {value}")
    if csv_path:
        with open(csv_path, "w", encoding="ascii", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["metric", "value"])
            for name, value in pairs:
                writer.writerow([name, value])


def _cmd_run(args):
    config = RunConfig.from_file(args.config)
    overrides = {}
    if args.agents is not None:
        overrides["run.agents"] = args.agents
    if args.seed is not None:
        overrides["run.seed"] = args.seed
    if args.deterministic:
        overrides["run.deterministic"] = True
    if overrides:
        config.update(overrides)
    result = run_agents(config, out_dir=args.out)
    pairs = []
    for agent in result.agents:
        pairs.append((f"agent{agent.agent_id}_frames",
                      len(agent.timestamps)))
        pairs.append((f"agent{agent.agent_id}_keyframes",
                      len(agent.keyframes)))
        if agent.ate_rmse is not None:
            pairs.append((f"agent{agent.agent_id}_ate_rmse",
                          float(agent.ate_rmse)))
    pairs.append(("fusion_events", len(result.fusion_events)))
    totals = result.ledger.column_totals()
    for column in ("VD", "NP", "Pose", "Signal", "Images", "Total"):
        pairs.append((f"bytes_{column.lower()}", totals[column]))
    _print_metrics(pairs, os.path.join(args.out, "summary.csv"))
    return 0


def _cmd_mesh(args):
    field = load_field(args.field)
    extraction = extract_mesh(field, voxel_size=args.voxel)
    if extraction.empty_isosurface:
        print("warning: field has no zero crossing; wrote an empty mesh",
              file=sys.stderr)
    write_ply(args.out, extraction.mesh)
    _print_metrics([("vertices", extraction.mesh.vertices.shape[0]),
                    ("faces", extraction.mesh.faces.shape[0])])
    return 0


def _cmd_eval(args):
    est_times, est_poses = load_trajectory(args.est)
    ref_times, ref_poses = load_trajectory(args.ref)
    mode = "umeyama" if args.mode == "sim3" else args.mode
    stats = ate_statistics(est_times, est_poses, ref_times, ref_poses,
                           mode=mode, max_dt=args.max_dt)
    _print_metrics([("ate_rmse", stats.rmse),
                    ("ate_mean", stats.mean),
                    ("ate_median", stats.median),
                    ("ate_max", float(stats.errors.max())),
                    ("matched_poses", stats.num_pairs)], args.csv)
    return 0


def _cmd_eval_mesh(args):
    mesh = read_ply(args.mesh)
    gt_mesh = read_ply(args.gt)
    metrics = compute_reconstruction_metrics(
        mesh, gt_mesh, samples=args.samples, threshold=args.threshold,
        seed=args.seed)
    _print_metrics([("accuracy", metrics.accuracy),
                    ("completion", metrics.completion),
                    ("completion_ratio", metrics.completion_ratio)],
                   args.csv)
    return 0


def _cmd_synth(args):
    config = RunConfig.from_file(args.scene) if args.scene else RunConfig()
    if args.frames is not None:
        config.update({"scene.frames": args.frames})
    scene = make_room_scene() if config["scene.name"] == "room" \
        else make_sphere_wall_scene()
    from .orchestrator import _intrinsics_from_config

    intrinsics = _intrinsics_from_config(config)
    poses = orbit_trajectory((0.0, 0.0, 0.0), config["scene.orbit_radius"],
                             config["scene.orbit_height"],
                             config["scene.frames"])
    dataset = generate_synthetic_sequence(
        scene, poses, intrinsics, noise_sigma=config["scene.noise_sigma"],
        seed=config["run.seed"], fps=config["scene.fps"])
    save_tum_sequence(dataset, args.out)
    _print_metrics([("frames", len(dataset)),
                    ("width", intrinsics.width),
                    ("height", intrinsics.height)])
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fieldslam",
        description="Distributed neural signed-distance-field SLAM")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the multi-agent pipeline")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", required=True)
    p_run.add_argument("--agents", type=int, default=None)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--deterministic", action="store_true")
    p_run.set_defaults(func=_cmd_run)

    p_mesh = sub.add_parser("mesh", help="extract a mesh from a field file")
    p_mesh.add_argument("--field", required=True)
    p_mesh.add_argument("--out", required=True)
    p_mesh.add_argument("--voxel", type=float, default=0.02)
    p_mesh.set_defaults(func=_cmd_mesh)

    p_eval = sub.add_parser("eval", help="trajectory error metrics")
    p_eval.add_argument("--est", required=True)
    p_eval.add_argument("--ref", required=True)
    p_eval.add_argument("--mode", choices=("se3", "sim3", "origin", "none"),
                        default="se3")
    p_eval.add_argument("--max-dt", type=float, default=0.02)
    p_eval.add_argument("--csv", default=None)
    p_eval.set_defaults(func=_cmd_eval)

    p_em = sub.add_parser("eval-mesh", help="reconstruction metrics")
    p_em.add_argument("--mesh", required=True)
    p_em.add_argument("--gt", required=True)
    p_em.add_argument("--samples", type=int, default=200000)
    p_em.add_argument("--threshold", type=float, default=0.05)
    p_em.add_argument("--seed", type=int, default=0)
    p_em.add_argument("--csv", default=None)
    p_em.set_defaults(func=_cmd_eval_mesh)

    p_synth = sub.add_parser("synth", help="render a synthetic sequence")
    p_synth.add_argument("--scene", default=None,
                         help="config file naming the scene")
    p_synth.add_argument("--frames", type=int, default=None)
    p_synth.add_argument("--out", required=True)
    p_synth.set_defaults(func=_cmd_synth)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
