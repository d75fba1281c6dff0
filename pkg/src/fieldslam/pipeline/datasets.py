"""RGB-D sequence datasets: in-memory, TUM-format, and Replica-style."""

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from ..core_math import Intrinsics, SE3Pose, associate_timestamps, \
    quat_to_rotmat, rotmat_to_quat

__all__ = [
    "FrameRecord", "SequenceDataset", "load_tum_sequence",
    "load_replica_sequence", "save_tum_sequence",
    "TUM_DEPTH_SCALE", "REPLICA_DEPTH_SCALE",
]

TUM_DEPTH_SCALE = 5000.0
REPLICA_DEPTH_SCALE = 6553.5


@dataclass
class FrameRecord:
    """One RGB-D frame, backed by files or in-memory arrays."""

    timestamp: float
    rgb_path: str = None
    depth_path: str = None
    rgb_data: np.ndarray = None
    depth_data: np.ndarray = None


class SequenceDataset:
    """Ordered RGB-D frames with intrinsics and optional ground truth.

    Attributes:
        frames: list of FrameRecord with strictly increasing timestamps.
        gt_poses: optional list, one entry per frame (SE3Pose or None).
        depth_scale: divisor turning stored integer depth into meters.
        dropped_frames: frames discarded during association by a loader.
    """

    def __init__(self, frames, intrinsics, gt_poses=None, depth_scale=1.0,
                 dropped_frames=0, name=""):
        if not frames:
            raise ValueError("dataset needs at least one frame")
        times = [f.timestamp for f in frames]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("frame timestamps must be strictly increasing")
        if gt_poses is not None and len(gt_poses) != len(frames):
            raise ValueError("ground-truth pose list length mismatch")
        self.frames = frames
        self.intrinsics = intrinsics
        self.gt_poses = gt_poses
        self.depth_scale = float(depth_scale)
        self.dropped_frames = int(dropped_frames)
        self.name = name

    def __len__(self):
        return len(self.frames)

    @property
    def timestamps(self):
        return np.array([f.timestamp for f in self.frames])

    def gt_pose(self, index):
        if self.gt_poses is None:
            return None
        return self.gt_poses[index]

    def load(self, index):
        """Frame `index` as (rgb (H, W, 3) in [0, 1], depth (H, W) meters).

        Raises:
            ValueError: when rgb/depth dimensions disagree.
        """
        rec = self.frames[index]
        if rec.rgb_data is not None:
            rgb = np.asarray(rec.rgb_data, dtype=np.float64)
            depth = np.asarray(rec.depth_data, dtype=np.float64)
        else:
            rgb = np.asarray(Image.open(rec.rgb_path).convert("RGB"),
                             dtype=np.float64) / 255.0
            raw = np.asarray(Image.open(rec.depth_path), dtype=np.float64)
            depth = raw / self.depth_scale
        if rgb.shape[:2] != depth.shape:
            raise ValueError(
                f"frame {index}: rgb {rgb.shape[:2]} vs depth {depth.shape}")
        return rgb, depth


# ---------------------------------------------------------------------------
# TUM RGB-D format
# ---------------------------------------------------------------------------


def _read_stamped_lines(path, n_fields):
    """Parse "timestamp field..." lines, skipping comments.

    Returns:
        list of (timestamp, [fields]).

    Raises:
        FileNotFoundError, ValueError naming file and line number.
    """
    if not os.path.isfile(path):
        raise FileNotFoundError(f"missing dataset index file: {path}")
    rows = []
    with open(path, "r", encoding="ascii") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 1 + n_fields:
                raise ValueError(f"{path}:{lineno}: expected "
                                 f"{1 + n_fields} fields, got {len(parts)}")
            try:
                stamp = float(parts[0])
            except ValueError:
                raise ValueError(
                    f"{path}:{lineno}: bad timestamp {parts[0]!r}") from None
            rows.append((stamp, parts[1:]))
    return rows


def _parse_tum_groundtruth(path):
    rows = _read_stamped_lines(path, 7)
    times, poses = [], []
    for lineno, (stamp, fields) in enumerate(rows, start=1):
        try:
            vals = [float(f) for f in fields]
        except ValueError as exc:
            raise ValueError(f"{path}: pose row {lineno}: {exc}") from None
        quat = np.array(vals[3:7])
        poses.append(SE3Pose(rotation=quat_to_rotmat(quat),
                             translation=np.array(vals[:3])))
        times.append(stamp)
    return np.array(times), poses


DEFAULT_TUM_INTRINSICS = Intrinsics(fx=525.0, fy=525.0, cx=319.5, cy=239.5,
                                    width=640, height=480)


def load_tum_sequence(root, intrinsics=None, max_dt=0.02):
    """Load a TUM RGB-D directory (rgb.txt, depth.txt, groundtruth.txt).

    RGB frames are associated to the nearest depth frame and ground-truth
    pose within max_dt seconds; frames without a depth match are dropped
    and counted in `dropped_frames`. 16-bit depth PNGs are scaled by
    1/5000 to meters.

    Raises:
        FileNotFoundError: when an index file is missing.
        ValueError: malformed lines, reported with file and line number.
    """
    rgb_rows = _read_stamped_lines(os.path.join(root, "rgb.txt"), 1)
    depth_rows = _read_stamped_lines(os.path.join(root, "depth.txt"), 1)
    rgb_times = np.array([r[0] for r in rgb_rows])
    depth_times = np.array([r[0] for r in depth_rows])
    pairs = associate_timestamps(rgb_times, depth_times, max_dt=max_dt)
    dropped = len(rgb_rows) - len(pairs)

    gt_path = os.path.join(root, "groundtruth.txt")
    gt_times, gt_poses_all = (None, None)
    if os.path.isfile(gt_path):
        gt_times, gt_poses_all = _parse_tum_groundtruth(gt_path)

    frames, gt_poses = [], []
    for i, j in pairs:
        frames.append(FrameRecord(
            timestamp=float(rgb_times[i]),
            rgb_path=os.path.join(root, rgb_rows[i][1][0]),
            depth_path=os.path.join(root, depth_rows[j][1][0])))
        if gt_times is not None and gt_times.size:
            k = int(np.argmin(np.abs(gt_times - rgb_times[i])))
            gt_poses.append(gt_poses_all[k]
                            if abs(gt_times[k] - rgb_times[i]) <= max_dt
                            else None)
        else:
            gt_poses.append(None)
    has_gt = any(p is not None for p in gt_poses)
    return SequenceDataset(frames=frames,
                           intrinsics=intrinsics or DEFAULT_TUM_INTRINSICS,
                           gt_poses=gt_poses if has_gt else None,
                           depth_scale=TUM_DEPTH_SCALE, dropped_frames=dropped,
                           name=os.path.basename(os.path.normpath(root)))


# ---------------------------------------------------------------------------
# Replica-style format
# ---------------------------------------------------------------------------


DEFAULT_REPLICA_INTRINSICS = Intrinsics(fx=600.0, fy=600.0, cx=599.5,
                                        cy=339.5, width=1200, height=680)


def load_replica_sequence(root, intrinsics=None, fps=30.0,
                          depth_scale=REPLICA_DEPTH_SCALE):
    """Load a Replica-style directory.

    Expects frame%06d.jpg and depth%06d.png (in `root` or `root/results`)
    plus traj.txt with one row-major 4x4 world-from-camera matrix per line.

    Raises:
        FileNotFoundError: missing traj.txt or missing frame files.
        ValueError: malformed trajectory lines, with line number.
    """
    traj_path = os.path.join(root, "traj.txt")
    if not os.path.isfile(traj_path):
        raise FileNotFoundError(f"missing trajectory file: {traj_path}")
    frame_dir = root
    if not os.path.isfile(os.path.join(root, "frame000000.jpg")):
        alt = os.path.join(root, "results")
        if os.path.isfile(os.path.join(alt, "frame000000.jpg")):
            frame_dir = alt

    poses = []
    with open(traj_path, "r", encoding="ascii") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 16:
                raise ValueError(f"{traj_path}:{lineno}: expected 16 "
                                 f"values, got {len(parts)}")
            try:
                mat = np.array([float(p) for p in parts]).reshape(4, 4)
            except ValueError as exc:
                raise ValueError(f"{traj_path}:{lineno}: {exc}") from None
            poses.append(SE3Pose.from_matrix(mat))

    frames = []
    for i in range(len(poses)):
        rgb_path = os.path.join(frame_dir, f"frame{i:06d}.jpg")
        depth_path = os.path.join(frame_dir, f"depth{i:06d}.png")
        if not os.path.isfile(rgb_path):
            raise FileNotFoundError(f"missing frame file: {rgb_path}")
        if not os.path.isfile(depth_path):
            raise FileNotFoundError(f"missing depth file: {depth_path}")
        frames.append(FrameRecord(timestamp=i / fps, rgb_path=rgb_path,
                                  depth_path=depth_path))
    return SequenceDataset(
        frames=frames,
        intrinsics=intrinsics or DEFAULT_REPLICA_INTRINSICS,
        gt_poses=poses, depth_scale=depth_scale,
        name=os.path.basename(os.path.normpath(root)))


# ---------------------------------------------------------------------------
# TUM-format writer (for generated datasets)
# ---------------------------------------------------------------------------


def save_tum_sequence(dataset, out_dir):
    """Write a dataset as a TUM RGB-D directory (lossless 8/16-bit PNGs).

    Depth is stored as 16-bit PNG at the TUM 5000 counts-per-meter scale,
    which quantizes depth to 0.2 mm.

    Returns:
        the output directory path.
    """
    rgb_dir = os.path.join(out_dir, "rgb")
    depth_dir = os.path.join(out_dir, "depth")
    os.makedirs(rgb_dir, exist_ok=True)
    os.makedirs(depth_dir, exist_ok=True)
    rgb_lines, depth_lines, gt_lines = [], [], []
    for i in range(len(dataset)):
        rgb, depth = dataset.load(i)
        ts = dataset.frames[i].timestamp
        rgb_name = f"rgb/frame{i:04d}.png"
        depth_name = f"depth/frame{i:04d}.png"
        rgb8 = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
        depth16 = np.clip(np.round(depth * TUM_DEPTH_SCALE), 0,
                          65535).astype(np.uint16)
        Image.fromarray(rgb8).save(os.path.join(out_dir, rgb_name))
        Image.fromarray(depth16).save(os.path.join(out_dir, depth_name))
        rgb_lines.append(f"{ts:.6f} {rgb_name}\n")
        depth_lines.append(f"{ts:.6f} {depth_name}\n")
        pose = dataset.gt_pose(i)
        if pose is not None:
            q = rotmat_to_quat(pose.rotation)
            t = pose.translation
            gt_lines.append(f"{ts:.6f} {t[0]:.9f} {t[1]:.9f} {t[2]:.9f} "
                            f"{q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}\n")
    with open(os.path.join(out_dir, "rgb.txt"), "w",
              encoding="ascii") as handle:
        handle.writelines(rgb_lines)
    with open(os.path.join(out_dir, "depth.txt"), "w",
              encoding="ascii") as handle:
        handle.writelines(depth_lines)
    if gt_lines:
        with open(os.path.join(out_dir, "groundtruth.txt"), "w",
                  encoding="ascii") as handle:
            handle.writelines(gt_lines)
    return out_dir
