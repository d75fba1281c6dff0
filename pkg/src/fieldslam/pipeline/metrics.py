"""Reconstruction and image-quality metrics."""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve
from scipy.spatial import cKDTree

__all__ = [
    "ReconstructionMetrics", "sample_mesh_points", "nearest_distances",
    "compute_reconstruction_metrics", "DepthError", "depth_l1",
    "compute_psnr", "compute_ssim", "compute_image_metrics",
]

DEFAULT_SAMPLE_COUNT = 200_000
DEFAULT_DISTANCE_THRESHOLD = 0.05
PSNR_CAP_DB = 99.0


# ---------------------------------------------------------------------------
# Mesh reconstruction quality
# ---------------------------------------------------------------------------


def sample_mesh_points(mesh, count, rng):
    """Uniform surface samples: area-weighted triangle pick + barycentric.

    Raises:
        ValueError: on an empty mesh or zero total area.
    """
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    areas = mesh.triangle_areas()
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero surface area")
    tri = rng.choice(len(mesh.faces), size=count, p=areas / total)
    a = mesh.vertices[mesh.faces[tri, 0]]
    b = mesh.vertices[mesh.faces[tri, 1]]
    c = mesh.vertices[mesh.faces[tri, 2]]
    u = rng.random(count)
    v = rng.random(count)
    fold = u + v > 1.0
    u[fold] = 1.0 - u[fold]
    v[fold] = 1.0 - v[fold]
    return a + u[:, None] * (b - a) + v[:, None] * (c - a)


def nearest_distances(queries, references):
    """Exact nearest-neighbor distance from each query to the reference set."""
    distances, _ = cKDTree(references).query(queries, k=1)
    return np.asarray(distances, dtype=np.float64)


@dataclass
class ReconstructionMetrics:
    accuracy: float          # mean distance, reconstruction -> ground truth
    completion: float        # mean distance, ground truth -> reconstruction
    completion_ratio: float  # fraction of ground truth within the threshold
    threshold: float
    samples: int

    def as_dict(self):
        return {"accuracy": self.accuracy, "completion": self.completion,
                "completion_ratio": self.completion_ratio}


def compute_reconstruction_metrics(mesh, gt_mesh,
                                   samples=DEFAULT_SAMPLE_COUNT,
                                   threshold=DEFAULT_DISTANCE_THRESHOLD,
                                   seed=0):
    """Accuracy / completion / completion ratio between surface samples.

    Both meshes are sampled uniformly by area with a seeded generator;
    accuracy averages reconstruction-to-truth nearest distances, completion
    averages truth-to-reconstruction distances, and the ratio counts the
    truth samples within `threshold` of the reconstruction.

    Raises:
        ValueError: when either mesh is empty.
    """
    if mesh.is_empty or gt_mesh.is_empty:
        raise ValueError("reconstruction metrics need nonempty meshes")
    rng = np.random.default_rng(seed)
    recon_pts = sample_mesh_points(mesh, samples, rng)
    gt_pts = sample_mesh_points(gt_mesh, samples, rng)
    acc = nearest_distances(recon_pts, gt_pts)
    comp = nearest_distances(gt_pts, recon_pts)
    return ReconstructionMetrics(
        accuracy=float(acc.mean()),
        completion=float(comp.mean()),
        completion_ratio=float(np.mean(comp < threshold)),
        threshold=float(threshold),
        samples=int(samples))


# ---------------------------------------------------------------------------
# Depth error
# ---------------------------------------------------------------------------


@dataclass
class DepthError:
    l1_relative: float    # mean |est - ref| / ref over valid pixels
    l1: float             # mean |est - ref| over valid pixels
    valid_pixels: int


def depth_l1(estimated, reference, min_depth=1e-6):
    """Depth error in relative and absolute form.

    Pixels where either map lacks depth (<= min_depth) are skipped.

    Raises:
        ValueError: shape mismatch or no valid pixels.
    """
    estimated = np.asarray(estimated, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if estimated.shape != reference.shape:
        raise ValueError(f"depth shape mismatch: {estimated.shape} vs "
                         f"{reference.shape}")
    valid = (reference > min_depth) & (estimated > min_depth)
    if not np.any(valid):
        raise ValueError("no overlapping valid depth pixels")
    diff = np.abs(estimated[valid] - reference[valid])
    return DepthError(l1_relative=float(np.mean(diff / reference[valid])),
                      l1=float(np.mean(diff)),
                      valid_pixels=int(valid.sum()))


# ---------------------------------------------------------------------------
# Image quality
# ---------------------------------------------------------------------------


def _check_image_pair(image, reference):
    image = np.asarray(image, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if image.shape != reference.shape:
        raise ValueError(f"image shape mismatch: {image.shape} vs "
                         f"{reference.shape}")
    for name, arr in (("image", image), ("reference", reference)):
        if arr.min() < -1e-9 or arr.max() > 1.0 + 1e-9:
            raise ValueError(f"{name} values outside [0, 1]")
    return image, reference


def compute_psnr(image, reference, cap_db=PSNR_CAP_DB):
    """Peak signal-to-noise ratio in dB for [0, 1] images, capped."""
    image, reference = _check_image_pair(image, reference)
    mse = float(np.mean((image - reference) ** 2))
    if mse <= 0.0:
        return float(cap_db)
    return float(min(10.0 * np.log10(1.0 / mse), cap_db))


def _gaussian_window(size=11, sigma=1.5):
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    kernel = np.exp(-0.5 * (coords / sigma) ** 2)
    kernel /= kernel.sum()
    return np.outer(kernel, kernel)


def _ssim_single(image, reference, window, c1, c2):
    filt = lambda img: convolve(img, window, mode="reflect")
    mu_x = filt(image)
    mu_y = filt(reference)
    sigma_x = filt(image * image) - mu_x ** 2
    sigma_y = filt(reference * reference) - mu_y ** 2
    sigma_xy = filt(image * reference) - mu_x * mu_y
    numerator = (2 * mu_x * mu_y + c1) * (2 * sigma_xy + c2)
    denominator = (mu_x ** 2 + mu_y ** 2 + c1) * (sigma_x + sigma_y + c2)
    return float(np.mean(numerator / denominator))


def compute_ssim(image, reference, window_size=11, sigma=1.5,
                 k1=0.01, k2=0.03):
    """Mean structural similarity with a Gaussian window.

    RGB inputs average the per-channel scores. Dynamic range is 1.
    """
    image, reference = _check_image_pair(image, reference)
    window = _gaussian_window(window_size, sigma)
    c1, c2 = k1 ** 2, k2 ** 2
    if image.ndim == 2:
        return _ssim_single(image, reference, window, c1, c2)
    if image.ndim == 3:
        scores = [_ssim_single(image[..., ch], reference[..., ch],
                               window, c1, c2)
                  for ch in range(image.shape[2])]
        return float(np.mean(scores))
    raise ValueError(f"expected 2D or 3D image, got shape {image.shape}")


def compute_image_metrics(rendered, reference):
    """PSNR and SSIM of a rendered image against its reference."""
    return {"psnr": compute_psnr(rendered, reference),
            "ssim": compute_ssim(rendered, reference)}
