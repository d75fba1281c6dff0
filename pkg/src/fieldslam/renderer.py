"""Volume rendering of the truncated-SDF field and the mapping losses.

Rendering model along a ray with sorted sample depths t_k:
    density   sigma_k = (1/beta) * logistic(-sdf_k / beta)
    opacity   alpha_k = 1 - exp(-sigma_k * delta_k),   delta_k = t_{k+1} - t_k
    transmit  T_k     = exp(-sum_{m<k} sigma_m * delta_m)
    weight    w_k     = T_k * alpha_k
    color     c_hat   = sum_k w_k rgb_k
    depth     d_hat   = sum_k w_k t_k          (not normalized by sum_k w_k)

A paper-literal mode (delta_k = 1) is available for comparison. The last
sample reuses the previous interval as its delta.

Mapping losses: color MSE, depth MSE over valid rays, truncation-region SDF
losses split into a middle band (|D - t_k| <= 0.4 tr) and a tail band
(0.4 tr < |D - t_k| <= tr), and a free-space loss pulling sdf -> 1 in front
of the surface (t_k < D - tr). Samples beyond D + tr are unused.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import numpy as np

EMPTY_WEIGHT_EPS = 1e-8


@dataclass
class RenderConfig:
    """Sampling, compositing, and loss weights for the renderer."""

    k_stratified: int = 32
    k_surface: int = 11
    near: float = 0.05
    far: float = 8.0
    truncation: float = 0.06
    surface_band: float = None  # defaults to truncation / 2
    paper_literal_weights: bool = False
    min_weight_sum_for_depth: float = 0.1
    lambda_color: float = 1.0
    lambda_depth: float = 0.1
    lambda_sdf_mid: float = 200.0
    lambda_sdf_tail: float = 10.0
    lambda_free: float = 1.0
    middle_band_fraction: float = 0.4

    def __post_init__(self):
        if self.surface_band is None:
            self.surface_band = self.truncation / 2.0
        if self.far <= self.near:
            raise ValueError("far plane must exceed near plane")
        if self.truncation <= 0:
            raise ValueError("truncation must be positive")


@dataclass
class RenderResult:
    """Per-ray rendered quantities plus the per-sample field cache."""

    color: np.ndarray        # (N, 3)
    depth: np.ndarray        # (N,)
    weight_sum: np.ndarray   # (N,)
    weights: np.ndarray      # (N, K)
    sdf: np.ndarray          # (N, K)
    tvals: np.ndarray        # (N, K)
    cache: object            # FieldQueryCache over the flattened samples
    sigma: np.ndarray        # (N, K)
    alpha: np.ndarray        # (N, K)
    transmittance: np.ndarray
    deltas: np.ndarray

    def normalized_depth(self, eps=EMPTY_WEIGHT_EPS):
        return self.depth / np.maximum(self.weight_sum, eps)


def sample_ray_depths(rng, n_rays, depth_obs, config):
    """Draw sorted sample depths per ray.

    Stratified uniform samples fill k_stratified bins of [near, far]; rays
    with a valid observed depth get k_surface additional evenly spaced
    samples in [D - band, D + band] (clipped to the near/far range). Rays
    without valid depth fill those slots with extra uniform samples.

    Args:
        rng: numpy Generator.
        n_rays: number of rays.
        depth_obs: (N,) observed depths; <= 0 or non-finite means invalid.

    Returns:
        (N, k_stratified + k_surface) strictly increasing depths.
    """
    k_strat, k_surf = config.k_stratified, config.k_surface
    depth_obs = np.asarray(depth_obs, dtype=np.float64).reshape(n_rays)
    edges = np.linspace(config.near, config.far, k_strat + 1)
    widths = np.diff(edges)
    strat = edges[:-1][None, :] + rng.random((n_rays, k_strat)) * widths[None, :]

    valid = np.isfinite(depth_obs) & (depth_obs > 0)
    surface = np.empty((n_rays, k_surf))
    if k_surf > 0:
        band = config.surface_band
        lo = np.clip(depth_obs - band, config.near, config.far)
        hi = np.clip(depth_obs + band, config.near, config.far)
        lin = np.linspace(0.0, 1.0, k_surf)
        surface = lo[:, None] + (hi - lo)[:, None] * lin[None, :]
        filler = config.near + rng.random((n_rays, k_surf)) \
            * (config.far - config.near)
        surface = np.where(valid[:, None], surface, filler)

    tvals = np.sort(np.concatenate([strat, surface], axis=1), axis=1)
    # enforce strict monotonicity for the compositing deltas
    diffs = np.diff(tvals, axis=1)
    bumps = np.cumsum(diffs <= 0, axis=1) * 1e-9
    tvals[:, 1:] += bumps
    return tvals


def sdf_to_density(sdf, beta):
    """Density sigma = (1/beta) * logistic(-sdf / beta)."""
    return (1.0 / beta) / (1.0 + np.exp(np.minimum(sdf / beta, 500.0)))


def compute_weights(sigma, tvals, paper_literal=False):
    """Compositing weights from densities and sorted sample depths.

    Returns:
        (weights, alpha, transmittance, deltas), all (N, K).
    """
    if paper_literal:
        deltas = np.ones_like(tvals)
    else:
        deltas = np.empty_like(tvals)
        deltas[:, :-1] = np.diff(tvals, axis=1)
        deltas[:, -1] = deltas[:, -2] if tvals.shape[1] > 1 else 1.0
    optical = sigma * deltas
    accum = np.cumsum(optical, axis=1)
    transmittance = np.exp(-(accum - optical))  # exp(-sum_{m<k})
    alpha = 1.0 - np.exp(-optical)
    weights = transmittance * alpha
    return weights, alpha, transmittance, deltas


def render_rays(field, origins, dirs, tvals, config, with_color=True):
    """Render a batch of rays through the field.

    Args:
        field: SceneField.
        origins: (N, 3) ray origins (world).
        dirs: (N, 3) ray directions (world, not necessarily unit).
        tvals: (N, K) sorted sample depths.

    Returns:
        RenderResult.
    """
    n, k = tvals.shape
    points = (origins[:, None, :] + tvals[:, :, None] * dirs[:, None, :])
    query = field.query(points.reshape(-1, 3), with_color=with_color)
    sdf = query.sdf.reshape(n, k)
    beta = field.beta_value
    sigma = sdf_to_density(sdf, beta)
    weights, alpha, transmittance, deltas = compute_weights(
        sigma, tvals, config.paper_literal_weights)
    if with_color:
        rgb = query.rgb.reshape(n, k, 3)
        color = np.sum(weights[:, :, None] * rgb, axis=1)
    else:
        color = np.zeros((n, 3))
    depth = np.sum(weights * tvals, axis=1)
    return RenderResult(color=color, depth=depth,
                        weight_sum=weights.sum(axis=1), weights=weights,
                        sdf=sdf, tvals=tvals, cache=query.cache, sigma=sigma,
                        alpha=alpha, transmittance=transmittance,
                        deltas=deltas)


def classify_samples(tvals, depth_obs, truncation, middle_fraction=0.4):
    """Partition samples by observed depth into supervision bands.

    Returns:
        dict of (N, K) boolean masks: "middle", "tail", "free", "unused".
        Rays without valid depth have all-False masks.
    """
    depth_obs = np.asarray(depth_obs, dtype=np.float64)
    valid = (np.isfinite(depth_obs) & (depth_obs > 0))[:, None]
    signed = depth_obs[:, None] - tvals  # positive in front of the surface
    dist = np.abs(signed)
    middle = valid & (dist <= middle_fraction * truncation)
    tail = valid & (dist > middle_fraction * truncation) & (dist <= truncation)
    free = valid & (tvals < depth_obs[:, None] - truncation)
    unused = ~(middle | tail | free)
    return {"middle": middle, "tail": tail, "free": free, "unused": unused}


def loss_color(rendered, observed):
    """Mean squared color error over all rays and channels."""
    diff = rendered - observed
    return float(np.mean(diff ** 2)), diff


def loss_depth(rendered, observed, ray_mask):
    """Mean squared depth error over rays selected by ray_mask.

    Returns:
        (value, diff, used_mask, empty_flag); value is 0 with empty_flag
        True when no ray qualifies.
    """
    if not np.any(ray_mask):
        return 0.0, np.zeros_like(rendered), ray_mask, True
    diff = np.where(ray_mask, rendered - observed, 0.0)
    return float(np.sum(diff ** 2) / np.count_nonzero(ray_mask)), diff, \
        ray_mask, False


def loss_sdf(sdf, tvals, depth_obs, truncation, masks):
    """Truncation-region SDF losses (middle band, tail band).

    The residual per sample is sdf * truncation - (D - t_k), i.e. the
    predicted signed distance in meters against the depth-derived one.

    Returns:
        (middle_value, tail_value, residual array).
    """
    residual = sdf * truncation - (depth_obs[:, None] - tvals)
    mid_mask, tail_mask = masks["middle"], masks["tail"]
    middle = float(np.mean(residual[mid_mask] ** 2)) if np.any(mid_mask) else 0.0
    tail = float(np.mean(residual[tail_mask] ** 2)) if np.any(tail_mask) else 0.0
    return middle, tail, residual


def loss_free_space(sdf, masks):
    """Mean (sdf - 1)^2 over free-space samples (in front of the surface)."""
    free = masks["free"]
    if not np.any(free):
        return 0.0
    return float(np.mean((sdf[free] - 1.0) ** 2))


@dataclass
class MappingLossResult:
    total: float
    color: float
    depth: float
    sdf_mid: float
    sdf_tail: float
    free_space: float
    depth_rays_empty: bool
    parts: dict = dataclass_field(default_factory=dict)


def mapping_loss(field, origins, dirs, colors_obs, depth_obs, tvals, config,
                 grads=None, pose_grad_ids=None, n_poses=0):
    """Total mapping loss, optionally with parameter and pose gradients.

    Args:
        origins, dirs: (N, 3) world rays.
        colors_obs: (N, 3) observed colors in [0, 1].
        depth_obs: (N,) observed depths (<= 0 means invalid).
        tvals: (N, K) sample depths (from sample_ray_depths).
        grads: optional FieldGradients; when given, parameter gradients of
            the total loss are accumulated into it.
        pose_grad_ids: optional (N,) int array mapping rays to pose slots;
            when given (with grads), returns per-slot twist gradients of the
            loss under a left-multiplicative pose perturbation.
        n_poses: number of pose slots for pose_grad_ids.

    Returns:
        (MappingLossResult, RenderResult, pose_grads or None)
    """
    result = render_rays(field, origins, dirs, tvals, config, with_color=True)
    n, k = tvals.shape
    masks = classify_samples(tvals, depth_obs, config.truncation,
                             config.middle_band_fraction)
    c_val, c_diff = loss_color(result.color, colors_obs)
    depth_valid = np.isfinite(depth_obs) & (depth_obs > 0) \
        & (result.weight_sum >= config.min_weight_sum_for_depth)
    d_val, d_diff, d_mask, d_empty = loss_depth(result.depth, depth_obs,
                                                depth_valid)
    m_val, t_val, residual = loss_sdf(result.sdf, tvals, depth_obs,
                                      config.truncation, masks)
    f_val = loss_free_space(result.sdf, masks)
    total = (config.lambda_color * c_val + config.lambda_depth * d_val
             + config.lambda_sdf_mid * m_val + config.lambda_sdf_tail * t_val
             + config.lambda_free * f_val)
    loss = MappingLossResult(
        total=float(total), color=c_val, depth=d_val, sdf_mid=m_val,
        sdf_tail=t_val, free_space=f_val, depth_rays_empty=d_empty)

    if grads is None:
        return loss, result, None

    # upstream gradients of the weighted total
    d_color = config.lambda_color * 2.0 * c_diff / c_diff.size
    n_depth = max(np.count_nonzero(d_mask), 1)
    d_depth = config.lambda_depth * 2.0 * d_diff / n_depth

    d_sdf_direct = np.zeros((n, k))
    if np.any(masks["middle"]):
        d_sdf_direct[masks["middle"]] += (
            config.lambda_sdf_mid * 2.0 * residual[masks["middle"]]
            * config.truncation / np.count_nonzero(masks["middle"]))
    if np.any(masks["tail"]):
        d_sdf_direct[masks["tail"]] += (
            config.lambda_sdf_tail * 2.0 * residual[masks["tail"]]
            * config.truncation / np.count_nonzero(masks["tail"]))
    if np.any(masks["free"]):
        d_sdf_direct[masks["free"]] += (
            config.lambda_free * 2.0 * (result.sdf[masks["free"]] - 1.0)
            / np.count_nonzero(masks["free"]))

    rgb = result.cache.rgb.reshape(n, k, 3)
    d_weights = np.sum(d_color[:, None, :] * rgb, axis=2) \
        + d_depth[:, None] * tvals
    d_rgb_samples = result.weights[:, :, None] * d_color[:, None, :]

    d_sigma, d_beta = _weights_backward(result, d_weights, field.beta_value)
    d_sdf_total = d_sdf_direct + d_sigma * _density_sdf_grad(
        result.sdf, field.beta_value)

    want_pose = pose_grad_ids is not None
    d_points = field.accumulate_gradients(
        result.cache, d_sdf_total.reshape(-1), grads,
        d_rgb=d_rgb_samples.reshape(-1, 3), compute_point_grad=want_pose)
    grads.beta[0] += d_beta

    pose_grads = None
    if want_pose:
        points = result.cache.points.reshape(n, k, 3)
        d_pts = d_points.reshape(n, k, 3)
        g_rho = d_pts.sum(axis=1)                       # (N, 3)
        g_omega = np.cross(points, d_pts).sum(axis=1)   # (N, 3)
        pose_grads = np.zeros((n_poses, 6))
        np.add.at(pose_grads, pose_grad_ids,
                  np.concatenate([g_rho, g_omega], axis=1))
    return loss, result, pose_grads


def _density_sdf_grad(sdf, beta):
    """d(sigma)/d(sdf) for sigma = (1/beta) logistic(-sdf/beta)."""
    s = 1.0 / (1.0 + np.exp(np.minimum(sdf / beta, 500.0)))
    return -s * (1.0 - s) / beta ** 2


def _density_beta_grad(sdf, beta):
    """d(sigma)/d(beta)."""
    s = 1.0 / (1.0 + np.exp(np.minimum(sdf / beta, 500.0)))
    return (-s + s * (1.0 - s) * sdf / beta) / beta ** 2


def _weights_backward(result, d_weights, beta):
    """Backpropagate through the compositing weights.

    Given dL/dw_k, returns (dL/dsigma (N, K), dL/dbeta scalar).
    """
    gw = d_weights * result.weights  # g_k * w_k
    # suffix sums over k' > k
    suffix = np.cumsum(gw[:, ::-1], axis=1)[:, ::-1] - gw
    d_optical = d_weights * result.transmittance * (1.0 - result.alpha) - suffix
    d_sigma = d_optical * result.deltas
    d_beta = float(np.sum(d_sigma * _density_beta_grad(result.sdf, beta)))
    return d_sigma, d_beta
