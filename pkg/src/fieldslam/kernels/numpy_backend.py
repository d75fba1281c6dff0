"""Vectorized numpy implementations of the grid interpolation kernels.

These are the reference semantics for the compiled backend: identical
indexing, hashing, and accumulation formulas. All tables are float64 and
C-contiguous; all coordinate arrays are float64.

Hash function (per level): for integer corner (ix, iy, iz),
    h = (ix * 1) xor (iy * 2654435761) xor (iz * 805459861)  (uint32 wraparound)
    index = h mod table_size                                  (power of two)
"""

from __future__ import annotations

import numpy as np

HASH_PRIMES = (1, 2654435761, 805459861)


def bilinear_forward(table, x0, x1):
    """Bilinearly interpolate a (H, W, C) table at continuous coordinates.

    Args:
        table: (H, W, C) float64.
        x0: (N,) coordinates along axis 0, in [0, H-1].
        x1: (N,) coordinates along axis 1, in [0, W-1].

    Returns:
        (N, C) interpolated features.
    """
    h, w, _ = table.shape
    i0 = np.clip(np.floor(x0).astype(np.int64), 0, max(h - 2, 0))
    j0 = np.clip(np.floor(x1).astype(np.int64), 0, max(w - 2, 0))
    fu = (x0 - i0)[:, None]
    fv = (x1 - j0)[:, None]
    i1 = np.minimum(i0 + 1, h - 1)
    j1 = np.minimum(j0 + 1, w - 1)
    return ((1.0 - fu) * (1.0 - fv) * table[i0, j0]
            + fu * (1.0 - fv) * table[i1, j0]
            + (1.0 - fu) * fv * table[i0, j1]
            + fu * fv * table[i1, j1])


def bilinear_backward(grad_table, x0, x1, upstream):
    """Scatter-add upstream feature gradients into grad_table (in place)."""
    h, w, c = grad_table.shape
    i0 = np.clip(np.floor(x0).astype(np.int64), 0, max(h - 2, 0))
    j0 = np.clip(np.floor(x1).astype(np.int64), 0, max(w - 2, 0))
    fu = x0 - i0
    fv = x1 - j0
    i1 = np.minimum(i0 + 1, h - 1)
    j1 = np.minimum(j0 + 1, w - 1)
    idx = np.concatenate([i0 * w + j0, i1 * w + j0, i0 * w + j1, i1 * w + j1])
    wgt = np.concatenate([
        (1.0 - fu) * (1.0 - fv), fu * (1.0 - fv), (1.0 - fu) * fv, fu * fv])
    contrib = wgt[:, None] * np.tile(upstream, (4, 1))
    flat = grad_table.reshape(h * w, c)
    for ch in range(c):
        flat[:, ch] += np.bincount(idx, weights=contrib[:, ch],
                                   minlength=h * w)


def bilinear_input_grad(table, x0, x1, upstream):
    """Gradient of the interpolated features with respect to (x0, x1).

    Returns:
        (g0, g1): each (N,), dL/dx0 and dL/dx1.
    """
    h, w, _ = table.shape
    i0 = np.clip(np.floor(x0).astype(np.int64), 0, max(h - 2, 0))
    j0 = np.clip(np.floor(x1).astype(np.int64), 0, max(w - 2, 0))
    fu = (x0 - i0)[:, None]
    fv = (x1 - j0)[:, None]
    i1 = np.minimum(i0 + 1, h - 1)
    j1 = np.minimum(j0 + 1, w - 1)
    t00, t10 = table[i0, j0], table[i1, j0]
    t01, t11 = table[i0, j1], table[i1, j1]
    dfu = (1.0 - fv) * (t10 - t00) + fv * (t11 - t01)
    dfv = (1.0 - fu) * (t01 - t00) + fu * (t11 - t10)
    g0 = np.sum(dfu * upstream, axis=1)
    g1 = np.sum(dfv * upstream, axis=1)
    return g0, g1


def _corner_hash(cx, cy, cz, table_size):
    """uint32 spatial hash of integer corner coordinates."""
    h = (cx.astype(np.uint32) * np.uint32(HASH_PRIMES[0])
         ^ cy.astype(np.uint32) * np.uint32(HASH_PRIMES[1])
         ^ cz.astype(np.uint32) * np.uint32(HASH_PRIMES[2]))
    return (h & np.uint32(table_size - 1)).astype(np.int64)


_CORNER_OFFSETS = np.array(
    [[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0],
     [0, 0, 1], [1, 0, 1], [0, 1, 1], [1, 1, 1]], dtype=np.int64)


def _grid_cells(pos, res):
    """Shared cell/weight computation for one level.

    Args:
        pos: (N, 3) coordinates in [0, 1].
        res: int, cells per axis.

    Returns:
        (idx (N, 8) hashed-ready corner int coords per axis as tuple,
         weights (N, 8), frac (N, 3), base (N, 3)).
    """
    scaled = pos * res
    base = np.clip(np.floor(scaled).astype(np.int64), 0, res - 1)
    frac = scaled - base
    corners = base[:, None, :] + _CORNER_OFFSETS[None, :, :]  # (N, 8, 3)
    wx = np.where(_CORNER_OFFSETS[None, :, 0] == 1, frac[:, 0:1], 1.0 - frac[:, 0:1])
    wy = np.where(_CORNER_OFFSETS[None, :, 1] == 1, frac[:, 1:2], 1.0 - frac[:, 1:2])
    wz = np.where(_CORNER_OFFSETS[None, :, 2] == 1, frac[:, 2:3], 1.0 - frac[:, 2:3])
    return corners, wx * wy * wz, frac, base


def hashgrid_forward(tables, pos, resolutions):
    """Multi-level trilinear hash grid lookup.

    Args:
        tables: (L, T, C) float64, T a power of two.
        pos: (N, 3) coordinates in [0, 1].
        resolutions: (L,) int64 cells per axis per level.

    Returns:
        (N, L*C) concatenated per-level features.
    """
    levels, table_size, channels = tables.shape
    n = pos.shape[0]
    out = np.empty((n, levels * channels))
    for lvl in range(levels):
        corners, wgt, _, _ = _grid_cells(pos, int(resolutions[lvl]))
        idx = _corner_hash(corners[..., 0], corners[..., 1], corners[..., 2],
                           table_size)
        feats = tables[lvl][idx]  # (N, 8, C)
        out[:, lvl * channels:(lvl + 1) * channels] = np.sum(
            wgt[:, :, None] * feats, axis=1)
    return out


def hashgrid_backward(grad_tables, pos, resolutions, upstream):
    """Scatter-add upstream gradients into grad_tables (in place).

    Colliding corners accumulate, which averages gradients across all sites
    mapped to the same table row once the optimizer divides by the counts
    implicit in the loss normalization.
    """
    levels, table_size, channels = grad_tables.shape
    for lvl in range(levels):
        corners, wgt, _, _ = _grid_cells(pos, int(resolutions[lvl]))
        idx = _corner_hash(corners[..., 0], corners[..., 1], corners[..., 2],
                           table_size).reshape(-1)
        up = upstream[:, lvl * channels:(lvl + 1) * channels]
        contrib = (wgt[:, :, None] * up[:, None, :]).reshape(-1, channels)
        flat = grad_tables[lvl]
        for ch in range(channels):
            flat[:, ch] += np.bincount(idx, weights=contrib[:, ch],
                                       minlength=table_size)


def hashgrid_input_grad(tables, pos, resolutions, upstream):
    """Gradient of hashgrid_forward with respect to pos.

    Returns:
        (N, 3) dL/dpos (coordinates in [0, 1] space).
    """
    levels, table_size, channels = tables.shape
    grad = np.zeros_like(pos)
    for lvl in range(levels):
        res = int(resolutions[lvl])
        corners, _, frac, _ = _grid_cells(pos, res)
        idx = _corner_hash(corners[..., 0], corners[..., 1], corners[..., 2],
                           table_size)
        feats = tables[lvl][idx]  # (N, 8, C)
        up = upstream[:, lvl * channels:(lvl + 1) * channels]
        fdotu = np.sum(feats * up[:, None, :], axis=2)  # (N, 8)
        sx = np.where(_CORNER_OFFSETS[None, :, 0] == 1, 1.0, -1.0)
        sy = np.where(_CORNER_OFFSETS[None, :, 1] == 1, 1.0, -1.0)
        sz = np.where(_CORNER_OFFSETS[None, :, 2] == 1, 1.0, -1.0)
        wx = np.where(_CORNER_OFFSETS[None, :, 0] == 1, frac[:, 0:1], 1.0 - frac[:, 0:1])
        wy = np.where(_CORNER_OFFSETS[None, :, 1] == 1, frac[:, 1:2], 1.0 - frac[:, 1:2])
        wz = np.where(_CORNER_OFFSETS[None, :, 2] == 1, frac[:, 2:3], 1.0 - frac[:, 2:3])
        grad[:, 0] += np.sum(fdotu * sx * wy * wz, axis=1) * res
        grad[:, 1] += np.sum(fdotu * wx * sy * wz, axis=1) * res
        grad[:, 2] += np.sum(fdotu * wx * wy * sz, axis=1) * res
    return grad
