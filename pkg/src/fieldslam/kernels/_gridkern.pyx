# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled grid interpolation kernels.

Semantically identical to the numpy backend: same indexing, clamping, and
hashing, with corners visited in the same fixed offset order. Summation
association differs (sequential here, pairwise in numpy reductions), so
results agree to floating-point rounding, not bitwise. All tables are
float64 C-contiguous.
"""

import numpy as np

cimport cython
from libc.stdint cimport int64_t, uint32_t

HASH_PRIMES = (1, 2654435761, 805459861)

cdef uint32_t _PRIME_X = 1u
cdef uint32_t _PRIME_Y = 2654435761u
cdef uint32_t _PRIME_Z = 805459861u


cdef inline int64_t _clamp_floor(double x, int64_t hi) nogil:
    """floor(x) clamped to [0, hi]."""
    cdef int64_t i = <int64_t>x
    if x < 0 and x != i:
        i -= 1
    if i < 0:
        i = 0
    elif i > hi:
        i = hi
    return i


def bilinear_forward(double[:, :, ::1] table, double[::1] x0,
                     double[::1] x1):
    """Bilinearly interpolate a (H, W, C) table at continuous coordinates.

    Args:
        table: (H, W, C) float64.
        x0: (N,) coordinates along axis 0, in [0, H-1].
        x1: (N,) coordinates along axis 1, in [0, W-1].

    Returns:
        (N, C) interpolated features.
    """
    cdef Py_ssize_t h = table.shape[0]
    cdef Py_ssize_t w = table.shape[1]
    cdef Py_ssize_t c = table.shape[2]
    cdef Py_ssize_t n = x0.shape[0]
    cdef int64_t lim0 = h - 2 if h >= 2 else 0
    cdef int64_t lim1 = w - 2 if w >= 2 else 0
    out_arr = np.empty((n, c))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t k, ch
    cdef int64_t i0, j0, i1, j1
    cdef double fu, fv, w00, w10, w01, w11
    for k in range(n):
        i0 = _clamp_floor(x0[k], lim0)
        j0 = _clamp_floor(x1[k], lim1)
        fu = x0[k] - i0
        fv = x1[k] - j0
        i1 = i0 + 1 if i0 + 1 < h else h - 1
        j1 = j0 + 1 if j0 + 1 < w else w - 1
        w00 = (1.0 - fu) * (1.0 - fv)
        w10 = fu * (1.0 - fv)
        w01 = (1.0 - fu) * fv
        w11 = fu * fv
        for ch in range(c):
            out[k, ch] = (w00 * table[i0, j0, ch] + w10 * table[i1, j0, ch]
                          + w01 * table[i0, j1, ch] + w11 * table[i1, j1, ch])
    return out_arr


def bilinear_backward(double[:, :, ::1] grad_table, double[::1] x0,
                      double[::1] x1, double[:, ::1] upstream):
    """Scatter-add upstream feature gradients into grad_table (in place)."""
    cdef Py_ssize_t h = grad_table.shape[0]
    cdef Py_ssize_t w = grad_table.shape[1]
    cdef Py_ssize_t c = grad_table.shape[2]
    cdef Py_ssize_t n = x0.shape[0]
    cdef int64_t lim0 = h - 2 if h >= 2 else 0
    cdef int64_t lim1 = w - 2 if w >= 2 else 0
    cdef Py_ssize_t k, ch
    cdef int64_t i0, j0, i1, j1
    cdef double fu, fv, w00, w10, w01, w11, u
    for k in range(n):
        i0 = _clamp_floor(x0[k], lim0)
        j0 = _clamp_floor(x1[k], lim1)
        fu = x0[k] - i0
        fv = x1[k] - j0
        i1 = i0 + 1 if i0 + 1 < h else h - 1
        j1 = j0 + 1 if j0 + 1 < w else w - 1
        w00 = (1.0 - fu) * (1.0 - fv)
        w10 = fu * (1.0 - fv)
        w01 = (1.0 - fu) * fv
        w11 = fu * fv
        for ch in range(c):
            u = upstream[k, ch]
            grad_table[i0, j0, ch] += w00 * u
            grad_table[i1, j0, ch] += w10 * u
            grad_table[i0, j1, ch] += w01 * u
            grad_table[i1, j1, ch] += w11 * u


def bilinear_input_grad(double[:, :, ::1] table, double[::1] x0,
                        double[::1] x1, double[:, ::1] upstream):
    """Gradient of the interpolated features with respect to (x0, x1).

    Returns:
        (g0, g1): each (N,), dL/dx0 and dL/dx1.
    """
    cdef Py_ssize_t h = table.shape[0]
    cdef Py_ssize_t w = table.shape[1]
    cdef Py_ssize_t c = table.shape[2]
    cdef Py_ssize_t n = x0.shape[0]
    cdef int64_t lim0 = h - 2 if h >= 2 else 0
    cdef int64_t lim1 = w - 2 if w >= 2 else 0
    g0_arr = np.empty(n)
    g1_arr = np.empty(n)
    cdef double[::1] g0 = g0_arr
    cdef double[::1] g1 = g1_arr
    cdef Py_ssize_t k, ch
    cdef int64_t i0, j0, i1, j1
    cdef double fu, fv, t00, t10, t01, t11, acc0, acc1, u
    for k in range(n):
        i0 = _clamp_floor(x0[k], lim0)
        j0 = _clamp_floor(x1[k], lim1)
        fu = x0[k] - i0
        fv = x1[k] - j0
        i1 = i0 + 1 if i0 + 1 < h else h - 1
        j1 = j0 + 1 if j0 + 1 < w else w - 1
        acc0 = 0.0
        acc1 = 0.0
        for ch in range(c):
            t00 = table[i0, j0, ch]
            t10 = table[i1, j0, ch]
            t01 = table[i0, j1, ch]
            t11 = table[i1, j1, ch]
            u = upstream[k, ch]
            acc0 += ((1.0 - fv) * (t10 - t00) + fv * (t11 - t01)) * u
            acc1 += ((1.0 - fu) * (t01 - t00) + fu * (t11 - t10)) * u
        g0[k] = acc0
        g1[k] = acc1
    return g0_arr, g1_arr


cdef inline int64_t _hash3(int64_t cx, int64_t cy, int64_t cz,
                           uint32_t mask) nogil:
    cdef uint32_t hv = (<uint32_t>cx * _PRIME_X) \
        ^ (<uint32_t>cy * _PRIME_Y) ^ (<uint32_t>cz * _PRIME_Z)
    return <int64_t>(hv & mask)


def hashgrid_forward(double[:, :, ::1] tables, double[:, ::1] pos,
                     int64_t[::1] resolutions):
    """Multi-level trilinear hash grid lookup.

    Args:
        tables: (L, T, C) float64, T a power of two.
        pos: (N, 3) coordinates in [0, 1].
        resolutions: (L,) int64 cells per axis per level.

    Returns:
        (N, L*C) concatenated per-level features.
    """
    cdef Py_ssize_t levels = tables.shape[0]
    cdef Py_ssize_t table_size = tables.shape[1]
    cdef Py_ssize_t channels = tables.shape[2]
    cdef Py_ssize_t n = pos.shape[0]
    out_arr = np.empty((n, levels * channels))
    cdef double[:, ::1] out = out_arr
    cdef uint32_t mask = <uint32_t>(table_size - 1)
    cdef Py_ssize_t lvl, k, ch, corner
    cdef int64_t res, bx, by, bz, cx, cy, cz, idx
    cdef double sx, sy, sz, fx, fy, fz, wx, wy, wz, wgt
    for lvl in range(levels):
        res = resolutions[lvl]
        for k in range(n):
            sx = pos[k, 0] * res
            sy = pos[k, 1] * res
            sz = pos[k, 2] * res
            bx = _clamp_floor(sx, res - 1)
            by = _clamp_floor(sy, res - 1)
            bz = _clamp_floor(sz, res - 1)
            fx = sx - bx
            fy = sy - by
            fz = sz - bz
            for ch in range(channels):
                out[k, lvl * channels + ch] = 0.0
            for corner in range(8):
                cx = bx + (corner & 1)
                cy = by + ((corner >> 1) & 1)
                cz = bz + ((corner >> 2) & 1)
                wx = fx if (corner & 1) else 1.0 - fx
                wy = fy if ((corner >> 1) & 1) else 1.0 - fy
                wz = fz if ((corner >> 2) & 1) else 1.0 - fz
                wgt = wx * wy * wz
                idx = _hash3(cx, cy, cz, mask)
                for ch in range(channels):
                    out[k, lvl * channels + ch] += \
                        wgt * tables[lvl, idx, ch]
    return out_arr


def hashgrid_backward(double[:, :, ::1] grad_tables, double[:, ::1] pos,
                      int64_t[::1] resolutions, double[:, ::1] upstream):
    """Scatter-add upstream gradients into grad_tables (in place).

    Colliding corners accumulate, which averages gradients across all sites
    mapped to the same table row once the optimizer divides by the counts
    implicit in the loss normalization.
    """
    cdef Py_ssize_t levels = grad_tables.shape[0]
    cdef Py_ssize_t table_size = grad_tables.shape[1]
    cdef Py_ssize_t channels = grad_tables.shape[2]
    cdef Py_ssize_t n = pos.shape[0]
    cdef uint32_t mask = <uint32_t>(table_size - 1)
    cdef Py_ssize_t lvl, k, ch, corner
    cdef int64_t res, bx, by, bz, cx, cy, cz, idx
    cdef double sx, sy, sz, fx, fy, fz, wx, wy, wz, wgt
    for lvl in range(levels):
        res = resolutions[lvl]
        for k in range(n):
            sx = pos[k, 0] * res
            sy = pos[k, 1] * res
            sz = pos[k, 2] * res
            bx = _clamp_floor(sx, res - 1)
            by = _clamp_floor(sy, res - 1)
            bz = _clamp_floor(sz, res - 1)
            fx = sx - bx
            fy = sy - by
            fz = sz - bz
            for corner in range(8):
                cx = bx + (corner & 1)
                cy = by + ((corner >> 1) & 1)
                cz = bz + ((corner >> 2) & 1)
                wx = fx if (corner & 1) else 1.0 - fx
                wy = fy if ((corner >> 1) & 1) else 1.0 - fy
                wz = fz if ((corner >> 2) & 1) else 1.0 - fz
                wgt = wx * wy * wz
                idx = _hash3(cx, cy, cz, mask)
                for ch in range(channels):
                    grad_tables[lvl, idx, ch] += \
                        wgt * upstream[k, lvl * channels + ch]


def hashgrid_input_grad(double[:, :, ::1] tables, double[:, ::1] pos,
                        int64_t[::1] resolutions, double[:, ::1] upstream):
    """Gradient of hashgrid_forward with respect to pos.

    Returns:
        (N, 3) dL/dpos (coordinates in [0, 1] space).
    """
    cdef Py_ssize_t levels = tables.shape[0]
    cdef Py_ssize_t table_size = tables.shape[1]
    cdef Py_ssize_t channels = tables.shape[2]
    cdef Py_ssize_t n = pos.shape[0]
    grad_arr = np.zeros((n, 3))
    cdef double[:, ::1] grad = grad_arr
    cdef uint32_t mask = <uint32_t>(table_size - 1)
    cdef Py_ssize_t lvl, k, ch, corner
    cdef int64_t res, bx, by, bz, cx, cy, cz, idx
    cdef double sx, sy, sz, fx, fy, fz, wx, wy, wz
    cdef double fdotu, gx, gy, gz, win_x, win_y, win_z
    for lvl in range(levels):
        res = resolutions[lvl]
        for k in range(n):
            sx = pos[k, 0] * res
            sy = pos[k, 1] * res
            sz = pos[k, 2] * res
            bx = _clamp_floor(sx, res - 1)
            by = _clamp_floor(sy, res - 1)
            bz = _clamp_floor(sz, res - 1)
            fx = sx - bx
            fy = sy - by
            fz = sz - bz
            gx = 0.0
            gy = 0.0
            gz = 0.0
            for corner in range(8):
                cx = bx + (corner & 1)
                cy = by + ((corner >> 1) & 1)
                cz = bz + ((corner >> 2) & 1)
                wx = fx if (corner & 1) else 1.0 - fx
                wy = fy if ((corner >> 1) & 1) else 1.0 - fy
                wz = fz if ((corner >> 2) & 1) else 1.0 - fz
                win_x = 1.0 if (corner & 1) else -1.0
                win_y = 1.0 if ((corner >> 1) & 1) else -1.0
                win_z = 1.0 if ((corner >> 2) & 1) else -1.0
                idx = _hash3(cx, cy, cz, mask)
                fdotu = 0.0
                for ch in range(channels):
                    fdotu += tables[lvl, idx, ch] \
                        * upstream[k, lvl * channels + ch]
                gx += fdotu * win_x * wy * wz
                gy += fdotu * wx * win_y * wz
                gz += fdotu * wx * wy * win_z
            grad[k, 0] += gx * res
            grad[k, 1] += gy * res
            grad[k, 2] += gz * res
    return grad_arr
