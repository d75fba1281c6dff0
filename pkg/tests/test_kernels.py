"""Interpolation kernels: reference semantics and backend equivalence."""

import numpy as np
import pytest

from fieldslam.kernels import available_backends, get_backend, numpy_backend

BACKENDS = available_backends()


def _rand_bilinear_case(rng, h=13, w=17, c=3, n=200, outside=False):
    table = rng.normal(size=(h, w, c))
    lo0, hi0 = (-1.5, h + 0.5) if outside else (0.0, h - 1.0)
    lo1, hi1 = (-1.5, w + 0.5) if outside else (0.0, w - 1.0)
    x0 = rng.uniform(lo0, hi0, n)
    x1 = rng.uniform(lo1, hi1, n)
    upstream = rng.normal(size=(n, c))
    return table, x0, x1, upstream


def _rand_hash_case(rng, levels=5, size=1 << 9, c=2, n=300):
    tables = rng.normal(size=(levels, size, c))
    pos = rng.uniform(0.0, 1.0, size=(n, 3))
    res = np.array([3, 8, 16, 33, 61][:levels], dtype=np.int64)
    upstream = rng.normal(size=(n, levels * c))
    return tables, pos, res, upstream


# ---------------------------------------------------------------------------
# Reference semantics (numpy backend) against brute-force recomputation
# ---------------------------------------------------------------------------


def test_bilinear_forward_exact_on_lattice():
    rng = np.random.default_rng(0)
    table = rng.normal(size=(6, 7, 4))
    ii, jj = np.meshgrid(np.arange(6), np.arange(7), indexing="ij")
    out = numpy_backend.bilinear_forward(
        table, ii.reshape(-1).astype(float), jj.reshape(-1).astype(float))
    assert np.allclose(out, table.reshape(-1, 4), atol=1e-15)


def test_bilinear_forward_midpoint_average():
    table = np.zeros((2, 2, 1))
    table[0, 0, 0] = 1.0
    table[1, 0, 0] = 3.0
    table[0, 1, 0] = 5.0
    table[1, 1, 0] = 7.0
    out = numpy_backend.bilinear_forward(table, np.array([0.5]),
                                         np.array([0.5]))
    assert np.allclose(out, [[4.0]], atol=1e-15)


def test_bilinear_backward_is_adjoint_of_forward():
    # <forward(table), upstream> == <table, backward-scatter(upstream)>
    rng = np.random.default_rng(1)
    table, x0, x1, upstream = _rand_bilinear_case(rng)
    fwd = numpy_backend.bilinear_forward(table, x0, x1)
    grad = np.zeros_like(table)
    numpy_backend.bilinear_backward(grad, x0, x1, upstream)
    assert abs(np.sum(fwd * upstream) - np.sum(table * grad)) < 1e-9


def test_bilinear_input_grad_matches_finite_differences():
    rng = np.random.default_rng(2)
    table, x0, x1, upstream = _rand_bilinear_case(rng, n=100)
    # keep clear of integer lattice lines where the kink breaks the FD check
    x0 = np.clip(np.round(x0) + 0.37, 0.3, table.shape[0] - 1.3)
    x1 = np.clip(np.round(x1) + 0.41, 0.3, table.shape[1] - 1.3)
    g0, g1 = numpy_backend.bilinear_input_grad(table, x0, x1, upstream)
    eps = 1e-6
    for k in range(0, 100, 7):
        up = numpy_backend.bilinear_forward(table, x0[k:k + 1] + eps,
                                            x1[k:k + 1])
        dn = numpy_backend.bilinear_forward(table, x0[k:k + 1] - eps,
                                            x1[k:k + 1])
        fd = np.sum((up - dn) / (2 * eps) * upstream[k])
        assert abs(g0[k] - fd) < 1e-6
        up = numpy_backend.bilinear_forward(table, x0[k:k + 1],
                                            x1[k:k + 1] + eps)
        dn = numpy_backend.bilinear_forward(table, x0[k:k + 1],
                                            x1[k:k + 1] - eps)
        fd = np.sum((up - dn) / (2 * eps) * upstream[k])
        assert abs(g1[k] - fd) < 1e-6


def test_hashgrid_forward_matches_bruteforce():
    rng = np.random.default_rng(3)
    tables, pos, res, _ = _rand_hash_case(rng, n=50)
    out = numpy_backend.hashgrid_forward(tables, pos, res)
    levels, size, channels = tables.shape
    offsets = [(dx, dy, dz) for dz in (0, 1) for dy in (0, 1)
               for dx in (0, 1)]
    for k in range(pos.shape[0]):
        for lvl in range(levels):
            r = int(res[lvl])
            scaled = pos[k] * r
            base = np.clip(np.floor(scaled).astype(np.int64), 0, r - 1)
            frac = scaled - base
            acc = np.zeros(channels)
            for dx, dy, dz in offsets:
                cx, cy, cz = base + (dx, dy, dz)
                wx = frac[0] if dx else 1 - frac[0]
                wy = frac[1] if dy else 1 - frac[1]
                wz = frac[2] if dz else 1 - frac[2]
                h = ((int(cx) * 1) % 2**32
                     ^ (int(cy) * 2654435761) % 2**32
                     ^ (int(cz) * 805459861) % 2**32)
                idx = h & (size - 1)
                acc += wx * wy * wz * tables[lvl, idx]
            got = out[k, lvl * channels:(lvl + 1) * channels]
            assert np.allclose(got, acc, atol=1e-12)


def test_hashgrid_backward_is_adjoint_of_forward():
    rng = np.random.default_rng(4)
    tables, pos, res, upstream = _rand_hash_case(rng)
    fwd = numpy_backend.hashgrid_forward(tables, pos, res)
    grad = np.zeros_like(tables)
    numpy_backend.hashgrid_backward(grad, pos, res, upstream)
    assert abs(np.sum(fwd * upstream) - np.sum(tables * grad)) < 1e-9


def test_hashgrid_input_grad_matches_finite_differences():
    rng = np.random.default_rng(5)
    tables, pos, res, upstream = _rand_hash_case(rng, n=40)
    # keep positions away from cell boundaries at every level
    pos = (np.floor(pos * res[-1]) + 0.43) / res[-1]
    pos = np.clip(pos, 0.05, 0.95)
    grad = numpy_backend.hashgrid_input_grad(tables, pos, res, upstream)
    eps = 1e-7
    for k in range(0, 40, 5):
        for axis in range(3):
            p_up = pos[k:k + 1].copy()
            p_dn = pos[k:k + 1].copy()
            p_up[0, axis] += eps
            p_dn[0, axis] -= eps
            f_up = numpy_backend.hashgrid_forward(tables, p_up, res)
            f_dn = numpy_backend.hashgrid_forward(tables, p_dn, res)
            fd = np.sum((f_up - f_dn) / (2 * eps) * upstream[k])
            assert abs(grad[k, axis] - fd) < 1e-5 * max(1.0, abs(fd))


def test_hashgrid_weights_sum_to_one():
    # features all ones -> interpolation returns exactly L ones per level
    tables = np.ones((3, 64, 2))
    pos = np.random.default_rng(6).uniform(0, 1, size=(100, 3))
    res = np.array([4, 9, 17], dtype=np.int64)
    out = numpy_backend.hashgrid_forward(tables, pos, res)
    assert np.allclose(out, 1.0, atol=1e-12)


# ---------------------------------------------------------------------------
# Backend equivalence
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("backend_name", BACKENDS)
def test_backend_bilinear_agrees(backend_name):
    backend = get_backend(backend_name)
    rng = np.random.default_rng(7)
    for outside in (False, True):
        table, x0, x1, upstream = _rand_bilinear_case(rng, outside=outside)
        ref = numpy_backend.bilinear_forward(table, x0, x1)
        got = backend.bilinear_forward(table, x0, x1)
        assert np.allclose(got, ref, atol=1e-12, rtol=0)
        g_ref = np.zeros_like(table)
        g_got = np.zeros_like(table)
        numpy_backend.bilinear_backward(g_ref, x0, x1, upstream)
        backend.bilinear_backward(g_got, x0, x1, upstream)
        assert np.allclose(g_got, g_ref, atol=1e-12, rtol=0)
        i_ref = numpy_backend.bilinear_input_grad(table, x0, x1, upstream)
        i_got = backend.bilinear_input_grad(table, x0, x1, upstream)
        assert np.allclose(i_got[0], i_ref[0], atol=1e-12, rtol=0)
        assert np.allclose(i_got[1], i_ref[1], atol=1e-12, rtol=0)


@pytest.mark.parametrize("backend_name", BACKENDS)
def test_backend_hashgrid_agrees(backend_name):
    backend = get_backend(backend_name)
    rng = np.random.default_rng(8)
    tables, pos, res, upstream = _rand_hash_case(rng, levels=5, n=500)
    # exercise the boundary clamp too
    pos[:10] = 0.0
    pos[10:20] = 1.0
    ref = numpy_backend.hashgrid_forward(tables, pos, res)
    got = backend.hashgrid_forward(tables, pos, res)
    assert np.allclose(got, ref, atol=1e-11, rtol=0)
    g_ref = np.zeros_like(tables)
    g_got = np.zeros_like(tables)
    numpy_backend.hashgrid_backward(g_ref, pos, res, upstream)
    backend.hashgrid_backward(g_got, pos, res, upstream)
    assert np.allclose(g_got, g_ref, atol=1e-11, rtol=0)
    i_ref = numpy_backend.hashgrid_input_grad(tables, pos, res, upstream)
    i_got = backend.hashgrid_input_grad(tables, pos, res, upstream)
    assert np.allclose(i_got, i_ref, atol=1e-9, rtol=0)


@pytest.mark.parametrize("backend_name", BACKENDS)
def test_backend_is_deterministic(backend_name):
    backend = get_backend(backend_name)
    rng = np.random.default_rng(9)
    tables, pos, res, upstream = _rand_hash_case(rng)
    first = backend.hashgrid_forward(tables, pos, res)
    second = backend.hashgrid_forward(tables, pos, res)
    assert np.array_equal(first, second)
    g1 = np.zeros_like(tables)
    g2 = np.zeros_like(tables)
    backend.hashgrid_backward(g1, pos, res, upstream)
    backend.hashgrid_backward(g2, pos, res, upstream)
    assert np.array_equal(g1, g2)
