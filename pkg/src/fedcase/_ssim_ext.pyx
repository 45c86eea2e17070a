# cython: language_level=3, boundscheck=False, wraparound=False, initializedcheck=False
"""Compiled SSIM map kernel; see ``_ssim_py`` for the reference semantics."""

import numpy as np

from libc.stdint cimport int64_t, uint8_t


cdef void _integral(const uint8_t[:, ::1] a, int64_t[:, ::1] s, int64_t[:, ::1] ss) noexcept nogil:
    cdef Py_ssize_t i, j, h = a.shape[0], w = a.shape[1]
    cdef int64_t v
    for j in range(w + 1):
        s[0, j] = 0
        ss[0, j] = 0
    for i in range(1, h + 1):
        s[i, 0] = 0
        ss[i, 0] = 0
        for j in range(1, w + 1):
            v = a[i - 1, j - 1]
            s[i, j] = v + s[i - 1, j] + s[i, j - 1] - s[i - 1, j - 1]
            ss[i, j] = v * v + ss[i - 1, j] + ss[i, j - 1] - ss[i - 1, j - 1]


cdef inline int64_t _box(int64_t[:, ::1] s, Py_ssize_t i, Py_ssize_t j, int win) noexcept nogil:
    return s[i + win, j + win] - s[i, j + win] - s[i + win, j] + s[i, j]


def ssim_maps(query, pool, int win, double c1, double c2):
    cdef const uint8_t[:, ::1] q = np.ascontiguousarray(query, dtype=np.uint8)
    cdef const uint8_t[:, :, ::1] p = np.ascontiguousarray(pool, dtype=np.uint8)
    cdef Py_ssize_t n_pool = p.shape[0], h = q.shape[0], w = q.shape[1]
    if p.shape[1] != h or p.shape[2] != w:
        raise ValueError("pool images do not match the query shape")
    cdef Py_ssize_t oh = h - win + 1, ow = w - win + 1
    if oh < 1 or ow < 1:
        raise ValueError("window larger than image")
    out = np.empty((n_pool, oh, ow), dtype=np.float64)
    cdef double[:, :, ::1] res = out
    sq_np = np.empty((h + 1, w + 1), dtype=np.int64)
    sqq_np = np.empty((h + 1, w + 1), dtype=np.int64)
    sp_np = np.empty((h + 1, w + 1), dtype=np.int64)
    spp_np = np.empty((h + 1, w + 1), dtype=np.int64)
    spq_np = np.empty((h + 1, w + 1), dtype=np.int64)
    cdef int64_t[:, ::1] sq = sq_np, sqq = sqq_np, sp = sp_np, spp = spp_np, spq = spq_np
    cdef Py_ssize_t k, i, j
    cdef int64_t n = win * win, sx, sy, sxx, syy, sxy
    cdef double nf = <double>n, nn1 = <double>(n * (n - 1))
    cdef double mx, my, vx, vy, cov, num, den
    with nogil:
        _integral(q, sq, sqq)
        for k in range(n_pool):
            for j in range(w + 1):
                sp[0, j] = 0
                spp[0, j] = 0
                spq[0, j] = 0
            for i in range(1, h + 1):
                sp[i, 0] = 0
                spp[i, 0] = 0
                spq[i, 0] = 0
                for j in range(1, w + 1):
                    sy = p[k, i - 1, j - 1]
                    sx = q[i - 1, j - 1]
                    sp[i, j] = sy + sp[i - 1, j] + sp[i, j - 1] - sp[i - 1, j - 1]
                    spp[i, j] = sy * sy + spp[i - 1, j] + spp[i, j - 1] - spp[i - 1, j - 1]
                    spq[i, j] = sy * sx + spq[i - 1, j] + spq[i, j - 1] - spq[i - 1, j - 1]
            for i in range(oh):
                for j in range(ow):
                    sx = _box(sq, i, j, win)
                    sxx = _box(sqq, i, j, win)
                    sy = _box(sp, i, j, win)
                    syy = _box(spp, i, j, win)
                    sxy = _box(spq, i, j, win)
                    mx = sx / nf
                    my = sy / nf
                    vx = <double>(n * sxx - sx * sx) / nn1
                    vy = <double>(n * syy - sy * sy) / nn1
                    cov = <double>(n * sxy - sx * sy) / nn1
                    num = ((2.0 * mx) * my + c1) * (2.0 * cov + c2)
                    den = ((mx * mx) + (my * my) + c1) * ((vx + vy) + c2)
                    res[k, i, j] = num / den
    return out
