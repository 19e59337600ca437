# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot loops; ``_pykernels`` holds the numpy reference twins."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, INFINITY

cnp.import_array()


cdef inline double _d2(const double[:, ::1] a, Py_ssize_t i,
                       const double[:, ::1] b, Py_ssize_t j) noexcept nogil:
    cdef double dx = a[i, 0] - b[j, 0]
    cdef double dy = a[i, 1] - b[j, 1]
    cdef double dz = a[i, 2] - b[j, 2]
    return dx * dx + dy * dy + dz * dz


cdef inline Py_ssize_t _insert(double* bd, long long* bi, Py_ssize_t size,
                               Py_ssize_t cap, double d, long long j) noexcept nogil:
    # bounded sorted insert; equal distances keep earlier (lower) indices first
    cdef Py_ssize_t pos
    if size == cap:
        if d >= bd[cap - 1]:
            return size
        pos = cap - 1
    else:
        pos = size
        size += 1
    while pos > 0 and bd[pos - 1] > d:
        bd[pos] = bd[pos - 1]
        bi[pos] = bi[pos - 1]
        pos -= 1
    bd[pos] = d
    bi[pos] = j
    return size


cdef inline double _leaky(double z, double slope) noexcept nogil:
    # branch-free for 0 <= slope <= 1; signs are random so a branch mispredicts
    cdef double t = slope * z
    return z if z > t else t


cdef inline double _leaky_grad(double z, double slope) noexcept nogil:
    return 1.0 if z > slope * z else slope


def knn(query, ref, Py_ssize_t k, bint exclude_self):
    cdef const double[:, ::1] q = np.ascontiguousarray(query, dtype=np.float64)
    cdef const double[:, ::1] r = np.ascontiguousarray(ref, dtype=np.float64)
    cdef Py_ssize_t n = q.shape[0], m = r.shape[0], i, j, size
    idx = np.empty((n, k), dtype=np.int64)
    dist2 = np.empty((n, k), dtype=np.float64)
    cdef long long[:, ::1] bi = idx
    cdef double[:, ::1] bd = dist2
    with nogil:
        for i in range(n):
            size = 0
            for j in range(m):
                if exclude_self and i == j:
                    continue
                size = _insert(&bd[i, 0], &bi[i, 0], size, k, _d2(q, i, r, j), j)
    return idx, dist2


def radius(query, ref, double rad, Py_ssize_t max_neighbors, bint exclude_self):
    cdef const double[:, ::1] q = np.ascontiguousarray(query, dtype=np.float64)
    cdef const double[:, ::1] r = np.ascontiguousarray(ref, dtype=np.float64)
    cdef Py_ssize_t n = q.shape[0], m = r.shape[0], i, j, size, t
    cdef double d2
    cdef bint truncated = False
    buf_i = np.empty((n, max(max_neighbors, 1)), dtype=np.int64)
    buf_d = np.empty((n, max(max_neighbors, 1)), dtype=np.float64)
    counts = np.zeros(n, dtype=np.int64)
    cdef long long[:, ::1] bi = buf_i
    cdef double[:, ::1] bd = buf_d
    cdef long long[::1] cnt = counts
    with nogil:
        for i in range(n):
            size = 0
            t = 0
            for j in range(m):
                if exclude_self and i == j:
                    continue
                d2 = _d2(q, i, r, j)
                if sqrt(d2) < rad:
                    t += 1
                    if max_neighbors > 0:
                        size = _insert(&bd[i, 0], &bi[i, 0], size, max_neighbors, d2, j)
            if t > max_neighbors:
                truncated = True
            cnt[i] = size
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    keep = np.arange(buf_i.shape[1])[None, :] < counts[:, None]
    return offsets, buf_i[keep], buf_d[keep], bool(truncated)


def farthest_point_sample(points, Py_ssize_t m, Py_ssize_t seed_index):
    cdef const double[:, ::1] p = np.ascontiguousarray(points, dtype=np.float64)
    cdef Py_ssize_t n = p.shape[0], t, i, cur = seed_index, best
    cdef double d2, bestd
    out = np.empty(m, dtype=np.int64)
    mind_arr = np.full(n, INFINITY)
    cdef long long[::1] o = out
    cdef double[::1] mind = mind_arr
    with nogil:
        for t in range(m):
            o[t] = cur
            mind[cur] = -1.0
            best = 0
            bestd = -INFINITY
            for i in range(n):
                if mind[i] >= 0.0:
                    d2 = _d2(p, i, p, cur)
                    if d2 < mind[i]:
                        mind[i] = d2
                if mind[i] > bestd:
                    bestd = mind[i]
                    best = i
            cur = best
    return out


def segment_max(values, offsets):
    cdef const double[:, ::1] v = np.ascontiguousarray(values, dtype=np.float64)
    cdef const long long[::1] off = np.ascontiguousarray(offsets, dtype=np.int64)
    cdef Py_ssize_t n = off.shape[0] - 1, d = v.shape[1], s, e, j
    out = np.zeros((n, d), dtype=np.float64)
    arg = np.full((n, d), -1, dtype=np.int64)
    cdef double[:, ::1] o = out
    cdef long long[:, ::1] a = arg
    with nogil:
        for s in range(n):
            for e in range(off[s], off[s + 1]):
                for j in range(d):
                    if a[s, j] < 0 or v[e, j] > o[s, j]:
                        o[s, j] = v[e, j]
                        a[s, j] = e
    return out, arg


def scatter_add_rows(Py_ssize_t n, idx, values):
    cdef const long long[::1] ix = np.ascontiguousarray(idx, dtype=np.int64)
    cdef const double[:, ::1] v = np.ascontiguousarray(values, dtype=np.float64)
    cdef Py_ssize_t e, j, d = v.shape[1]
    out = np.zeros((n, d), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for e in range(ix.shape[0]):
            for j in range(d):
                o[ix[e], j] += v[e, j]
    return out


def pair_score(A, B, b1, w2, double slope):
    """``S[i, n] = sum_k w2[k] * act(A[i, k] - B[n, k] + b1[k])``."""
    cdef const double[:, ::1] a = np.ascontiguousarray(A, dtype=np.float64)
    cdef const double[:, ::1] b = np.ascontiguousarray(B, dtype=np.float64)
    cdef const double[::1] bias = np.ascontiguousarray(b1, dtype=np.float64)
    cdef const double[::1] w = np.ascontiguousarray(w2, dtype=np.float64).reshape(-1)
    cdef Py_ssize_t U = a.shape[0], L = b.shape[0], h = a.shape[1], i, n, k
    cdef double s, z
    out = np.empty((U, L), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(U):
            for n in range(L):
                s = 0.0
                for k in range(h):
                    z = a[i, k] - b[n, k] + bias[k]
                    z = _leaky(z, slope)
                    s = s + w[k] * z
                o[i, n] = s
    return out


def pair_score_backward(A, B, b1, w2, double slope, dS):
    """Gradients of :func:`pair_score` w.r.t. (A, B, b1, w2)."""
    cdef const double[:, ::1] a = np.ascontiguousarray(A, dtype=np.float64)
    cdef const double[:, ::1] b = np.ascontiguousarray(B, dtype=np.float64)
    cdef const double[::1] bias = np.ascontiguousarray(b1, dtype=np.float64)
    cdef const double[::1] w = np.ascontiguousarray(w2, dtype=np.float64).reshape(-1)
    cdef const double[:, ::1] g = np.ascontiguousarray(dS, dtype=np.float64)
    cdef Py_ssize_t U = a.shape[0], L = b.shape[0], h = a.shape[1], i, n, k
    cdef double z, t, gi
    dA_arr = np.zeros((U, h), dtype=np.float64)
    dB_arr = np.zeros((L, h), dtype=np.float64)
    dw_arr = np.zeros(h, dtype=np.float64)
    cdef double[:, ::1] dA = dA_arr
    cdef double[:, ::1] dB = dB_arr
    cdef double[::1] dw = dw_arr
    with nogil:
        for i in range(U):
            for n in range(L):
                gi = g[i, n]
                if gi == 0.0:
                    continue
                for k in range(h):
                    z = a[i, k] - b[n, k] + bias[k]
                    dw[k] += gi * _leaky(z, slope)
                    t = gi * w[k] * _leaky_grad(z, slope)
                    dA[i, k] += t
                    dB[n, k] -= t
    return dA_arr, dB_arr, dA_arr.sum(axis=0), dw_arr.reshape(np.shape(w2))


def edge_mlp_max(A, B, offsets, nbrs, b1, w2, b2, double slope):
    """``out[c] = max over edges (c, m) of act(A[c] + B[m] + b1) @ w2``, plus ``b2``."""
    cdef const double[:, ::1] a = np.ascontiguousarray(A, dtype=np.float64)
    cdef const double[:, ::1] b = np.ascontiguousarray(B, dtype=np.float64)
    cdef const long long[::1] off = np.ascontiguousarray(offsets, dtype=np.int64)
    cdef const long long[::1] nb = np.ascontiguousarray(nbrs, dtype=np.int64)
    cdef const double[::1] bias1 = np.ascontiguousarray(b1, dtype=np.float64)
    cdef Py_ssize_t n = off.shape[0] - 1, h = a.shape[1], c, e, k, m
    cdef double z
    hidden = np.empty((nb.shape[0], h), dtype=np.float64)
    cdef double[:, ::1] hv = hidden
    with nogil:
        for c in range(n):
            for e in range(off[c], off[c + 1]):
                m = nb[e]
                for k in range(h):
                    z = a[c, k] + b[m, k] + bias1[k]
                    z = _leaky(z, slope)
                    hv[e, k] = z
    # the dense product is left to BLAS
    out, arg = segment_max(hidden @ np.asarray(w2, dtype=np.float64), offsets)
    out[np.diff(offsets) > 0] += b2
    return out, arg


def edge_mlp_max_backward(A, B, offsets, nbrs, b1, w2, double slope, arg, G):
    """Gradients of :func:`edge_mlp_max` w.r.t. (A, B, b1, w2, b2)."""
    cdef const double[:, ::1] a = np.ascontiguousarray(A, dtype=np.float64)
    cdef const double[:, ::1] b = np.ascontiguousarray(B, dtype=np.float64)
    cdef const long long[::1] nb = np.ascontiguousarray(nbrs, dtype=np.int64)
    cdef const double[::1] bias1 = np.ascontiguousarray(b1, dtype=np.float64)
    cdef const double[:, ::1] w = np.ascontiguousarray(w2, dtype=np.float64)
    cdef const long long[:, ::1] ar = np.ascontiguousarray(arg, dtype=np.int64)
    cdef const double[:, ::1] g = np.ascontiguousarray(G, dtype=np.float64)
    cdef Py_ssize_t n = ar.shape[0], h = a.shape[1], d = w.shape[1], c, e, k, j, m
    cdef double z, gv, dz
    dA_arr = np.zeros((a.shape[0], h), dtype=np.float64)
    dB_arr = np.zeros((b.shape[0], h), dtype=np.float64)
    db1_arr = np.zeros(h, dtype=np.float64)
    dw_arr = np.zeros((h, d), dtype=np.float64)
    db2_arr = np.zeros(d, dtype=np.float64)
    cdef double[:, ::1] dA = dA_arr
    cdef double[:, ::1] dB = dB_arr
    cdef double[::1] db1 = db1_arr
    cdef double[:, ::1] dw = dw_arr
    cdef double[::1] db2 = db2_arr
    with nogil:
        for c in range(n):
            for j in range(d):
                e = ar[c, j]
                if e < 0:
                    continue
                gv = g[c, j]
                db2[j] += gv
                if gv == 0.0:
                    continue
                m = nb[e]
                for k in range(h):
                    z = a[c, k] + b[m, k] + bias1[k]
                    dw[k, j] += gv * _leaky(z, slope)
                    dz = gv * w[k, j] * _leaky_grad(z, slope)
                    dA[c, k] += dz
                    dB[m, k] += dz
                    db1[k] += dz
    return dA_arr, dB_arr, db1_arr, dw_arr, db2_arr
