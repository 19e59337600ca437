"""Pure numpy implementations of the hot kernels.

Every function here has a compiled twin in ``_kernels.pyx`` and both must
return bit-identical results.  Squared distances are always formed as
``dx*dx + dy*dy + dz*dz`` in that order so the two backends round alike.
"""

import numpy as np


def _sqdist(a, b):
    dx = a[:, None, 0] - b[None, :, 0]
    dy = a[:, None, 1] - b[None, :, 1]
    dz = a[:, None, 2] - b[None, :, 2]
    return dx * dx + dy * dy + dz * dz


def knn(query, ref, k, exclude_self):
    d2 = _sqdist(query, ref)
    if exclude_self:
        n = min(len(query), len(ref))
        d2[np.arange(n), np.arange(n)] = np.inf
    # stable sort keeps the lower reference index first on ties
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return order.astype(np.int64), np.take_along_axis(d2, order, axis=1)


def radius(query, ref, r, max_neighbors, exclude_self):
    d2 = _sqdist(query, ref)
    inside = np.sqrt(d2) < r
    if exclude_self:
        n = min(len(query), len(ref))
        inside[np.arange(n), np.arange(n)] = False
    d2 = np.where(inside, d2, np.inf)
    counts = inside.sum(axis=1)
    truncated = bool((counts > max_neighbors).any())
    counts = np.minimum(counts, max_neighbors)
    width = int(counts.max()) if len(counts) else 0
    order = np.argsort(d2, axis=1, kind="stable")[:, :width]
    keep = np.arange(width)[None, :] < counts[:, None]
    offsets = np.zeros(len(query) + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    idx = order[keep].astype(np.int64)
    dist2 = np.take_along_axis(d2, order, axis=1)[keep]
    return offsets, idx, dist2, truncated


def farthest_point_sample(points, m, seed_index):
    n = len(points)
    out = np.empty(m, dtype=np.int64)
    mind = np.full(n, np.inf)
    cur = seed_index
    for t in range(m):
        out[t] = cur
        d = points - points[cur]
        d2 = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]
        np.minimum(mind, d2, out=mind)
        mind[out[: t + 1]] = -1.0
        cur = int(np.argmax(mind))
    return out


def segment_max(values, offsets):
    n = len(offsets) - 1
    d = values.shape[1]
    out = np.zeros((n, d))
    arg = np.full((n, d), -1, dtype=np.int64)
    counts = np.diff(offsets)
    nonempty = np.nonzero(counts)[0]
    if len(nonempty) == 0:
        return out, arg
    starts = offsets[nonempty]
    out[nonempty] = np.maximum.reduceat(values, starts, axis=0)
    seg = np.repeat(np.arange(n), counts)
    hit = values == out[seg]
    # first edge index hitting the max wins
    for j in range(d):
        rows = np.nonzero(hit[:, j])[0]
        s = seg[rows]
        first = np.ones(len(rows), dtype=bool)
        first[1:] = s[1:] != s[:-1]
        arg[s[first], j] = rows[first]
    return out, arg


def scatter_add_rows(n, idx, values):
    out = np.zeros((n, values.shape[1]))
    np.add.at(out, idx, values)
    return out


def _pair_blocks(U, L, h):
    # keep pairwise temporaries around a few megabytes
    step = max(1, (1 << 18) // max(L * h, 1))
    return range(0, U, step), step


def pair_score(A, B, b1, w2, slope):
    out = np.empty((len(A), len(B)))
    w = np.asarray(w2).reshape(-1)
    starts, step = _pair_blocks(len(A), len(B), A.shape[1])
    for s in starts:
        z = A[s : s + step, None, :] - B[None, :, :] + b1
        z = np.where(z > 0, z, slope * z)
        out[s : s + step] = z @ w
    return out


def pair_score_backward(A, B, b1, w2, slope, dS):
    w = np.asarray(w2).reshape(-1)
    dA = np.zeros(A.shape)
    dB = np.zeros(B.shape)
    dw = np.zeros(len(w))
    starts, step = _pair_blocks(len(A), len(B), A.shape[1])
    for s in starts:
        z = A[s : s + step, None, :] - B[None, :, :] + b1
        pos = z > 0
        g = dS[s : s + step, :, None]
        dw += (g * np.where(pos, z, slope * z)).sum(axis=(0, 1))
        t = g * np.where(pos, 1.0, slope) * w
        dA[s : s + step] = t.sum(axis=1)
        dB -= t.sum(axis=0)
    return dA, dB, dA.sum(axis=0), dw.reshape(np.shape(w2))


def edge_mlp_max(A, B, offsets, nbrs, b1, w2, b2, slope):
    n = len(offsets) - 1
    centers = np.repeat(np.arange(n), np.diff(offsets))
    z = A[centers] + B[nbrs] + b1
    y = np.where(z > 0, z, slope * z) @ w2
    out, arg = segment_max(y, offsets)
    out[np.diff(offsets) > 0] += b2
    return out, arg


def edge_mlp_max_backward(A, B, offsets, nbrs, b1, w2, slope, arg, G):
    c, j = np.nonzero(arg >= 0)
    e = arg[c, j]
    g = G[c, j]
    z = A[c] + B[nbrs[e]] + b1
    pos = z > 0
    dw2 = np.zeros(w2.shape)
    np.add.at(dw2.T, j, g[:, None] * np.where(pos, z, slope * z))
    dz = g[:, None] * w2.T[j] * np.where(pos, 1.0, slope)
    dA = np.zeros(A.shape)
    dB = np.zeros(B.shape)
    np.add.at(dA, c, dz)
    np.add.at(dB, nbrs[e], dz)
    db2 = np.where(arg >= 0, G, 0.0).sum(axis=0)
    return dA, dB, dz.sum(axis=0), dw2, db2
