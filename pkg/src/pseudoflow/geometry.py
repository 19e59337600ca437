"""Point sets and neighborhood queries.

Point sets are plain ``(n, 3)`` float64 arrays.  Queries are exact brute
force scans; ``backend="python"`` selects the numpy reference path and
``backend="compiled"`` the Cython one.  Both return identical results,
including tie-breaks (lower reference index first).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ContractError, QueryError

DEFAULT_MAX_NEIGHBORS = 64


def as_points(x, name: str = "points") -> np.ndarray:
    pts = np.ascontiguousarray(x, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ContractError(f"{name} must have shape (n, 3), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ContractError(f"{name} contains non-finite coordinates")
    return pts


@dataclass
class NeighborList:
    """Ragged neighbor lists in CSR layout.

    Neighbors of query ``i`` are ``indices[offsets[i]:offsets[i+1]]`` sorted
    by (distance, index).
    """

    offsets: np.ndarray
    indices: np.ndarray
    distances: np.ndarray
    truncated: bool = False

    def __len__(self):
        return len(self.offsets) - 1

    def __getitem__(self, i):
        s, e = self.offsets[i], self.offsets[i + 1]
        return list(zip(self.indices[s:e].tolist(), self.distances[s:e].tolist()))

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    @property
    def centers(self) -> np.ndarray:
        """Query index of every stored pair."""
        return np.repeat(np.arange(len(self), dtype=np.int64), self.counts)

    @classmethod
    def from_dense(cls, idx: np.ndarray, dist: np.ndarray) -> "NeighborList":
        n, k = idx.shape
        return cls(np.arange(0, n * k + 1, k, dtype=np.int64), idx.reshape(-1), dist.reshape(-1))


def knn(query, reference, k: int, exclude_self: bool = False, backend: str | None = None) -> NeighborList:
    """The ``k`` nearest reference points of every query point.

    With ``exclude_self`` the query and reference are the same cloud and
    pair ``(i, i)`` is skipped.
    """
    q = as_points(query, "query")
    ref = as_points(reference, "reference")
    avail = len(ref) - (1 if exclude_self else 0)
    if k < 1:
        raise QueryError(f"k must be positive, got {k}")
    if k > avail:
        raise QueryError(f"k={k} exceeds the {avail} available reference points")
    idx, d2 = kernels.get(backend).knn(q, ref, int(k), bool(exclude_self))
    return NeighborList.from_dense(idx, np.sqrt(d2))


def radius_neighbors(
    query,
    reference,
    r: float,
    max_neighbors: int = DEFAULT_MAX_NEIGHBORS,
    exclude_self: bool = False,
    backend: str | None = None,
) -> NeighborList:
    """Reference points strictly closer than ``r``, nearest ``max_neighbors`` kept."""
    if not r > 0:
        raise ContractError(f"radius must be positive, got {r}")
    q = as_points(query, "query")
    ref = as_points(reference, "reference")
    offsets, idx, d2, truncated = kernels.get(backend).radius(
        q, ref, float(r), int(max_neighbors), bool(exclude_self)
    )
    return NeighborList(offsets, idx, np.sqrt(d2), truncated)


def nearest(query, reference, backend: str | None = None) -> np.ndarray:
    """Index of the closest reference point for every query point."""
    idx, _ = kernels.get(backend).knn(as_points(query), as_points(reference), 1, False)
    return idx[:, 0]


def farthest_point_sample(points, m: int, seed_index: int = 0, backend: str | None = None) -> np.ndarray:
    """Greedy max-min subset of size ``m``, starting from ``seed_index``.

    The result is in selection order, so shorter samples from the same seed
    are prefixes of longer ones.  Ties go to the lower index.
    """
    pts = as_points(points)
    n = len(pts)
    if m < 1 or m > n:
        raise QueryError(f"cannot sample {m} points from a cloud of {n}")
    if not 0 <= seed_index < n:
        raise QueryError(f"seed index {seed_index} out of range for {n} points")
    return kernels.get(backend).farthest_point_sample(pts, int(m), int(seed_index))


def lexicographic_first(points) -> int:
    """Index of the point with lexicographically smallest (x, y, z)."""
    pts = np.asarray(points)
    return int(np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))[0])
