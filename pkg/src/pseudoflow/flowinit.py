"""Coarse flow: inverse-distance-weighted upsampling of sparse labels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, QueryError
from .geometry import as_points, knn

DEFAULT_K = 8


@dataclass
class LabelSet:
    """Ground-truth flows known at a subset of the points of P."""

    indices: np.ndarray
    flows: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        self.flows = np.asarray(self.flows, dtype=np.float64).reshape(-1, 3)
        if len(self.indices) != len(self.flows):
            raise ContractError(
                f"{len(self.indices)} label indices but {len(self.flows)} label flows"
            )

    def __len__(self):
        return len(self.indices)

    def validate(self, n: int) -> None:
        m = len(self.indices)
        if m < 1:
            raise ContractError("label set is empty")
        if m >= n:
            raise ContractError(f"{m} labels for {n} points: need strictly fewer labels than points")
        if len(np.unique(self.indices)) != m:
            raise ContractError("label indices are not unique")
        if self.indices.min() < 0 or self.indices.max() >= n:
            raise ContractError(f"label index out of range for {n} points")

    def unlabeled(self, n: int) -> np.ndarray:
        mask = np.ones(n, dtype=bool)
        mask[self.indices] = False
        return np.nonzero(mask)[0]

    @classmethod
    def from_flow(cls, flow, indices) -> "LabelSet":
        indices = np.asarray(indices, dtype=np.int64)
        return cls(indices, np.asarray(flow, dtype=np.float64)[indices])


def coarse_upsample(P, labels: LabelSet, k: int = DEFAULT_K, backend: str | None = None) -> np.ndarray:
    """Per-point coarse flow for every point of ``P``.

    Unlabeled points take the inverse-distance weighted mean of their ``k``
    nearest labeled flows; a labeled neighbor at distance zero is copied
    (several coincident ones are averaged).  Labeled points keep their label.
    """
    P = as_points(P, "P")
    n = len(P)
    labels.validate(n)
    if k > len(labels):
        raise QueryError(f"k={k} exceeds the {len(labels)} labeled points")
    out = np.empty((n, 3))
    out[labels.indices] = labels.flows
    unl = labels.unlabeled(n)
    nb = knn(P[unl], P[labels.indices], k, backend=backend)
    idx = nb.indices.reshape(-1, k)
    dist = nb.distances.reshape(-1, k)
    nbflow = labels.flows[idx]

    zero = dist == 0.0
    hit = zero.any(axis=1)
    w = zero.astype(np.float64)
    w[~hit] = 1.0 / dist[~hit]
    w /= w.sum(axis=1, keepdims=True)
    flow = np.einsum("ik,ikc->ic", w, nbflow)
    # rounding guard: a convex combination stays inside its neighbors' box
    flow = np.clip(flow, nbflow.min(axis=1), nbflow.max(axis=1))
    out[unl] = flow
    return out
