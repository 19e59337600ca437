"""Chamfer, weighted smoothness and combined training losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ContractError, DimensionError
from .flowinit import LabelSet
from .geometry import DEFAULT_MAX_NEIGHBORS, NeighborList, nearest, radius_neighbors


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.75
    beta: float = 0.25
    beta1: float = 1.0  # neighborhoods centered on unlabeled points
    beta2: float = 2.0  # neighborhoods centered on labeled points
    r_smooth: float = 0.5
    chamfer_mean: bool = False

    def __post_init__(self):
        vals = (self.alpha, self.beta, self.beta1, self.beta2, self.r_smooth)
        if min(vals) < 0:
            raise ContractError(f"loss weights must be nonnegative: {self}")
        if self.alpha + self.beta <= 0:
            raise ContractError("alpha + beta must be positive")


def chamfer_loss(P_warped, Q, mean: bool = False, backend=None) -> Tensor:
    """Bidirectional sum of squared nearest-neighbor distances.

    Differentiable with respect to ``P_warped``.  With ``mean`` each
    direction is averaged instead of summed.
    """
    pw = dc.as_tensor(P_warped)
    Q = np.ascontiguousarray(dc.as_tensor(Q).data)
    if pw.shape[0] == 0 or len(Q) == 0:
        raise ContractError("chamfer loss needs two non-empty point sets")
    to_q = nearest(pw.data, Q, backend=backend)
    to_p = nearest(Q, pw.data, backend=backend)
    fwd = dc.total(dc.square(dc.sub(pw, Q[to_q])))
    bwd = dc.total(dc.square(dc.sub(dc.gather_rows(pw, to_p), Q)))
    if mean:
        return dc.add(dc.mul(fwd, 1.0 / pw.shape[0]), dc.mul(bwd, 1.0 / len(Q)))
    return dc.add(fwd, bwd)


def smooth_neighbors(P, r: float, max_neighbors: int = DEFAULT_MAX_NEIGHBORS, backend=None) -> NeighborList:
    """Neighborhoods for the smoothness term (self excluded)."""
    P = dc.as_tensor(P).data
    return radius_neighbors(P, P, r, max_neighbors, exclude_self=True, backend=backend)


def smooth_components(P, F, labels: LabelSet, r: float, neighbors: NeighborList | None = None,
                      backend=None) -> tuple[Tensor, Tensor]:
    """Unweighted (unlabeled-centered, labeled-centered) smoothness sums.

    Each center contributes the mean of ``||f_i - f_j||`` over its
    neighbors; centers without neighbors contribute nothing.
    """
    F = dc.as_tensor(F)
    n = dc.as_tensor(P).shape[0]
    if F.shape != (n, 3):
        raise DimensionError(f"flow field shape {F.shape} does not match {n} points")
    if neighbors is None:
        neighbors = smooth_neighbors(P, r, backend=backend)
    counts = neighbors.counts
    centers = neighbors.centers
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0)
    is_label = np.zeros(n, dtype=bool)
    is_label[labels.indices] = True
    norms = dc.row_norm(dc.sub(dc.gather_rows(F, centers), dc.gather_rows(F, neighbors.indices)))
    coef = inv[centers]
    lab_edge = is_label[centers]
    unl = dc.total(dc.mul(norms, np.where(lab_edge, 0.0, coef)))
    lab = dc.total(dc.mul(norms, np.where(lab_edge, coef, 0.0)))
    return unl, lab


def weighted_smooth_loss(P, F, labels: LabelSet, w: LossWeights, neighbors: NeighborList | None = None,
                         backend=None) -> Tensor:
    unl, lab = smooth_components(P, F, labels, w.r_smooth, neighbors, backend=backend)
    return dc.add(dc.mul(unl, w.beta1), dc.mul(lab, w.beta2))


def total_loss(P, F, Q, labels: LabelSet, w: LossWeights, neighbors: NeighborList | None = None,
               backend=None) -> Tensor:
    """``alpha * chamfer(P + F, Q) + beta * weighted_smooth(P, F)``."""
    F = dc.as_tensor(F)
    warped = dc.add(dc.as_tensor(P), F)
    cham = chamfer_loss(warped, Q, mean=w.chamfer_mean, backend=backend)
    smooth = weighted_smooth_loss(P, F, labels, w, neighbors, backend=backend)
    return dc.add(dc.mul(cham, w.alpha), dc.mul(smooth, w.beta))
