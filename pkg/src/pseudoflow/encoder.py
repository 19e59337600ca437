"""Flow-graph feature encoder.

Two edge sets feed two independent setconv stacks:

* intra-frame edges ``(p_i - p_j || feat_i || feat_j)`` over radius pairs
  inside P;
* spatial-memory edges ``(p_i + c_i - q_j || feat_i || feat_j)`` from P
  warped by the coarse flow ``c`` into frame Q.

A setconv stage applies a shared MLP to every edge and max-pools over each
center's edges.  Stages after the first run on farthest-point subsets and
copy their output back to all points from the nearest retained point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import MlpSpec, ParamStore, Tensor
from .errors import ContractError, DimensionError
from .geometry import (
    DEFAULT_MAX_NEIGHBORS,
    NeighborList,
    farthest_point_sample,
    lexicographic_first,
    nearest,
    radius_neighbors,
)

_SLOPES = {"leaky_relu": dc.LEAKY_SLOPE, "relu": 0.0, "identity": 1.0}


@dataclass(frozen=True)
class SetconvSpec:
    widths: tuple[int, ...] = (16, 32, 32)
    radii: tuple[float, ...] = (0.25, 0.5, 1.0)
    ratios: tuple[float, ...] = (1.0, 0.5, 0.5)
    max_neighbors: int = DEFAULT_MAX_NEIGHBORS

    def __post_init__(self):
        if not (len(self.widths) == len(self.radii) == len(self.ratios) >= 1):
            raise ContractError("setconv widths, radii and ratios need one entry per stage")
        if min(self.widths) < 1 or min(self.radii) <= 0:
            raise ContractError("setconv widths and radii must be positive")
        if any(not 0 < q <= 1 for q in self.ratios):
            raise ContractError(f"setconv ratios must lie in (0, 1], got {self.ratios}")

    @property
    def n_stages(self) -> int:
        return len(self.widths)

    @property
    def out_width(self) -> int:
        return self.widths[-1]

    def stage_mlp(self, prefix: str, s: int, point_width: int) -> MlpSpec:
        """Per-edge MLP of stage ``s``; ``point_width`` is the raw input feature width."""
        prev = point_width if s == 0 else self.widths[s - 1]
        return MlpSpec(f"{prefix}.stage{s}", (3 + 2 * prev, self.widths[s], self.widths[s]))


@dataclass
class EdgeSet:
    """Edges grouped by center point (CSR).

    Edge ``t`` joins center ``c = centers[t]`` to ``j = neighbors[t]`` and
    carries ``(center_pos[c] - nb_pos[j] || center_feat[c] || nb_feat[j])``.
    The four per-point tensors are kept so the first encoder layer can run
    per point; :attr:`features` materializes the per-edge rows.
    ``center_pos`` is the center cloud (P warped by the coarse flow for
    memory edges); later encoder stages build their own graphs on it.
    """

    offsets: np.ndarray
    neighbors: np.ndarray
    center_pos: Tensor
    nb_pos: Tensor
    center_feat: Tensor
    nb_feat: Tensor

    @property
    def n(self) -> int:
        return len(self.offsets) - 1

    @property
    def positions(self) -> Tensor:
        return self.center_pos

    @property
    def point_width(self) -> int:
        return self.center_feat.shape[1]

    @property
    def width(self) -> int:
        return 3 + 2 * self.point_width

    @property
    def centers(self) -> np.ndarray:
        return np.repeat(np.arange(self.n, dtype=np.int64), np.diff(self.offsets))

    @property
    def features(self) -> Tensor:
        c, j = self.centers, self.neighbors
        return dc.concat(
            [
                dc.sub(dc.gather_rows(self.center_pos, c), dc.gather_rows(self.nb_pos, j)),
                dc.gather_rows(self.center_feat, c),
                dc.gather_rows(self.nb_feat, j),
            ]
        )

    def __getitem__(self, i):
        s, e = self.offsets[i], self.offsets[i + 1]
        feats = self.features.data
        return [(int(self.neighbors[t]), feats[t]) for t in range(s, e)]


def _first_layer(mlp: MlpSpec, params: ParamStore, center_pos, nb_pos, center_feat, nb_feat):
    # W @ (pc - pn || fc || fn) = (pc Wp + fc Wc)[c] + (fn Wn - pn Wp)[n]
    wname, bname = mlp.layer_names(0)
    w = params.tensor(wname)
    d = center_feat.shape[1]
    if w.shape != (3 + 2 * d, mlp.widths[1]):
        raise DimensionError(f"{wname}: stored shape {w.shape} does not fit edge width {3 + 2 * d}")
    wp = dc.gather_rows(w, np.arange(0, 3))
    wc = dc.gather_rows(w, np.arange(3, 3 + d))
    wn = dc.gather_rows(w, np.arange(3 + d, 3 + 2 * d))
    per_center = dc.add(dc.matmul(center_pos, wp), dc.matmul(center_feat, wc))
    per_nb = dc.sub(dc.matmul(nb_feat, wn), dc.matmul(nb_pos, wp))
    return per_center, per_nb, params.tensor(bname)


def _setconv(mlp: MlpSpec, params: ParamStore, center_pos, nb_pos, center_feat, nb_feat,
             offsets, neighbors) -> Tensor:
    a, b, bias = _first_layer(mlp, params, center_pos, nb_pos, center_feat, nb_feat)
    slope = _SLOPES.get(mlp.activations[0]) if mlp.n_layers == 2 else None
    if slope is not None:
        w_name, b_name = mlp.layer_names(1)
        return dc.edge_mlp_max(a, b, offsets, neighbors, bias, params.tensor(w_name), params.tensor(b_name), slope)
    centers = np.repeat(np.arange(len(offsets) - 1, dtype=np.int64), np.diff(offsets))
    h = dc.add(dc.add(dc.gather_rows(a, centers), dc.gather_rows(b, neighbors)), bias)
    if mlp.n_layers > 1:
        h = dc.ACTIVATIONS[mlp.activations[0]](h)
        h = dc.forward_mlp(mlp, params, h, start=1)
    return dc.segment_max(h, offsets)


def _check_rows(feats, n, what):
    if feats.shape[0] != n:
        raise DimensionError(f"{what} has {feats.shape[0]} rows for {n} points")


def build_intra_edges(
    P, point_features, r: float, max_neighbors: int = DEFAULT_MAX_NEIGHBORS, backend=None,
    neighbors: NeighborList | None = None,
) -> EdgeSet:
    """Radius graph inside one frame; every point keeps its own self-edge."""
    P = dc.as_tensor(P)
    feats = dc.as_tensor(point_features)
    _check_rows(feats, P.shape[0], "point features")
    if neighbors is None:
        neighbors = radius_neighbors(P.data, P.data, r, max_neighbors, backend=backend)
    return EdgeSet(neighbors.offsets, neighbors.indices, P, P, feats, feats)


def warp(P, coarse) -> Tensor:
    P, coarse = dc.as_tensor(P), dc.as_tensor(coarse)
    if coarse.shape != P.shape:
        raise DimensionError(f"coarse flow shape {coarse.shape} does not match P {P.shape}")
    return dc.add(P, coarse)


def build_memory_edges(
    P, coarse, Q, feats_P, feats_Q, r: float, max_neighbors: int = DEFAULT_MAX_NEIGHBORS,
    backend=None, neighbors: NeighborList | None = None,
) -> EdgeSet:
    """Edges from P warped by the coarse flow to the points of Q within ``r``.

    The warp is part of the graph, so features are differentiable with
    respect to ``coarse``.  Warped points with no Q neighbor get no edges.
    """
    Q = dc.as_tensor(Q)
    fP, fQ = dc.as_tensor(feats_P), dc.as_tensor(feats_Q)
    pw = warp(P, coarse)
    _check_rows(fP, pw.shape[0], "P features")
    _check_rows(fQ, Q.shape[0], "Q features")
    if neighbors is None:
        neighbors = radius_neighbors(pw.data, Q.data, r, max_neighbors, backend=backend)
    return EdgeSet(neighbors.offsets, neighbors.indices, pw, Q, fP, fQ)


@dataclass
class StagePlan:
    centers: np.ndarray | None  # retained points; None means every point
    graph: NeighborList | None  # None for the first stage, which uses the given edges
    copy_from: np.ndarray | None  # row of the pooled output each point copies


def plan_stages(positions, spec: SetconvSpec, backend=None) -> list[StagePlan]:
    """Geometry-only part of :func:`encode`; reusable while positions are fixed."""
    pos = np.ascontiguousarray(dc.as_tensor(positions).data)
    n = len(pos)
    keep = np.cumprod(spec.ratios)
    sizes = [max(1, int(round(n * q))) for q in keep]
    order = farthest_point_sample(pos, max(s for s in sizes), lexicographic_first(pos), backend=backend) \
        if min(sizes) < n else None
    plans = []
    for s, m in enumerate(sizes):
        centers = None if m == n else order[:m]
        copy_from = None
        if centers is not None:
            copy_from = nearest(pos, pos[centers], backend=backend)
            copy_from[centers] = np.arange(m)
        graph = None
        if s > 0:
            cpos = pos if centers is None else pos[centers]
            graph = radius_neighbors(cpos, pos, spec.radii[s], spec.max_neighbors, backend=backend)
        plans.append(StagePlan(centers, graph, copy_from))
    return plans


def encode(
    edges: EdgeSet, spec: SetconvSpec, params: ParamStore, prefix: str,
    plan: list[StagePlan] | None = None, backend=None,
) -> Tensor:
    """Run the setconv stack named ``prefix`` over ``edges``.

    Returns an ``(n, spec.out_width)`` feature tensor.  Points whose edge
    list is empty get an all-zero row.
    """
    if plan is None:
        plan = plan_stages(edges.positions, spec, backend=backend)
    pos = edges.positions
    h = None
    for s, stage in enumerate(plan):
        mlp = spec.stage_mlp(prefix, s, edges.point_width)
        if s == 0:
            pooled = _setconv(mlp, params, edges.center_pos, edges.nb_pos, edges.center_feat,
                              edges.nb_feat, edges.offsets, edges.neighbors)
            if stage.centers is not None:
                pooled = dc.gather_rows(pooled, stage.centers)
        else:
            g = stage.graph
            cpos = pos if stage.centers is None else dc.gather_rows(pos, stage.centers)
            ch = h if stage.centers is None else dc.gather_rows(h, stage.centers)
            pooled = _setconv(mlp, params, cpos, pos, ch, h, g.offsets, g.indices)
        h = pooled if stage.copy_from is None else dc.gather_rows(pooled, stage.copy_from)
    isolated = np.diff(edges.offsets) == 0
    if isolated.any():
        h = dc.mul(h, (~isolated).astype(np.float64)[:, None])
    return h


def init_encoder(params: ParamStore, spec: SetconvSpec, prefix: str, point_width: int,
                 rng: np.random.Generator) -> None:
    for s in range(spec.n_stages):
        dc.init_mlp(spec.stage_mlp(prefix, s, point_width), params, rng)
