"""Learned correlation between unlabeled and labeled points.

For unlabeled point ``i`` and labeled point ``n`` a score is formed from two
MLPs, one on the feature difference ``(x_i || xw_i) - (x_n || xw_n)`` and
one on the geometric difference ``(p_i || pw_i) - (p_n || pw_n)``.  Rows are
softmax-normalised over labeled points and used to blend labeled flows.

The correlation matrix is stored with one row per unlabeled point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import MlpSpec, ParamStore, Tensor
from .errors import ContractError, DimensionError
from .flowinit import LabelSet
from .geometry import knn

DEFAULT_HIDDEN = 32
_SLOPES = {"leaky_relu": dc.LEAKY_SLOPE, "relu": 0.0, "identity": 1.0}


def score_mlps(feature_width: int, hidden: int = DEFAULT_HIDDEN) -> tuple[MlpSpec, MlpSpec]:
    """Default (feature, geometry) score MLPs for encoder width ``feature_width``."""
    return (
        MlpSpec("corr.u", (2 * feature_width, hidden, 1)),
        MlpSpec("corr.g", (6, hidden, 1)),
    )


@dataclass
class PairDescriptors:
    """Per-point halves of the pair descriptors.

    ``u[i, n] = feat_unl[i] - feat_lab[n]`` and likewise for ``g``; the
    pairwise arrays are only built on request (:meth:`materialize`).
    """

    feat_unl: Tensor
    feat_lab: Tensor
    geo_unl: Tensor
    geo_lab: Tensor

    @property
    def shape(self) -> tuple[int, int]:
        return self.feat_unl.shape[0], self.feat_lab.shape[0]

    def materialize(self) -> tuple[Tensor, Tensor]:
        U, L = self.shape

        def pairwise(a, b):
            return dc.sub(dc.reshape(a, (U, 1, a.shape[1])), dc.reshape(b, (1, L, b.shape[1])))

        return pairwise(self.feat_unl, self.feat_lab), pairwise(self.geo_unl, self.geo_lab)


def build_descriptors(x, xw, P, pw, labels: LabelSet, unlabeled: np.ndarray) -> PairDescriptors:
    """Split per-point features and positions into unlabeled/labeled halves.

    ``xw=None`` (memory disabled) substitutes a zero block of the same width.
    """
    x = dc.as_tensor(x)
    xw = dc.as_tensor(np.zeros(x.shape)) if xw is None else dc.as_tensor(xw)
    if xw.shape != x.shape:
        raise DimensionError(f"memory features {xw.shape} do not match features {x.shape}")
    feat = dc.concat([x, xw])
    geo = dc.concat([dc.as_tensor(P), dc.as_tensor(pw)])
    lab = labels.indices
    return PairDescriptors(
        dc.gather_rows(feat, unlabeled), dc.gather_rows(feat, lab),
        dc.gather_rows(geo, unlabeled), dc.gather_rows(geo, lab),
    )


def _pair_mlp(spec: MlpSpec, params: ParamStore, a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != spec.widths[0] or b.shape[1] != spec.widths[0]:
        raise DimensionError(
            f"MLP {spec.name!r} takes descriptors of width {spec.widths[0]}, got {a.shape[1]}"
        )
    if spec.widths[-1] != 1:
        raise DimensionError(f"score MLP {spec.name!r} must have a scalar output")
    U, L = a.shape[0], b.shape[0]
    # the first layer is affine, so W(a_i - b_n) = W a_i - W b_n
    ha = dc.mlp_layer(spec, params, 0, a, bias=False)
    hb = dc.mlp_layer(spec, params, 0, b, bias=False)
    slope = _SLOPES.get(spec.activations[0]) if spec.n_layers == 2 else None
    if slope is not None:
        w_name, b_name = spec.layer_names(1)
        s = dc.pair_hidden_score(ha, hb, params.tensor(spec.layer_names(0)[1]), params.tensor(w_name), slope)
        return dc.add(s, dc.reshape(params.tensor(b_name), (1, 1)))
    width = ha.shape[1]
    h = dc.sub(dc.reshape(ha, (U, 1, width)), dc.reshape(hb, (1, L, width)))
    h = dc.add(h, params.tensor(spec.layer_names(0)[1]))
    if spec.n_layers > 1:
        h = dc.ACTIVATIONS[spec.activations[0]](h)
        h = dc.forward_mlp(spec, params, h, start=1)
    return dc.reshape(h, (U, L))


def pair_scores(desc: PairDescriptors, mlp_u: MlpSpec, mlp_g: MlpSpec, params: ParamStore) -> Tensor:
    """Raw ``(U, L)`` similarity scores ``MLP_u(u) + MLP_g(g)``."""
    return dc.add(
        _pair_mlp(mlp_u, params, desc.feat_unl, desc.feat_lab),
        _pair_mlp(mlp_g, params, desc.geo_unl, desc.geo_lab),
    )


def candidate_mask(query_pos, label_pos, k: int) -> np.ndarray:
    """Boolean ``(U, L)`` mask keeping each row's ``k`` nearest labeled points."""
    L = len(label_pos)
    k = min(k, L)
    nb = knn(query_pos, label_pos, k)
    mask = np.zeros((len(query_pos), L), dtype=bool)
    mask[np.repeat(np.arange(len(query_pos)), k), nb.indices] = True
    return mask


def normalize_rows(scores, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax; every row of the result sums to one."""
    scores = dc.as_tensor(scores)
    if scores.data.ndim != 2 or scores.shape[1] < 1:
        raise ContractError(f"scores must be (rows, >=1 labeled columns), got {scores.shape}")
    return dc.softmax(scores, mask)


def propagate_labels(corr, label_flows) -> Tensor:
    """Blend labeled flows with the correlation weights, one row per unlabeled point."""
    corr = dc.as_tensor(corr)
    flows = np.asarray(label_flows, dtype=np.float64)
    if corr.shape[1] != len(flows):
        raise DimensionError(f"correlation has {corr.shape[1]} columns for {len(flows)} labels")
    # a convex blend can only leave the labels' box by rounding; the clip
    # makes hull containment exact (and identical labels copy exactly)
    return dc.clip(dc.matmul(corr, flows), flows.min(axis=0), flows.max(axis=0))


def init_correlation(params: ParamStore, mlp_u: MlpSpec, mlp_g: MlpSpec, rng: np.random.Generator) -> None:
    dc.init_mlp(mlp_u, params, rng)
    dc.init_mlp(mlp_g, params, rng)
