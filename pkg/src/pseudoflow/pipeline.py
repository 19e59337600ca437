"""End-to-end pseudo-label generation, training and ablation."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction

import numpy as np

from . import diffcore as dc
from .correlation import (
    build_descriptors,
    candidate_mask,
    init_correlation,
    normalize_rows,
    pair_scores,
    propagate_labels,
    score_mlps,
)
from .diffcore import ParamStore, Tensor
from .encoder import SetconvSpec, build_intra_edges, build_memory_edges, encode, init_encoder, plan_stages
from .errors import ContractError, DimensionError, TrainingError
from .flowinit import LabelSet, coarse_upsample
from .geometry import NeighborList, radius_neighbors
from .metrics import FlowMetrics, evaluate, exclude_labels_mask, mean_metrics
from .objectives import LossWeights, smooth_neighbors, total_loss
from .scenes import Normalization, ScenePair, normalize_scene, parse_ratio, sample_labels, stream

log = logging.getLogger(__name__)

POINT_FEATURE_WIDTH = 3


@dataclass(frozen=True)
class PipelineConfig:
    label_ratio: Fraction = Fraction(1, 16)
    knn_k: int = 8
    enc_widths: tuple[int, ...] = (16, 32, 32)
    enc_radii: tuple[float, ...] = (0.25, 0.5, 1.0)
    enc_ratios: tuple[float, ...] = (1.0, 0.5, 0.5)
    max_neighbors: int = 64
    corr_hidden: int = 32
    label_cap: int = 0
    alpha: float = 0.75
    beta: float = 0.25
    beta1: float = 1.0
    beta2: float = 2.0
    r_smooth: float = 0.5
    chamfer_mean: bool = False
    lr: float = 0.001
    lr_decay: float = 0.7
    decay_every: int = 25
    epochs: int = 50
    batch_size: int = 1
    resample_labels: bool = False
    seed: int = 0
    normalize: bool = True
    use_correlation: bool = True
    use_memory: bool = True
    use_weighted_smooth: bool = True

    def __post_init__(self):
        ratio = parse_ratio(self.label_ratio)
        object.__setattr__(self, "label_ratio", ratio)
        if not 0 < ratio < 1:
            raise ContractError(f"label_ratio must lie in (0, 1), got {ratio}")
        if not self.lr > 0:
            raise ContractError("lr must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ContractError("lr_decay must lie in (0, 1]")
        if self.decay_every < 1 or self.epochs < 0 or self.batch_size < 1 or self.knn_k < 1:
            raise ContractError("decay_every, batch_size and knn_k must be >= 1 and epochs >= 0")
        self.setconv  # validates encoder tuples
        self.loss_weights

    @property
    def setconv(self) -> SetconvSpec:
        return SetconvSpec(tuple(self.enc_widths), tuple(self.enc_radii), tuple(self.enc_ratios),
                           self.max_neighbors)

    @property
    def edge_radius(self) -> float:
        return self.enc_radii[0]

    @property
    def loss_weights(self) -> LossWeights:
        b2 = self.beta2 if self.use_weighted_smooth else self.beta1
        return LossWeights(self.alpha, self.beta, self.beta1, b2, self.r_smooth, self.chamfer_mean)

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.decay_every)

    # -- flat key=value text -------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: "PipelineConfig | None" = None) -> "PipelineConfig":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractError(f"config line {lineno}: expected key = value, got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            values[key] = val
        return (base or cls()).override(values)

    def override(self, values: dict) -> "PipelineConfig":
        """Copy with string (or typed) values parsed into their field types."""
        kinds = {f.name: f for f in fields(self)}
        parsed = {}
        for key, val in values.items():
            if key not in kinds:
                raise ContractError(f"unknown config key {key!r}")
            parsed[key] = _parse_value(getattr(self, key), val, key)
        return replace(self, **parsed)


def _parse_value(current, val, key):
    if not isinstance(val, str):
        return val
    try:
        if isinstance(current, bool):
            low = val.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(val)
            return low in ("true", "1", "yes")
        if isinstance(current, Fraction):
            return parse_ratio(val)
        if isinstance(current, tuple):
            conv = type(current[0])
            return tuple(conv(x) for x in val.split(",") if x.strip())
        return type(current)(val)
    except (ValueError, ContractError) as exc:
        raise ContractError(f"config key {key!r}: cannot parse {val!r}") from exc


# ---------------------------------------------------------------------------
# parameters


def init_params(config: PipelineConfig, seed: int | None = None) -> ParamStore:
    """Fresh parameters for both setconv stacks and the two score MLPs."""
    rng = stream(config.seed if seed is None else seed, "init")
    params = ParamStore()
    spec = config.setconv
    init_encoder(params, spec, "enc", POINT_FEATURE_WIDTH, rng)
    init_encoder(params, spec, "mem", POINT_FEATURE_WIDTH, rng)
    init_correlation(params, *score_mlps(spec.out_width, config.corr_hidden), rng)
    return params


def check_params(params: ParamStore, config: PipelineConfig) -> None:
    """Raise DimensionError unless ``params`` has exactly the layout ``config`` builds."""
    ref = init_params(config, seed=0)
    if ref.names() != params.names():
        missing = sorted(set(ref.names()) - set(params.names()))
        extra = sorted(set(params.names()) - set(ref.names()))
        raise DimensionError(f"parameter layout mismatch: missing {missing[:4]}, unexpected {extra[:4]}")
    for name in ref.names():
        if ref.values[name].shape != params.values[name].shape:
            raise DimensionError(
                f"parameter {name!r} has shape {params.values[name].shape}, "
                f"configuration expects {ref.values[name].shape}"
            )


# ---------------------------------------------------------------------------
# per-scene preparation


@dataclass
class PreparedScene:
    """A normalized, labeled scene with every geometry-only structure cached."""

    scene: ScenePair
    norm: Normalization
    labels: LabelSet
    unlabeled: np.ndarray
    coarse: np.ndarray
    intra: NeighborList | None = None
    intra_plan: list | None = None
    memory: NeighborList | None = None
    memory_plan: list | None = None
    smooth: NeighborList | None = None
    cand_mask: np.ndarray | None = None
    original_labels: LabelSet | None = field(default=None, repr=False)


def prepare_scene(scene: ScenePair, config: PipelineConfig, labels: LabelSet | None = None,
                  backend=None) -> PreparedScene:
    labels = labels if labels is not None else scene.labels
    if labels is None:
        raise ContractError(f"scene {scene.scene_id!r} has no labels")
    labeled = scene.with_labels(labels)
    if config.normalize:
        work, norm = normalize_scene(labeled)
    else:
        work, norm = labeled, Normalization()
    prep = PreparedScene(work, norm, work.labels, None, None, original_labels=labels)
    if config.use_correlation:
        spec = config.setconv
        P = work.P
        prep.intra = radius_neighbors(P, P, config.edge_radius, spec.max_neighbors, backend=backend)
        prep.intra_plan = plan_stages(P, spec, backend=backend)
        prep.smooth = smooth_neighbors(P, config.r_smooth, spec.max_neighbors, backend=backend)
    return _attach_labels(prep, config, backend)


def relabel(prep: PreparedScene, labels: LabelSet, config: PipelineConfig, backend=None) -> PreparedScene:
    """The same scene under a new label set; label-independent structures are shared."""
    scaled = LabelSet(labels.indices, labels.flows * prep.norm.scale)
    new = replace(prep, scene=prep.scene.with_labels(scaled), labels=scaled, original_labels=labels)
    return _attach_labels(new, config, backend)


def _attach_labels(prep: PreparedScene, config: PipelineConfig, backend) -> PreparedScene:
    P, Q, lab = prep.scene.P, prep.scene.Q, prep.labels
    prep.unlabeled = lab.unlabeled(prep.scene.n)
    prep.coarse = coarse_upsample(P, lab, config.knn_k, backend=backend)
    if not config.use_correlation:
        return prep
    spec = config.setconv
    pw = P + prep.coarse
    prep.memory = radius_neighbors(pw, Q, config.edge_radius, spec.max_neighbors, backend=backend)
    prep.memory_plan = plan_stages(pw, spec, backend=backend)
    if config.label_cap > 0:
        prep.cand_mask = candidate_mask(pw[prep.unlabeled], pw[lab.indices], config.label_cap)
    return prep


def forward_flow(prep: PreparedScene, params: ParamStore, config: PipelineConfig,
                 coarse: Tensor | None = None) -> Tensor:
    """Full pseudo-label field (normalized units) as a differentiable tensor.

    ``coarse`` may replace the cached coarse flow, e.g. to differentiate
    through the warp.
    """
    P, Q = prep.scene.P, prep.scene.Q
    labels = prep.labels
    if coarse is None:
        coarse = dc.as_tensor(prep.coarse)
    if not config.use_correlation:
        return coarse
    spec = config.setconv
    r = config.edge_radius
    edges = build_intra_edges(P, P, r, neighbors=prep.intra)
    x = encode(edges, spec, params, "enc", plan=prep.intra_plan)
    pw = dc.add(P, coarse)
    xw = None
    if config.use_memory:
        mem = build_memory_edges(P, coarse, Q, P, Q, r, neighbors=prep.memory)
        xw = encode(mem, spec, params, "mem", plan=prep.memory_plan)
    desc = build_descriptors(x, xw, P, pw, labels, prep.unlabeled)
    mlp_u, mlp_g = score_mlps(spec.out_width, config.corr_hidden)
    corr = normalize_rows(pair_scores(desc, mlp_u, mlp_g, params), prep.cand_mask)
    pseudo = propagate_labels(corr, labels.flows)
    base = np.zeros((prep.scene.n, 3))
    base[labels.indices] = labels.flows
    return dc.scatter_rows(base, prep.unlabeled, pseudo)


def scene_loss(prep: PreparedScene, params: ParamStore, config: PipelineConfig) -> Tensor:
    F = forward_flow(prep, params, config)
    return total_loss(prep.scene.P, F, prep.scene.Q, prep.labels, config.loss_weights, prep.smooth)


def pseudo_labels(prep: PreparedScene, params: ParamStore, config: PipelineConfig) -> np.ndarray:
    """Pseudo-label field in the scene's original units; labels copied verbatim."""
    F = prep.norm.flow_to_original(forward_flow(prep, params, config).data)
    lab = prep.original_labels
    # undoing the scale can round a blended value one ulp past the labels' range
    F = np.clip(F, lab.flows.min(axis=0), lab.flows.max(axis=0))
    F[lab.indices] = lab.flows
    return F


def generate_pseudo_labels(scene: ScenePair, params: ParamStore | None, config: PipelineConfig,
                           labels: LabelSet | None = None) -> np.ndarray:
    """Run the label generator ``F = g(P, Q, F_hat)`` on one scene."""
    labels = labels if labels is not None else scene.labels
    if labels is None:
        raise ContractError("generate_pseudo_labels needs a labeled scene")
    if config.use_correlation:
        if params is None:
            raise ContractError("correlation requires parameters")
        check_params(params, config)
    return pseudo_labels(prepare_scene(scene, config, labels), params, config)


def label_dataset(scenes: list[ScenePair], ratio, seed: int, purpose: str = "labels") -> list[ScenePair]:
    """Attach freshly sampled labels to every scene (one seed per scene index)."""
    out = []
    for i, s in enumerate(scenes):
        sub_seed = int(stream(seed, purpose, i).integers(2**63))
        out.append(s.with_labels(sample_labels(s, ratio, sub_seed)))
    return out


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainReport:
    losses: list[float]
    metrics: FlowMetrics | None
    wall_time: float
    config: PipelineConfig

    def to_text(self) -> str:
        lines = ["# training report", f"epochs_run = {len(self.losses)}", f"wall_time_s = {self.wall_time:.3f}"]
        for i, v in enumerate(self.losses):
            lines.append(f"loss[{i}] = {v!r}")
        if self.metrics is not None:
            lines.append(f"eval: {self.metrics.line()}")
        lines.append("# resolved config")
        lines.append(self.config.to_text().rstrip())
        return "\n".join(lines) + "\n"


def evaluate_scenes(scenes: list[ScenePair], params: ParamStore | None, config: PipelineConfig,
                    backend=None) -> FlowMetrics:
    """Mean per-scene metrics over unlabeled points, in original units."""
    results = []
    for s in scenes:
        prep = prepare_scene(s, config, backend=backend)
        F = pseudo_labels(prep, params, config)
        results.append(evaluate(F, s.flow, exclude_labels_mask(s.n, prep.labels)))
    return mean_metrics(results)


def train(dataset: list[ScenePair], config: PipelineConfig, eval_set: list[ScenePair] | None = None,
          params: ParamStore | None = None, backend=None) -> tuple[ParamStore, TrainReport]:
    """Adam on the chamfer + weighted-smooth objective of the generated field.

    Gradients of a batch are accumulated in scene-index order before the
    step, so runs are bit-reproducible for a fixed seed.  With
    ``resample_labels`` each scene gets a fresh seeded label set every epoch
    instead of the one it carries.
    """
    t0 = time.perf_counter()
    if params is None:
        params = init_params(config)
    else:
        check_params(params, config)
    if config.resample_labels:
        if any(s.flow is None for s in dataset):
            raise ContractError("resampling labels needs ground-truth flow on every training scene")
        dataset = [s if s.labels is not None else s.with_labels(sample_labels(s, config.label_ratio, 0))
                   for s in dataset]
    elif any(s.labels is None for s in dataset):
        raise ContractError("every training scene needs labels")
    losses: list[float] = []
    if config.use_correlation and config.epochs > 0:
        prepared = [prepare_scene(s, config, backend=backend) for s in dataset]
        for epoch in range(config.epochs):
            lr = config.lr_at(epoch)
            order = stream(config.seed, "order", epoch).permutation(len(prepared))
            epoch_loss = []
            for start in range(0, len(order), config.batch_size):
                batch = sorted(order[start : start + config.batch_size])
                params.zero_grads()
                for i in batch:
                    prep = prepared[i]
                    if config.resample_labels:
                        sub = int(stream(config.seed, "relabel", epoch, int(i)).integers(2**63))
                        prep = relabel(prep, sample_labels(dataset[i], config.label_ratio, sub), config, backend)
                    loss = scene_loss(prep, params, config)
                    value = loss.item()
                    if not math.isfinite(value):
                        raise TrainingError(
                            f"non-finite loss at epoch {epoch}, scene {i} ({prep.scene.scene_id!r})"
                        )
                    dc.backward(dc.mul(loss, 1.0 / len(batch)))
                    epoch_loss.append(value)
                try:
                    dc.adam_step(params, lr)
                except TrainingError as exc:
                    raise TrainingError(f"epoch {epoch}, batch starting at scene {batch[0]}: {exc}") from exc
            losses.append(math.fsum(epoch_loss) / len(epoch_loss))
            log.info("epoch %d lr %.6g loss %.6f", epoch, lr, losses[-1])
    metrics = evaluate_scenes(eval_set, params, config, backend=backend) if eval_set else None
    return params, TrainReport(losses, metrics, time.perf_counter() - t0, config)


# ---------------------------------------------------------------------------
# ablation

ABLATION_ROWS = [
    ("baseline", dict(use_correlation=False, use_memory=False, use_weighted_smooth=False)),
    ("corr", dict(use_correlation=True, use_memory=False, use_weighted_smooth=False)),
    ("corr+mem", dict(use_correlation=True, use_memory=True, use_weighted_smooth=False)),
    ("corr+smooth", dict(use_correlation=True, use_memory=False, use_weighted_smooth=True)),
    ("corr+mem+smooth", dict(use_correlation=True, use_memory=True, use_weighted_smooth=True)),
]


@dataclass
class AblationRow:
    name: str
    config: PipelineConfig
    metrics: FlowMetrics
    params: ParamStore | None = field(default=None, repr=False)
    report: TrainReport | None = field(default=None, repr=False)


def run_ablation(train_set: list[ScenePair], eval_set: list[ScenePair], base: PipelineConfig,
                 backend=None) -> list[AblationRow]:
    """Train and evaluate the five module combinations under identical seeds."""
    if not train_set or not eval_set:
        raise ContractError("ablation needs non-empty train and eval sets")
    rows = []
    for name, flags in ABLATION_ROWS:
        cfg = replace(base, **flags)
        params, report = train(train_set, cfg, eval_set, backend=backend)
        rows.append(AblationRow(name, cfg, report.metrics, params, report))
        log.info("ablation %s: %s", name, report.metrics.line())
    return rows


def format_ablation(rows: list[AblationRow]) -> str:
    head = f"{'row':<16} {'corr':>4} {'mem':>4} {'wsm':>4}  {'EPE':>8} {'AS':>7} {'AR':>7} {'Out':>7}"
    lines = [head]
    for r in rows:
        c = r.config
        mark = lambda b: "x" if b else "-"
        m = r.metrics
        lines.append(
            f"{r.name:<16} {mark(c.use_correlation):>4} {mark(c.use_memory and c.use_correlation):>4} "
            f"{mark(c.use_weighted_smooth and c.use_correlation):>4}  {m.epe:8.4f} {m.acc_strict:7.4f} "
            f"{m.acc_relax:7.4f} {m.outliers:7.4f}"
        )
    return "\n".join(lines) + "\n"
