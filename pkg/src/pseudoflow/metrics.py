"""Scene-flow accuracy metrics: EPE, strict/relaxed accuracy and outliers."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ContractError
from .flowinit import LabelSet


@dataclass(frozen=True)
class FlowMetrics:
    epe: float
    acc_strict: float
    acc_relax: float
    outliers: float
    n_evaluated: int

    def line(self) -> str:
        return (
            f"epe={self.epe:.6f} as={self.acc_strict:.6f} ar={self.acc_relax:.6f} "
            f"out={self.outliers:.6f} n={self.n_evaluated:d}"
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "FlowMetrics":
        return cls(**json.loads(text))

    @classmethod
    def from_line(cls, line: str) -> "FlowMetrics":
        kv = dict(item.split("=", 1) for item in line.split())
        return cls(float(kv["epe"]), float(kv["as"]), float(kv["ar"]), float(kv["out"]), int(kv["n"]))


def point_errors(F, F_gt) -> tuple[np.ndarray, np.ndarray]:
    """Per-point end-point error and relative error.

    Relative error is 0 when both the error and the ground-truth norm are
    zero, and +inf when only the ground-truth norm is zero.
    """
    F = np.asarray(F, dtype=np.float64)
    G = np.asarray(F_gt, dtype=np.float64)
    d = F - G
    err = np.sqrt(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2])
    gnorm = np.sqrt(G[:, 0] * G[:, 0] + G[:, 1] * G[:, 1] + G[:, 2] * G[:, 2])
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = err / gnorm
    rel = np.where(gnorm == 0, np.where(err == 0, 0.0, np.inf), rel)
    return err, rel


def evaluate(F, F_gt, eval_mask=None) -> FlowMetrics:
    """Metrics over the points in ``eval_mask`` (all points when ``None``)."""
    F = np.asarray(F, dtype=np.float64)
    F_gt = np.asarray(F_gt, dtype=np.float64)
    if F.shape != F_gt.shape or F.ndim != 2 or F.shape[1] != 3:
        raise ContractError(f"flow shapes differ or are not (n, 3): {F.shape} vs {F_gt.shape}")
    idx = np.arange(len(F)) if eval_mask is None else np.asarray(eval_mask, dtype=np.int64)
    if len(idx) == 0:
        raise ContractError("evaluation mask is empty")
    if idx.min() < 0 or idx.max() >= len(F):
        raise ContractError("evaluation mask index out of range")
    err, rel = point_errors(F[idx], F_gt[idx])
    n = len(idx)
    strict = np.count_nonzero((err < 0.05) | (rel < 0.05))
    relax = np.count_nonzero((err < 0.1) | (rel < 0.1))
    out = np.count_nonzero((err > 0.3) | (rel > 0.1))
    return FlowMetrics(math.fsum(err.tolist()) / n, strict / n, relax / n, out / n, n)


def exclude_labels_mask(n: int, labels: LabelSet | None) -> np.ndarray:
    """Indices of points that carry no label."""
    mask = np.ones(n, dtype=bool)
    if labels is not None and len(labels):
        mask[labels.indices] = False
    out = np.nonzero(mask)[0]
    if len(out) == 0:
        raise ContractError("every point is labeled; nothing left to evaluate")
    return out


def mean_metrics(items: list[FlowMetrics]) -> FlowMetrics:
    """Unweighted mean over scenes (each scene counts once)."""
    if not items:
        raise ContractError("no metrics to average")
    k = len(items)
    return FlowMetrics(
        math.fsum(m.epe for m in items) / k,
        math.fsum(m.acc_strict for m in items) / k,
        math.fsum(m.acc_relax for m in items) / k,
        math.fsum(m.outliers for m in items) / k,
        sum(m.n_evaluated for m in items),
    )
