"""Finite-difference verification of every differentiable operation.

Each case builds a scalar ``sum(op(inputs) * R)`` with fixed random
weights ``R`` and compares reverse-mode gradients with central differences
at step ``1e-5``.  Piecewise-linear operations (activations, max-pooling,
clipping, nearest-neighbour matching) have kinks where a difference
quotient is meaningless, so every estimate is repeated at half the step;
when the two disagree the sample straddles a kink and is redrawn.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from .flowinit import LabelSet
from .objectives import LossWeights, chamfer_loss, smooth_neighbors, total_loss, weighted_smooth_loss
from .scenes import stream

STEP = 1e-5
TOLERANCE = 1e-4
_KINK_TOL = 1e-6
_TRIES = 8


@dataclass
class CheckResult:
    name: str
    rel_error: float
    n_checked: int
    redrawn: int = 0

    @property
    def ok(self) -> bool:
        return self.rel_error < TOLERANCE

    def line(self) -> str:
        status = "ok" if self.ok else "FAIL"
        return f"{self.name:<24} rel_err={self.rel_error:.3e} n={self.n_checked:<4} redrawn={self.redrawn:<2} {status}"


def _rel(a, n, floor: float = 1e-8) -> float:
    a, n = np.asarray(a, dtype=np.float64), np.asarray(n, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), floor)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def _smooth_estimate(f: Callable[[float], float]) -> float | None:
    """Central difference at ``STEP``, or None when ``f`` has a kink nearby.

    An off-centre kink makes the central quotients at ``h`` and ``h/2``
    disagree.  A kink exactly at the evaluation point leaves them equal, but
    then the gap between the one-sided quotients stops shrinking with ``h``.
    """
    h = STEP
    f0 = f(0.0)
    fp, fm, fp2, fm2 = f(h), f(-h), f(h / 2), f(-h / 2)
    d1 = (fp - fm) / (2 * h)
    d2 = (fp2 - fm2) / h
    gap1 = (fp - 2 * f0 + fm) / h
    gap2 = (fp2 - 2 * f0 + fm2) / (h / 2)
    tol = _KINK_TOL * max(abs(d1), abs(d2), 1.0)
    if abs(d1 - d2) > tol or abs(gap2 - gap1 / 2) > tol:
        return None
    return d1


def check_op(name: str, build: Callable[[np.random.Generator], tuple[Callable, list[np.ndarray]]],
             rng: np.random.Generator, corrupt: bool = False) -> CheckResult:
    """Coordinate-wise check of ``fn(*tensors)`` for inputs drawn by ``build``."""
    for attempt in range(_TRIES):
        fn, arrays = build(rng)
        out = fn(*[dc.Tensor(a) for a in arrays])
        weights = rng.normal(size=out.shape)

        def objective(vals):
            return float(np.sum(fn(*[dc.Tensor(v) for v in vals]).data * weights))

        leaves = [dc.leaf(a) for a in arrays]
        loss = dc.total(dc.mul(fn(*leaves), weights))
        dc.backward(loss)
        analytic = [np.zeros(a.shape) if t.grad is None else t.grad for t in leaves]
        if corrupt:
            analytic[0] = analytic[0] * (1 + 1e-2) + 1e-3
        numeric, kink = [], False
        for k, a in enumerate(arrays):
            g = np.zeros(a.shape)
            for idx in np.ndindex(a.shape):

                def f(h, k=k, idx=idx):
                    vals = [v.copy() for v in arrays]
                    vals[k][idx] += h
                    return objective(vals)

                est = _smooth_estimate(f)
                if est is None:
                    kink = True
                    break
                g[idx] = est
            if kink:
                break
            numeric.append(g)
        if kink:
            continue
        err = max(_rel(a, n) for a, n in zip(analytic, numeric))
        return CheckResult(name, err, sum(a.size for a in arrays), attempt)
    return CheckResult(name, float("inf"), 0, _TRIES)


def check_directional(name: str, loss_fn: Callable[[], dc.Tensor], arrays: list[np.ndarray],
                      grads_fn: Callable[[], list[np.ndarray]], rng: np.random.Generator,
                      n_dirs: int = 3, corrupt: bool = False) -> CheckResult:
    """Compare ``grad . v`` with a difference quotient along random directions ``v``.

    ``arrays`` are perturbed in place (and restored); ``grads_fn`` returns
    their analytic gradients at the unperturbed point.
    """
    analytic = grads_fn()
    # difference quotients carry roundoff near eps * |loss| / STEP, so a
    # gradient that is zero by symmetry is compared on that scale
    floor = 1e-6 * max(1.0, abs(loss_fn().item()))
    if corrupt:
        analytic = [g * (1 + 1e-2) + 1e-3 for g in analytic]
    base = [a.copy() for a in arrays]
    errs, redrawn = [], 0
    for _ in range(n_dirs):
        for _attempt in range(_TRIES):
            dirs = [rng.normal(size=a.shape) for a in arrays]
            norm = np.sqrt(sum(float(np.sum(d * d)) for d in dirs)) or 1.0
            dirs = [d / norm for d in dirs]

            def f(h):
                for a, b, d in zip(arrays, base, dirs):
                    a[...] = b + h * d
                try:
                    return loss_fn().item()
                finally:
                    for a, b in zip(arrays, base):
                        a[...] = b

            est = _smooth_estimate(f)
            if est is not None:
                break
            redrawn += 1
        else:
            return CheckResult(name, float("inf"), len(errs), redrawn)
        exact = sum(float(np.sum(g * d)) for g, d in zip(analytic, dirs))
        errs.append(_rel(exact, est, floor))
    return CheckResult(name, max(errs), n_dirs, redrawn)


# ---------------------------------------------------------------------------
# cases


def _away_from(x, points, margin=1e-2):
    # push entries off the listed kink locations
    for p in points:
        close = np.abs(x - p) < margin
        x[close] = p + np.sign(x[close] - p + 1e-300) * margin
    return x


def _op_cases():
    R = np.random.Generator
    cases = {}

    def case(name):
        def deco(fn):
            cases[name] = fn
            return fn
        return deco

    @case("add")
    def _(r: R):
        return (lambda a, b: dc.add(a, b)), [r.normal(size=(3, 4)), r.normal(size=(4,))]

    @case("sub")
    def _(r: R):
        return (lambda a, b: dc.sub(a, b)), [r.normal(size=(2, 1, 3)), r.normal(size=(4, 3))]

    @case("mul")
    def _(r: R):
        return (lambda a, b: dc.mul(a, b)), [r.normal(size=(3, 4)), r.normal(size=(3, 1))]

    @case("square")
    def _(r: R):
        return dc.square, [r.normal(size=(5, 3))]

    @case("matmul")
    def _(r: R):
        return dc.matmul, [r.normal(size=(2, 3, 4)), r.normal(size=(4, 5))]

    @case("leaky_relu")
    def _(r: R):
        return dc.leaky_relu, [_away_from(r.normal(size=(4, 5)), [0.0])]

    @case("relu")
    def _(r: R):
        return dc.relu, [_away_from(r.normal(size=(4, 5)), [0.0])]

    @case("identity")
    def _(r: R):
        return dc.identity, [r.normal(size=(3, 3))]

    @case("reshape")
    def _(r: R):
        return (lambda x: dc.reshape(x, (3, 2, 2))), [r.normal(size=(4, 3))]

    @case("concat")
    def _(r: R):
        return (lambda a, b: dc.concat([a, b])), [r.normal(size=(3, 2)), r.normal(size=(3, 4))]

    @case("gather_rows")
    def _(r: R):
        idx = np.array([0, 2, 2, 4, 1])
        return (lambda x: dc.gather_rows(x, idx)), [r.normal(size=(5, 3))]

    @case("scatter_rows")
    def _(r: R):
        idx = np.array([3, 0, 5])
        return (lambda base, rows: dc.scatter_rows(base, idx, rows)), [r.normal(size=(6, 2)), r.normal(size=(3, 2))]

    @case("segment_max")
    def _(r: R):
        offsets = np.array([0, 3, 3, 7, 8])
        x = r.permutation(np.arange(8 * 3, dtype=np.float64)).reshape(8, 3) * 0.1 + r.uniform(0, 0.01, (8, 3))
        return (lambda t: dc.segment_max(t, offsets)), [x]

    @case("row_norm")
    def _(r: R):
        x = r.normal(size=(5, 3))
        x[1] += 2.0
        return dc.row_norm, [x]

    @case("softmax")
    def _(r: R):
        mask = r.uniform(size=(4, 6)) < 0.6
        mask[:, 0] = True
        return (lambda x: dc.softmax(x, mask)), [r.normal(size=(4, 6))]

    @case("clip")
    def _(r: R):
        lo, hi = np.array([-0.5, -1.0, 0.0]), np.array([0.5, 1.0, 2.0])
        x = r.normal(size=(6, 3))
        for j in range(3):
            x[:, j] = _away_from(x[:, j], [lo[j], hi[j]])
        return (lambda t: dc.clip(t, lo, hi)), [x]

    @case("pair_hidden_score")
    def _(r: R):
        h = 5
        return (lambda a, b, bias, w: dc.pair_hidden_score(a, b, bias, w)), [
            r.normal(size=(4, h)), r.normal(size=(3, h)), r.normal(size=(h,)), r.normal(size=(h, 1)),
        ]

    @case("edge_mlp_max")
    def _(r: R):
        h, d = 4, 3
        offsets = np.array([0, 2, 2, 6, 7])
        nbrs = np.array([0, 4, 1, 2, 3, 0, 2])
        return (lambda a, b, bias, w, bo: dc.edge_mlp_max(a, b, offsets, nbrs, bias, w, bo)), [
            r.normal(size=(4, h)), r.normal(size=(5, h)), r.normal(size=(h,)), r.normal(size=(h, d)),
            r.normal(size=(d,)),
        ]

    @case("total")
    def _(r: R):
        return dc.total, [r.normal(size=(3, 4))]

    @case("mean")
    def _(r: R):
        return dc.mean, [r.normal(size=(3, 4))]

    @case("mlp")
    def _(r: R):
        spec = dc.MlpSpec("m", (3, 6, 2))
        params = dc.ParamStore()
        dc.init_mlp(spec, params, r)
        return (lambda x: dc.forward_mlp(spec, params, x)), [r.normal(size=(5, 3))]

    @case("chamfer")
    def _(r: R):
        Q = r.normal(size=(7, 3))
        return (lambda P: chamfer_loss(P, Q)), [r.normal(size=(6, 3))]

    @case("weighted_smooth")
    def _(r: R):
        P = r.uniform(0, 1, size=(10, 3))
        labels = LabelSet(np.array([1, 6]), r.normal(size=(2, 3)))
        w = LossWeights(beta1=1.0, beta2=2.0, r_smooth=0.7)
        nb = smooth_neighbors(P, w.r_smooth)
        return (lambda F: weighted_smooth_loss(P, F, labels, w, nb)), [r.normal(size=(10, 3))]

    return cases


def _composed_scene(rng, n_points=48, n_shapes=2):
    # a small scene, so the check stays fast
    from .scenes import generate_synthetic_scene, sample_labels

    scene = generate_synthetic_scene(n_shapes=n_shapes, n_points=n_points, seed=int(rng.integers(2**32)))
    return scene.with_labels(sample_labels(scene, "1/8", int(rng.integers(2**32))))


def _composed_cases(rng, corrupt_name):
    from .pipeline import PipelineConfig, forward_flow, init_params, prepare_scene, scene_loss

    results = []
    scene = _composed_scene(rng)
    cfg = PipelineConfig(enc_widths=(8, 8), enc_radii=(0.5, 1.0), enc_ratios=(1.0, 0.5), corr_hidden=8, knn_k=4,
                         seed=int(rng.integers(2**32)))
    prep = prepare_scene(scene, cfg)
    P, Q, w = prep.scene.P, prep.scene.Q, cfg.loss_weights

    # objective as a function of the flow field
    F0 = rng.normal(scale=0.2, size=P.shape)

    def grads_F():
        leaf = dc.leaf(F0)
        dc.backward(total_loss(P, leaf, Q, prep.labels, w, prep.smooth))
        return [leaf.grad]

    results.append(check_directional(
        "total_loss(F)", lambda: total_loss(P, F0, Q, prep.labels, w, prep.smooth), [F0], grads_F, rng,
        n_dirs=4, corrupt=corrupt_name == "total_loss(F)",
    ))

    # full generator objective w.r.t. every parameter tensor, at a generic
    # point: zero initial biases put identical feature pairs exactly on kinks
    params = init_params(cfg)
    for v in params.values.values():
        v += rng.normal(scale=0.05, size=v.shape)

    def loss_fn():
        return scene_loss(prep, params, cfg)

    def grads_for(names):
        def run():
            params.zero_grads()
            dc.backward(loss_fn())
            return [params.grads[n].copy() for n in names]
        return run

    names = params.names()
    results.append(check_directional(
        "generator_loss(all)", loss_fn, [params.values[n] for n in names], grads_for(names), rng,
        n_dirs=4, corrupt=corrupt_name == "generator_loss(all)",
    ))
    worst = CheckResult("generator_loss(each)", 0.0, 0)
    for n in names:
        r = check_directional(n, loss_fn, [params.values[n]], grads_for([n]), rng, n_dirs=1,
                              corrupt=corrupt_name == "generator_loss(each)")
        worst.n_checked += 1
        worst.redrawn += r.redrawn
        worst.rel_error = max(worst.rel_error, r.rel_error)
    results.append(worst)

    # through the warp: gradient w.r.t. the coarse flow feeding the memory edges
    coarse = prep.coarse.copy()

    def grads_coarse():
        leaf = dc.leaf(coarse)
        F = forward_flow(prep, params, cfg, coarse=leaf)
        dc.backward(total_loss(P, F, Q, prep.labels, w, prep.smooth))
        return [leaf.grad]

    results.append(check_directional(
        "generator_loss(coarse)",
        lambda: total_loss(P, forward_flow(prep, params, cfg, coarse=dc.Tensor(coarse)), Q, prep.labels, w,
                           prep.smooth),
        [coarse], grads_coarse, rng, n_dirs=3, corrupt=corrupt_name == "generator_loss(coarse)",
    ))
    # default architecture on a larger scene
    big_cfg = PipelineConfig(seed=int(rng.integers(2**32)))
    big = prepare_scene(_composed_scene(rng, n_points=64, n_shapes=2), big_cfg)
    big_params = init_params(big_cfg)
    for v in big_params.values.values():
        v += rng.normal(scale=0.05, size=v.shape)

    def big_grads():
        big_params.zero_grads()
        dc.backward(scene_loss(big, big_params, big_cfg))
        return [big_params.grads[n].copy() for n in big_params.names()]

    results.append(check_directional(
        "generator_loss(default)", lambda: scene_loss(big, big_params, big_cfg),
        [big_params.values[n] for n in big_params.names()], big_grads, rng, n_dirs=3,
        corrupt=corrupt_name == "generator_loss(default)",
    ))
    return results


def run_gradcheck(seed: int = 0, corrupt: str | None = None) -> list[CheckResult]:
    """Check every operation and the composed objective.

    ``corrupt`` names one check whose analytic gradient is deliberately
    perturbed; it exists so tests can confirm that failures are detected.
    """
    rng = stream(seed, "gradcheck")
    results = []
    for name, build in _op_cases().items():
        results.append(check_op(name, build, rng, corrupt=corrupt == name))
    results.extend(_composed_cases(rng, corrupt))
    return results


def check_names() -> list[str]:
    return list(_op_cases()) + ["total_loss(F)", "generator_loss(all)", "generator_loss(each)",
                                "generator_loss(coarse)", "generator_loss(default)"]


def format_table(results: list[CheckResult]) -> str:
    return "\n".join(r.line() for r in results) + "\n"


if __name__ == "__main__":  # pragma: no cover
    t = time.perf_counter()
    res = run_gradcheck()
    print(format_table(res), f"{time.perf_counter() - t:.1f}s")
