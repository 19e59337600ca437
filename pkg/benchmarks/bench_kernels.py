"""Compiled vs numpy kernel timings.

    python3 benchmarks/bench_kernels.py [--points 2048] [--repeat 5]

Each kernel runs on identical inputs under both backends; the last column
checks the outputs agree.  The final row times one training step (forward
and backward through the whole generator) with each backend swapped in.
"""

import argparse
import contextlib
import timeit

import numpy as np

from pseudoflow import diffcore as dc
from pseudoflow import kernels
from pseudoflow.pipeline import PipelineConfig, init_params, prepare_scene, scene_loss
from pseudoflow.scenes import generate_synthetic_scene, sample_labels


def _best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    if isinstance(a, (bool, int, float)):
        return a == b
    return np.allclose(a, b, rtol=1e-12, atol=1e-12)


@contextlib.contextmanager
def _active(backend):
    saved = kernels.active
    kernels.active = backend
    try:
        yield
    finally:
        kernels.active = saved


def kernel_cases(n, rng):
    P = rng.uniform(-2, 2, size=(n, 3))
    Q = P + rng.normal(scale=0.05, size=P.shape)
    off, nb, _, _ = kernels.python.radius(P, P, 0.5, 64, False)
    h, d = 32, 32
    A, B = rng.normal(size=(n, h)), rng.normal(size=(n, h))
    b1, w2, b2 = rng.normal(size=h), rng.normal(size=(h, d)), rng.normal(size=d)
    _, arg = kernels.python.edge_mlp_max(A, B, off, nb, b1, w2, b2, 0.1)
    G = rng.normal(size=(n, d))
    m = max(1, n // 16)
    pa, pb = rng.normal(size=(n, 16)), rng.normal(size=(m, 16))
    pw, dS = rng.normal(size=16), rng.normal(size=(n, m))
    vals = rng.normal(size=(len(nb), d))
    return [
        ("knn k=8", lambda k: k.knn(P, Q, 8, False)),
        ("radius r=0.5", lambda k: k.radius(P, Q, 0.5, 64, False)),
        ("farthest_point_sample n/2", lambda k: k.farthest_point_sample(P, n // 2, 0)),
        ("segment_max", lambda k: k.segment_max(vals, off)),
        ("edge_mlp_max", lambda k: k.edge_mlp_max(A, B, off, nb, b1, w2, b2, 0.1)),
        ("edge_mlp_max_backward", lambda k: k.edge_mlp_max_backward(A, B, off, nb, b1, w2, 0.1, arg, G)),
        ("pair_score", lambda k: k.pair_score(pa, pb, pw, pw, 0.1)),
        ("pair_score_backward", lambda k: k.pair_score_backward(pa, pb, pw, pw, 0.1, dS)),
    ]


def training_step(n, backend_name):
    cfg = PipelineConfig()
    scene = generate_synthetic_scene(n_points=n, seed=3)
    scene = scene.with_labels(sample_labels(scene, cfg.label_ratio, 0))
    prep = prepare_scene(scene, cfg, backend=backend_name)
    params = init_params(cfg, seed=0)

    def step():
        params.zero_grads()
        dc.backward(scene_loss(prep, params, cfg))

    return step


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=2048)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if kernels.compiled is None:
        raise SystemExit("compiled kernels are not built; run pip install -e . --no-build-isolation")
    rng = np.random.default_rng(0)
    print(f"points={args.points} repeat={args.repeat} (best of)")
    print(f"{'kernel':28s} {'python ms':>10s} {'compiled ms':>12s} {'speedup':>8s}  agree")
    for name, fn in kernel_cases(args.points, rng):
        tp = _best(lambda: fn(kernels.python), args.repeat)
        tc = _best(lambda: fn(kernels.compiled), args.repeat)
        agree = _same(fn(kernels.python), fn(kernels.compiled))
        print(f"{name:28s} {tp * 1e3:10.2f} {tc * 1e3:12.2f} {tp / tc:8.1f}x  {agree}")
    times = {}
    for name, k in (("python", kernels.python), ("compiled", kernels.compiled)):
        with _active(k):
            step = training_step(args.points, name)
            times[name] = _best(step, args.repeat)
    tp, tc = times["python"], times["compiled"]
    print(f"{'training step (fwd+bwd)':28s} {tp * 1e3:10.2f} {tc * 1e3:12.2f} {tp / tc:8.1f}x")


if __name__ == "__main__":
    main()
