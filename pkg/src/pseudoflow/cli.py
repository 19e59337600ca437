"""Command-line interface.

Exit codes: 0 success, 1 I/O failure, 2 usage error, 3 numeric failure,
4 artifact mismatch (checkpoint layout, corrupt files).
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
import time
from pathlib import Path

from . import diffcore as dc
from .errors import ContractError, DimensionError, FormatError, QueryError
from .gradcheck import check_names, format_table, run_gradcheck
from .metrics import evaluate, exclude_labels_mask
from .pipeline import (
    PipelineConfig,
    check_params,
    format_ablation,
    generate_pseudo_labels,
    label_dataset,
    run_ablation,
    train,
)
from .scenes import LabelSet, _child_seed, generate_synthetic_scene, read_dataset, read_scene, sample_labels, write_scene

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_NUMERIC, EXIT_MISMATCH = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


def _echo(title: str, text: str) -> None:
    print(f"# {title}")
    print(text.rstrip())
    print("# end config", flush=True)


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig()
    if getattr(args, "config", None):
        cfg = PipelineConfig.from_text(Path(args.config).read_text(), cfg)
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        overrides[key.strip()] = val.strip()
    if getattr(args, "ratio", None) is not None:
        overrides["label_ratio"] = args.ratio
    if getattr(args, "seed", None) is not None and "seed" not in overrides:
        overrides["seed"] = str(args.seed)
    return cfg.override(overrides)


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    if args.scenes < 1 or args.points < 1 or args.shapes < 1:
        raise UsageError("--scenes, --points and --shapes must be >= 1")
    if args.noise < 0:
        raise UsageError("--noise must be >= 0")
    settings = dict(
        scenes=args.scenes, points=args.points, shapes=args.shapes, noise=args.noise, seed=args.seed,
        max_rotation_deg=args.max_rotation, max_translation=args.max_translation, spread=args.spread,
    )
    _echo("generator", "\n".join(f"{k} = {v!r}" for k, v in settings.items()))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.scenes):
        scene = generate_synthetic_scene(
            n_shapes=args.shapes, n_points=args.points, noise=args.noise, seed=_child_seed(args.seed, i),
            max_rotation_deg=args.max_rotation, max_translation=args.max_translation, spread=args.spread,
            scene_id=f"scene_{i:04d}",
        )
        path = out / f"scene_{i:04d}.ssfl"
        write_scene(scene, path)
        print(f"{path} n={scene.n} sha256={_digest(path)}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    _echo("resolved config", cfg.to_text())
    scenes = label_dataset(read_dataset(args.data), cfg.label_ratio, cfg.seed)
    eval_set = label_dataset(read_dataset(args.eval), cfg.label_ratio, cfg.seed, "eval-labels") if args.eval else None
    params, report = train(scenes, cfg, eval_set)
    out = Path(args.out)
    dc.save_params(params, out)
    report_path = Path(args.report) if args.report else out.with_name(out.name + ".report.txt")
    report_path.write_text(report.to_text())
    final = report.losses[-1] if report.losses else float("nan")
    print(f"checkpoint {out} sha256={_digest(out)}")
    print(f"report {report_path}")
    print(f"epochs={len(report.losses)} final_loss={final!r} wall_time={report.wall_time:.1f}s")
    if report.metrics is not None:
        print(report.metrics.line())
    return EXIT_OK


def cmd_label(args) -> int:
    cfg = _load_config(args)
    flags = {}
    if args.no_memory:
        flags["use_memory"] = False
    if args.no_correlation:
        flags["use_correlation"] = False
    cfg = cfg.override(flags)
    _echo("resolved config", cfg.to_text())
    scene = read_scene(args.data)
    params = None
    if cfg.use_correlation:
        if not args.ckpt:
            raise UsageError("--ckpt is required unless --no-correlation is given")
        params = dc.load_params(args.ckpt)
        check_params(params, cfg)
    labels = sample_labels(scene, cfg.label_ratio, cfg.seed)
    F = generate_pseudo_labels(scene, params, cfg, labels)
    out = scene.with_labels(None).with_flow(F).with_labels(LabelSet.from_flow(F, labels.indices))
    write_scene(out, args.out)
    print(f"wrote {args.out} n={scene.n} labels={len(labels)}")
    if scene.flow is not None:
        print(evaluate(F, scene.flow, exclude_labels_mask(scene.n, labels)).line())
    return EXIT_OK


def cmd_eval(args) -> int:
    _echo("inputs", f"pred = {args.pred}\ngt = {args.gt}")
    pred, gt = read_scene(args.pred), read_scene(args.gt)
    if pred.n != gt.n:
        raise UsageError(f"point counts differ: pred has {pred.n}, gt has {gt.n}")
    if pred.flow is None or gt.flow is None:
        raise UsageError("both files need a flow field")
    print(evaluate(pred.flow, gt.flow, exclude_labels_mask(pred.n, pred.labels)).line())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    _echo("gradcheck", f"seed = {args.seed}\nstep = 1e-05\ntolerance = 0.0001")
    if args.corrupt is not None and args.corrupt not in check_names():
        raise UsageError(f"unknown check {args.corrupt!r}")
    t0 = time.perf_counter()
    results = run_gradcheck(args.seed, corrupt=args.corrupt)
    print(format_table(results), end="")
    failed = [r for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} passed in {time.perf_counter() - t0:.1f}s")
    for r in failed:
        print(f"FAILED {r.name}: max relative error {r.rel_error:.3e}", file=sys.stderr)
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    _echo("resolved config", cfg.to_text())
    scenes = read_dataset(args.data)
    if args.eval:
        train_scenes, eval_scenes = scenes, read_dataset(args.eval)
    else:
        n_eval = max(1, int(round(len(scenes) * args.eval_fraction)))
        if n_eval >= len(scenes):
            raise UsageError(f"{len(scenes)} scenes cannot be split with eval fraction {args.eval_fraction}")
        train_scenes, eval_scenes = scenes[:-n_eval], scenes[-n_eval:]
    train_set = label_dataset(train_scenes, cfg.label_ratio, cfg.seed)
    eval_set = label_dataset(eval_scenes, cfg.label_ratio, cfg.seed, "eval-labels")
    print(f"train scenes = {len(train_set)}, eval scenes = {len(eval_set)}", flush=True)
    t0 = time.perf_counter()
    rows = run_ablation(train_set, eval_set, cfg)
    table = format_ablation(rows)
    print(table, end="")
    print(f"wall_time={time.perf_counter() - t0:.1f}s")
    if args.out:
        Path(args.out).write_text(table)
    if args.save_full:
        dc.save_params(rows[-1].params, args.save_full)
        print(f"full-model checkpoint {args.save_full}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pseudoflow", description="Pseudo-label generation for point-cloud scene flow.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def config_args(sp, ratio=True):
        sp.add_argument("--config", help="key = value configuration file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        if ratio:
            sp.add_argument("--ratio", help="label ratio, e.g. 1/16")

    g = sub.add_parser("gen", help="generate synthetic scene files")
    g.add_argument("--scenes", type=int, required=True)
    g.add_argument("--points", type=int, required=True, help="points per scene")
    g.add_argument("--shapes", type=int, default=4)
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--max-rotation", type=float, default=15.0, help="degrees")
    g.add_argument("--max-translation", type=float, default=1.0)
    g.add_argument("--spread", type=float, default=1.5, help="half-width of the shape-centre box")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train the label generator")
    t.add_argument("--data", required=True)
    config_args(t)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--eval", help="directory of held-out scenes")
    t.add_argument("--report", help="report path (default: <out>.report.txt)")
    t.set_defaults(func=cmd_train)

    lb = sub.add_parser("label", help="generate pseudo-labels for one scene")
    lb.add_argument("--data", required=True, help="scene file")
    lb.add_argument("--ckpt")
    config_args(lb)
    lb.add_argument("--seed", type=int, default=0)
    lb.add_argument("--out", required=True)
    lb.add_argument("--no-memory", action="store_true")
    lb.add_argument("--no-correlation", action="store_true")
    lb.set_defaults(func=cmd_label)

    e = sub.add_parser("eval", help="score a predicted flow file against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.set_defaults(func=cmd_eval)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--corrupt", help=argparse.SUPPRESS)
    gc.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="train and evaluate the five module combinations")
    a.add_argument("--data", required=True)
    config_args(a)
    a.add_argument("--seed", type=int)
    a.add_argument("--eval", help="held-out scene directory (default: split --data)")
    a.add_argument("--eval-fraction", type=float, default=0.2)
    a.add_argument("--out", help="write the table here as well")
    a.add_argument("--save-full", metavar="CKPT", help="save the full model's checkpoint")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"pseudoflow {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DimensionError, FormatError) as exc:
        print(f"pseudoflow {args.command}: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (ContractError, QueryError) as exc:
        print(f"pseudoflow {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"pseudoflow {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"pseudoflow {args.command}: {exc.strerror or exc}: {exc.filename or ''}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
