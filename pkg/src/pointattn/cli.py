"""Command-line surface: gen | train | eval | complete | verify.

Exit codes: 0 success, 1 verification failure, 2 argument/config error,
3 I/O error, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import model as model_mod
from . import training
from .cloud_io import read_cloud, write_cloud
from .config import RunConfig, schema_help
from .errors import (CheckpointError, CloudFormatError, ConfigError,
                     NonFiniteLossError)
from .geometry import chamfer, fps
from .tensor import Tensor

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_ARGS = 2
EXIT_IO = 3
EXIT_DIVERGED = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pointattn",
        description="Point cloud completion: synthesize data, train, "
                    "evaluate, complete clouds, and verify the numerics.")
    sub = parser.add_subparsers(dest="command", required=True)
    epilog = schema_help()
    kw = dict(formatter_class=argparse.RawDescriptionHelpFormatter, epilog=epilog)

    p_gen = sub.add_parser("gen", help="generate a synthetic corpus", **kw)
    p_gen.add_argument("--out", required=True, help="output corpus directory")
    p_gen.add_argument("--per-category", type=int, default=10,
                       help="pairs per shape category (default 10)")
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--n", type=int, default=512, help="partial cloud size")
    p_gen.add_argument("--m", type=int, default=2048, help="complete cloud size")
    p_gen.add_argument("--method", choices=("half_space", "viewpoint"),
                       default="half_space", help="occlusion model")

    p_train = sub.add_parser("train", help="train on a corpus directory", **kw)
    p_train.add_argument("--config", help="key = value configuration file")
    p_train.add_argument("--data", required=True, help="corpus directory")
    p_train.add_argument("--out", required=True, help="run directory (metrics, checkpoints)")
    p_train.add_argument("--resume", help="checkpoint to resume from (with its .state.npz)")
    p_train.add_argument("--set", action="append", metavar="KEY=VALUE", default=[],
                         help="override a configuration key (repeatable)")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a corpus", **kw)
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--variant", choices=("l1", "l2"), default="l2")
    p_eval.add_argument("--out", help="directory for eval.tsv and the bar-chart figure")

    p_comp = sub.add_parser("complete", help="complete a single partial cloud", **kw)
    p_comp.add_argument("--ckpt", required=True)
    p_comp.add_argument("--in", dest="in_path", required=True,
                        help="partial cloud (.xyz or .pcb)")
    p_comp.add_argument("--out", required=True, help="output cloud (.xyz or .pcb)")
    p_comp.add_argument("--emit-stages", action="store_true",
                        help="also write the seed and intermediate clouds")

    p_verify = sub.add_parser("verify", help="run the property/oracle suites", **kw)
    p_verify.add_argument("--suite", choices=("grads", "fps", "cd", "shapes", "all"),
                          default="all")
    p_verify.add_argument("--seed", type=int, default=0)
    return parser


def cmd_gen(args) -> int:
    try:
        manifest = data_mod.build_corpus(
            args.per_category, args.out, n_partial=args.n, m_complete=args.m,
            seed=args.seed, method=args.method)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    pairs = args.per_category * len(data_mod.CATEGORIES)
    print(f"wrote {pairs} pairs; manifest: {manifest}")
    return EXIT_OK


def _split_corpus(corpus, val_fraction: float):
    n_val = int(len(corpus.pairs) * val_fraction)
    if n_val == 0:
        return corpus.pairs, []
    return corpus.pairs[:-n_val], corpus.pairs[-n_val:]


def cmd_train(args) -> int:
    try:
        run = RunConfig.build(args.config, args.set)
        model_cfg = run.model_config()
        train_cfg = run.train_config()
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    try:
        corpus = data_mod.load_corpus(args.data)
    except (FileNotFoundError, ValueError) as exc:
        print(f"corpus error: {exc}", file=sys.stderr)
        return EXIT_IO
    if corpus.n_partial != model_cfg.n_input:
        print(f"config error: corpus partials have {corpus.n_partial} points, "
              f"model expects {model_cfg.n_input}", file=sys.stderr)
        return EXIT_ARGS

    start_epoch = 0
    adam = None
    if args.resume:
        try:
            params, _ = model_mod.load_checkpoint(args.resume, expected_cfg=model_cfg)
            adam, start_epoch = training.AdamState.load(args.resume + ".state.npz")
        except (CheckpointError, FileNotFoundError) as exc:
            print(f"resume error: {exc}", file=sys.stderr)
            return EXIT_ARGS
    else:
        params = model_mod.init_params(model_cfg, seed=train_cfg.seed)

    train_pairs, val_pairs = _split_corpus(corpus, train_cfg.val_fraction)
    try:
        result = training.train(params, model_cfg, train_pairs, train_cfg, args.out,
                                val_pairs=val_pairs, start_epoch=start_epoch,
                                adam=adam, log=print)
    except NonFiniteLossError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    from .report import training_curves
    figure = training_curves(result.metrics_path, Path(args.out) / "loss_curve.png")
    print(f"metrics: {result.metrics_path}")
    print(f"figure: {figure}")
    print(f"final checkpoint: {result.final_checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        params, model_cfg = model_mod.load_checkpoint(args.ckpt)
    except (CheckpointError,) as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except (FileNotFoundError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        corpus = data_mod.load_corpus(args.data)
    except (FileNotFoundError, ValueError) as exc:
        print(f"corpus error: {exc}", file=sys.stderr)
        return EXIT_IO
    if corpus.n_partial != model_cfg.n_input:
        print(f"checkpoint/config mismatch: corpus partials have {corpus.n_partial} "
              f"points, model expects {model_cfg.n_input}", file=sys.stderr)
        return EXIT_ARGS

    by_category: dict = {}
    for pair in corpus.pairs:
        preds = model_mod.forward(pair.partial, params, model_cfg)
        cd = float(chamfer(preds.p2, Tensor(np.asarray(
            pair.complete, dtype=preds.p2.data.dtype)), args.variant).data)
        by_category.setdefault(pair.category, []).append(cd)

    rows = [(cat, float(np.mean(vals)), len(vals)) for cat, vals in by_category.items()]
    average = float(np.mean([cd for _, cd, _ in rows]))
    width = max(len(cat) for cat, _, _ in rows + [("average", 0, 0)])
    print(f"{'category':<{width}}  {'pairs':>5}  {'cd_' + args.variant:>12}  {'x1e4':>10}")
    for cat, cd, count in rows:
        print(f"{cat:<{width}}  {count:>5}  {cd:>12.6f}  {cd * 1e4:>10.2f}")
    print(f"{'average':<{width}}  {sum(c for _, _, c in rows):>5}  "
          f"{average:>12.6f}  {average * 1e4:>10.2f}")

    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        table = out_dir / "eval.tsv"
        with open(table, "w", encoding="ascii") as fh:
            for cat, cd, count in rows + [("average", average, sum(c for _, _, c in rows))]:
                fh.write(f"{cat}\t{count}\t{cd:.10g}\t{cd * 1e4:.10g}\n")
        from .report import category_bars
        figure = category_bars([r[0] for r in rows], [r[1] * 1e4 for r in rows],
                               out_dir / "eval_cd.png",
                               ylabel=f"CD ({args.variant}) x 1e4")
        print(f"table: {table}")
        print(f"figure: {figure}")
    return EXIT_OK


def _resample_to(points: np.ndarray, n: int) -> np.ndarray:
    if points.shape[0] == n:
        return points
    if points.shape[0] > n:
        return points[fps(points, n).indices]
    reps = np.arange(n) % points.shape[0]
    return points[reps]


def cmd_complete(args) -> int:
    try:
        params, model_cfg = model_mod.load_checkpoint(args.ckpt)
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except (FileNotFoundError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        cloud = read_cloud(args.in_path)
    except (FileNotFoundError, OSError, CloudFormatError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_IO
    partial = _resample_to(np.asarray(cloud, dtype=np.float32), model_cfg.n_input)
    preds = model_mod.forward(partial, params, model_cfg)
    out = Path(args.out)
    try:
        write_cloud(preds.p2.data, out)
        if args.emit_stages:
            for stage, tensor in (("p0", preds.p0), ("p1", preds.p1)):
                stage_path = out.with_name(f"{out.stem}_{stage}{out.suffix}")
                write_cloud(tensor.data, stage_path)
                print(f"wrote {stage_path} ({tensor.data.shape[0]} points)")
    except (OSError, CloudFormatError) as exc:
        print(f"output error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"wrote {out} ({preds.p2.data.shape[0]} points)")
    return EXIT_OK


def cmd_verify(args) -> int:
    from . import verify
    reports = verify.run_suites([args.suite], seed=args.seed)
    failed = []
    for report in reports:
        for c in report.checks:
            status = "ok" if c.passed else "FAIL"
            detail = f"  ({c.detail})" if c.detail else ""
            print(f"[{report.name}] {c.name}: max_err={c.max_err:.3e} "
                  f"(< {c.threshold:g}) {status}{detail}")
            if not c.passed:
                failed.append(f"{report.name}:{c.name}")
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_VERIFY
    print("all checks passed")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors and 0 on --help
        return int(exc.code or 0)
    handlers = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval,
                "complete": cmd_complete, "verify": cmd_verify}
    return handlers[args.command](args)


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
