"""Command-line entry point: ``python -m gnneval <subcommand> [flags]``.

Exit codes: 0 success, 2 configuration or input error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import sys

from threadpoolctl import threadpool_limits

from . import pipeline
from .discrepancy import BindingError
from .graphio import GraphError, GraphFormatError
from .nn import CheckpointError
from .zoo import TrainingError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("gnneval")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value run configuration")
    p.add_argument("--seed", type=int, help="global seed (augmentation and evaluator)")
    p.add_argument("--threads", type=int, help="worker threads; 1 = deterministic serial mode")
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gnneval", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("train-gnn", "train one classifier per (arch, seed)"),
        ("build-discgraphs", "synthesize meta-graphs and write labeled DiscGraphs per classifier"),
        ("train-evaluator", "fit one accuracy regressor per classifier"),
        ("estimate", "estimate classifier accuracy on each target graph"),
        ("baseline", "run ATC, threshold and AutoEval-G baselines on each target"),
    ]:
        p = sub.add_parser(name, help=help_)
        _common(p)
        if name in ("estimate", "baseline"):
            p.add_argument("--with-truth", action="store_true",
                           help="read target labels to fill the truth and abs_error columns")
    p = sub.add_parser("report", help="aggregate result CSVs into an MAE table")
    p.add_argument("results_dir", nargs="?", help="directory of result CSVs (default: OUT/results)")
    _common(p)
    p = sub.add_parser("gen-sbm", help="write a synthetic SBM benchmark (source, split, targets, run.cfg)")
    _common(p)
    p.add_argument("--nodes-per-class", type=int, default=200)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--K", type=int, default=100)
    p.add_argument("--archs", default="GCN")
    p.add_argument("--seeds", default="0")
    return parser


def _config(args, need_paths=True) -> pipeline.RunConfig:
    cfg = pipeline.load_config(args.config, seed=args.seed, threads=args.threads, out=args.out)
    cfg.validate(need_paths=need_paths)
    return cfg


def _run(args) -> None:
    if args.command == "gen-sbm":
        bench = pipeline.SBMBenchmark(nodes_per_class=args.nodes_per_class,
                                      num_classes=args.classes, seed=args.seed or 0)
        path = bench.write(args.out or "sbm", archs=pipeline._strs(args.archs),
                           seeds=pipeline._ints(args.seeds), K=args.K)
        print(path)
        return
    if args.command == "report":
        if args.results_dir is None:
            cfg = _config(args, need_paths=False)
            results, out = f"{cfg.out}/results", f"{cfg.out}/report"
        else:
            results, out = args.results_dir, args.out
        header, table = pipeline.report(results, out)
        print(",".join(header))
        for row in table:
            print(",".join(row))
        return

    cfg = _config(args)
    pipeline.write_run_manifest(cfg)
    if args.command == "train-gnn":
        rows = pipeline.train_gnns(cfg)
        failed = [r for r in rows if r["status"] != "ok"]
        for r in rows:
            print(f"{r['arch']} seed={r['seed']} {r['status']}"
                  + (f" val_acc={r['best_val_acc']:.4f}" if r["status"] == "ok" else ""))
        if failed:
            raise TrainingError(f"{len(failed)} of {len(rows)} classifier cells failed")
    elif args.command == "build-discgraphs":
        for cell, s in pipeline.build_discgraphs(cfg).items():
            print(f"{cell} count={s['count']} min={s['min']:.4f} mean={s['mean']:.4f} max={s['max']:.4f}")
    elif args.command == "train-evaluator":
        for arch, seed, epoch, mse, *_ in pipeline.train_evaluators(cfg):
            print(f"{arch} seed={seed} best_epoch={epoch} val_mse={float(mse):.3g}")
    elif args.command in ("estimate", "baseline"):
        fn = pipeline.estimate if args.command == "estimate" else pipeline.run_baselines
        for row in fn(cfg, with_truth=args.with_truth):
            print(",".join(str(x) for x in row))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = args.threads or 1
    try:
        # BLAS threads are pinned to one per worker so results do not depend on the thread count
        with threadpool_limits(limits=1):
            if threads < 1:
                raise pipeline.ConfigError("--threads must be >= 1")
            _run(args)
    except (pipeline.ConfigError, GraphFormatError, GraphError, CheckpointError, BindingError,
            FileNotFoundError) as exc:
        print(f"gnneval: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, FloatingPointError) as exc:
        print(f"gnneval: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
