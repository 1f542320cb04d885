"""``ortho-unlearn`` command line entry point."""

from __future__ import annotations

import argparse
import logging
import sys

from .. import __version__
from ..dataset import save_features, synth_features
from ..errors import NumericalError, UnlearnError
from .config import load_config
from .report import emit_results
from .runner import PartialRunError, checkpoint_path, prepare, pretrain_baseline, run_sequence
from .selftest import run_selftest

log = logging.getLogger("ortho_unlearn")


def _parser():
    p = argparse.ArgumentParser(prog="ortho-unlearn", description=__doc__)
    p.add_argument("--version", action="version", version=f"ortho-unlearn {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    pre = sub.add_parser("pretrain", help="train and persist the frozen baseline")
    pre.add_argument("--config", required=True)

    run = sub.add_parser("run", help="run the sequential unlearning protocol")
    run.add_argument("--config", required=True)
    run.add_argument("--strategy", help="override the configured strategy list")
    run.add_argument("--lambda", dest="lam", type=float, help="override the lambda sweep")
    run.add_argument("--out", help="output directory")

    sub.add_parser("selftest", help="run the invariant suite")

    gen = sub.add_parser("gen-features", help="write the synthetic feature benchmark (FEAT1)")
    gen.add_argument("--out", required=True)
    gen.add_argument("--classes", type=int, default=100)
    gen.add_argument("--dim", type=int, default=64)
    gen.add_argument("--per-class", type=int, default=500)
    gen.add_argument("--seed", type=int, default=0)
    return p


def _cmd_pretrain(args):
    cfg = load_config(args.config)
    _, _, acc = pretrain_baseline(cfg)
    print(f"baseline held-out retain accuracy {acc:.4f}; checkpoint {checkpoint_path(cfg)}")
    return 0


def _cmd_run(args):
    overrides = {}
    if args.strategy:
        overrides["strategy"] = tuple(s.strip() for s in args.strategy.split(",") if s.strip())
    if args.lam is not None:
        overrides["lambdas"] = (args.lam,)
    if args.out:
        overrides["output_dir"] = args.out
    cfg = load_config(args.config, **overrides)
    prep = prepare(cfg)
    try:
        runs = run_sequence(cfg, prep, archive_dir=cfg.output_dir)
    except PartialRunError as exc:
        if exc.runs:
            emit_results(exc.runs, cfg.output_dir, cfg)
            log.error("partial results written to %s", cfg.output_dir)
        raise exc.cause from exc
    paths = emit_results(runs, cfg.output_dir, cfg)
    print(f"baseline retain accuracy {prep.baseline_retain_acc:.4f}")
    for run in runs:
        last = run.records[-1] if run.records else run.baseline
        print(f"{run.strategy:12s} lambda={run.lam:<5g} N={len(run.records):<3d} retain={last.retain_acc:.4f} "
              f"forget={last.forget_acc_cum:.4f} free_dims={last.free_dims}")
    print(f"wrote {', '.join(str(p) for p in paths.values())}")
    return 0


def _cmd_gen(args):
    data = synth_features(args.classes, args.dim, args.per_class, args.seed)
    save_features(args.out, data)
    print(f"wrote {len(data)} rows x {data.d_in} dims, {data.n_classes} classes to {args.out}")
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "pretrain":
            return _cmd_pretrain(args)
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "gen-features":
            return _cmd_gen(args)
        return 0 if run_selftest() else NumericalError.exit_code
    except UnlearnError as exc:
        # ConfigError -> 2, DatasetError -> 3, NumericalError -> 4
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
