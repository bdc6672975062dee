"""Command line entry point: ``m3impute run | mask gen | mask export | report merge``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import bench, dataio
from .exceptions import M3ImputeError
from .seeding import stream

log = logging.getLogger("m3impute")


def _seeds(text: str) -> list[int]:
    """``"5"`` means seeds 0..4; ``"3,7,11"`` is an explicit list."""
    try:
        if "," in text:
            return [int(s) for s in text.split(",") if s.strip()]
        count = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a count or comma list, got {text!r}") from None
    if count < 1:
        raise argparse.ArgumentTypeError("seed count must be positive")
    return list(range(count))


def _add_data_args(p):
    p.add_argument("--dataset", required=True,
                   help="bundled dataset name (housing, concrete, yacht) or CSV path")
    p.add_argument("--schema", help="JSON schema sidecar for a CSV path")
    p.add_argument("--data-dir", help="directory searched for bundled dataset files")
    p.add_argument("--mechanism", choices=dataio.MECHANISMS, default="mcar")
    p.add_argument("--ratio", type=float, default=0.3)
    p.add_argument("--seeds", type=_seeds, default=list(range(5)),
                   help="seed count or comma-separated list (default 5)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="m3impute", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an imputation benchmark")
    _add_data_args(run)
    run.add_argument("--method", choices=bench.METHODS, default="m3")
    run.add_argument("--preset", choices=sorted(bench.PRESETS),
                     help="epoch preset; --epochs overrides it")
    run.add_argument("--epochs", type=int)
    run.add_argument("--peers", type=int, default=5)
    run.add_argument("--epsilon", type=float, default=1e-4)
    run.add_argument("--dim", type=int, default=128)
    run.add_argument("--knn-k", type=int, default=5)
    run.add_argument("--mask-file", action="append", dest="mask_files",
                     help="use a saved mask instead of generating one; repeat once per seed")
    run.add_argument("--out", required=True, help="report path (JSON); a CSV row is written beside it")

    mask = sub.add_parser("mask", help="generate or export missingness masks")
    mask_sub = mask.add_subparsers(dest="mask_command", required=True)
    gen = mask_sub.add_parser("gen", help="write a mask of a given shape (MCAR) or for a dataset")
    gen.add_argument("--shape", help="ROWSxCOLS for a data-free MCAR mask")
    gen.add_argument("--dataset")
    gen.add_argument("--schema")
    gen.add_argument("--data-dir")
    gen.add_argument("--mechanism", choices=dataio.MECHANISMS, default="mcar")
    gen.add_argument("--ratio", type=float, default=0.3)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    export = mask_sub.add_parser("export", help="write the mask of every seed of a run")
    _add_data_args(export)
    export.add_argument("--out-dir", required=True)

    report = sub.add_parser("report", help="combine reports")
    report_sub = report.add_subparsers(dest="report_command", required=True)
    merge = report_sub.add_parser("merge", help="merge JSON reports into one CSV table")
    merge.add_argument("reports", nargs="+")
    merge.add_argument("--out", required=True)
    return parser


def _run(args) -> int:
    epochs = args.epochs if args.epochs is not None else bench.PRESETS[args.preset or "desk"]
    config = bench.ExperimentConfig(
        dataset=args.dataset, schema=args.schema, data_dir=args.data_dir,
        mechanism=args.mechanism, ratio=args.ratio, method=args.method, epochs=epochs,
        peer_count=args.peers, epsilon=args.epsilon, dim=args.dim, knn_k=args.knn_k,
        seeds=args.seeds, mask_files=args.mask_files, out=args.out,
    )
    report = bench.run_experiment(config)
    agg = report.aggregate()
    print(json.dumps({"out": args.out, **bench.report_row(report)}))
    if report.partial:
        errors = "; ".join(f"seed {s.seed}: {s.error}" for s in report.seeds if s.error)
        print(f"error: {agg['n_failed']} of {len(report.seeds)} seeds failed ({errors})",
              file=sys.stderr)
        return 1
    return 0


def _mask_gen(args) -> int:
    if args.shape:
        n, m = (int(v) for v in args.shape.lower().split("x"))
        if args.mechanism != "mcar":
            raise M3ImputeError("--shape only supports mcar; pass --dataset for mar/mnar")
        M = dataio.gen_mcar(n, m, args.ratio, stream(args.seed, "mask"))
    elif args.dataset:
        config = bench.ExperimentConfig(dataset=args.dataset, schema=args.schema,
                                        data_dir=args.data_dir, mechanism=args.mechanism,
                                        ratio=args.ratio, seeds=[args.seed])
        data = bench.load_experiment_data(config)
        M = bench.experiment_mask(config, data.values, args.seed)
    else:
        raise M3ImputeError("mask gen needs --shape or --dataset")
    dataio.save_mask(args.out, M)
    print(f"{args.out}: {M.shape[0]}x{M.shape[1]}, observed {dataio.observed_fraction(M):.4f}")
    return 0


def _mask_export(args) -> int:
    config = bench.ExperimentConfig(dataset=args.dataset, schema=args.schema,
                                    data_dir=args.data_dir, mechanism=args.mechanism,
                                    ratio=args.ratio, seeds=args.seeds)
    for path in bench.export_masks(config, args.out_dir):
        print(path)
    return 0


def _report_merge(args) -> int:
    rows = bench.merge_reports(args.reports, args.out)
    print(f"{args.out}: {len(rows)} rows")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run":
        handler = _run
    elif args.command == "mask":
        handler = _mask_gen if args.mask_command == "gen" else _mask_export
    else:
        handler = _report_merge
    try:
        return handler(args)
    except (M3ImputeError, OSError, ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
