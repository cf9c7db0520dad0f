"""Command line entry point: train, bench-gemm, analyze-ticket, compare."""
# pylint: disable=W1203
import argparse
import logging
import sys
from typing import Optional, Sequence

from lts_qat.bench import DENSITIES, analyze_ticket, compare_runs, convnet_gemm_shapes, run_bench
from lts_qat.common import LtsError
from lts_qat.config import load_config
from lts_qat.train import train

logger = logging.getLogger("lts-qat.cli")


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with one subcommand per task."""
    parser = argparse.ArgumentParser(
        prog="lts-qat", description="Quantization-aware training with weight freezing")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="Run one training configuration.")
    p.add_argument("--config", type=str, default=None, help="key = value config file.")
    p.add_argument("--seed", type=int, default=None, help="Overrides seed.")
    p.add_argument("--out", type=str, default=None, help="Overrides out_dir.")
    p.add_argument("--deterministic", action="store_true",
                   help="Force the ascending-index kernels.")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="Override one config key; repeatable.")

    p = sub.add_parser("bench-gemm", help="Time the skip-GEMM kernel against dense.")
    p.add_argument("--m", type=int, default=None, help="Output channels.")
    p.add_argument("--n", type=int, default=None, help="Unfolded input features.")
    p.add_argument("--k", type=int, default=None, help="Batch x spatial positions.")
    p.add_argument("--density", type=float, nargs="+", default=list(DENSITIES),
                   help="Frozen-mask densities.")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch", type=int, default=128,
                   help="Batch of the ConvNet-S shapes used when --m/--n/--k are absent.")
    p.add_argument("--out", type=str, default=None, help="CSV output path.")

    p = sub.add_parser("analyze-ticket", help="Recompute ticket_ratio.csv of a run.")
    p.add_argument("--run", type=str, required=True)

    p = sub.add_parser("compare", help="Tabulate summaries of several runs.")
    p.add_argument("--runs", type=str, nargs="+", required=True)
    p.add_argument("--out", type=str, default=None, help="CSV output path.")
    return parser


def _train(args: argparse.Namespace) -> int:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"out_dir={args.out}")
    if args.deterministic:
        overrides.append("deterministic=true")
    config = load_config(args.config, overrides)
    result = train(config)
    print(f"best top1 {result.summary.get('best_top1')} at epoch "
          f"{result.summary.get('best_epoch')}, avg wgs {result.summary.get('avg_wgs')}")
    return 0


def _bench(args: argparse.Namespace) -> int:
    dims = (args.m, args.n, args.k)
    if all(d is not None for d in dims):
        shapes = [dims]
    elif any(d is not None for d in dims):
        raise SystemExit("bench-gemm: give all of --m --n --k or none")
    else:
        shapes = convnet_gemm_shapes(args.batch)
    table = run_bench(shapes, args.density, args.repeats, args.seed, args.out)
    print(table.to_string(index=False))
    return 0


def _analyze(args: argparse.Namespace) -> int:
    curve = analyze_ticket(args.run)
    print(curve[curve["epoch"] == curve["epoch"].min()].to_string(index=False))
    return 0


def _compare(args: argparse.Namespace) -> int:
    runs, table = compare_runs(args.runs)
    print(runs.to_string(index=False))
    print()
    print(table.to_string(index=False))
    if args.out:
        table.to_csv(args.out, index=False, lineterminator="\n")
    return 0


COMMANDS = {"train": _train, "bench-gemm": _bench,
            "analyze-ticket": _analyze, "compare": _compare}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments and run a subcommand."""
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except LtsError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
