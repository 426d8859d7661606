"""``amrbench`` command line."""

from __future__ import annotations

import argparse
import sys

from .balancing import BALANCERS
from .bench import run_benchmark, write_artifacts
from .errors import AMRError
from .scenario import load_config


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="amrbench", description="Dynamic repartitioning benchmark on a simulated rank fabric.")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one scenario through the AMR pipeline")
    run.add_argument("--config", required=True, help="key-value scenario file")
    run.add_argument("--balancer", choices=BALANCERS)
    run.add_argument("--ranks", type=int, metavar="P")
    run.add_argument("--per-level", dest="per_level", action="store_true", default=None, help="balance every level separately")
    run.add_argument("--no-per-level", dest="per_level", action="store_false", help="balance the whole forest at once")
    run.add_argument("--weighted", action="store_true", default=None)
    run.add_argument("--flow-iters", type=int, metavar="N")
    run.add_argument("--max-main-iters", type=int, metavar="N")
    run.add_argument("--seed", type=int, metavar="S")
    run.add_argument("--workers", type=int, default=1, help="threads stepping ranks (results do not depend on it)")
    run.add_argument("--dump-forest", metavar="PATH")
    run.add_argument("--report", metavar="PATH.json")
    run.add_argument("--metrics", metavar="PATH.csv")
    return parser


def _summary(report) -> str:
    lines = [f"{'level':>5} {'count':>7} {'coverage':>9} {'workload':>9} {'memory':>8} {'avg/rank':>9} {'max/rank':>9}"]
    for row in report.levels:
        lines.append(
            f"{row['level']:>5} {row['count']:>7} {100 * row['coverage']:>8.2f}% {100 * row['workload_share']:>8.2f}% "
            f"{100 * row['memory_share']:>7.2f}% {row['avg_per_rank']:>9.3f} {row['max_per_rank']:>9}"
        )
    lines.append(
        f"main iterations: {report.main_iterations} ({report.termination}); "
        f"cells resized: {100 * report.cells_resized_fraction:.1f}%; block growth: {100 * report.block_growth:+.1f}%; "
        f"balanced: {'yes' if report.balanced else 'no'}"
    )
    return "\n".join(lines)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(
            args.config,
            balancer=args.balancer,
            ranks=args.ranks,
            per_level=args.per_level,
            weighted=args.weighted,
            flow_iters=args.flow_iters,
            max_main_iters=args.max_main_iters,
            seed=args.seed,
        )
        report, result = run_benchmark(cfg, workers=args.workers)
        write_artifacts(report, result, args.report, args.metrics, args.dump_forest)
    except (AMRError, OSError, ValueError) as exc:
        print(f"amrbench: error: {exc}", file=sys.stderr)
        return 2
    print(_summary(report))
    return 0


if __name__ == "__main__":
    sys.exit(main())
