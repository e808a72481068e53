"""
CRAFT harness command line
Subcommands: run, sweep, ablate, report, route, fixtures, calibrate, separation, rescore
"""
import argparse
import sys

from dotenv import load_dotenv
from rich.console import Console
from rich.table import Table

load_dotenv()
from src.utils.mylogger import logging

from src.models.config import RunConfig, apply_overrides
from src.services.data_logger import report as render_report, verify_report_hash
from src.services.metrics import bwt_metric, invariance_audit, load_reference_matrix, op_metric
from src.llm.stream_runner import (
    ablate, calibrate_eta, check_determinism, rescore, route_stream, run_stream, separation, sweep,
)
from src.utils.errors import PipelineError

logger = logging.getLogger(__name__)
console = Console()

MODES = ["craft", "task-wise", "all-in-one", "task-similar-noreg"]


def load_config(args) -> RunConfig:
    if args.config:
        config = RunConfig.load(args.config)
    elif args.profile == "full":
        config = RunConfig.full_profile()
    else:
        config = RunConfig()
    if args.set:
        config = apply_overrides(config, args.set)
    flags = {}
    if args.order_seed is not None:
        flags["stream.order_seed"] = args.order_seed
    if args.output_dir:
        flags["output_dir"] = args.output_dir
    return apply_overrides(config, flags) if flags else config


def parse_values(raw: str):
    values = []
    for item in raw.split(","):
        item = item.strip()
        values.append(int(item) if item.lstrip("-").isdigit() else float(item))
    return values


def print_rows(title: str, rows, columns):
    table = Table(title=title)
    for column in columns:
        table.add_column(column)
    for row in rows:
        table.add_row(*(f"{row[c]:.4f}" if isinstance(row[c], float) else str(row[c]) for c in columns))
    console.print(table)


def cmd_run(args) -> int:
    config = load_config(args)
    if args.check_determinism:
        same = check_determinism(config)
        console.print(f"Determinism: {'ok' if same else 'FAILED'}")
        if not same:
            return 1
    else:
        run_stream(config)
    if not verify_report_hash(config.output_dir):
        console.print("Report hash: FAILED")
        return 1
    result = render_report(config.output_dir)
    console.print(result["summary"])
    return 0 if not result["violations"] else 1


def cmd_sweep(args) -> int:
    rows = sweep(load_config(args), args.axis, parse_values(args.values))
    print_rows(f"Sweep over {args.axis}", rows, ["value", "K", "OP", "BWT", "terminal_sym_kl"])
    return 0


def cmd_ablate(args) -> int:
    config = load_config(args)
    modes = MODES if args.mode == "all" else [args.mode]
    rows = [ablate(config, mode) for mode in modes]
    print_rows("Ablation", rows, ["mode", "K", "OP", "BWT"])
    return 0


def cmd_report(args) -> int:
    result = render_report(args.run_dir)
    console.print(result["summary"])
    return 0 if not result["violations"] else 1


def cmd_route(args) -> int:
    result = route_stream(load_config(args))
    rows = [d.to_row() for d in result["decisions"]]
    print_rows("Routing decisions", rows, ["task", "decision", "best_gid", "d_best",
                                          "runner_gid", "d_runner", "floor"])
    return 0


def cmd_fixtures(args) -> int:
    matrix = load_reference_matrix()
    violations = invariance_audit(matrix)
    console.print(f"Reference matrix: {matrix.size} tasks")
    console.print(f"OP: {op_metric(matrix):.2f}")
    console.print(f"BWT: {bwt_metric(matrix):.2f}")
    console.print(f"Invariance violations: {violations if violations else 'none'}")
    return 0 if not violations else 1


def cmd_calibrate(args) -> int:
    eta = calibrate_eta(load_config(args))
    console.print(f"eta = {eta!r}")
    return 0


def cmd_separation(args) -> int:
    result = separation(load_config(args), parse_values(args.deltas))
    print_rows("Adversarial separation", result["rows"], ["delta", "decision", "d_best", "floor"])
    console.print(f"First spurious merge at delta = {result['first_merge_delta']}")
    return 0


def cmd_rescore(args) -> int:
    result = rescore(args.run_dir)
    console.print(f"Inference parity: {'ok' if not result['mismatches'] else result['mismatches']}")
    return 0 if not result["mismatches"] else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Desk-scale CRAFT continual-learning harness")
    parser.add_argument("--debug", action="store_true", help="Enable debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="Path to a config.json")
        p.add_argument("--profile", choices=["desk", "full"], default="desk")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="Override a config key, e.g. router.delta=0.5")
        p.add_argument("--order-seed", type=int, help="Permute the stream order with this seed")
        p.add_argument("--output-dir", help="Run directory")
        return p

    run = with_config(sub.add_parser("run", help="Run the full pipeline"))
    run.add_argument("--check-determinism", action="store_true")
    run.set_defaults(func=cmd_run)

    sw = with_config(sub.add_parser("sweep", help="Sweep delta, warmup_steps or beta"))
    sw.add_argument("axis", choices=["delta", "warmup_steps", "beta"])
    sw.add_argument("values", help="Comma-separated values")
    sw.set_defaults(func=cmd_sweep)

    ab = with_config(sub.add_parser("ablate", help="Run an ablation mode"))
    ab.add_argument("mode", choices=MODES + ["all"])
    ab.set_defaults(func=cmd_ablate)

    rep = sub.add_parser("report", help="Render the report of a run directory")
    rep.add_argument("run_dir")
    rep.set_defaults(func=cmd_report)

    rt = with_config(sub.add_parser("route", help="Routing-only dry run"))
    rt.set_defaults(func=cmd_route)

    fx = sub.add_parser("fixtures", help="Metrics on the reference evaluation matrix")
    fx.set_defaults(func=cmd_fixtures)

    cal = with_config(sub.add_parser("calibrate", help="Calibrate the eviction threshold"))
    cal.set_defaults(func=cmd_calibrate)

    sep = with_config(sub.add_parser("separation", help="Adversarial separation sweep"))
    sep.add_argument("deltas", help="Comma-separated delta values")
    sep.set_defaults(func=cmd_separation)

    rs = sub.add_parser("rescore", help="Re-score tasks from persisted states")
    rs.add_argument("run_dir")
    rs.set_defaults(func=cmd_rescore)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.debug:
        logging.getLogger().setLevel(logging.DEBUG)
    try:
        return args.func(args)
    except PipelineError as e:
        logger.error(f"Run aborted at task {e.task_id} ({e.stage}): {e.cause}")
        return 2
    except (ValueError, FileNotFoundError) as e:
        logger.error(str(e))
        return 2


if __name__ == "__main__":
    sys.exit(main())
