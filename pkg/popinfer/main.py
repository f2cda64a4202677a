"""Command-line entrypoint: simulate, infer, report"""
import argparse
import sys
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from popinfer import __version__
from popinfer.config import settings
from popinfer.core.errors import InputError, PopinferError
from popinfer.core.logging import get_logger, setup_logging
from popinfer.schemas.run import BiasMode, RunConfig
from popinfer.schemas.synth import SynthSpec
from popinfer.services.diagnostics import ResidualReport, build_report
from popinfer.services.ensemble import orchestrate
from popinfer.services.storage import (
    load_csv,
    load_run_config,
    load_synth_spec,
    read_summary,
    save_csv,
    write_report,
    write_rundir,
    write_truth,
)
from popinfer.services.synthetic import generate_synthetic

logger = get_logger(__name__)


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


# ── Commands ───────────────────────────────────────────────────────────────────

def cmd_simulate(args: argparse.Namespace) -> int:
    spec = load_synth_spec(args.config) if args.config else SynthSpec()
    market = generate_synthetic(spec)
    save_csv(market.series, args.out)
    if args.truth:
        write_truth(market.truth, args.truth)
    logger.info("simulate_finished", out=str(args.out), length=len(market.series))
    return 0


def resolve_run_config(args: argparse.Namespace) -> RunConfig:
    """Config file (or defaults) with command-line flags applied on top."""
    cfg = load_run_config(args.config) if args.config else RunConfig()
    data = cfg.model_dump()
    overrides = {
        "runs": args.runs,
        "subset_size": args.subset_size,
        "memory": args.memory,
        "horizon": args.horizon,
        "window": args.window,
        "seed": args.seed,
    }
    data.update({key: value for key, value in overrides.items() if value is not None})
    if args.bias is not None:
        data["bias"]["mode"] = args.bias
    return RunConfig.model_validate(data)


def cmd_infer(args: argparse.Namespace) -> int:
    cfg = resolve_run_config(args)
    series = load_csv(args.series)
    summary, records = orchestrate(series, cfg)
    write_rundir(args.out, series, cfg, summary, records)
    return 0


def format_report(report: ResidualReport, flagged_runs: List[int]) -> str:
    lines = ["coverage:"]
    for row in report.coverage.rows:
        verdict = "pass" if row.passed else "FAIL"
        lines.append(
            f"  {row.level:g} sigma: {row.fraction_outside:.4f} outside (bound {row.bound:.4f}) {verdict}"
        )
    lines.append(f"mean residual: {report.coverage.mean_residual:.6g} (sem {report.coverage.mean_residual_sem:.3g})")
    lines.append(f"directional accuracy: {report.directional_accuracy:.4f}")
    lines.append(f"flagged steps: {len(report.flagged_steps)}")
    lines.append(f"flagged runs: {', '.join(map(str, flagged_runs)) if flagged_runs else 'none'}")
    return "\n".join(lines)


def cmd_report(args: argparse.Namespace) -> int:
    rundir = Path(args.rundir)
    summary = read_summary(rundir)
    series = load_csv(rundir / "series.csv")
    report = build_report(summary, series, rolling_window=settings.rolling_window)
    write_report(report, args.out)
    print(format_report(report, summary.flagged))

    ok = not summary.flagged and report.passed
    logger.info("report_finished", out=str(args.out), passed=ok)
    return 0 if ok else 1


# ── Parser ─────────────────────────────────────────────────────────────────────

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="popinfer",
        description="Infer the agent-type composition behind a price series.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    simulate = sub.add_parser("simulate", help="Generate a synthetic market with a planted composition.")
    simulate.add_argument("--config", type=Path, help="SynthSpec JSON (defaults when omitted).")
    simulate.add_argument("--out", type=Path, required=True, help="Output price CSV.")
    simulate.add_argument("--truth", type=Path, help="Optional JSON-lines truth log.")
    simulate.set_defaults(handler=cmd_simulate)

    infer = sub.add_parser("infer", help="Run the filter ensemble over a price series.")
    infer.add_argument("--config", type=Path, help="RunConfig JSON (defaults when omitted).")
    infer.add_argument("--series", type=Path, required=True, help="Input price CSV.")
    infer.add_argument("--out", type=Path, required=True, help="Run directory to create.")
    infer.add_argument("--runs", type=_positive_int, help="Number of runs M.")
    infer.add_argument("--subset-size", type=_positive_int, help="Agent types per run N.")
    infer.add_argument("--memory", type=_positive_int, help="Strategy memory m.")
    infer.add_argument("--horizon", type=_positive_int, help="Scoring window T.")
    infer.add_argument("--window", type=_positive_int, help="Noise-estimation window W.")
    infer.add_argument("--bias", choices=[mode.value for mode in BiasMode], help="Bias augmentation.")
    infer.add_argument("--seed", type=int, help="Master seed.")
    infer.set_defaults(handler=cmd_infer)

    report = sub.add_parser("report", help="Log-return residuals and calibration of a run directory.")
    report.add_argument("--rundir", type=Path, required=True, help="Run directory written by infer.")
    report.add_argument("--out", type=Path, required=True, help="Report CSV.")
    report.set_defaults(handler=cmd_report)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(debug=settings.debug, json_logs=settings.json_logs)

    try:
        return args.handler(args)
    except (ValidationError, InputError, OSError) as exc:
        # exits with status 2
        parser.error(str(exc))
    except PopinferError as exc:
        logger.error("command_failed", command=args.command, error=str(exc))
        return 1


if __name__ == "__main__":
    sys.exit(main())
