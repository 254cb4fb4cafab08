"""
Command-line front end.

Subcommands:
    analyze   estimate the treatment effect of one dataset with bootstrap inference
    simulate  run the Monte Carlo study described by a scenario file
    report    compare variance ratios across saved analysis reports
    generate  write one simulated trial to CSV

Exit codes: 0 success, 1 input error, 2 numerical failure.
"""

import argparse
import glob
import sys
import time
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from loguru import logger

from .data_model import OutcomeKind, load_csv, parse_schema_spec, save_csv
from .errors import InputError, InvalidParams, NumericalError, TrialAnalysisError
from .estimators import EstimatorSpec, parse_estimators
from .inference import bootstrap
from .logger_config import setup_logging
from .numerics import DEFAULT_LADDER, CovarianceStructure
from .parallel import resolve_workers
from .reporting import (
    EstimatorReport,
    build_analysis_report,
    format_analysis_table,
    format_metrics_table,
    frame_to_csv,
    load_report,
    metrics_to_frame,
    variance_ratio_frame,
)
from .scenario_config import load_scenario_file, render_calibration
from .simulation import generate_trial, run_scenario

DEFAULT_SCENARIO = Path(__file__).resolve().parent.parent / "scenarios" / "diabetes_k3.cfg"
DEFAULT_BOOT_B = 10_000


def _structure_list(text: str) -> tuple:
    try:
        return tuple(CovarianceStructure(part.strip()).value for part in text.split(",") if part.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _exit_code(exc: BaseException) -> int:
    return 2 if isinstance(exc, NumericalError) else 1


# --- analyze ---------------------------------------------------------------------


def _analysis_specs(args: argparse.Namespace, outcome_kind: OutcomeKind) -> tuple:
    specs, notes = parse_estimators(args.estimators, outcome_kind)
    ladder = args.ladder or tuple(s.value for s in DEFAULT_LADDER)
    configured: List[EstimatorSpec] = []
    for spec in specs:
        if spec.base_name in ("mmrm", "mmrm_star"):
            configured.append(EstimatorSpec.create(spec.name, structure=args.structure, method=args.method))
        elif spec.name == "glmm":
            configured.append(EstimatorSpec.create("glmm", ladder=tuple(ladder)))
            if args.glmm_all_structures:
                configured.extend(EstimatorSpec(f"glmm:{structure}") for structure in ladder)
        elif spec.base_name == "tmle":
            configured.append(EstimatorSpec.create("tmle", trunc=args.trunc))
        else:
            configured.append(spec)
    return configured, notes


def cmd_analyze(args: argparse.Namespace) -> int:
    """Run the requested estimators with bootstrap inference on one dataset."""
    schema = parse_schema_spec(args.schema) if args.schema else None
    outcome_kind = OutcomeKind(args.outcome) if args.outcome else None
    ds = load_csv(args.data, schema=schema, layout=args.layout, outcome_kind=outcome_kind,
                  coerce_monotone=args.coerce_monotone)
    specs, notes = _analysis_specs(args, ds.outcome_kind)
    if not specs:
        raise InvalidParams(f"no requested estimator applies to {ds.outcome_kind.value} outcomes")
    workers = resolve_workers(args.workers)
    logger.info(f"Analyzing {ds!r} with {', '.join(spec.name for spec in specs)}")

    entries: List[EstimatorReport] = []
    failures: Dict[str, str] = {}
    timings: Dict[str, float] = {}
    exit_code = 0
    for spec in specs:
        start_time = time.time()
        try:
            if args.boot > 0:
                result = bootstrap(ds, spec, args.boot, args.seed, args.level, workers, progress=args.progress)
                entries.append(EstimatorReport(result.point, result))
            else:
                entries.append(EstimatorReport(spec(ds)))
        except (TrialAnalysisError, np.linalg.LinAlgError) as exc:
            message = f"{type(exc).__name__}: {exc}"
            logger.error(f"{spec.name}: {message}")
            failures[spec.name] = message
            exit_code = max(exit_code, _exit_code(exc))
            continue
        finally:
            timings[spec.name] = time.time() - start_time
        if not entries[-1].estimate.converged:
            notes.append(f"{spec.name}: point fit did not converge")

    report = build_analysis_report(
        study_id=args.study_id or Path(args.data).stem,
        ds=ds,
        entries=entries,
        seed=args.seed,
        boot_B=args.boot,
        level=args.level,
        failures=failures,
        notes=notes,
        timings=timings if args.timings else None,
    )
    text = report.to_json() if args.format == "json" else frame_to_csv(report.to_frame())
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        logger.info(f"Wrote {args.format} report to {args.out}")
        sys.stdout.write(format_analysis_table(report))
    else:
        sys.stdout.write(text)
    return exit_code


# --- simulate --------------------------------------------------------------------


def cmd_simulate(args: argparse.Namespace) -> int:
    """Run every scenario combination of a scenario file and tabulate the metrics."""
    config = load_scenario_file(args.scenario)
    if args.calibrate:
        sys.stdout.write(render_calibration(config))
        return 0

    replicates = config.replicates if args.replicates is None else args.replicates
    boot_B = config.boot_B if args.boot is None else args.boot
    seed = config.seed if args.seed is None else args.seed
    if replicates == 0:
        names = config.scenario_names()
        config.load_source()
        sys.stdout.write(f"Scenario file {config.path} is valid: {len(names)} combinations\n")
        sys.stdout.write("".join(f"  {name}\n" for name in names))
        return 0

    workers = resolve_workers(args.workers)
    results = []
    for scenario in config.build_scenarios(only=args.only):
        metrics = run_scenario(
            scenario,
            config.estimators_for(scenario.outcome_kind),
            replicates,
            boot_B=boot_B,
            seed=seed,
            level=config.level,
            workers=workers,
            progress=args.progress,
        )
        results.append(metrics)
        sys.stdout.write(format_metrics_table(metrics) + "\n")

    failed = {
        f"{metrics.scenario}/{row.estimator}": sum(row.failures.values())
        for metrics in results
        for row in metrics.rows
        if row.failures
    }
    if failed:
        logger.warning(
            f"{sum(failed.values())} replicate fits failed across {len(failed)} estimator runs: "
            + ", ".join(f"{name} ({count})" for name, count in failed.items())
        )

    if args.out:
        frame_to_csv(metrics_to_frame(results), args.out)
        logger.info(f"Wrote metrics for {len(results)} scenarios to {args.out}")
    return 0


# --- report ----------------------------------------------------------------------


def cmd_report(args: argparse.Namespace) -> int:
    """Variance ratios of every estimator in every matched analysis report."""
    paths = sorted(glob.glob(args.inputs))
    if not paths:
        raise InvalidParams(f"no analysis reports match {args.inputs!r}")
    frame = variance_ratio_frame([load_report(path) for path in paths])
    text = frame_to_csv(frame, args.out)
    if args.out:
        logger.info(f"Wrote {len(frame)} rows from {len(paths)} reports to {args.out}")
    else:
        sys.stdout.write(text)
    return 0


# --- generate --------------------------------------------------------------------


def cmd_generate(args: argparse.Namespace) -> int:
    """Write one simulated trial of a scenario combination to CSV."""
    config = load_scenario_file(args.scenario)
    name = args.only or config.scenario_names()[0]
    scenario = config.build_scenarios(only=name)[0]
    n = scenario.n if args.n is None else args.n
    ds = generate_trial(scenario.source, n, scenario.effect, scenario.dropout, args.seed)
    save_csv(ds, args.out, layout=args.layout)
    logger.info(f"Wrote trial {name} (n={n}, seed={args.seed}) to {args.out}")
    return 0


# --- argument parsing --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--debug", action="store_true", help="Enable debug logging")
    common.add_argument("--log-file", type=Path, default=None, help="Also write a DEBUG log to this file")
    common.add_argument("--workers", type=int, default=1, help="Worker processes, 0 for one per CPU (default: 1)")
    common.add_argument("--progress", action="store_true", help="Show progress bars on stderr")

    parser = argparse.ArgumentParser(
        prog="longitudinal-ate",
        description="Treatment effect estimation for longitudinal trials with dropout",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  longitudinal-ate analyze --data trial.csv --boot 2000 --out report.json
  longitudinal-ate simulate --replicates 0                 # validate the scenario file
  longitudinal-ate simulate --replicates 1000 --boot 0 --workers 8 --out metrics.csv
  longitudinal-ate report --inputs "reports/*.json"
  longitudinal-ate generate --only continuous/beneficial/mar --out trial.csv
        """,
    )
    commands = parser.add_subparsers(dest="command", required=True)

    analyze = commands.add_parser("analyze", parents=[common], help="Analyze one dataset")
    analyze.add_argument("--data", required=True, type=Path, help="Trial CSV file")
    analyze.add_argument("--layout", choices=("wide", "long"), default="wide")
    analyze.add_argument("--outcome", choices=[k.value for k in OutcomeKind], default=None,
                         help="Outcome kind (default: inferred)")
    analyze.add_argument("--schema", default=None, help="Covariates, e.g. 'age:continuous,sex:binary'")
    analyze.add_argument("--coerce-monotone", action="store_true",
                         help="Discard outcomes observed after a subject's first missed visit")
    analyze.add_argument("--estimators", default="all", help="Comma-separated estimator names or 'all'")
    analyze.add_argument("--boot", type=int, default=DEFAULT_BOOT_B,
                         help=f"Bootstrap resamples, 0 to skip (default: {DEFAULT_BOOT_B})")
    analyze.add_argument("--seed", type=int, default=0)
    analyze.add_argument("--level", type=float, default=0.95, help="Confidence level")
    analyze.add_argument("--structure", choices=[s.value for s in CovarianceStructure],
                         default=CovarianceStructure.UNSTRUCTURED.value, help="MMRM residual covariance")
    analyze.add_argument("--method", choices=("reml", "ml"), default="reml", help="MMRM fitting criterion")
    analyze.add_argument("--ladder", type=_structure_list, default=None,
                         help="GLMM working correlations in fallback order")
    analyze.add_argument("--glmm-all-structures", action="store_true",
                         help="Also report a GLMM fit for every structure of the ladder")
    analyze.add_argument("--trunc", type=float, default=0.025, help="TMLE probability floor")
    analyze.add_argument("--study-id", default=None, help="Study identifier (default: data file stem)")
    analyze.add_argument("--out", type=Path, default=None)
    analyze.add_argument("--format", choices=("json", "csv"), default="json")
    analyze.add_argument("--timings", action="store_true", help="Include wall-clock timings in the report")
    analyze.set_defaults(handler=cmd_analyze)

    simulate = commands.add_parser("simulate", parents=[common], help="Run a simulation study")
    simulate.add_argument("--scenario", type=Path, default=DEFAULT_SCENARIO)
    simulate.add_argument("--replicates", type=int, default=None, help="0 validates the file and exits")
    simulate.add_argument("--boot", type=int, default=None, help="Bootstrap resamples per replicate, 0 disables coverage")
    simulate.add_argument("--seed", type=int, default=None)
    simulate.add_argument("--only", default=None, help="Run one combination, e.g. binary/zero/mcar")
    simulate.add_argument("--calibrate", action="store_true", help="Print a [calibration] section and exit")
    simulate.add_argument("--out", type=Path, default=None, help="Metrics CSV")
    simulate.set_defaults(handler=cmd_simulate)

    report = commands.add_parser("report", parents=[common], help="Compare variance ratios across reports")
    report.add_argument("--inputs", required=True, help="Glob of analysis report JSON files")
    report.add_argument("--out", type=Path, default=None)
    report.set_defaults(handler=cmd_report)

    generate = commands.add_parser("generate", parents=[common], help="Write one simulated trial")
    generate.add_argument("--scenario", type=Path, default=DEFAULT_SCENARIO)
    generate.add_argument("--only", default=None, help="Combination name (default: the first)")
    generate.add_argument("--n", type=int, default=None)
    generate.add_argument("--seed", type=int, default=0)
    generate.add_argument("--layout", choices=("wide", "long"), default="wide")
    generate.add_argument("--out", required=True, type=Path)
    generate.set_defaults(handler=cmd_generate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(debug=args.debug, log_file=args.log_file)
    handler: Callable[[argparse.Namespace], int] = args.handler
    try:
        return handler(args)
    except TrialAnalysisError as exc:
        logger.error(f"{type(exc).__name__}: {exc}")
        return _exit_code(exc)
    except OSError as exc:
        logger.error(f"{exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
