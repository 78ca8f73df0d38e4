"""
Command-line entry point.

    cdn-flyprov run --scenario scenarios/quebec-flash-crowd.json --runs 10 --seed 7 --out out/
    cdn-flyprov validate --scenario scenarios/quebec-flash-crowd.json
    cdn-flyprov trace-check --trace out/trace-run-1.jsonl
"""
import argparse
import dataclasses
import logging
import sys
from typing import List, Optional

from pydantic import ValidationError
from tabulate import tabulate

from component_provider import ComponentRepository
from config import configure_logging, load_settings
from domain_model import check_trace_order, provisioning_reference
from errors import CdnError
from scenario_harness import ScenarioConfig, emit_report, report_summary, run_scenario
from trace_collector import read_trace_jsonl
from workflow_engine import WorkflowRepository

logger = logging.getLogger("cdn_flyprov")


def _load_scenario(path: str) -> Optional[ScenarioConfig]:
    try:
        return ScenarioConfig.from_file(path)
    except (OSError, ValueError, ValidationError) as e:
        logger.error(f"Scenario {path} is invalid: {e}")
        return None


def cmd_run(args: argparse.Namespace) -> int:
    config = _load_scenario(args.scenario)
    if config is None:
        return 2
    updates = {}
    if args.runs is not None:
        updates["runs"] = args.runs
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.stochastic:
        updates["pacing"] = "stochastic"
    if updates:
        config = ScenarioConfig.model_validate({**config.model_dump(exclude_unset=True), **updates})

    settings = load_settings()
    if args.base_port is not None:
        settings = dataclasses.replace(settings, base_port=args.base_port)
    logger.info(f"Running '{config.name}' x{config.runs} (seed {config.seed}, base port {settings.base_port})")

    report = run_scenario(config, settings=settings)
    for path in emit_report(report, args.out):
        logger.info(f"  {path}")
    print(report_summary(report))
    return 0 if report.passed else 1


def cmd_validate(args: argparse.Namespace) -> int:
    config = _load_scenario(args.scenario)
    if config is None:
        return 2
    settings = load_settings()
    try:
        repository = ComponentRepository.from_file(settings.repository_file)
        workflows = WorkflowRepository.from_file(settings.plan_file)
    except (OSError, ValueError, CdnError) as e:
        logger.error(f"Repository files unreadable: {e}")
        return 2
    report = repository.validate(workflows.plan_ids())
    if config.component_type:
        try:
            repository.get_type(config.component_type)
        except CdnError as e:
            logger.error(str(e))
            return 1
    if report.ok:
        print(f"{config.name}: scenario and catalogue are consistent "
              f"({len(repository.component_types())} type(s), {len(workflows.plan_ids())} plan(s))")
        return 0
    print(tabulate([[i.kind, i.type_id, i.ref] for i in report.issues], headers=["issue", "type", "reference"]))
    return 1


def cmd_trace_check(args: argparse.Namespace) -> int:
    try:
        trace = read_trace_jsonl(args.trace)
    except (OSError, ValueError) as e:
        logger.error(f"Trace {args.trace} unreadable: {e}")
        return 2
    reference = provisioning_reference(args.microservices, content_pull=not args.no_content_pull, include_bookends=True)
    verdict = check_trace_order(trace, reference)
    print(verdict.verdict)
    if not verdict.conformant:
        index = verdict.divergence_index
        expected = reference[index] if index < len(reference) else "<end of trace>"
        observed = verdict.observed[index] if index < len(verdict.observed) else "<missing>"
        print(f"  expected {expected}, observed {observed}")
    return 0 if verdict.conformant else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cdn-flyprov", description="On-the-fly CDN component provisioning")
    parser.add_argument("--log-level", default=None, help="overrides CDN_FLYPROV_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="replay a scenario end to end")
    run.add_argument("--scenario", required=True)
    run.add_argument("--runs", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--out", default="out")
    run.add_argument("--base-port", type=int, help="overrides CDN_FLYPROV_BASE_PORT")
    run.add_argument("--stochastic", action="store_true", help="exponential inter-arrivals instead of fixed pacing")
    run.set_defaults(func=cmd_run)

    validate = sub.add_parser("validate", help="check a scenario file and the catalogue")
    validate.add_argument("--scenario", required=True)
    validate.set_defaults(func=cmd_validate)

    trace_check = sub.add_parser("trace-check", help="compare a run trace with the reference sequence")
    trace_check.add_argument("--trace", required=True)
    trace_check.add_argument("--microservices", type=int, default=2)
    trace_check.add_argument("--no-content-pull", action="store_true")
    trace_check.set_defaults(func=cmd_trace_check)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        level = args.log_level or load_settings().log_level
    except EnvironmentError as e:
        print(f"Configuration error: {e}", file=sys.stderr)
        return 2
    configure_logging(level)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
