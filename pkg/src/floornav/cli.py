"""Command-line entry point: extract, navigate, walk, eval."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from .extraction import ExtractionError, run_extraction, write_extraction_report
from .gateway import (
    GatewayError,
    HttpProvider,
    LlmGateway,
    MockProvider,
    ProviderConfig,
)
from .graph import UnknownRoomError
from .ingest import (
    DetectionFormatError,
    build_detection_set,
    detection_summary,
    levenshtein_ratio,
    load_detections,
    load_ocr_tokens,
    load_roster,
)
from .kb import KnowledgeBaseError, build_knowledge_base, load as load_kb, persist
from .navigation import NavigationError, NoPathError, plan_to_payload, navigate
from .walkthrough import (
    Checkpoint,
    FaultModel,
    Mismatch,
    TruthManifest,
    UnknownMarkerError,
    confirm_checkpoint,
    format_report_table,
    evaluate_suite,
    load_routes,
    report_to_payload,
    reroute_from,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_GATEWAY = 3
EXIT_DEGRADED = 4

ENV_ENDPOINT = "FLOORNAV_ENDPOINT"
ENV_MODEL = "FLOORNAV_MODEL"
ENV_API_KEY = "FLOORNAV_API_KEY"
ENV_TIMEOUT = "FLOORNAV_TIMEOUT"

PROVIDERS = ("live", "mock", "template-only")


@dataclass
class RunConfig:
    building_id: str = "building"
    provider: str = "template-only"
    kb_dir: Path | None = None
    truth_path: Path | None = None
    mock_fixtures: Path | None = None
    step_size_cm: float = 60.0
    scale_cm_per_px: float | None = None
    seed: int | None = None
    fault_rate: float = 0.0

    def __post_init__(self) -> None:
        if self.provider not in PROVIDERS:
            raise ValueError(f"unknown provider {self.provider!r}")
        if self.provider == "live" and not os.environ.get(ENV_ENDPOINT):
            raise ValueError(f"provider=live requires ${ENV_ENDPOINT}")
        if self.fault_rate > 0 and self.seed is None:
            raise ValueError("a fault rate requires --seed")


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse defaults to exit code 2; we use 1
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def make_gateway(config: RunConfig) -> LlmGateway | None:
    if config.provider == "template-only":
        return None
    if config.provider == "mock":
        if config.mock_fixtures is None:
            raise ValueError("provider=mock requires --mock-fixtures")
        return LlmGateway(MockProvider.load_dir(config.mock_fixtures))
    provider_config = ProviderConfig(
        endpoint=os.environ[ENV_ENDPOINT],
        model_name=os.environ.get(ENV_MODEL, "gpt-4o"),
        auth_env=ENV_API_KEY,
        timeout=float(os.environ.get(ENV_TIMEOUT, "30")),
    )
    return LlmGateway(HttpProvider(provider_config))


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    return RunConfig(
        building_id=getattr(args, "building_id", "building"),
        provider=args.provider,
        kb_dir=Path(args.kb) if getattr(args, "kb", None) else None,
        truth_path=Path(args.truth) if getattr(args, "truth", None) else None,
        mock_fixtures=Path(args.mock_fixtures) if getattr(args, "mock_fixtures", None) else None,
        step_size_cm=getattr(args, "step_size", 60.0),
        scale_cm_per_px=getattr(args, "scale", None),
        seed=getattr(args, "seed", None),
        fault_rate=getattr(args, "fault_rate", 0.0),
    )


def cmd_extract(args: argparse.Namespace) -> int:
    try:
        config = _config_from_args(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if config.provider == "template-only":
        print("error: extract requires provider=mock or live", file=sys.stderr)
        return EXIT_USAGE
    try:
        base = load_detections(args.detections, image_ref=args.image or "")
        tokens = load_ocr_tokens(*args.ocr) if args.ocr else []
        roster = load_roster(args.roster) if args.roster else None
        dets = build_detection_set(
            image_ref=args.image or "",
            detections=base.detections,
            tokens=tokens,
            known=roster,
            rejected=base.rejected,
        )
    except (FileNotFoundError, DetectionFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        gateway = make_gateway(config)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    try:
        result = run_extraction(gateway, args.image or "", dets,
                                llm_critic=args.llm_critic)
    except ExtractionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for attempt, issues in exc.history:
            for issue in issues:
                print(f"  attempt {attempt}: {issue}", file=sys.stderr)
        return EXIT_GATEWAY
    except GatewayError as exc:
        print(f"error: gateway failure: {exc}", file=sys.stderr)
        return EXIT_GATEWAY

    kb = build_knowledge_base(result.graph, dets, config.building_id)
    persist(kb, args.out)
    if args.report:
        write_extraction_report(result, args.report)
    print(f"knowledge base written to {args.out} "
          f"({len(result.graph.nodes)} rooms, {len(result.graph.edges)} edges, "
          f"{result.attempts} attempt(s))")
    print(detection_summary(dets))
    if result.degraded:
        print("warning: extraction degraded; critic checks still failing:",
              file=sys.stderr)
        for issue in result.critic.issues:
            print(f"  - {issue}", file=sys.stderr)
        return EXIT_DEGRADED
    return EXIT_OK


def _suggest_room(kb, name: str) -> str | None:
    names = kb.graph.names()
    if not names:
        return None
    best = max(names, key=lambda n: levenshtein_ratio(name, n))
    return best if levenshtein_ratio(name, best) >= 0.4 else None


def cmd_navigate(args: argparse.Namespace) -> int:
    try:
        config = _config_from_args(args)
        gateway = make_gateway(config)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        kb = load_kb(config.kb_dir)
    except KnowledgeBaseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO

    try:
        plan = navigate(kb, args.start, args.destination, config.step_size_cm,
                        gateway=gateway, scale_cm_per_px=config.scale_cm_per_px)
    except UnknownRoomError as exc:
        message = str(exc)
        for candidate in (args.start, args.destination):
            if not kb.graph.has_room(candidate):
                suggestion = _suggest_room(kb, candidate)
                if suggestion:
                    message += f"; did you mean {suggestion!r}?"
                break
        print(f"error: {message}", file=sys.stderr)
        return EXIT_USAGE
    except NoPathError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except GatewayError as exc:
        print(f"error: gateway failure: {exc}", file=sys.stderr)
        return EXIT_GATEWAY

    for step in plan.steps:
        print(f"{step.step}. {step.action} [heading {step.heading_after_step}] "
              f"at {step.current_position} -- confirm: {step.confirmation}")
    payload = plan_to_payload(plan)
    safety = payload["safety"]
    print(f"safety: safe={str(safety['safe']).lower()} "
          f"rerouted={str(plan.rerouted).lower()}")
    for hazard in safety["hazards"]:
        print(f"  - [severity {hazard['severity']}] {hazard['hazard_type']} "
              f"at {hazard['location']}")
    print(f"  recommendation: {safety['recommendation']}")
    if args.plan_out:
        Path(args.plan_out).write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    return EXIT_OK


def cmd_walk(args: argparse.Namespace) -> int:
    try:
        config = _config_from_args(args)
        gateway = make_gateway(config)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        kb = load_kb(config.kb_dir)
        truth = TruthManifest.load(config.truth_path)
    except (KnowledgeBaseError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    if config.scale_cm_per_px is None:
        config.scale_cm_per_px = truth.scale_cm_per_px

    transcript: list[str] = []

    def say(line: str) -> None:
        transcript.append(line)
        print(line)

    def finish(code: int) -> int:
        if args.transcript:
            Path(args.transcript).write_text("\n".join(transcript) + "\n",
                                             encoding="utf-8")
        return code

    try:
        plan = navigate(kb, args.start, args.destination, config.step_size_cm,
                        gateway=gateway, scale_cm_per_px=config.scale_cm_per_px)
    except (UnknownRoomError, NavigationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except GatewayError as exc:
        print(f"error: gateway failure: {exc}", file=sys.stderr)
        return EXIT_GATEWAY

    destination = plan.path[-1]
    say(f"walking {plan.path[0]} -> {destination} ({len(plan.steps)} steps)")
    current = plan.path[0]
    steps = list(plan.steps)
    i = 0
    while i < len(steps):
        step = steps[i]
        i += 1
        say(f"{step.step}. {step.action} -- {step.confirmation}")
        target = step.current_position
        if kb.graph.has_room(target):
            target = kb.graph.node(target).name
        if target.lower() == current.lower():
            continue
        current = target
        marker = truth.node_marker(current)
        if marker is None:
            continue
        say(f"scan checkpoint at {current} (expected marker {marker}):")
        line = sys.stdin.readline()
        if not line:
            say("aborted: end of input")
            return finish(EXIT_OK)
        scanned_text = line.strip()
        transcript.append(f"> {scanned_text}")
        try:
            scanned = int(scanned_text)
        except ValueError:
            say(f"alert: {scanned_text!r} is not a marker id; continuing")
            continue
        try:
            outcome = confirm_checkpoint(truth, Checkpoint(marker, current), scanned)
        except UnknownMarkerError:
            say(f"alert: unknown marker {scanned}; continuing")
            continue
        if isinstance(outcome, Mismatch):
            say(f"alert: checkpoint mismatch, you are at {outcome.detected_node}")
            current = outcome.detected_node
            try:
                new_plan = reroute_from(kb, current, destination, config.step_size_cm,
                                        gateway=gateway,
                                        scale_cm_per_px=config.scale_cm_per_px)
            except (NavigationError, UnknownRoomError) as exc:
                say(f"reroute failed: {exc}")
                return finish(EXIT_OK)
            say(f"reroute: {current} -> {destination} ({len(new_plan.steps)} steps)")
            steps = list(new_plan.steps)
            i = 0
            continue
        say(f"confirmed at {current}")
    say("arrived")
    return finish(EXIT_OK)


def cmd_eval(args: argparse.Namespace) -> int:
    try:
        config = _config_from_args(args)
        gateway = make_gateway(config)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        kb = load_kb(config.kb_dir)
        truth = TruthManifest.load(config.truth_path)
        routes = load_routes(args.suite)
    except (KnowledgeBaseError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    if not routes:
        print("error: empty suite (SR undefined)", file=sys.stderr)
        return EXIT_USAGE

    fault_model = FaultModel(seed=config.seed, mismatch_rate=config.fault_rate) \
        if config.fault_rate > 0 else FaultModel.none()
    try:
        report = evaluate_suite(routes, kb, truth, fault_model,
                                step_size_cm=config.step_size_cm, gateway=gateway,
                                scale_cm_per_px=config.scale_cm_per_px)
    except GatewayError as exc:
        print(f"error: gateway failure: {exc}", file=sys.stderr)
        return EXIT_GATEWAY
    print(format_report_table(report))
    if args.report:
        Path(args.report).write_text(
            json.dumps(report_to_payload(report), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="floornav",
                     description="Floor-plan knowledge extraction and navigation")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--provider", choices=PROVIDERS, default="template-only")
        p.add_argument("--mock-fixtures", help="mock fixture directory (provider=mock)")
        p.add_argument("--step-size", type=float, default=60.0,
                       help="walking step size in cm")
        p.add_argument("--scale", type=float, default=None,
                       help="pixel scale in cm/px (enables clearance checks)")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("extract", help="build a knowledge base from detection/OCR files")
    common(p)
    p.add_argument("--detections", required=True, help="detection JSON file")
    p.add_argument("--ocr", action="append", default=[],
                   help="OCR token JSON file (repeatable)")
    p.add_argument("--roster", help="known room labels, one per line")
    p.add_argument("--image", help="floor plan image reference")
    p.add_argument("--building-id", default="building")
    p.add_argument("--out", required=True, help="knowledge base directory")
    p.add_argument("--report", help="extraction report JSON path")
    p.add_argument("--llm-critic", action="store_true",
                   help="also consult the LLM self-critic")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("navigate", help="plan a route between two rooms")
    common(p)
    p.add_argument("--kb", required=True, help="knowledge base directory")
    p.add_argument("--plan-out", help="write the plan JSON here")
    p.add_argument("start")
    p.add_argument("destination")
    p.set_defaults(func=cmd_navigate)

    p = sub.add_parser("walk", help="interactive checkpoint-confirmed walkthrough")
    common(p)
    p.add_argument("--kb", required=True)
    p.add_argument("--truth", required=True, help="truth manifest JSON")
    p.add_argument("--transcript", help="write the session transcript here")
    p.add_argument("start")
    p.add_argument("destination")
    p.set_defaults(func=cmd_walk)

    p = sub.add_parser("eval", help="run a route suite and report success rates")
    common(p)
    p.add_argument("--kb", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--suite", required=True, help="route suite JSON")
    p.add_argument("--report", help="write the machine-readable report here")
    p.add_argument("--fault-rate", type=float, default=0.0,
                   help="seeded checkpoint-mismatch rate")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
