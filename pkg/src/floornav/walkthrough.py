"""Checkpoint-based walkthrough simulation and success-rate evaluation.

A simulated walker replays a plan's room transitions against a ground-truth
graph; fiducial-marker scans confirm progress, and a scan that resolves to a
different room triggers a reroute from the detected node. The harness
aggregates trials into per-class success rates formatted as "SR% (successes)".
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Callable

from .graph import FloorGraph, UnknownRoomError, bfs_shortest_path, graph_from_payload, \
    graph_to_payload, name_key
from .kb import KnowledgeBase
from .navigation import LlmGateway, NavPlan, NavigationError, navigate

logger = logging.getLogger(__name__)

ROUTE_CLASSES = ("short", "medium", "long")
SHORT_MAX_HOPS = 2
MEDIUM_MAX_HOPS = 5


class UnknownMarkerError(RuntimeError):
    """A scanned marker id is not registered for the building."""


@dataclass(frozen=True)
class Checkpoint:
    marker_id: int
    node: str


@dataclass(frozen=True)
class Confirmed:
    marker_id: int


@dataclass(frozen=True)
class Mismatch:
    marker_id: int
    detected_node: str


@dataclass(frozen=True)
class WalkEvent:
    kind: str  # scanned | arrived | deviated
    detail: str


@dataclass(frozen=True)
class TruthManifest:
    """Ground truth for one building: graph, marker table, accessibility, scale."""

    graph: FloorGraph
    checkpoints: tuple[Checkpoint, ...] = ()
    inaccessible: frozenset[str] = frozenset()
    scale_cm_per_px: float | None = None
    building_id: str = ""

    def __post_init__(self) -> None:
        ids = [c.marker_id for c in self.checkpoints]
        if len(set(ids)) != len(ids):
            raise ValueError("marker ids must be unique per building")
        for c in self.checkpoints:
            if not self.graph.has_room(c.node):
                raise ValueError(f"checkpoint {c.marker_id} names unknown room {c.node!r}")
        object.__setattr__(
            self, "inaccessible", frozenset(name_key(r) for r in self.inaccessible)
        )

    def marker_node(self, marker_id: int) -> str:
        for c in self.checkpoints:
            if c.marker_id == marker_id:
                return c.node
        raise UnknownMarkerError(f"marker {marker_id} is not registered")

    def node_marker(self, room: str) -> int | None:
        key = name_key(room)
        for c in self.checkpoints:
            if name_key(c.node) == key:
                return c.marker_id
        return None

    def is_accessible(self, room: str) -> bool:
        return name_key(room) not in self.inaccessible

    def to_payload(self) -> dict:
        return {
            "building_id": self.building_id,
            "graph": graph_to_payload(self.graph),
            "checkpoints": [
                {"marker_id": c.marker_id, "node": c.node} for c in self.checkpoints
            ],
            "inaccessible": sorted(self.inaccessible),
            "scale_cm_per_px": self.scale_cm_per_px,
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "TruthManifest":
        return cls(
            graph=graph_from_payload(payload["graph"]),
            checkpoints=tuple(
                Checkpoint(marker_id=int(c["marker_id"]), node=str(c["node"]))
                for c in payload.get("checkpoints", [])
            ),
            inaccessible=frozenset(payload.get("inaccessible", [])),
            scale_cm_per_px=payload.get("scale_cm_per_px"),
            building_id=str(payload.get("building_id", "")),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_payload(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path: str | Path) -> "TruthManifest":
        return cls.from_payload(json.loads(Path(path).read_text(encoding="utf-8")))


def confirm_checkpoint(
    truth: TruthManifest, expected: Checkpoint, scanned_marker: int
) -> Confirmed | Mismatch:
    """Compare a scan against the expected marker; a mismatch names where the scan was."""
    detected = truth.marker_node(scanned_marker)  # raises for unregistered markers
    if scanned_marker == expected.marker_id:
        return Confirmed(marker_id=scanned_marker)
    return Mismatch(marker_id=scanned_marker, detected_node=detected)


class FaultModel:
    """Deterministic wrong-scan injector for walkthrough simulation.

    Explicit `injections` map a global scan index to the marker id actually
    scanned; alternatively a seeded probabilistic mode draws per
    (seed, route_id, scan index), so suites replay identically.
    """

    def __init__(
        self,
        injections: dict[int, int] | None = None,
        seed: int | None = None,
        mismatch_rate: float = 0.0,
    ):
        self.injections = dict(injections or {})
        self.seed = seed
        self.mismatch_rate = float(mismatch_rate)
        if self.mismatch_rate > 0 and seed is None:
            raise ValueError("a probabilistic fault model requires a seed")

    @classmethod
    def none(cls) -> "FaultModel":
        return cls()

    def scanned_marker(
        self, route_id: str, scan_index: int, expected: int, truth: TruthManifest
    ) -> int:
        if scan_index in self.injections:
            return self.injections[scan_index]
        if self.mismatch_rate > 0:
            rng = random.Random(f"{self.seed}:{route_id}:{scan_index}")
            if rng.random() < self.mismatch_rate:
                others = sorted(
                    c.marker_id for c in truth.checkpoints if c.marker_id != expected
                )
                if others:
                    return rng.choice(others)
        return expected


@dataclass(frozen=True)
class TrialResult:
    route_id: str
    route_class: str
    success: bool
    reroutes: int = 0
    failure_reason: str | None = None
    events: tuple[WalkEvent, ...] = ()

    def __post_init__(self) -> None:
        if self.success and self.failure_reason is not None:
            raise ValueError("a successful trial cannot carry a failure reason")
        if self.route_class not in ROUTE_CLASSES:
            raise ValueError(f"unknown route class {self.route_class!r}")


@dataclass(frozen=True)
class EvalReport:
    trials: tuple[TrialResult, ...]
    sr_overall: float
    sr_by_class: tuple[tuple[str, float], ...]

    def successes(self, route_class: str | None = None) -> int:
        return sum(
            1 for t in self.trials
            if t.success and (route_class is None or t.route_class == route_class)
        )

    def total(self, route_class: str | None = None) -> int:
        return sum(
            1 for t in self.trials
            if route_class is None or t.route_class == route_class
        )


def classify_route(truth_graph: FloorGraph, start: str, destination: str) -> str:
    """Class by hop count on truth: short <= 2, medium 3-5, long >= 6 or unreachable."""
    path = bfs_shortest_path(truth_graph, start, destination)
    if path is None:
        return "long"
    hops = len(path) - 1
    if hops <= SHORT_MAX_HOPS:
        return "short"
    if hops <= MEDIUM_MAX_HOPS:
        return "medium"
    return "long"


def simulate_walk(
    plan: NavPlan,
    truth: TruthManifest,
    fault_model: FaultModel | None = None,
    rerouter: Callable[[str, str], NavPlan] | None = None,
    route_id: str = "route",
    route_class: str = "short",
    max_reroutes: int = 5,
) -> TrialResult:
    """Replay a plan's transitions against the ground-truth graph.

    The trial succeeds when every room-to-room transition is adjacent in
    truth, no inaccessible room is entered, and the walk ends at the
    destination. Checkpoint mismatches injected by the fault model move the
    walker to the detected node and hand control to `rerouter`.
    """
    fault_model = fault_model or FaultModel.none()
    destination = plan.path[-1]
    current = plan.path[0]
    events: list[WalkEvent] = []
    reroutes = 0
    scan_index = 0
    steps = list(plan.steps)

    def fail(reason: str) -> TrialResult:
        return TrialResult(route_id=route_id, route_class=route_class, success=False,
                           reroutes=reroutes, failure_reason=reason,
                           events=tuple(events))

    if not truth.graph.has_room(current):
        return fail(f"start room {current!r} does not exist in truth")

    i = 0
    while i < len(steps):
        target = steps[i].current_position
        i += 1
        if name_key(target) == name_key(current):
            continue
        if not truth.graph.has_room(target):
            return fail(f"invalid transition: {current} -> {target} (room not in truth)")
        if not truth.graph.adjacent(current, target):
            return fail(f"invalid transition: {current} -> {target}")
        if not truth.is_accessible(target):
            return fail(f"entered inaccessible area: {target}")
        current = truth.graph.node(target).name
        events.append(WalkEvent("arrived", current))

        expected_marker = truth.node_marker(current)
        if expected_marker is None:
            continue
        scanned = fault_model.scanned_marker(route_id, scan_index, expected_marker, truth)
        scan_index += 1
        events.append(WalkEvent("scanned", str(scanned)))
        if scanned == expected_marker:
            continue
        try:
            outcome = confirm_checkpoint(
                truth, Checkpoint(expected_marker, current), scanned
            )
        except UnknownMarkerError:
            logger.warning("route %s: unregistered marker %d scanned", route_id, scanned)
            continue
        assert isinstance(outcome, Mismatch)
        current = outcome.detected_node
        events.append(WalkEvent("deviated", current))
        if rerouter is None:
            return fail(f"checkpoint mismatch at {current} without reroute support")
        if reroutes >= max_reroutes:
            return fail("reroute limit exceeded")
        try:
            new_plan = rerouter(current, destination)
        except (NavigationError, UnknownRoomError) as exc:
            return fail(f"reroute failed: {exc}")
        reroutes += 1
        steps = list(new_plan.steps)
        i = 0

    if name_key(current) != name_key(destination):
        return fail(f"did not reach destination (stopped in {current})")
    return TrialResult(route_id=route_id, route_class=route_class, success=True,
                       reroutes=reroutes, events=tuple(events))


def reroute_from(
    kb: KnowledgeBase,
    current: str,
    destination: str,
    step_size_cm: float,
    gateway: LlmGateway | None = None,
    scale_cm_per_px: float | None = None,
) -> NavPlan:
    """Re-plan from a detected checkpoint, reusing the active step size."""
    plan = navigate(kb, current, destination, step_size_cm,
                    gateway=gateway, scale_cm_per_px=scale_cm_per_px)
    return NavPlan(
        path=plan.path, steps=plan.steps, hazards=plan.hazards,
        rerouted=plan.rerouted, safe=plan.safe, degraded=plan.degraded,
        prior_hazards=plan.prior_hazards, is_reroute=True,
    )


@dataclass(frozen=True)
class RouteSpec:
    route_id: str
    start: str
    destination: str
    route_class: str | None = None


def load_routes(path: str | Path) -> list[RouteSpec]:
    """Route-suite file: JSON array of {route_id, start, destination, class?}."""
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(payload, list):
        raise ValueError(f"{path}: expected a JSON array of routes")
    return [
        RouteSpec(
            route_id=str(r.get("route_id", f"route-{i}")),
            start=str(r["start"]),
            destination=str(r["destination"]),
            route_class=r.get("class"),
        )
        for i, r in enumerate(payload)
    ]


def aggregate_trials(trials: list[TrialResult] | tuple[TrialResult, ...]) -> EvalReport:
    """Fold trial outcomes into per-class and overall success rates."""
    if not trials:
        raise ValueError("empty suite: success rate is undefined")
    trials = tuple(trials)
    by_class: dict[str, list[TrialResult]] = {}
    for t in trials:
        by_class.setdefault(t.route_class, []).append(t)
    sr_by_class = tuple(
        (cls, sum(t.success for t in by_class[cls]) / len(by_class[cls]))
        for cls in ROUTE_CLASSES if cls in by_class
    )
    overall = sum(t.success for t in trials) / len(trials)
    return EvalReport(trials=trials, sr_overall=overall, sr_by_class=sr_by_class)


def evaluate_suite(
    routes: list[RouteSpec],
    kb: KnowledgeBase,
    truth: TruthManifest,
    fault_model: FaultModel | None = None,
    step_size_cm: float = 60.0,
    gateway: LlmGateway | None = None,
    scale_cm_per_px: float | None = None,
) -> EvalReport:
    """Navigate and walk every route; failures become trial records, not errors."""
    if not routes:
        raise ValueError("empty suite: success rate is undefined")
    scale = scale_cm_per_px if scale_cm_per_px is not None else truth.scale_cm_per_px
    trials: list[TrialResult] = []
    for route in routes:
        route_class = route.route_class
        if route_class is None:
            if _endpoints_known(truth.graph, route):
                route_class = classify_route(truth.graph, route.start, route.destination)
            else:
                route_class = "long"
        try:
            plan = navigate(kb, route.start, route.destination, step_size_cm,
                            gateway=gateway, scale_cm_per_px=scale)
        except (UnknownRoomError, NavigationError) as exc:
            trials.append(TrialResult(
                route_id=route.route_id, route_class=route_class,
                success=False, failure_reason=str(exc),
            ))
            continue

        def rerouter(current: str, destination: str) -> NavPlan:
            return reroute_from(kb, current, destination, step_size_cm,
                                gateway=gateway, scale_cm_per_px=scale)

        trials.append(simulate_walk(
            plan, truth, fault_model, rerouter,
            route_id=route.route_id, route_class=route_class,
        ))
    return aggregate_trials(trials)


def _endpoints_known(g: FloorGraph, route: RouteSpec) -> bool:
    return g.has_room(route.start) and g.has_room(route.destination)


def format_sr(successes: int, total: int) -> str:
    """Table-cell format: percentage at two decimals (round-half-up) + count."""
    pct = (Decimal(successes) * 100 / Decimal(total)).quantize(
        Decimal("0.01"), rounding=ROUND_HALF_UP
    )
    return f"{pct} ({successes})"


def format_report_table(report: EvalReport) -> str:
    """Plain-text per-class table: 'SR% (successes)' rows plus the overall line."""
    rows = [("Route class", "SR% (successes)", "Trials")]
    for cls, _ in report.sr_by_class:
        rows.append((cls, format_sr(report.successes(cls), report.total(cls)),
                     str(report.total(cls))))
    rows.append(("overall", format_sr(report.successes(), report.total()),
                 str(report.total())))
    widths = [max(len(r[i]) for r in rows) for i in range(3)]
    lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip()
             for row in rows]
    return "\n".join(lines)


def report_to_payload(report: EvalReport) -> dict:
    return {
        "sr_overall": report.sr_overall,
        "sr_by_class": {cls: sr for cls, sr in report.sr_by_class},
        "table": {
            **{cls: format_sr(report.successes(cls), report.total(cls))
               for cls, _ in report.sr_by_class},
            "overall": format_sr(report.successes(), report.total()),
        },
        "trials": [
            {
                "route_id": t.route_id,
                "class": t.route_class,
                "success": t.success,
                "reroutes": t.reroutes,
                "failure_reason": t.failure_reason,
            }
            for t in report.trials
        ],
    }
