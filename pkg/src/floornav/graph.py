"""Spatial knowledge graph: room nodes, door/passage edges, boolean adjacency.

The graph couples three views that must agree: an ordered node list, an edge
list, and a symmetric {0,1} adjacency matrix with zero diagonal. Validation
reports disagreements instead of raising so a caller can feed the findings
back to whatever produced the graph.
"""

from __future__ import annotations

import json
import math
import re
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ROOM_KINDS = ("room", "hallway", "elevator", "stairs", "other")
PASSAGE = "passage"
DOOR_ID_RE = re.compile(r"^Door_D\d+$")

# validation rule identifiers
RULE_LENGTH = "length_consistency"
RULE_SYMMETRY = "symmetry"
RULE_VALUES = "value_domain"
RULE_MIN_DEGREE = "min_degree"
RULE_AGREEMENT = "edge_matrix_agreement"

_AREA_RE = re.compile(r"([0-9]*\.?[0-9]+)\s*m2")
_DIMS_RE = re.compile(r"([0-9]*\.?[0-9]+)\s*m?\s*[x×]\s*([0-9]*\.?[0-9]+)\s*m")


class GraphError(ValueError):
    """Structural problem that prevents building or querying a graph."""


class UnknownRoomError(GraphError):
    """A referenced room name does not exist in the graph."""


def name_key(name: str) -> str:
    """Canonical room-name form: whitespace-trimmed, case-insensitive."""
    return name.strip().lower()


def infer_kind(name: str) -> str:
    """Guess the semantic room kind from its label."""
    low = name_key(name)
    if any(tag in low for tag in ("hall", "corridor", "couloir")):
        return "hallway"
    if any(tag in low for tag in ("elevator", "lift", "ascenseur")):
        return "elevator"
    if any(tag in low for tag in ("stair", "escalier")):
        return "stairs"
    return "room"


def parse_size(text: str | None) -> tuple[float | None, tuple[float, float] | None]:
    """Extract (area_m2, (width_m, height_m)) from a free-text size string."""
    if not text:
        return None, None
    area = None
    dims = None
    m = _AREA_RE.search(text)
    if m:
        area = float(m.group(1))
    m = _DIMS_RE.search(text)
    if m:
        dims = (float(m.group(1)), float(m.group(2)))
    return area, dims


def format_size(area_m2: float | None, dimensions: tuple[float, float] | None) -> str | None:
    """Render a size string: '11.85 m2 (3.5 m x 3.4 m)' (either part optional)."""
    parts = []
    if area_m2 is not None:
        parts.append(f"{area_m2:g} m2")
    if dimensions is not None:
        dims = f"{dimensions[0]:g} m x {dimensions[1]:g} m"
        parts.append(f"({dims})" if parts else dims)
    return " ".join(parts) if parts else None


@dataclass(frozen=True)
class RoomNode:
    """A room with its label, kind, pixel centroid and optional metadata."""

    name: str
    kind: str = "room"
    centroid: tuple[float, float] = (0.0, 0.0)
    dimensions: tuple[float, float] | None = None  # metres (width, height)
    size_m2: float | None = None
    ocr_confidence: float | None = None
    synthetic_centroid: bool = False  # True when no OCR label grounded this room

    def __post_init__(self) -> None:
        if not self.name or not self.name.strip():
            raise GraphError("room name must be non-empty")
        if self.kind not in ROOM_KINDS:
            raise GraphError(f"unknown room kind {self.kind!r} for {self.name!r}")
        x, y = self.centroid
        if not (math.isfinite(x) and math.isfinite(y)) or x < 0 or y < 0:
            raise GraphError(f"centroid of {self.name!r} must be finite and non-negative")
        object.__setattr__(self, "centroid", (float(x), float(y)))
        if self.dimensions is not None:
            w, h = self.dimensions
            object.__setattr__(self, "dimensions", (float(w), float(h)))
        if self.ocr_confidence is not None and not 0.0 <= self.ocr_confidence <= 1.0:
            raise GraphError(f"ocr_confidence of {self.name!r} outside [0, 1]")


@dataclass(frozen=True)
class GraphEdge:
    """An adjacency between two rooms, mediated by a door or a passage."""

    from_room: str
    to_room: str
    via: str = PASSAGE
    door_bbox: tuple[float, float, float, float] | None = None
    traversal_cost: float = 1.0  # stored, never consumed by hop-count planning

    def __post_init__(self) -> None:
        if name_key(self.from_room) == name_key(self.to_room):
            raise GraphError(f"edge endpoints must differ: {self.from_room!r}")
        if self.via != PASSAGE and not DOOR_ID_RE.match(self.via):
            raise GraphError(
                f"edge mediation must be {PASSAGE!r} or 'Door_D<n>', got {self.via!r}"
            )
        if self.door_bbox is not None:
            x1, y1, x2, y2 = self.door_bbox
            if not (x1 < x2 and y1 < y2):
                raise GraphError(f"degenerate door bbox {list(self.door_bbox)}")
            object.__setattr__(self, "door_bbox", tuple(float(v) for v in self.door_bbox))
        if self.traversal_cost < 0:
            raise GraphError("traversal_cost must be non-negative")

    @property
    def is_door(self) -> bool:
        return self.via != PASSAGE

    def endpoints(self) -> tuple[str, str]:
        return self.from_room, self.to_room

    def pair_key(self) -> frozenset[str]:
        return frozenset((name_key(self.from_room), name_key(self.to_room)))


@dataclass(frozen=True)
class Violation:
    rule: str
    message: str
    offender: str


@dataclass(frozen=True)
class ValidationReport:
    passed: bool
    violations: tuple[Violation, ...]

    def rules(self) -> set[str]:
        return {v.rule for v in self.violations}


@dataclass(frozen=True, eq=False)
class FloorGraph:
    """Immutable (nodes, edges, adjacency) triple. Use validate_graph to audit it."""

    nodes: tuple[RoomNode, ...]
    edges: tuple[GraphEdge, ...]
    adjacency: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple(self.edges))
        keys = [name_key(n.name) for n in self.nodes]
        if len(set(keys)) != len(keys):
            raise GraphError("duplicate room names in graph")
        try:
            adj = np.array(self.adjacency)
        except ValueError as exc:
            raise GraphError(f"adjacency rows have unequal lengths: {exc}") from exc
        if adj.dtype == object:
            raise GraphError("adjacency rows have unequal lengths")
        if adj.size == 0:
            adj = adj.reshape(0, 0)
        adj.setflags(write=False)
        object.__setattr__(self, "adjacency", adj)
        object.__setattr__(self, "_index", {k: i for i, k in enumerate(keys)})

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FloorGraph):
            return NotImplemented
        return (
            self.nodes == other.nodes
            and self.edges == other.edges
            and np.array_equal(self.adjacency, other.adjacency)
        )

    def __len__(self) -> int:
        return len(self.nodes)

    def names(self) -> tuple[str, ...]:
        return tuple(n.name for n in self.nodes)

    def index_of(self, name: str) -> int:
        try:
            return self._index[name_key(name)]
        except KeyError:
            raise UnknownRoomError(f"unknown room {name!r}") from None

    def node(self, name: str) -> RoomNode:
        return self.nodes[self.index_of(name)]

    def has_room(self, name: str) -> bool:
        return name_key(name) in self._index

    def neighbors(self, name: str) -> list[str]:
        """Adjacent room names in ascending node-index order."""
        i = self.index_of(name)
        return [self.nodes[j].name for j in np.flatnonzero(self.adjacency[i])]

    def degree(self, name: str) -> int:
        return int(self.adjacency[self.index_of(name)].sum())

    def adjacent(self, a: str, b: str) -> bool:
        return bool(self.adjacency[self.index_of(a), self.index_of(b)])

    def edges_between(self, a: str, b: str) -> tuple[GraphEdge, ...]:
        key = frozenset((name_key(a), name_key(b)))
        return tuple(e for e in self.edges if e.pair_key() == key)


def rebuild_adjacency(nodes: list[RoomNode] | tuple[RoomNode, ...],
                      edges: list[GraphEdge] | tuple[GraphEdge, ...]) -> np.ndarray:
    """Recompute the adjacency matrix from the edge list (set semantics).

    Symmetric, zero-diagonal, idempotent; duplicate edges collapse to one bit.
    """
    index = {name_key(n.name): i for i, n in enumerate(nodes)}
    adj = np.zeros((len(index), len(index)), dtype=int)
    for e in edges:
        for endpoint in e.endpoints():
            if name_key(endpoint) not in index:
                raise UnknownRoomError(
                    f"edge {e.from_room!r}-{e.to_room!r} references unknown room {endpoint!r}"
                )
        i, j = index[name_key(e.from_room)], index[name_key(e.to_room)]
        adj[i, j] = adj[j, i] = 1
    return adj


def validate_graph(g: FloorGraph) -> ValidationReport:
    """Audit a graph against the structural rules; never raises on bad content."""
    violations: list[Violation] = []
    n = len(g.nodes)
    adj = g.adjacency

    square = adj.ndim == 2 and adj.shape[0] == adj.shape[1]
    if not square or adj.shape[0] != n:
        violations.append(Violation(
            RULE_LENGTH,
            f"adjacency shape {tuple(adj.shape)} does not match {n} nodes",
            "adjacency_matrix",
        ))

    if square and not np.array_equal(adj, adj.T):
        bad = np.argwhere(adj != adj.T)
        i, j = (int(v) for v in bad[0])
        violations.append(Violation(
            RULE_SYMMETRY,
            f"matrix[{i}][{j}] != matrix[{j}][{i}] (matrix must be symmetric)",
            f"({i},{j})",
        ))

    values = set(np.unique(adj)) if adj.size else set()
    if not values <= {0, 1}:
        violations.append(Violation(
            RULE_VALUES,
            f"matrix values must be in {{0,1}}, found {sorted(values - {0, 1})}",
            "adjacency_matrix",
        ))
    if square and adj.size and np.any(np.diagonal(adj) != 0):
        i = int(np.flatnonzero(np.diagonal(adj))[0])
        violations.append(Violation(
            RULE_VALUES, f"diagonal must be zero, matrix[{i}][{i}] != 0", f"({i},{i})"
        ))

    in_edges = {k for e in g.edges for k in (name_key(e.from_room), name_key(e.to_room))}
    for node in g.nodes:
        if name_key(node.name) not in in_edges:
            violations.append(Violation(
                RULE_MIN_DEGREE,
                f"room {node.name!r} appears in no edge (EVERY NODE MUST HAVE >= 1 EDGE)",
                node.name,
            ))

    if square and adj.shape[0] == n:
        try:
            expected = rebuild_adjacency(g.nodes, g.edges)
        except UnknownRoomError as exc:
            violations.append(Violation(RULE_AGREEMENT, str(exc), "edges"))
        else:
            if not np.array_equal(expected, adj):
                for i, j in (tuple(int(v) for v in ij) for ij in np.argwhere(expected != adj)):
                    if i > j:
                        continue
                    a, b = g.nodes[i].name, g.nodes[j].name
                    if expected[i, j]:
                        msg = f"edge {a!r}-{b!r} exists but matrix[{i}][{j}] == 0"
                    else:
                        msg = f"matrix[{i}][{j}] == 1 but no edge links {a!r} and {b!r}"
                    violations.append(Violation(RULE_AGREEMENT, msg, f"({i},{j})"))

    return ValidationReport(passed=not violations, violations=tuple(violations))


def bfs_shortest_path(g: FloorGraph, start: str, destination: str) -> list[str] | None:
    """Hop-count shortest path between two rooms, or None when disconnected.

    Deterministic: neighbours expand in ascending node-index order, so ties
    always resolve toward the lowest-index route.
    """
    si, di = g.index_of(start), g.index_of(destination)
    if si == di:
        return [g.nodes[si].name]
    parent: dict[int, int] = {si: si}
    queue: deque[int] = deque([si])
    while queue:
        cur = queue.popleft()
        for nxt in (int(j) for j in np.flatnonzero(g.adjacency[cur])):
            if nxt in parent:
                continue
            parent[nxt] = cur
            if nxt == di:
                path = [di]
                while path[-1] != si:
                    path.append(parent[path[-1]])
                return [g.nodes[i].name for i in reversed(path)]
            queue.append(nxt)
    return None


def connected_components(g: FloorGraph) -> list[set[str]]:
    """Partition room names into connected components (lowest-index first)."""
    seen: set[int] = set()
    components: list[set[str]] = []
    for root in range(len(g.nodes)):
        if root in seen:
            continue
        comp = {root}
        queue = deque([root])
        while queue:
            cur = queue.popleft()
            for nxt in (int(j) for j in np.flatnonzero(g.adjacency[cur])):
                if nxt not in comp:
                    comp.add(nxt)
                    queue.append(nxt)
        seen |= comp
        components.append({g.nodes[i].name for i in comp})
    return components


# --- serialization (field names mirror the parser JSON schema) ---

def graph_to_payload(g: FloorGraph, approach: str = "") -> dict:
    """Serialize to the parser-schema document (nodes_elements/adjacency_matrix/edges/rooms_info)."""
    nodes_elements = []
    rooms_info = []
    for node in g.nodes:
        entry: dict = {"name": node.name, "kind": node.kind,
                       "centroid": [node.centroid[0], node.centroid[1]]}
        if node.ocr_confidence is not None:
            entry["ocr_confidence"] = node.ocr_confidence
        if node.synthetic_centroid:
            entry["synthetic_centroid"] = True
        nodes_elements.append(entry)

        doors = sorted(
            (e.via for e in g.edges if e.is_door and name_key(node.name) in e.pair_key()),
            key=lambda d: int(d.rsplit("D", 1)[1]),
        )
        connected = g.neighbors(node.name) if len(g.adjacency) == len(g.nodes) else []
        info: dict = {"name": node.name, "doors": doors, "connected_rooms": connected}
        size = format_size(node.size_m2, node.dimensions)
        if size:
            info["size"] = size
        rooms_info.append(info)

    edges = []
    for e in g.edges:
        entry = {"from": e.from_room, "to": e.to_room, "via": e.via}
        if e.door_bbox is not None:
            entry["door_bbox"] = list(e.door_bbox)
        if e.traversal_cost != 1.0:
            entry["traversal_cost"] = e.traversal_cost
        edges.append(entry)

    return {
        "approach": approach,
        "nodes_elements": nodes_elements,
        "adjacency_matrix": [[int(v) for v in row] for row in np.atleast_2d(g.adjacency)]
        if g.adjacency.size else [],
        "edges": edges,
        "rooms_info": rooms_info,
    }


def graph_from_payload(payload: dict) -> FloorGraph:
    """Rebuild a FloorGraph from a parser-schema document."""
    if not isinstance(payload, dict):
        raise GraphError("graph document must be a JSON object")
    info_by_key: dict[str, dict] = {}
    for info in payload.get("rooms_info", []) or []:
        if isinstance(info, dict) and info.get("name"):
            info_by_key[name_key(str(info["name"]))] = info

    nodes = []
    for raw in payload.get("nodes_elements", []) or []:
        if isinstance(raw, str):
            raw = {"name": raw}
        name = str(raw.get("name", ""))
        info = info_by_key.get(name_key(name), {})
        size_m2, dims = parse_size(info.get("size"))
        centroid = raw.get("centroid") or (0.0, 0.0)
        nodes.append(RoomNode(
            name=name,
            kind=raw.get("kind") or infer_kind(name),
            centroid=(float(centroid[0]), float(centroid[1])),
            dimensions=dims,
            size_m2=size_m2,
            ocr_confidence=raw.get("ocr_confidence"),
            synthetic_centroid=bool(raw.get("synthetic_centroid", False)),
        ))

    edges = []
    for raw in payload.get("edges", []) or []:
        bbox = raw.get("door_bbox")
        edges.append(GraphEdge(
            from_room=str(raw["from"]),
            to_room=str(raw["to"]),
            via=str(raw.get("via", PASSAGE)),
            door_bbox=tuple(float(v) for v in bbox) if bbox else None,
            traversal_cost=float(raw.get("traversal_cost", 1.0)),
        ))

    matrix = payload.get("adjacency_matrix")
    adjacency = np.array(matrix, dtype=int) if matrix else rebuild_adjacency(nodes, edges)
    return FloorGraph(nodes=tuple(nodes), edges=tuple(edges), adjacency=adjacency)


def save_graph(g: FloorGraph, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(graph_to_payload(g), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_graph(path: str | Path) -> FloorGraph:
    return graph_from_payload(json.loads(Path(path).read_text(encoding="utf-8")))
