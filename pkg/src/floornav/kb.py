"""Three-tier knowledge base: relational graph, semantic vectors, visual grounding.

Semantic documents follow the knowledge-base card layout: one per room, one
per door, one per room-to-room transition. The default embedder is a
token-hash bag-of-words so retrieval stays deterministic and offline;
provider-backed embedders are a drop-in via the same `embed` interface.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import (
    FloorGraph,
    GraphEdge,
    bfs_shortest_path,
    format_size,
    graph_from_payload,
    graph_to_payload,
    name_key,
)
from .ingest import Detection, DetectionSet
from .ingest import detection_summary as summarize_detections

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEFAULT_DIMENSION = 256

_CARDINAL_WORD = {"N": "North", "E": "East", "S": "South", "W": "West"}
_TOKEN_RE = re.compile(r"[a-z0-9]+")


class KnowledgeBaseError(RuntimeError):
    pass


class MissingStoreError(KnowledgeBaseError):
    pass


class StoreVersionError(KnowledgeBaseError):
    pass


class CorruptStoreError(KnowledgeBaseError):
    pass


def cardinal_between(a: tuple[float, float], b: tuple[float, float]) -> str:
    """Dominant-axis compass direction from a to b in screen coordinates (y grows south)."""
    dx, dy = b[0] - a[0], b[1] - a[1]
    if abs(dx) >= abs(dy):
        return "E" if dx >= 0 else "W"
    return "S" if dy > 0 else "N"


def _fmt(v: float) -> str:
    return f"{v:g}"


def _fmt_bbox(bbox: tuple[float, float, float, float]) -> str:
    return "[" + ", ".join(_fmt(v) for v in bbox) + "]"


def _fmt_point(p: tuple[float, float]) -> str:
    return f"({_fmt(p[0])}, {_fmt(p[1])})"


class HashEmbedder:
    """Deterministic token-hash bag-of-words embedding, L2-normalised."""

    def __init__(self, dimension: int = DEFAULT_DIMENSION):
        if dimension <= 0:
            raise ValueError("dimension must be positive")
        self.dimension = dimension

    @staticmethod
    def bucket(token: str, dimension: int = DEFAULT_DIMENSION) -> int:
        digest = hashlib.sha256(token.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "big") % dimension

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dimension, dtype=float)
        for token in _TOKEN_RE.findall(text.casefold()):
            vec[self.bucket(token, self.dimension)] += 1.0
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            # degenerate input (no tokens): zero vector, similarity 0 by convention
            return vec
        return vec / norm


@dataclass(frozen=True)
class SemanticDoc:
    doc_id: str
    kind: str  # room | door | transition
    body: str
    source_refs: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.body:
            raise ValueError("doc body must be non-empty")
        if self.kind not in ("room", "door", "transition"):
            raise ValueError(f"unknown doc kind {self.kind!r}")


@dataclass(frozen=True, eq=False)
class VectorIndex:
    dimension: int
    entries: tuple[tuple[str, np.ndarray], ...]

    def __post_init__(self) -> None:
        ids = [doc_id for doc_id, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate doc_id in vector index")
        for doc_id, vec in self.entries:
            if vec.shape != (self.dimension,):
                raise ValueError(f"vector for {doc_id!r} has wrong dimension")
            if not np.all(np.isfinite(vec)):
                raise ValueError(f"vector for {doc_id!r} has non-finite entries")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, VectorIndex):
            return NotImplemented
        return self.dimension == other.dimension and len(self.entries) == len(other.entries) and all(
            a_id == b_id and np.array_equal(a_vec, b_vec)
            for (a_id, a_vec), (b_id, b_vec) in zip(self.entries, other.entries)
        )


@dataclass(frozen=True, eq=False)
class VisualContext:
    image_ref: str
    detections: DetectionSet
    element_notes: tuple[tuple[str, str], ...] = ()

    def notes(self) -> dict[str, str]:
        return dict(self.element_notes)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, VisualContext):
            return NotImplemented
        return (self.image_ref == other.image_ref
                and self.detections == other.detections
                and self.element_notes == other.element_notes)


@dataclass(frozen=True, eq=False)
class KnowledgeBase:
    building_id: str
    graph: FloorGraph
    docs: tuple[SemanticDoc, ...]
    index: VectorIndex
    visual: VisualContext
    embedder: HashEmbedder = field(default_factory=HashEmbedder)

    def __post_init__(self) -> None:
        doc_ids = {d.doc_id for d in self.docs}
        index_ids = {doc_id for doc_id, _ in self.index.entries}
        if doc_ids != index_ids:
            raise KnowledgeBaseError("docs and vector index are not in bijection")

    def doc(self, doc_id: str) -> SemanticDoc:
        for d in self.docs:
            if d.doc_id == doc_id:
                return d
        raise KeyError(doc_id)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, KnowledgeBase):
            return NotImplemented
        return (self.building_id == other.building_id
                and self.graph == other.graph
                and self.docs == other.docs
                and self.index == other.index
                and self.visual == other.visual)


def _door_note(g: FloorGraph, edge: GraphEdge, det: Detection | None) -> str:
    """Rule-template visual note for a door (VLM hook can replace this)."""
    a, b = edge.from_room, edge.to_room
    lines = []
    if det is not None:
        lines.append(f"Detection: {det.class_name} | Confidence: {det.confidence:.2f}")
        lines.append(f"Bounding box: {_fmt_bbox(det.bbox)}")
        lines.append(f"Center: {_fmt_point(det.center)}")
    lines.append(f"Room A: {a} | Room B: {b}")
    if edge.door_bbox is not None:
        cx = (edge.door_bbox[0] + edge.door_bbox[2]) / 2.0
        cy = (edge.door_bbox[1] + edge.door_bbox[3]) / 2.0
        side = _CARDINAL_WORD[cardinal_between(g.node(a).centroid, (cx, cy))]
        lines.append(f"Wall side: {side} wall of {a}")
        lines.append("Door type: hinged single door")
        lines.append(
            f"Description: Standard interior door connecting {a} to {b}, "
            f"on the {side.lower()} wall of {a}"
        )
    return "\n".join(lines)


def _size_line(g: FloorGraph, name: str) -> str | None:
    node = g.node(name)
    size = format_size(node.size_m2, node.dimensions)
    return f"{name} size: {size}" if size else None


def build_semantic_docs(
    g: FloorGraph,
    dets: DetectionSet,
    annotations: dict[str, str] | None = None,
) -> list[SemanticDoc]:
    """One room card per node, one door card per door edge, one transition card per edge."""
    annotations = annotations or {}
    docs: list[SemanticDoc] = []
    used_ids: set[str] = set()

    def unique(doc_id: str) -> str:
        # double doors between one room pair would collide otherwise
        candidate, n = doc_id, 2
        while candidate in used_ids:
            candidate = f"{doc_id}#{n}"
            n += 1
        used_ids.add(candidate)
        return candidate

    window_sides: dict[str, list[str]] = {}
    for det in dets.windows():
        if not g.nodes:
            break
        nearest = min(g.nodes, key=lambda n: np.hypot(
            n.centroid[0] - det.center[0], n.centroid[1] - det.center[1]))
        side = _CARDINAL_WORD[cardinal_between(nearest.centroid, det.center)]
        window_sides.setdefault(name_key(nearest.name), []).append(f"{side} wall")

    for node in g.nodes:
        lines = [f"Room: {node.name}"]
        size = format_size(node.size_m2, None)
        lines.append(f"Type: {node.kind} | Size: {size}" if size else f"Type: {node.kind}")
        if node.dimensions:
            lines.append(f"Dimensions: {_fmt(node.dimensions[0])} m x {_fmt(node.dimensions[1])} m")
        if node.ocr_confidence is not None:
            lines.append(f"OCR confidence: {node.ocr_confidence:.2f}")

        door_edges = sorted(
            (e for e in g.edges if e.is_door and name_key(node.name) in e.pair_key()),
            key=lambda e: int(e.via.rsplit("D", 1)[1]),
        )
        if door_edges:
            entries = "; ".join(
                f"{e.via} to {e.to_room if name_key(e.from_room) == name_key(node.name) else e.from_room}"
                for e in door_edges
            )
            lines.append(f"Doors ({len(door_edges)}): {entries}")

        windows = window_sides.get(name_key(node.name))
        if windows:
            lines.append(f"Windows ({len(windows)}): " + "; ".join(windows))

        if len(g.adjacency) == len(g.nodes):
            neighbours = g.neighbors(node.name)
            if neighbours:
                entries = "; ".join(
                    f"{other} to {_CARDINAL_WORD[cardinal_between(node.centroid, g.node(other).centroid)]}"
                    for other in neighbours
                )
                lines.append(f"Connected rooms: {entries}")

        note = annotations.get(node.name) or annotations.get(name_key(node.name))
        if note:
            lines.append(f"Surface: {note}")

        docs.append(SemanticDoc(
            doc_id=unique(f"room:{node.name}"), kind="room", body="\n".join(lines),
            source_refs=(node.name,),
        ))

    for edge in g.edges:
        if not edge.is_door:
            continue
        lines = [f"Door: {edge.via}", f"Connects: {edge.from_room} <-> {edge.to_room}"]
        if edge.door_bbox is not None:
            lines.append(f"Position (bbox): {_fmt_bbox(edge.door_bbox)}")
            cx = (edge.door_bbox[0] + edge.door_bbox[2]) / 2.0
            cy = (edge.door_bbox[1] + edge.door_bbox[3]) / 2.0
            side = _CARDINAL_WORD[cardinal_between(g.node(edge.from_room).centroid, (cx, cy))]
            lines.append(f"Wall side: {side} wall of {edge.from_room}")
            lines.append("Door type: hinged single door")
        docs.append(SemanticDoc(
            doc_id=unique(f"door:{edge.via}"), kind="door", body="\n".join(lines),
            source_refs=(edge.from_room, edge.to_room),
        ))

    for edge in g.edges:
        lines = [f"Transition: {edge.from_room} -> {edge.to_room}"]
        if edge.is_door:
            lines.append(f"Via: door | Door ID: {edge.via}")
            if edge.door_bbox is not None:
                lines.append(f"Door position (bbox): {_fmt_bbox(edge.door_bbox)}")
            lines.append(f"Door description: {edge.via} to {edge.to_room}")
        else:
            lines.append("Via: passage")
        for name in (edge.from_room, edge.to_room):
            size_line = _size_line(g, name)
            if size_line:
                lines.append(size_line)
        docs.append(SemanticDoc(
            doc_id=unique(f"transition:{edge.from_room}->{edge.to_room}"),
            kind="transition", body="\n".join(lines),
            source_refs=(edge.from_room, edge.to_room),
        ))

    return docs


def build_visual_context(g: FloorGraph, dets: DetectionSet) -> VisualContext:
    det_by_bbox = {d.bbox: d for d in dets.doors()}
    notes = []
    for edge in g.edges:
        if edge.is_door:
            notes.append((edge.via, _door_note(g, edge, det_by_bbox.get(edge.door_bbox))))
    return VisualContext(image_ref=dets.image_ref, detections=dets,
                         element_notes=tuple(notes))


def build_index(docs: list[SemanticDoc], embedder: HashEmbedder) -> VectorIndex:
    return VectorIndex(
        dimension=embedder.dimension,
        entries=tuple((d.doc_id, embedder.embed(d.body)) for d in docs),
    )


def build_knowledge_base(
    g: FloorGraph,
    dets: DetectionSet,
    building_id: str,
    embedder: HashEmbedder | None = None,
    annotations: dict[str, str] | None = None,
) -> KnowledgeBase:
    """Ingest a validated graph plus detections into the three-tier store."""
    embedder = embedder or HashEmbedder()
    docs = tuple(build_semantic_docs(g, dets, annotations))
    return KnowledgeBase(
        building_id=building_id,
        graph=g,
        docs=docs,
        index=build_index(list(docs), embedder),
        visual=build_visual_context(g, dets),
        embedder=embedder,
    )


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity; 0 against a degenerate zero vector, exactly 1 for equal vectors."""
    if not np.any(u) or not np.any(v):
        return 0.0
    if np.array_equal(u, v):
        return 1.0
    return float(np.clip(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)), -1.0, 1.0))


def retrieve(kb: KnowledgeBase, query: str, k: int) -> list[tuple[SemanticDoc, float]]:
    """Top-k docs by cosine similarity, descending; ties break by doc_id."""
    if k < 0:
        raise ValueError("k must be non-negative")
    if k == 0:
        return []
    qv = kb.embedder.embed(query)
    scored = sorted(
        ((doc_id, cosine(qv, vec)) for doc_id, vec in kb.index.entries),
        key=lambda pair: (-pair[1], pair[0]),
    )
    return [(kb.doc(doc_id), score) for doc_id, score in scored[:k]]


@dataclass(frozen=True)
class NavigationContext:
    """Everything the planner needs for one query, from all three tiers."""

    start: str
    destination: str
    path: tuple[str, ...] | None
    room_docs: tuple[SemanticDoc, ...] = ()
    transition_docs: tuple[SemanticDoc, ...] = ()
    retrieved: tuple[tuple[SemanticDoc, float], ...] = ()
    door_notes: tuple[tuple[str, str], ...] = ()
    detection_summary: str = ""

    @property
    def no_path(self) -> bool:
        return self.path is None

    def as_prompt_block(self) -> str:
        if self.no_path:
            return f"NO ROUTE: {self.start} and {self.destination} are not connected."
        lines = ["ROUTE: " + " -> ".join(self.path)]
        if self.transition_docs:
            lines.append("")
            lines.append("ROUTE KNOWLEDGE:")
            for doc in self.transition_docs:
                lines.append(doc.body)
        if self.door_notes:
            lines.append("")
            lines.append("LANDMARK NOTES:")
            for door_id, note in self.door_notes:
                lines.append(f"[{door_id}] {note}")
        if self.detection_summary:
            lines.append("")
            lines.append(self.detection_summary)
        return "\n".join(lines)


def assemble_context(kb: KnowledgeBase, start: str, destination: str,
                     k: int = 5) -> NavigationContext:
    """Bundle the graph path, on-path semantic docs, retrieval hits and door notes."""
    g = kb.graph
    start = g.node(start).name
    destination = g.node(destination).name
    path = bfs_shortest_path(g, start, destination)
    if path is None:
        return NavigationContext(start=start, destination=destination, path=None)

    docs_by_id = {d.doc_id: d for d in kb.docs}
    room_docs = tuple(
        docs_by_id[f"room:{name}"] for name in path if f"room:{name}" in docs_by_id
    )
    transition_docs = []
    door_ids: list[str] = []
    for a, b in zip(path, path[1:]):
        for edge in g.edges_between(a, b):
            doc = docs_by_id.get(f"transition:{edge.from_room}->{edge.to_room}")
            if doc is not None:
                transition_docs.append(doc)
            if edge.is_door:
                door_ids.append(edge.via)
            break  # one transition card per leg

    notes = kb.visual.notes()
    door_notes = tuple((d, notes[d]) for d in door_ids if d in notes)
    hits = tuple(retrieve(kb, f"navigate from {start} to {destination}", k))
    return NavigationContext(
        start=start,
        destination=destination,
        path=tuple(path),
        room_docs=room_docs,
        transition_docs=tuple(transition_docs),
        retrieved=hits,
        door_notes=door_notes,
        detection_summary=summarize_detections(kb.visual.detections),
    )


# --- persistence (JSON store, atomic write-then-rename, byte-deterministic) ---

_MANIFEST = "manifest.json"
_FILES = ("graph.json", "docs.json", "vectors.json", "visual.json")


def _write_atomic(path: Path, payload) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def persist(kb: KnowledgeBase, directory: str | Path) -> None:
    """Write the store; repeated persists of the same KB are byte-identical."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    _write_atomic(root / _MANIFEST, {
        "schema_version": SCHEMA_VERSION,
        "building_id": kb.building_id,
        "dimension": kb.index.dimension,
    })
    _write_atomic(root / "graph.json", graph_to_payload(kb.graph))
    _write_atomic(root / "docs.json", [
        {"doc_id": d.doc_id, "kind": d.kind, "body": d.body,
         "source_refs": list(d.source_refs)}
        for d in kb.docs
    ])
    _write_atomic(root / "vectors.json", {
        "dimension": kb.index.dimension,
        "rows": [
            {"doc_id": doc_id, "vector": [float(v) for v in vec]}
            for doc_id, vec in kb.index.entries
        ],
    })
    dets = kb.visual.detections
    _write_atomic(root / "visual.json", {
        "image_ref": kb.visual.image_ref,
        "detections": [
            {"class": d.class_name, "confidence": d.confidence,
             "bbox": list(d.bbox), "center": list(d.center)}
            for d in dets.detections
        ],
        "labels": [[name, list(pos)] for name, pos in dets.labels],
        "element_notes": [[door_id, note] for door_id, note in kb.visual.element_notes],
    })


def load(directory: str | Path, embedder: HashEmbedder | None = None) -> KnowledgeBase:
    root = Path(directory)
    manifest_path = root / _MANIFEST
    if not manifest_path.exists():
        raise MissingStoreError(f"no knowledge base at {root}")

    def read(name: str):
        path = root / name
        if not path.exists():
            raise CorruptStoreError(f"missing store file {name}")
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CorruptStoreError(f"corrupted store file {name}: {exc}") from exc

    manifest = read(_MANIFEST)
    version = manifest.get("schema_version")
    if version != SCHEMA_VERSION:
        raise StoreVersionError(
            f"schema version mismatch: store has {version!r}, expected {SCHEMA_VERSION}"
        )

    try:
        graph = graph_from_payload(read("graph.json"))
        docs = tuple(
            SemanticDoc(doc_id=d["doc_id"], kind=d["kind"], body=d["body"],
                        source_refs=tuple(d.get("source_refs", [])))
            for d in read("docs.json")
        )
        vectors = read("vectors.json")
        index = VectorIndex(
            dimension=int(vectors["dimension"]),
            entries=tuple(
                (row["doc_id"], np.array(row["vector"], dtype=float))
                for row in vectors["rows"]
            ),
        )
        visual_payload = read("visual.json")
        dets = DetectionSet(
            image_ref=visual_payload.get("image_ref", ""),
            detections=tuple(
                Detection(class_name=d["class"], confidence=float(d["confidence"]),
                          bbox=tuple(float(v) for v in d["bbox"]),
                          center=tuple(float(v) for v in d["center"]))
                for d in visual_payload.get("detections", [])
            ),
            labels=tuple(
                (name, (float(pos[0]), float(pos[1])))
                for name, pos in visual_payload.get("labels", [])
            ),
        )
        visual = VisualContext(
            image_ref=visual_payload.get("image_ref", ""),
            detections=dets,
            element_notes=tuple(
                (door_id, note) for door_id, note in visual_payload.get("element_notes", [])
            ),
        )
        return KnowledgeBase(
            building_id=str(manifest.get("building_id", "")),
            graph=graph,
            docs=docs,
            index=index,
            visual=visual,
            embedder=embedder or HashEmbedder(index.dimension),
        )
    except (KeyError, TypeError, ValueError, KnowledgeBaseError) as exc:
        if isinstance(exc, KnowledgeBaseError) and not isinstance(exc, CorruptStoreError):
            raise CorruptStoreError(str(exc)) from exc
        if isinstance(exc, CorruptStoreError):
            raise
        raise CorruptStoreError(f"malformed store content: {exc}") from exc
