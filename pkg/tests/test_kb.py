import json
import random

import numpy as np
import pytest

import oracles
from floornav.graph import FloorGraph, GraphEdge, RoomNode, rebuild_adjacency
from floornav.ingest import DetectionSet
from floornav.kb import (
    CorruptStoreError,
    HashEmbedder,
    KnowledgeBase,
    MissingStoreError,
    SemanticDoc,
    StoreVersionError,
    assemble_context,
    build_knowledge_base,
    build_semantic_docs,
    cosine,
    load,
    persist,
    retrieve,
)


class TestSemanticDocs:
    def test_golden_room_card(self, golden_graph, golden_dets):
        docs = {d.doc_id: d for d in build_semantic_docs(golden_graph, golden_dets)}
        body = docs["room:Cuisine"].body
        assert "Room: Cuisine" in body
        assert "Type: room | Size: 11.85 m2" in body
        assert "Dimensions: 3.5 m x 3.4 m" in body
        assert "Door_D3 to Repas" in body
        assert "Windows (1): West wall" in body
        assert "Cellier to North" in body
        assert "Repas to South" in body
        assert "Hall to East" in body

    def test_golden_transition_card(self, golden_graph, golden_dets):
        docs = {d.doc_id: d for d in build_semantic_docs(golden_graph, golden_dets)}
        body = docs["transition:Cuisine->Repas"].body
        assert body.splitlines()[0] == "Transition: Cuisine -> Repas"
        assert "Via: door | Door ID: Door_D3" in body
        assert "Door position (bbox): [160, 260, 180, 280]" in body
        assert "Repas size: 38.22 m2 (5.5 m x 6.95 m)" in body

    def test_passage_transition_card_has_no_door_lines(self, golden_graph, golden_dets):
        docs = {d.doc_id: d for d in build_semantic_docs(golden_graph, golden_dets)}
        body = docs["transition:Cuisine->Hall"].body
        assert "Via: passage" in body
        assert "Door ID" not in body

    def test_door_card_wall_side(self, golden_graph, golden_dets):
        docs = {d.doc_id: d for d in build_semantic_docs(golden_graph, golden_dets)}
        body = docs["door:Door_D7"].body
        assert "Connects: Hall <-> Sejour" in body
        assert "Wall side: South wall of Hall" in body

    def test_single_room_graph_yields_one_room_doc_only(self):
        node = RoomNode(name="Studio", centroid=(5, 5))
        g = FloorGraph(nodes=(node,), edges=(), adjacency=np.zeros((1, 1), dtype=int))
        docs = build_semantic_docs(g, DetectionSet(image_ref="x"))
        assert [d.kind for d in docs] == ["room"]

    def test_operator_annotations_become_surface_lines(self, golden_graph, golden_dets):
        docs = build_semantic_docs(golden_graph, golden_dets,
                                   annotations={"Hall": "smooth tile floor"})
        hall = next(d for d in docs if d.doc_id == "room:Hall")
        assert "Surface: smooth tile floor" in hall.body

    def test_source_refs_exist_in_graph(self, golden_graph, golden_dets):
        names = set(golden_graph.names())
        for doc in build_semantic_docs(golden_graph, golden_dets):
            assert set(doc.source_refs) <= names

    def test_double_door_pair_gets_distinct_doc_ids(self):
        nodes = [RoomNode(name="A", centroid=(0.0, 0.0)),
                 RoomNode(name="B", centroid=(200.0, 0.0))]
        edges = [GraphEdge(from_room="A", to_room="B", via="Door_D1",
                           door_bbox=(90.0, 0.0, 110.0, 20.0)),
                 GraphEdge(from_room="A", to_room="B", via="Door_D2",
                           door_bbox=(90.0, 80.0, 110.0, 100.0))]
        g = FloorGraph(nodes=nodes, edges=edges,
                       adjacency=rebuild_adjacency(nodes, edges))
        kb = build_knowledge_base(g, DetectionSet(image_ref="x"), "double")
        ids = [d.doc_id for d in kb.docs if d.kind == "transition"]
        assert len(ids) == len(set(ids)) == 2


class TestHashEmbedder:
    def test_unit_norm(self):
        embedder = HashEmbedder()
        vec = embedder.embed("navigate from Cuisine to Repas")
        assert np.isclose(np.linalg.norm(vec), 1.0)

    def test_deterministic_across_instances(self):
        a = HashEmbedder().embed("Door_D3 to Repas")
        b = HashEmbedder().embed("Door_D3 to Repas")
        assert np.array_equal(a, b)

    def test_disjoint_vocabulary_has_zero_cosine(self):
        # verify the chosen test strings hash into disjoint buckets first
        left, right = "alpha beta gamma", "delta epsilon zeta"
        buckets_left = {HashEmbedder.bucket(t) for t in left.split()}
        buckets_right = {HashEmbedder.bucket(t) for t in right.split()}
        assert not buckets_left & buckets_right
        embedder = HashEmbedder()
        assert cosine(embedder.embed(left), embedder.embed(right)) == 0.0

    def test_empty_text_is_degenerate_zero_vector(self):
        embedder = HashEmbedder()
        zero = embedder.embed("")
        assert not np.any(zero)
        assert cosine(zero, embedder.embed("anything")) == 0.0


class TestRetrieve:
    def test_query_equal_to_doc_body_ranks_first_with_score_one(self, golden_kb):
        doc = golden_kb.doc("transition:Cuisine->Repas")
        ranked = retrieve(golden_kb, doc.body, 1)
        assert ranked[0][0].doc_id == doc.doc_id
        assert ranked[0][1] == 1.0

    def test_k_zero_is_empty(self, golden_kb):
        assert retrieve(golden_kb, "anything", 0) == []

    def test_k_larger_than_corpus_returns_all(self, golden_kb):
        ranked = retrieve(golden_kb, "door", 10_000)
        assert len(ranked) == len(golden_kb.docs)

    def test_matches_bruteforce_similarity_oracle(self):
        rng = random.Random(11)
        words = ["door", "hall", "kitchen", "stairs", "corridor", "window",
                 "tile", "carpet", "north", "south", "narrow", "wide"]
        docs = []
        for i in range(20):
            body = " ".join(rng.choices(words, k=rng.randint(3, 9)))
            docs.append(SemanticDoc(doc_id=f"doc:{i:02d}", kind="room", body=body,
                                    source_refs=()))
        node = RoomNode(name="X", centroid=(0, 0))
        g = FloorGraph(nodes=(node,), edges=(),
                       adjacency=np.zeros((1, 1), dtype=int))
        embedder = HashEmbedder()
        from floornav.kb import VectorIndex, VisualContext

        kb = KnowledgeBase(
            building_id="synthetic", graph=g, docs=tuple(docs),
            index=VectorIndex(dimension=embedder.dimension,
                              entries=tuple((d.doc_id, embedder.embed(d.body))
                                            for d in docs)),
            visual=VisualContext(image_ref="x", detections=DetectionSet(image_ref="x")),
            embedder=embedder,
        )
        query = "narrow corridor with tile floor"
        qv = embedder.embed(query)
        expected = sorted(
            ((d.doc_id, oracles.cosine_brute(qv.tolist(),
                                             embedder.embed(d.body).tolist()))
             for d in docs),
            key=lambda pair: (-pair[1], pair[0]),
        )
        got = retrieve(kb, query, len(docs))
        for (got_doc, got_score), (want_id, want_score) in zip(got, expected):
            assert got_doc.doc_id == want_id
            assert got_score == pytest.approx(want_score, abs=1e-12)

    def test_insertion_order_does_not_change_ranking(self, golden_graph, golden_dets):
        kb = build_knowledge_base(golden_graph, golden_dets, "golden")
        docs = list(kb.docs)
        rng = random.Random(3)
        rng.shuffle(docs)
        from floornav.kb import VectorIndex

        shuffled = KnowledgeBase(
            building_id=kb.building_id, graph=kb.graph, docs=tuple(docs),
            index=VectorIndex(dimension=kb.index.dimension,
                              entries=tuple((d.doc_id, kb.embedder.embed(d.body))
                                            for d in docs)),
            visual=kb.visual, embedder=kb.embedder,
        )
        a = [(d.doc_id, s) for d, s in retrieve(kb, "door to the kitchen", 5)]
        b = [(d.doc_id, s) for d, s in retrieve(shuffled, "door to the kitchen", 5)]
        assert a == b


class TestAssembleContext:
    def test_cuisine_to_repas_includes_door_d3(self, golden_kb):
        ctx = assemble_context(golden_kb, "Cuisine", "Repas")
        assert ctx.path == ("Cuisine", "Repas")
        assert any("Door_D3" in d.body for d in ctx.transition_docs)
        assert any(door_id == "Door_D3" for door_id, _ in ctx.door_notes)

    def test_same_room_has_no_transitions(self, golden_kb):
        ctx = assemble_context(golden_kb, "Repas", "Repas")
        assert ctx.path == ("Repas",)
        assert ctx.transition_docs == ()

    def test_transition_doc_count_equals_path_legs(self, golden_kb):
        ctx = assemble_context(golden_kb, "Repas", "Sejour")
        assert len(ctx.path) == 4  # Repas -> Cuisine -> Hall -> Sejour
        assert len(ctx.transition_docs) == 3

    def test_no_path_marker(self, golden_graph, golden_dets):
        lonely = RoomNode(name="Island", centroid=(9000, 9000))
        bridge = RoomNode(name="Isle2", centroid=(9100, 9000))
        nodes = golden_graph.nodes + (lonely, bridge)
        edges = golden_graph.edges + (GraphEdge(from_room="Island", to_room="Isle2"),)
        g = FloorGraph(nodes=nodes, edges=edges,
                       adjacency=rebuild_adjacency(nodes, edges))
        kb = build_knowledge_base(g, golden_dets, "golden")
        ctx = assemble_context(kb, "Cuisine", "Island")
        assert ctx.no_path
        assert "NO ROUTE" in ctx.as_prompt_block()

    def test_only_path_transitions_included(self, golden_kb):
        ctx = assemble_context(golden_kb, "Cuisine", "Hall")
        ids = {d.doc_id for d in ctx.transition_docs}
        assert ids == {"transition:Cuisine->Hall"}


class TestPersistence:
    def test_round_trip_structural_equality(self, golden_kb, tmp_path):
        persist(golden_kb, tmp_path / "kb")
        loaded = load(tmp_path / "kb")
        assert loaded == golden_kb

    def test_double_persist_is_byte_identical(self, golden_kb, tmp_path):
        persist(golden_kb, tmp_path / "kb")
        first = {p.name: p.read_bytes() for p in (tmp_path / "kb").iterdir()}
        persist(golden_kb, tmp_path / "kb")
        second = {p.name: p.read_bytes() for p in (tmp_path / "kb").iterdir()}
        assert first == second

    def test_missing_store(self, tmp_path):
        with pytest.raises(MissingStoreError):
            load(tmp_path / "empty")

    def test_version_mismatch(self, golden_kb, tmp_path):
        persist(golden_kb, tmp_path / "kb")
        manifest = tmp_path / "kb" / "manifest.json"
        payload = json.loads(manifest.read_text())
        payload["schema_version"] = 99
        manifest.write_text(json.dumps(payload))
        with pytest.raises(StoreVersionError, match="99"):
            load(tmp_path / "kb")

    def test_corrupted_file(self, golden_kb, tmp_path):
        persist(golden_kb, tmp_path / "kb")
        (tmp_path / "kb" / "vectors.json").write_text("{broken")
        with pytest.raises(CorruptStoreError, match="vectors.json"):
            load(tmp_path / "kb")

    def test_broken_bijection_is_corrupt(self, golden_kb, tmp_path):
        persist(golden_kb, tmp_path / "kb")
        docs_path = tmp_path / "kb" / "docs.json"
        docs = json.loads(docs_path.read_text())
        docs.pop()
        docs_path.write_text(json.dumps(docs))
        with pytest.raises(CorruptStoreError):
            load(tmp_path / "kb")

    def test_vectors_round_trip_bit_equal(self, golden_kb, tmp_path):
        persist(golden_kb, tmp_path / "kb")
        loaded = load(tmp_path / "kb")
        for (a_id, a_vec), (b_id, b_vec) in zip(golden_kb.index.entries,
                                                loaded.index.entries):
            assert a_id == b_id
            assert np.array_equal(a_vec, b_vec)


class TestBijectionInvariant:
    def test_mismatched_index_rejected(self, golden_graph, golden_dets):
        kb = build_knowledge_base(golden_graph, golden_dets, "golden")
        from floornav.kb import KnowledgeBaseError, VectorIndex

        with pytest.raises(KnowledgeBaseError, match="bijection"):
            KnowledgeBase(
                building_id="x", graph=kb.graph, docs=kb.docs,
                index=VectorIndex(dimension=kb.index.dimension,
                                  entries=kb.index.entries[:-1]),
                visual=kb.visual, embedder=kb.embedder,
            )

    def test_every_door_doc_refers_to_a_door_edge(self, golden_kb):
        door_ids = {e.via for e in golden_kb.graph.edges if e.is_door}
        for doc in golden_kb.docs:
            if doc.kind == "door":
                assert doc.doc_id.split(":", 1)[1] in door_ids
