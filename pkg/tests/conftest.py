import json

import pytest

import buildings
from floornav.gateway import LlmGateway, MockProvider


@pytest.fixture
def golden_dets():
    return buildings.golden_detections()


@pytest.fixture
def golden_graph():
    return buildings.golden_graph()


@pytest.fixture
def golden_kb(golden_graph, golden_dets):
    from floornav.kb import build_knowledge_base

    return build_knowledge_base(golden_graph, golden_dets, "golden")


def make_gateway(**scripts) -> tuple[LlmGateway, MockProvider]:
    """Mock gateway with per-template response scripts (last entry repeats)."""
    provider = MockProvider()
    for template_id, responses in scripts.items():
        provider.script(template_id, list(responses))
    return LlmGateway(provider), provider


def valid_planner_response(path, door_id=None):
    """A hand-built planner payload that validates against `path`."""
    steps = []
    number = 1
    for room in path[1:]:
        confirmation = f"Pass through {door_id} into {room}" if door_id \
            else f"Enter {room}"
        steps.append({
            "step": number, "action": "Move forward 3", "heading_after_step": "E",
            "sensory_feedback": "Floor texture changes", "current_position": room,
            "confirmation": confirmation,
        })
        number += 1
    steps.append({
        "step": number, "action": "Stop", "heading_after_step": "E",
        "sensory_feedback": "You have arrived", "current_position": path[-1],
        "confirmation": f"Arrived at {path[-1]}",
    })
    return json.dumps(steps)
