"""Built-in synthetic objects used by the demo pipeline and the tests."""

from __future__ import annotations

import json

from .articulation import ArticulationModel, parse_model


def _box(size, albedo, t=(0.0, 0.0, 0.0)):
    return {"kind": "box", "dimensions": list(size), "albedo": list(albedo),
            "origin": {"xyzw": [0, 0, 0, 1], "t": list(t)}}


def clamp_document(travel: float = 0.2) -> dict:
    """Two-part bar clamp: a red bar with a fixed yellow jaw and a blue jaw sliding along +x."""
    return {
        "root": "bar",
        "parts": [
            {"id": "bar", "geometry": [
                _box((0.70, 0.10, 0.08), (0.85, 0.2, 0.15)),
                _box((0.06, 0.25, 0.10), (0.9, 0.75, 0.2), (0.32, 0.075, 0.0)),
            ]},
            {"id": "jaw", "geometry": [
                _box((0.09, 0.25, 0.13), (0.15, 0.35, 0.85), (0.0, 0.065, 0.0)),
            ]},
        ],
        "joints": [
            {"name": "slide", "kind": "prismatic", "parent": "bar", "child": "jaw",
             "origin": {"xyzw": [0, 0, 0, 1], "t": [-0.26, 0.0, 0.0]},
             "axis": [1.0, 0.0, 0.0], "limits": [0.0, travel]},
        ],
    }


def block_document() -> dict:
    """Single rigid part: a two-colour block."""
    return {
        "root": "block",
        "parts": [{"id": "block", "geometry": [
            _box((0.3, 0.2, 0.12), (0.2, 0.7, 0.3)),
            _box((0.1, 0.1, 0.1), (0.8, 0.3, 0.6), (0.0, 0.0, 0.11)),
        ]}],
        "joints": [],
    }


def clamp_model(travel: float = 0.2) -> ArticulationModel:
    return parse_model(clamp_document(travel))


def block_model() -> ArticulationModel:
    return parse_model(block_document())


SCENES = {"clamp": clamp_document, "block": block_document}


def scene_json(name: str) -> str:
    return json.dumps(SCENES[name](), indent=1)
