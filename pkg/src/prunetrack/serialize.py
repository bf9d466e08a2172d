"""JSON graph/plan files and plain-text pipeline configs.

Graph file (``format: prunetrack-graph``, ``version: 1``)::

    {"format", "version", "metadata", "output",
     "nodes": [{"id", "kind", "inputs", "attrs", "gate", "block",
                "weights": {name: {"shape": [...], "data": <base64 little-endian float64>}}}],
     "head": <node>,
     "gates": [{"id", "granularity", "layer", "block", "tag", "shape", "data"}]}

Plan file (``format: prunetrack-plan``) stores the budget spec, the gate
snapshot hash of the model it was computed from, and one ``"0"/"1"`` string
per gate. Both are written with sorted keys and one-space indentation so that
``dump(load(text)) == text`` byte for byte.
"""
from __future__ import annotations

import base64
import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .graph import GateVector, LayerSpec, ModelGraph
from .planner import BudgetSpec, PruningPlan

GRAPH_FORMAT = "prunetrack-graph"
PLAN_FORMAT = "prunetrack-plan"
VERSION = 1


class FormatError(ValueError):
    pass


def _enc(arr: np.ndarray) -> dict:
    a = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _dec(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(obj["shape"])


def _node_to_dict(n: LayerSpec) -> dict:
    return {"id": n.id, "kind": n.kind, "inputs": list(n.inputs), "attrs": dict(n.attrs),
            "gate": n.gate, "block": n.block,
            "weights": {k: _enc(v) for k, v in n.weights.items()}}


def _node_from_dict(d: dict) -> LayerSpec:
    return LayerSpec(d["id"], d["kind"], list(d["inputs"]),
                     {k: _dec(v) for k, v in d["weights"].items()}, dict(d["attrs"]),
                     d["gate"], d["block"])


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def graph_to_json(g: ModelGraph) -> str:
    doc = {
        "format": GRAPH_FORMAT, "version": VERSION, "metadata": g.metadata, "output": g.output,
        "nodes": [_node_to_dict(n) for n in g.nodes],
        "head": _node_to_dict(g.head),
        "gates": [{"id": gv.id, "granularity": gv.granularity, "layer": gv.layer, "block": gv.block,
                   "tag": gv.tag, **_enc(gv.values)} for gv in g.gates.values()],
    }
    return _dumps(doc)


def graph_from_json(text: str) -> ModelGraph:
    doc = json.loads(text)
    if doc.get("format") != GRAPH_FORMAT:
        raise FormatError("not a prunetrack graph file")
    if doc.get("version") != VERSION:
        raise FormatError(f"unsupported graph file version {doc.get('version')}")
    gates = {}
    for gd in doc["gates"]:
        gates[gd["id"]] = GateVector(gd["id"], _dec(gd), gd["granularity"], gd["layer"], gd["block"], gd["tag"])
    return ModelGraph([_node_from_dict(d) for d in doc["nodes"]], gates,
                      _node_from_dict(doc["head"]), doc["output"], doc["metadata"])


def plan_to_json(p: PruningPlan) -> str:
    doc = {
        "format": PLAN_FORMAT, "version": VERSION,
        "spec": p.spec.to_dict() if p.spec is not None else None,
        "gate_hash": p.gate_hash,
        "masks": {gid: "".join("1" if b else "0" for b in m) for gid, m in p.masks.items()},
        "provenance": p.extra,
    }
    return _dumps(doc)


def plan_from_json(text: str) -> PruningPlan:
    doc = json.loads(text)
    if doc.get("format") != PLAN_FORMAT:
        raise FormatError("not a prunetrack plan file")
    spec = BudgetSpec(**doc["spec"]) if doc["spec"] is not None else None
    masks = {gid: np.array([c == "1" for c in s], dtype=bool) for gid, s in doc["masks"].items()}
    return PruningPlan(masks, spec, doc["gate_hash"], doc.get("provenance") or {})


def file_hash(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def text_hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def save_graph(g: ModelGraph, path) -> str:
    text = graph_to_json(g)
    Path(path).write_text(text)
    return text


def load_graph(path) -> ModelGraph:
    return graph_from_json(Path(path).read_text())


def save_plan(p: PruningPlan, path) -> str:
    text = plan_to_json(p)
    Path(path).write_text(text)
    return text


def load_plan(path) -> PruningPlan:
    return plan_from_json(Path(path).read_text())
