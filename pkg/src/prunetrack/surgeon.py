"""Apply a PruningPlan to a ModelGraph.

``zero_pruned`` silences dropped entries in place of removing them;
``rewrite`` physically deletes them and shrinks every affected weight. In eval
mode both produce the same function, which ``SurgeryReport.residual`` checks.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import PASS_THROUGH, GraphError, LayerSpec, ModelGraph, forward, validate
from .planner import PlanError, PruningPlan

PROBE_SEED = 1234


class SurgeryError(GraphError):
    pass


@dataclass
class SurgeryReport:
    kept: dict[str, int] = field(default_factory=dict)
    removed: dict[str, int] = field(default_factory=dict)
    params_before: int = 0
    params_after: int = 0
    residual: float = 0.0
    removed_modules: list[str] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["layer,kept,removed"]
        for layer in self.kept:
            lines.append(f"{layer},{self.kept[layer]},{self.removed[layer]}")
        lines.append(f"# params_before={self.params_before} params_after={self.params_after} "
                     f"residual={self.residual!r}")
        if self.removed_modules:
            lines.append("# removed_modules=" + ";".join(self.removed_modules))
        return "\n".join(lines) + "\n"


def _check_plan(model: ModelGraph, plan: PruningPlan) -> None:
    for gid, mask in plan.masks.items():
        if gid not in model.gates:
            raise PlanError(f"plan references unknown gate {gid!r}")
        if mask.shape != (len(model.gates[gid]),):
            raise PlanError(f"mask for {gid!r} has length {mask.shape[0]}, gate has {len(model.gates[gid])}")
    missing = set(model.gates) - set(plan.masks)
    if missing:
        raise PlanError(f"plan has no mask for gates {sorted(missing)}")


def zero_pruned(model: ModelGraph, plan: PruningPlan) -> ModelGraph:
    """Copy of ``model`` with every dropped gate entry (and its paired bias) set to zero."""
    _check_plan(model, plan)
    out = model.clone()
    for gid, mask in plan.masks.items():
        drop = ~np.asarray(mask, dtype=bool)
        if not drop.any():
            continue
        out.gates[gid].values[drop] = 0.0
        owner = out.gate_owner(gid)
        if owner.kind == "bn":
            owner.weights["beta"][drop] = 0.0
        elif drop.all():
            # an entirely silenced module also loses its output bias
            owner.weights["bo" if owner.kind == "mhsa" else "b2"][:] = 0.0
    return out


def _channel_consumers(model: ModelGraph, node_id: str) -> list[LayerSpec]:
    found, frontier = [], [node_id]
    while frontier:
        nid = frontier.pop()
        for c in model.consumers(nid):
            if c.kind in PASS_THROUGH:
                frontier.append(c.id)
            elif c.kind == "conv":
                found.append(c)
            else:
                raise SurgeryError(f"channels of {node_id} reach {c.id} ({c.kind}), an ungated axis")
    return found


def _shrink_channels(model: ModelGraph, bn: LayerSpec, keep: np.ndarray) -> None:
    producer = model.node(bn.inputs[0])
    if producer.kind != "conv":
        raise SurgeryError(f"{bn.id}: gated BN must follow a conv, found {producer.kind}")
    producer.weights["w"] = producer.weights["w"][keep].copy()
    producer.weights["b"] = producer.weights["b"][keep].copy()
    for name in ("beta", "running_mean", "running_var"):
        bn.weights[name] = bn.weights[name][keep].copy()
    for c in _channel_consumers(model, bn.id):
        c.weights["w"] = c.weights["w"][:, keep].copy()


def _shrink_heads(node: LayerSpec, keep: np.ndarray) -> None:
    hd = node.attrs["head_dim"]
    cols = (keep[:, None] * hd + np.arange(hd)[None, :]).reshape(-1)
    for nm in ("wq", "wk", "wv"):
        node.weights[nm] = node.weights[nm][cols].copy()
    for nm in ("bq", "bk", "bv"):
        node.weights[nm] = node.weights[nm][cols].copy()
    node.weights["wo"] = node.weights["wo"][:, cols].copy()
    node.attrs["heads"] = int(keep.size)
    if keep.size == 0:
        node.weights["bo"] = np.zeros_like(node.weights["bo"])


def _shrink_units(node: LayerSpec, keep: np.ndarray) -> None:
    node.weights["w1"] = node.weights["w1"][keep].copy()
    node.weights["b1"] = node.weights["b1"][keep].copy()
    node.weights["w2"] = node.weights["w2"][:, keep].copy()
    if keep.size == 0:
        node.weights["b2"] = np.zeros_like(node.weights["b2"])


def rewrite(model: ModelGraph, plan: PruningPlan, probes: int = 4) -> tuple[ModelGraph, SurgeryReport]:
    """Physically remove dropped channels, heads and hidden units.

    Returns the smaller graph and a report whose ``residual`` is the largest
    output difference against ``zero_pruned`` on ``probes`` random inputs.
    """
    from .cost import count_params

    _check_plan(model, plan)
    out = model.clone()
    report = SurgeryReport(params_before=count_params(model).total_params)
    for gid, mask in plan.masks.items():
        mask = np.asarray(mask, dtype=bool)
        keep = np.nonzero(mask)[0]
        gate = out.gates[gid]
        owner = out.gate_owner(gid)
        report.kept[gate.layer] = int(keep.size)
        report.removed[gate.layer] = int(mask.size - keep.size)
        if keep.size == mask.size:
            continue
        if owner.kind == "bn":
            _shrink_channels(out, owner, keep)
        elif owner.kind == "mhsa":
            _shrink_heads(owner, keep)
        elif owner.kind == "mlp":
            _shrink_units(owner, keep)
        else:
            raise SurgeryError(f"gate {gid!r} sits on an unsupported layer kind {owner.kind}")
        gate.values = gate.values[keep].copy()
    out.metadata = dict(out.metadata)
    validate(out, (1, 3, out.metadata["template_size"], out.metadata["template_size"]))
    report.params_after = count_params(out).total_params
    if probes:
        report.residual = equivalence_residual(out, zero_pruned(model, plan), probes)
    return out, report


def equivalence_residual(a: ModelGraph, b: ModelGraph, n: int = 4, seed: int = PROBE_SEED) -> float:
    """Max abs difference of eval-mode backbone outputs on random template- and search-sized inputs."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for size in (a.metadata["template_size"], a.metadata["search_size"]):
        x = rng.random((n, 3, size, size))
        worst = max(worst, float(np.abs(forward(a, x).data - forward(b, x).data).max()))
    return worst


def remove_dead_attention(model: ModelGraph) -> tuple[ModelGraph, list[str]]:
    """Replace every attention module with zero heads by the identity on its residual path."""
    out = model.clone()
    removed = []
    for node in list(out.nodes):
        if node.kind != "mhsa" or node.attrs["heads"] != 0:
            continue
        if np.any(node.weights["bo"] != 0):
            raise SurgeryError(f"{node.id} has no heads but a non-zero output bias")
        consumers = out.consumers(node.id)
        if len(consumers) != 1 or consumers[0].kind != "add":
            raise SurgeryError(f"{node.id} is not on a residual branch")
        join = consumers[0]
        skip = next(i for i in join.inputs if i != node.id)
        _redirect(out, join.id, skip)
        out.nodes = [n for n in out.nodes if n.id not in (join.id, node.id)]
        if node.gate is not None:
            del out.gates[node.gate]
        removed.append(node.id)
    if removed:
        _drop_dead_nodes(out)
        out.reindex()
        validate(out, (1, 3, out.metadata["template_size"], out.metadata["template_size"]))
    return out, removed


def _redirect(model: ModelGraph, old: str, new: str) -> None:
    for n in model.nodes:
        n.inputs = [new if i == old else i for i in n.inputs]
    if model.output == old:
        model.output = new


def _drop_dead_nodes(model: ModelGraph) -> None:
    while True:
        used = {i for n in model.nodes for i in n.inputs} | {model.output}
        dead = [n for n in model.nodes if n.id not in used and n.kind != "input"]
        if not dead:
            return
        ids = {n.id for n in dead}
        for n in dead:
            if n.gate is not None:
                model.gates.pop(n.gate, None)
        model.nodes = [n for n in model.nodes if n.id not in ids]


def attention_modules(model: ModelGraph) -> list[LayerSpec]:
    return [n for n in model.nodes if n.kind == "mhsa"]
