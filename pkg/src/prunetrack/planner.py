"""Turn trained gate magnitudes and a channel budget into keep-masks.

Selection depends only on the order of ``|gamma|``; ties go to the lower
index (and, when pooling, to the earlier gate). Integer budgets round up.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .graph import GateVector, ModelGraph

MODES = ("global", "layerwise", "blockwise", "decoupled")


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class BudgetSpec:
    mode: str
    fraction: float
    floor: int = 1
    encoder_fraction: float | None = None
    decoder_fraction: float | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise PlanError(f"unknown budget mode {self.mode!r}")
        for name in ("fraction", "encoder_fraction", "decoder_fraction"):
            v = getattr(self, name)
            if v is not None and not 0 < v <= 1:
                raise PlanError(f"{name} must lie in (0, 1], got {v}")
        if self.floor < 1:
            raise PlanError("floor must be >= 1")

    def to_dict(self) -> dict:
        return {"mode": self.mode, "fraction": self.fraction, "floor": self.floor,
                "encoder_fraction": self.encoder_fraction, "decoder_fraction": self.decoder_fraction}


@dataclass
class PruningPlan:
    masks: dict[str, np.ndarray]
    spec: BudgetSpec | None = None
    gate_hash: str = ""
    extra: dict = field(default_factory=dict)

    def kept(self, gid: str) -> int:
        return int(self.masks[gid].sum())

    @property
    def total_kept(self) -> int:
        return int(sum(m.sum() for m in self.masks.values()))

    @property
    def total(self) -> int:
        return int(sum(m.size for m in self.masks.values()))

    def drops_any(self) -> bool:
        return any(not m.all() for m in self.masks.values())

    def __and__(self, other: "PruningPlan") -> "PruningPlan":
        return PruningPlan({g: self.masks[g] & other.masks[g] for g in self.masks})


def budget_count(fraction: float, n: int) -> int:
    """ceil(fraction * n), robust to representation error such as 0.07 * 100."""
    return int(math.ceil(round(fraction * n, 9)))


def _gate_arrays(gates) -> dict[str, np.ndarray]:
    if isinstance(gates, ModelGraph):
        gates = gates.gates
    out = {}
    for gid, g in gates.items():
        out[gid] = np.asarray(g.values if isinstance(g, GateVector) else g, dtype=np.float64)
    return out


def _rank(values: np.ndarray) -> np.ndarray:
    # descending |value|, stable so equal magnitudes keep index order
    return np.argsort(-np.abs(values), kind="stable")


def _topk_mask(values: np.ndarray, k: int) -> np.ndarray:
    mask = np.zeros(values.shape[0], dtype=bool)
    mask[_rank(values)[:k]] = True
    return mask


def _layerwise(arrays: Mapping[str, np.ndarray], fraction: float, floor: int) -> dict[str, np.ndarray]:
    masks = {}
    for gid, v in arrays.items():
        k = min(len(v), max(floor, budget_count(fraction, len(v))))
        masks[gid] = _topk_mask(v, k)
    return masks


def _pooled(arrays: Mapping[str, np.ndarray], fraction: float, floor: int) -> dict[str, np.ndarray]:
    """Keep the best ``max(K, sum of floors)`` entries with each gate holding at least ``floor``.

    Each gate's top-``floor`` entries are reserved first; the remaining slots
    go to the largest magnitudes overall. This maximizes kept ``|gamma|``.
    """
    ids = list(arrays)
    total = sum(len(arrays[g]) for g in ids)
    k_total = budget_count(fraction, total)
    masks = {}
    reserved = 0
    for gid in ids:
        f = min(floor, len(arrays[gid]))
        masks[gid] = _topk_mask(arrays[gid], f)
        reserved += f
    remaining = k_total - reserved
    if remaining > 0:
        mags, gidx, eidx = [], [], []
        for gi, gid in enumerate(ids):
            free = np.nonzero(~masks[gid])[0]
            mags.append(np.abs(arrays[gid][free]))
            gidx.append(np.full(free.size, gi))
            eidx.append(free)
        mags, gidx, eidx = (np.concatenate(a) for a in (mags, gidx, eidx))
        order = np.lexsort((eidx, gidx, -mags))[:remaining]
        for j in order:
            masks[ids[gidx[j]]][eidx[j]] = True
    return masks


def plan_layerwise(gates, spec: BudgetSpec) -> PruningPlan:
    arrays = _gate_arrays(gates)
    return _finish(gates, spec, _layerwise(arrays, spec.fraction, spec.floor))


def plan_global(gates, spec: BudgetSpec) -> PruningPlan:
    arrays = _gate_arrays(gates)
    return _finish(gates, spec, _pooled(arrays, spec.fraction, spec.floor))


def _gate_meta(gates) -> dict[str, GateVector]:
    if isinstance(gates, ModelGraph):
        return gates.gates
    if all(isinstance(g, GateVector) for g in gates.values()):
        return dict(gates)
    raise PlanError("this budget mode needs GateVectors carrying block/tag metadata")


def plan_blockwise(gates, spec: BudgetSpec) -> PruningPlan:
    meta = _gate_meta(gates)
    arrays = _gate_arrays(gates)
    groups: dict[str, dict[str, np.ndarray]] = {}
    for gid, g in meta.items():
        if g.block is None:
            raise PlanError(f"gate {gid!r} has no block id; blockwise planning needs one on every gate")
        groups.setdefault(g.block, {})[gid] = arrays[gid]
    masks = {}
    for blk in groups:
        masks.update(_pooled(groups[blk], spec.fraction, spec.floor))
    return _finish(gates, spec, {gid: masks[gid] for gid in arrays})


def plan_decoupled(gates, spec: BudgetSpec) -> PruningPlan:
    meta = _gate_meta(gates)
    arrays = _gate_arrays(gates)
    fractions = {
        "encoder": spec.encoder_fraction if spec.encoder_fraction is not None else spec.fraction,
        "decoder": spec.decoder_fraction if spec.decoder_fraction is not None else spec.fraction,
    }
    masks = {}
    for tag, frac in fractions.items():
        part = {gid: arrays[gid] for gid, g in meta.items() if g.tag == tag}
        masks.update(_layerwise(part, frac, spec.floor))
    for gid, g in meta.items():
        if g.tag not in fractions:
            raise PlanError(f"gate {gid!r} is not tagged encoder or decoder")
    return _finish(gates, spec, {gid: masks[gid] for gid in arrays})


def _finish(gates, spec, masks) -> PruningPlan:
    h = gates.gate_snapshot_hash() if isinstance(gates, ModelGraph) else ""
    return PruningPlan(masks, spec, h)


def make_plan(gates, spec: BudgetSpec) -> PruningPlan:
    planners = {"global": plan_global, "layerwise": plan_layerwise,
                "blockwise": plan_blockwise, "decoupled": plan_decoupled}
    return planners[spec.mode](gates, spec)


def keep_all(model: ModelGraph) -> PruningPlan:
    return PruningPlan({gid: np.ones(len(g), dtype=bool) for gid, g in model.gates.items()},
                       None, model.gate_snapshot_hash())


def active_fractions(model: ModelGraph, plan: PruningPlan) -> dict[str, float]:
    """Fraction of each gate's entries kept, keyed by the gate's layer id."""
    return {model.gates[gid].layer: float(m.mean()) for gid, m in plan.masks.items()}
