import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from prunetrack.graph import GateVector
from prunetrack.planner import (BudgetSpec, PlanError, PruningPlan, budget_count, keep_all, make_plan,
                                plan_blockwise, plan_decoupled, plan_global, plan_layerwise)
from prunetrack.surgeon import rewrite
from prunetrack.zoo import build_mini_encdec

from _helpers import brute_layerwise, brute_pooled, kept_sets, randomize_gates, toy_model

gate_lists = st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=12)
fractions = st.floats(0.01, 1.0)


def spec(mode, b, floor=1, **kw):
    return BudgetSpec(mode, b, floor, **kw)


def gv(gid, values, block=None, tag=None):
    return GateVector(gid, np.asarray(values, dtype=np.float64), "channel", gid, block, tag)


# --- layerwise -------------------------------------------------------------

def test_layerwise_top_two():
    p = plan_layerwise({"g": [0.9, 0.01, 0.5, 0.02]}, spec("layerwise", 0.5))
    assert kept_sets(p) == {"g": {0, 2}}


def test_layerwise_full_budget():
    m = randomize_gates(toy_model("mini_resnet"), np.random.default_rng(0))
    p = plan_layerwise(m, spec("layerwise", 1.0))
    assert all(mask.all() for mask in p.masks.values())


def test_layerwise_rounding_and_tie_break():
    p = plan_layerwise({"g": [0.3, 0.3, 0.3]}, spec("layerwise", 0.34))
    assert kept_sets(p) == {"g": {0, 1}}


@settings(max_examples=200, deadline=None)
@given(gate_lists, fractions, st.integers(1, 4))
def test_layerwise_count_exact(values, b, floor):
    p = plan_layerwise({"g": values}, spec("layerwise", b, floor))
    c = len(values)
    assert p.kept("g") == min(c, max(floor, math.ceil(round(b * c, 9))))


@settings(max_examples=150, deadline=None)
@given(st.lists(st.integers(-4, 4), min_size=1, max_size=10), fractions, st.integers(1, 3))
def test_layerwise_matches_brute_force_with_ties(values, b, floor):
    p = plan_layerwise({"g": values}, spec("layerwise", b, floor))
    assert kept_sets(p)["g"] == brute_layerwise(values, p.kept("g"))


@settings(max_examples=100, deadline=None)
@given(gate_lists, fractions, fractions)
def test_layerwise_monotone_in_budget(values, b1, b2):
    lo, hi = sorted((b1, b2))
    small = plan_layerwise({"g": values}, spec("layerwise", lo)).masks["g"]
    large = plan_layerwise({"g": values}, spec("layerwise", hi)).masks["g"]
    assert np.all(large[small])


@settings(max_examples=100, deadline=None)
@given(st.lists(gate_lists, min_size=1, max_size=4), fractions, st.floats(1e-3, 1e3),
       st.sampled_from(["layerwise", "global"]))
def test_scale_invariance(lists, b, c, mode):
    gates = {f"g{i}": v for i, v in enumerate(lists)}
    scaled = {k: [c * x for x in v] for k, v in gates.items()}
    # scaling can merge magnitudes that differ by one ulp; only compare untied instances
    for v, w in zip(gates.values(), scaled.values()):
        assume(len(set(np.abs(v))) == len(v) and len(set(np.abs(w))) == len(w))
    allv = [abs(x) for v in gates.values() for x in v]
    assume(len(set(allv)) == len(allv))
    a, s = make_plan(gates, spec(mode, b)), make_plan(scaled, spec(mode, b))
    assert kept_sets(a) == kept_sets(s)


# --- global ----------------------------------------------------------------

def test_global_floor_repair_example():
    p = plan_global({"A": [0.9, 0.8], "B": [0.1, 0.2]}, spec("global", 0.5))
    assert kept_sets(p) == {"A": {0}, "B": {1}}


def test_global_full_budget():
    p = plan_global({"A": [0.9, 0.8], "B": [0.1, 0.0]}, spec("global", 1.0))
    assert p.total_kept == 4


@pytest.mark.parametrize("seed", range(100))
def test_global_is_top_k_when_floors_hold(seed):
    rng = np.random.default_rng(seed)
    gates = {f"g{i}": rng.uniform(0, 1, rng.integers(4, 12)) for i in range(rng.integers(2, 5))}
    b = float(rng.uniform(0.3, 1.0))
    p = plan_global(gates, spec("global", b))
    flat = np.concatenate(list(gates.values()))
    k = math.ceil(round(b * flat.size, 9))
    cutoff = np.sort(flat)[::-1][k - 1]
    natural = {g: int((v >= cutoff).sum()) for g, v in gates.items()}
    if min(natural.values()) >= 1:
        assert kept_sets(p) == {g: set(np.nonzero(v >= cutoff)[0].tolist()) for g, v in gates.items()}


@settings(max_examples=60, deadline=None)
@given(st.lists(st.lists(st.floats(0.001, 10), min_size=1, max_size=4), min_size=1, max_size=3),
       fractions, st.integers(1, 2))
def test_global_matches_brute_force(lists, b, floor):
    gates = {f"g{i}": v for i, v in enumerate(lists)}
    allv = [x for v in lists for x in v]
    assume(len(set(allv)) == len(allv) and len(allv) <= 12)
    assert kept_sets(plan_global(gates, spec("global", b, floor))) == brute_pooled(gates, b, floor)


@settings(max_examples=150, deadline=None)
@given(st.lists(gate_lists, min_size=1, max_size=5), fractions, st.integers(1, 3))
def test_global_total_bounds(lists, b, floor):
    gates = {f"g{i}": v for i, v in enumerate(lists)}
    p = plan_global(gates, spec("global", b, floor))
    n = sum(len(v) for v in lists)
    k = math.ceil(round(b * n, 9))
    flat = [(abs(x), gi, i) for gi, v in enumerate(lists) for i, x in enumerate(v)]
    top = sorted(flat, key=lambda t: (-t[0], t[1], t[2]))[:k]
    natural = [sum(1 for t in top if t[1] == gi) for gi in range(len(lists))]
    deficit = sum(max(0, min(floor, len(v)) - nat) for v, nat in zip(lists, natural))
    assert k <= p.total_kept <= k + deficit
    for g, v in gates.items():
        assert p.kept(g) >= min(floor, len(v))


# --- blockwise -------------------------------------------------------------

def test_blockwise_single_block_equals_global():
    rng = np.random.default_rng(1)
    gates = {f"g{i}": gv(f"g{i}", rng.standard_normal(6), block="b0") for i in range(3)}
    for b in (0.2, 0.5, 0.9):
        assert kept_sets(plan_blockwise(gates, spec("blockwise", b))) == \
            kept_sets(plan_global({k: v.values for k, v in gates.items()}, spec("global", b)))


def test_blockwise_protects_low_magnitude_block():
    gates = {"a1": gv("a1", [5.0, 6.0, 7.0, 8.0], "loud"), "a2": gv("a2", [5.5, 6.5, 7.5, 8.5], "loud"),
             "q1": gv("q1", [0.01, 0.02, 0.03, 0.04], "quiet"), "q2": gv("q2", [0.015, 0.025, 0.035, 0.045], "quiet")}
    blk = plan_blockwise(gates, spec("blockwise", 0.5))
    assert blk.kept("q1") + blk.kept("q2") == 4 and blk.kept("a1") + blk.kept("a2") == 4
    glb = plan_global({k: v.values for k, v in gates.items()}, spec("global", 0.5))
    assert glb.kept("q1") + glb.kept("q2") == 2  # floors only


def test_blockwise_full_budget():
    m = randomize_gates(toy_model("mini_resnet"), np.random.default_rng(2))
    assert all(mask.all() for mask in plan_blockwise(m, spec("blockwise", 1.0)).masks.values())


def test_blockwise_needs_block_ids():
    with pytest.raises(PlanError):
        plan_blockwise({"g": gv("g", [1.0, 2.0])}, spec("blockwise", 0.5))
    with pytest.raises(PlanError):
        plan_blockwise(toy_model("mini_alex"), spec("blockwise", 0.5))


def test_blockwise_budget_holds_per_block():
    m = randomize_gates(toy_model("mini_resnet", blocks=2), np.random.default_rng(3))
    for b in (0.25, 0.5, 0.75):
        p = plan_blockwise(m, spec("blockwise", b))
        for blk in {g.block for g in m.gates.values()}:
            ids = [gid for gid, g in m.gates.items() if g.block == blk]
            n = sum(len(m.gates[g]) for g in ids)
            assert sum(p.kept(g) for g in ids) == max(math.ceil(b * n), len(ids))


# --- decoupled -------------------------------------------------------------

def test_decoupled_decoder_full():
    m = randomize_gates(toy_model("mini_encdec", stacks=2), np.random.default_rng(4))
    p = plan_decoupled(m, spec("decoupled", 0.5, encoder_fraction=0.5, decoder_fraction=1.0))
    for gid, g in m.gates.items():
        if g.tag == "decoder":
            assert p.masks[gid].all()
        else:
            assert p.kept(gid) == math.ceil(0.5 * len(g))


def test_decoupled_equal_fractions_equal_layerwise():
    m = randomize_gates(toy_model("mini_encdec", stacks=2), np.random.default_rng(5))
    for b in (0.1, 0.5, 0.8):
        assert kept_sets(plan_decoupled(m, spec("decoupled", b))) == kept_sets(plan_layerwise(m, spec("layerwise", b)))


def test_decoupled_extreme_budget_on_default_encdec():
    m = randomize_gates(build_mini_encdec(), np.random.default_rng(6))
    p = plan_decoupled(m, spec("decoupled", 0.01))
    for gid, g in m.gates.items():
        expected = 1 if g.granularity == "head" else 8  # ceil(0.01*4) and ceil(0.01*768)
        assert p.kept(gid) == expected


def test_decoupled_needs_tags():
    with pytest.raises(PlanError):
        plan_decoupled({"g": gv("g", [1.0, 2.0])}, spec("decoupled", 0.5))
    with pytest.raises(PlanError):
        plan_decoupled({"g": [1.0, 2.0]}, spec("decoupled", 0.5))


# --- general ---------------------------------------------------------------

@pytest.mark.parametrize("kw", [dict(mode="global", fraction=0.0), dict(mode="layerwise", fraction=1.5),
                                dict(mode="layerwise", fraction=0.5, floor=0), dict(mode="random", fraction=0.5)])
def test_budget_spec_invariants(kw):
    with pytest.raises(PlanError):
        BudgetSpec(**kw)


def test_budget_count_rounding():
    assert budget_count(0.34, 3) == 2
    assert budget_count(0.07, 100) == 7  # 0.07 * 100 == 7.000000000000001 in binary
    assert budget_count(1.0, 5) == 5


def test_plan_carries_gate_hash():
    m = toy_model("mini_alex")
    p = make_plan(m, spec("layerwise", 0.5))
    assert p.gate_hash == m.gate_snapshot_hash() and p.spec.fraction == 0.5
    m.gates["bn1.gamma"].values[0] += 1e-9
    assert p.gate_hash != m.gate_snapshot_hash()


@pytest.mark.parametrize("arch,mode", [("mini_alex", "global"), ("mini_resnet", "blockwise"),
                                       ("mini_vit", "layerwise"), ("mini_encdec", "decoupled")])
def test_replanning_pruned_model_keeps_everything(arch, mode):
    m = randomize_gates(toy_model(arch), np.random.default_rng(7))
    pruned, _ = rewrite(m, make_plan(m, spec(mode, 0.5)))
    again = make_plan(pruned, spec(mode, 1.0))
    assert all(mask.all() for mask in again.masks.values())


def test_mask_lengths_match_and_floor_holds():
    m = randomize_gates(toy_model("mini_vit"), np.random.default_rng(8))
    for mode in ("global", "layerwise"):
        p = make_plan(m, spec(mode, 0.05, floor=2))
        for gid, g in m.gates.items():
            assert p.masks[gid].shape == (len(g),) and p.kept(gid) >= 2


def test_keep_all_and_intersection():
    m = toy_model("mini_alex")
    full = keep_all(m)
    half = make_plan(m, spec("layerwise", 0.5))
    both = full & half
    assert isinstance(both, PruningPlan) and kept_sets(both) == kept_sets(half)
