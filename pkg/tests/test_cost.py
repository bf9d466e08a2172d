import numpy as np
import pytest

from prunetrack.autodiff import ShapeError
from prunetrack.cost import BYTES_PER_PARAM, CostReport, count_flops, count_params, enumerate_params
from prunetrack.graph import GateVector, LayerSpec, forward, validate
from prunetrack.planner import BudgetSpec, make_plan
from prunetrack.surgeon import rewrite
from prunetrack import zoo

from _helpers import ARCHS, bn, chain, conv, linear, mhsa, random_graph, randomize_gates, toy_model


# --- worked examples -----------------------------------------------------

def test_linear_params():
    g = chain(LayerSpec("t", "tokens"), linear("fc", 3, 2))
    assert count_params(g).layers[2].params == 8


def test_conv_params():
    g = chain(conv("c", 3, 2, 3))
    assert count_params(g).layers[1].params == 56


def test_conv_flops_example():
    g = chain(conv("c", 3, 2, 3))
    rep = count_flops(g, (1, 3, 6, 6))  # 4x4 output
    assert rep.flops_of("conv") == 1728


def test_linear_flops_example():
    g = chain(LayerSpec("t", "tokens"), linear("fc", 4, 4))
    assert count_flops(g, (1, 4, 1, 1)).flops_of("linear") == 32


def test_bn_params_exclude_running_stats():
    rep = count_params(chain(conv("c", 3, 5, 1), bn("bn", 5)))
    assert rep.layers[2].params == 10 and rep.layers[2].buffers == 10


def test_ungated_attention_params():
    d = 12
    rep = count_params(chain(LayerSpec("t", "tokens"), mhsa("a", d, 3, 4)))
    assert rep.layers[2].params == 4 * (d * d + d)


def test_attention_flops():
    d, heads, hd, t = 8, 2, 4, 9
    g = chain(LayerSpec("t", "tokens"), mhsa("a", d, heads, hd))
    rep = count_flops(g, (1, d, 3, 3))
    assert rep.flops_of("mhsa") == 4 * 2 * t * d * d + 2 * 2 * t * t * d


def test_halved_chain_conv_flops():
    def build(c):
        gates = {"g1": GateVector("g1", np.ones(c), "channel", "bn1"),
                 "g2": GateVector("g2", np.ones(c), "channel", "bn2")}
        return chain(conv("c1", 3, c, 3), bn("bn1", c, "g1"), LayerSpec("r1", "relu"),
                     conv("c2", c, c, 3), bn("bn2", c, "g2"), LayerSpec("r2", "relu"), gates=gates)

    full, half = count_flops(build(8), (1, 3, 12, 12)), count_flops(build(4), (1, 3, 12, 12))
    by_id = lambda r: {l.id: l.flops for l in r.layers}
    assert by_id(half)["c2"] / by_id(full)["c2"] == 0.25
    assert by_id(half)["c1"] / by_id(full)["c1"] == 0.5


def test_halved_chain_via_surgery():
    m = randomize_gates(zoo.build_mini_alex(widths=(8, 8, 8, 8, 4)), np.random.default_rng(0))
    small, _ = rewrite(m, make_plan(m, BudgetSpec("layerwise", 0.5)), probes=0)
    ratio = count_flops(small).layers[[l.id for l in count_flops(small).layers].index("conv3")].flops / \
        [l.flops for l in count_flops(m).layers if l.id == "conv3"][0]
    assert ratio == 0.25


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        count_flops(chain(conv("c", 4, 2, 3)), (1, 3, 8, 8))


# --- enumeration oracle ----------------------------------------------------

@pytest.mark.parametrize("seed", range(100))
def test_params_match_enumeration_random_graphs(seed):
    g = random_graph(np.random.default_rng(seed))
    validate(g, (1, 3, 16, 16))
    forward(g, np.zeros((1, 3, 16, 16)))
    rep = count_params(g)
    assert rep.total_params == enumerate_params(g)
    assert rep.total_buffers == sum(a.size for k, a in g.arrays() if k.endswith(("running_mean", "running_var")))


@pytest.mark.parametrize("arch", ARCHS)
def test_params_match_enumeration_zoo(arch):
    m = toy_model(arch)
    assert count_params(m).total_params == enumerate_params(m)
    small, _ = rewrite(m, make_plan(randomize_gates(m, np.random.default_rng(1)), BudgetSpec("layerwise", 0.3)),
                       probes=0)
    assert count_params(small).total_params == enumerate_params(small)


def test_default_alex_enumeration():
    m = zoo.build_mini_alex()
    assert count_params(m).total_params == enumerate_params(m)


@pytest.mark.parametrize("seed", range(20))
def test_report_additivity_and_types(seed):
    g = random_graph(np.random.default_rng(seed))
    rep = count_flops(g, (2, 3, 16, 16))
    assert rep.total_flops == sum(l.flops for l in rep.layers)
    assert rep.total_params == sum(l.params for l in rep.layers)
    for l in rep.layers:
        assert isinstance(l.params, int) and isinstance(l.flops, int) and l.params >= 0 and l.flops >= 0
    assert sum(v["flops"] for v in rep.by_kind().values()) == rep.total_flops
    assert rep.param_bytes == BYTES_PER_PARAM * rep.total_params


def test_flops_scale_with_batch():
    m = toy_model("mini_resnet")
    assert count_flops(m, (3, 3, 64, 64)).total_flops == 3 * count_flops(m, (1, 3, 64, 64)).total_flops


@pytest.mark.parametrize("arch", ARCHS)
def test_budget_monotonicity(arch):
    m = randomize_gates(toy_model(arch), np.random.default_rng(2))
    prev = None
    for b in (0.1, 0.25, 0.5, 0.75, 1.0):
        small, _ = rewrite(m, make_plan(m, BudgetSpec("layerwise", b)), probes=0)
        cur = (count_flops(small).total_flops, count_params(small).total_params)
        if prev is not None:
            assert prev[0] <= cur[0] and prev[1] <= cur[1]
        prev = cur


def test_csv_layout():
    text = count_flops(chain(conv("c", 3, 2, 3)), (1, 3, 6, 6)).to_csv()
    lines = text.splitlines()
    assert lines[0].startswith("# FLOPs: 1 MAC = 2 FLOPs")
    assert lines[1] == "layer,kind,params,flops"
    assert lines[3] == "c,conv,56,1728"
    assert lines[-1] == "total,,57,1728"


def test_empty_report():
    assert CostReport().total_params == 0 and CostReport().param_mb == 0.0
