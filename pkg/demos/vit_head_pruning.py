"""Prune a mini ViT backbone at several budgets and show how many heads and MLP units survive per layer.

Run: python3 demos/vit_head_pruning.py   (a few seconds; gates are random rather than trained)
"""
import numpy as np

from prunetrack import zoo
from prunetrack.cost import count_flops
from prunetrack.planner import BudgetSpec, keep_all, make_plan
from prunetrack.surgeon import equivalence_residual, remove_dead_attention, rewrite, zero_pruned

model = zoo.build_mini_vit(seed=0)
rng = np.random.default_rng(0)
for gate in model.gates.values():
    gate.values[:] = rng.lognormal(0.0, 1.0, len(gate))

base = count_flops(model).total_flops
for budget in (1.0, 0.5, 0.25, 0.01):
    plan = make_plan(model, BudgetSpec("layerwise", budget))
    small, report = rewrite(model, plan)
    heads = [n.attrs["heads"] for n in small.nodes if n.kind == "mhsa"]
    units = [n.weights["w1"].shape[0] for n in small.nodes if n.kind == "mlp"]
    print(f"b={budget:<5} heads {heads}  units {units}  FLOPs {count_flops(small).total_flops / base:.1%}  "
          f"residual {report.residual:.1e}")

# planner floors keep every module alive; a hand-made plan that drops all heads of one
# layer shows the attention module being removed from the residual stream
plan = keep_all(model)
plan.masks["L2.attn.heads"][:] = False
small, _ = rewrite(model, plan)
small, removed = remove_dead_attention(small)
print("removed", removed, f"residual vs zeroed model {equivalence_residual(small, zero_pruned(model, plan)):.1e}")
