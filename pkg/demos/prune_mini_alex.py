"""Train a small gated AlexNet-style tracker, prune it to half its channels and compare cost and accuracy.

Run: python3 demos/prune_mini_alex.py   (about a minute on one core)
"""
from prunetrack import pipeline, tracking
from prunetrack.config import PipelineConfig
from prunetrack.cost import count_flops
from prunetrack.planner import make_plan
from prunetrack.trainer import sparsity_fraction

cfg = PipelineConfig(arch="mini_alex", widths=[16, 32, 48, 48, 32], seed=0, train_epochs=3,
                     finetune_epochs=2, budgets=[0.5]).validate()
trained, history = pipeline.run_train(cfg)
print(f"stage 1: task loss {history.task_loss[0]:.3f} -> {history.task_loss[-1]:.3f}, "
      f"near-zero gates {sparsity_fraction(trained):.1%}")

plan = make_plan(trained, pipeline.budget_spec(cfg, 0.5))
pruned, report = pipeline.prune(trained, plan)
print(report.to_csv())

tuned, _ = pipeline.run_finetune(pruned.clone(), cfg)  # fine-tuning updates weights in place
suite = tracking.benchmark_suite(range(10), 30)
for name, model in (("trained", trained), ("pruned", pruned), ("fine-tuned", tuned)):
    m = tracking.evaluate(model, suite)
    c = count_flops(model, pipeline.search_shape(model))
    print(f"{name:>10}: AO {m.ao:.3f}  SR@0.5 {m.sr50:.3f}  conv FLOPs {c.flops_of('conv'):>10}  "
          f"params {c.total_params}")
