"""Train -> plan -> prune -> finetune -> evaluate, and budget sweeps over that chain."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

from . import tracking
from .config import PipelineConfig, config_hash
from .cost import count_flops
from .graph import ModelGraph
from .planner import BudgetSpec, PruningPlan, keep_all, make_plan
from .surgeon import SurgeryReport, attention_modules, remove_dead_attention, rewrite
from .trainer import TrainHistory, finetune, train
from .zoo import build

log = logging.getLogger(__name__)

FINETUNE_SEED_OFFSET = 1
SWEEP_COLUMNS = ("budget", "AO", "SR@0.5", "SR@0.75", "FLOPs", "conv_FLOPs", "params", "params_MB",
                 "AO_before_finetune")


class SweepError(RuntimeError):
    def __init__(self, budget, cause: Exception):
        super().__init__(f"sweep failed at budget {budget}: {cause}")
        self.budget = budget


def build_model(cfg: PipelineConfig) -> ModelGraph:
    return build(cfg.arch, seed=cfg.seed, **cfg.arch_kwargs())


def run_train(cfg: PipelineConfig) -> tuple[ModelGraph, TrainHistory]:
    model = build_model(cfg)
    data = tracking.PairStream(model, seed=cfg.seed)
    return train(model, data, cfg.train_config())


def run_finetune(model: ModelGraph, cfg: PipelineConfig) -> tuple[ModelGraph, TrainHistory]:
    seed = cfg.seed + FINETUNE_SEED_OFFSET
    data = tracking.PairStream(model, seed=seed)
    return finetune(model, data, cfg.finetune_config(seed))


def budget_spec(cfg: PipelineConfig, fraction: float) -> BudgetSpec:
    return BudgetSpec(cfg.budget_mode, fraction, cfg.floor, cfg.encoder_fraction, cfg.decoder_fraction)


def prune(model: ModelGraph, plan: PruningPlan) -> tuple[ModelGraph, SurgeryReport]:
    """Rewrite, then drop any attention module left without heads."""
    pruned, report = rewrite(model, plan)
    pruned, removed = remove_dead_attention(pruned)
    report.removed_modules = removed
    return pruned, report


def benchmark(cfg: PipelineConfig) -> list[tracking.SyntheticSequence]:
    return tracking.benchmark_suite(range(cfg.bench_sequences), cfg.bench_length)


def search_shape(model: ModelGraph) -> tuple[int, int, int, int]:
    s = model.metadata["search_size"]
    return (1, 3, s, s)


@dataclass
class SweepReport:
    rows: list[dict] = field(default_factory=list)
    active_dims: list[dict] = field(default_factory=list)
    attention: list[dict] = field(default_factory=list)
    models: dict = field(default_factory=dict, repr=False)
    seed: int = 0
    input_hash: str = ""

    def _csv(self, columns, rows) -> str:
        buf = io.StringIO()
        buf.write(f"# seed={self.seed} input_sha256={self.input_hash}\n")
        w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r[k]) for k in columns})
        return buf.getvalue()

    def table_csv(self) -> str:
        return self._csv(SWEEP_COLUMNS, self.rows)

    def active_dims_csv(self) -> str:
        return self._csv(("budget", "layer", "granularity", "kept", "total", "fraction"), self.active_dims)

    def attention_csv(self) -> str:
        return self._csv(("budget", "module", "heads_kept", "heads_total", "active"), self.attention)


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def _row(budget, model: ModelGraph, metrics: tracking.TrackingMetrics, before: float | None) -> dict:
    c = count_flops(model, search_shape(model))
    return {"budget": budget, "AO": metrics.ao, "SR@0.5": metrics.sr50, "SR@0.75": metrics.sr75,
            "FLOPs": c.total_flops, "conv_FLOPs": c.flops_of("conv"), "params": c.total_params,
            "params_MB": c.param_mb, "AO_before_finetune": metrics.ao if before is None else before}


def _record_pattern(report: SweepReport, budget, base: ModelGraph, plan: PruningPlan) -> None:
    for gid, mask in plan.masks.items():
        g = base.gates[gid]
        report.active_dims.append({"budget": budget, "layer": g.layer, "granularity": g.granularity,
                                   "kept": int(mask.sum()), "total": int(mask.size),
                                   "fraction": float(mask.mean())})
    for node in attention_modules(base):
        if node.gate is None:
            continue
        mask = plan.masks[node.gate]
        report.attention.append({"budget": budget, "module": node.id, "heads_kept": int(mask.sum()),
                                 "heads_total": int(mask.size), "active": int(mask.any())})


def sweep(cfg: PipelineConfig, trained: ModelGraph | None = None,
          sequences: list[tracking.SyntheticSequence] | None = None) -> SweepReport:
    """Evaluate the stage-1 model and each budget's pruned + fine-tuned variant on the benchmark."""
    cfg.validate()
    if trained is None:
        trained, _ = run_train(cfg)
    if sequences is None:
        sequences = benchmark(cfg)
    report = SweepReport(seed=cfg.seed, input_hash=config_hash(cfg))
    report.models["base"] = trained
    report.rows.append(_row("base", trained, tracking.evaluate(trained, sequences), None))
    _record_pattern(report, 1.0, trained, keep_all(trained))
    for b in cfg.budgets:
        try:
            plan = make_plan(trained, budget_spec(cfg, b))
            pruned, _ = prune(trained, plan)
            before = tracking.evaluate(pruned, sequences).ao
            tuned, _ = run_finetune(pruned, cfg)
            metrics = tracking.evaluate(tuned, sequences)
        except Exception as e:  # any stage failure names the budget
            raise SweepError(b, e) from e
        log.info("budget %s: AO %.4f (before finetune %.4f)", b, metrics.ao, before)
        report.models[b] = tuned
        report.rows.append(_row(b, tuned, metrics, before))
        _record_pattern(report, b, trained, plan)
    return report
