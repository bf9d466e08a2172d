"""Structured pruning of gated toy tracking backbones.

Stage 1 trains with an L1 penalty on gate values, stage 2 plans a keep-set
under a channel budget and physically removes the rest, stage 3 fine-tunes.
"""
from .autodiff import GradTape, NonFiniteError, ShapeError, Tensor, backward
from .cost import CostReport, count_flops, count_params
from .graph import GateVector, LayerSpec, ModelGraph, forward, siamese_forward
from .planner import BudgetSpec, PlanError, PruningPlan, make_plan
from .surgeon import SurgeryReport, remove_dead_attention, rewrite, zero_pruned
from .tracking import TrackingMetrics, evaluate, gen_sequence, iou, track
from .trainer import TrainConfig, TrainHistory, finetune, total_loss, train
from .zoo import build, build_mini_alex, build_mini_encdec, build_mini_resnet, build_mini_vit

__version__ = "0.1.0"
__all__ = [
    "BudgetSpec", "CostReport", "GateVector", "GradTape", "LayerSpec", "ModelGraph", "NonFiniteError",
    "PlanError", "PruningPlan", "ShapeError", "SurgeryReport", "Tensor", "TrackingMetrics", "TrainConfig",
    "TrainHistory", "backward", "build", "build_mini_alex", "build_mini_encdec", "build_mini_resnet",
    "build_mini_vit", "count_flops", "count_params", "evaluate", "finetune", "forward", "gen_sequence",
    "iou", "make_plan", "rewrite", "remove_dead_attention", "siamese_forward", "total_loss", "track",
    "train", "zero_pruned",
]
