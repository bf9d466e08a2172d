"""Sparsity-regularized training and penalty-free fine-tuning.

The objective is the tracking loss plus ``lam * sum(|gamma|)`` over every
gate entry, minimized jointly over weights and gates with SGD + momentum.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import GradTape, NonFiniteError, Tensor, backward
from .graph import ModelGraph, param_tensors, siamese_forward
from .tracking import PairStream

SPARSITY_THRESHOLD = 0.01
MODES = ("sparsity-train", "finetune")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, detail: str = ""):
        super().__init__(f"training diverged in epoch {epoch}" + (f": {detail}" if detail else ""))
        self.epoch = epoch


@dataclass
class TrainConfig:
    lam: float = 0.0
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 1
    batch_size: int = 8
    steps_per_epoch: int = 8
    seed: int = 0
    mode: str = "sparsity-train"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.mode == "finetune" and self.lam != 0:
            raise ValueError("finetune mode runs without the sparsity penalty (lam must be 0)")
        if self.lr < 0 or not 0 <= self.momentum < 1:
            raise ValueError("lr must be >= 0 and momentum in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1 or self.steps_per_epoch < 1:
            raise ValueError("epochs, batch_size and steps_per_epoch must be >= 1")


@dataclass
class TrainHistory:
    task_loss: list[float] = field(default_factory=list)
    penalty: list[float] = field(default_factory=list)
    sparsity: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.task_loss)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "task_loss", "penalty", "sparsity_fraction"])
        for i, row in enumerate(zip(self.task_loss, self.penalty, self.sparsity), start=1):
            w.writerow([i] + [repr(float(v)) for v in row])
        return buf.getvalue()


def gate_l1(model: ModelGraph) -> float:
    return float(sum(np.abs(g.values).sum() for g in model.gates.values()))


def sparsity_fraction(model: ModelGraph, threshold: float = SPARSITY_THRESHOLD) -> float:
    vals = [g.values for g in model.gates.values()]
    if not vals:
        return 0.0
    allv = np.concatenate(vals)
    return float((np.abs(allv) < threshold).mean())


def total_loss(task_loss, gates, lam: float):
    """task_loss + lam * sum |gamma| over all gate entries."""
    if lam < 0:
        raise ValueError("lam must be non-negative")
    task = task_loss if isinstance(task_loss, Tensor) else Tensor(task_loss)
    if lam == 0 or not gates:
        return task
    pen = None
    for g in gates:
        g = g if isinstance(g, Tensor) else Tensor(g)
        term = ad.l1_norm(g)
        pen = term if pen is None else ad.add(pen, term)
    return ad.add(task, ad.scalar_mul(pen, lam))


def balanced_weights(labels: np.ndarray) -> np.ndarray:
    """Per-element weights: each class of each map gets total weight 1/2 (1 if alone), averaged over maps."""
    labels = np.asarray(labels, dtype=np.float64)
    n = labels.shape[0]
    flat = labels.reshape(n, -1)
    pos = flat > 0
    npos = pos.sum(axis=1, keepdims=True)
    nneg = flat.shape[1] - npos
    both = (npos > 0) & (nneg > 0)
    share = np.where(both, 0.5, 1.0)
    w = np.where(pos, share / np.maximum(npos, 1), share / np.maximum(nneg, 1))
    return (w / n).reshape(labels.shape)


def tracking_task_loss(response: Tensor, labels: np.ndarray) -> Tensor:
    """Class-balanced logistic loss of a response map against +1/-1 labels."""
    labels = np.asarray(labels, dtype=np.float64)
    if response.shape != labels.shape:
        raise ad.ShapeError(f"response {response.shape} vs labels {labels.shape}")
    if not np.all(np.isin(labels, (-1.0, 1.0))):
        raise ValueError("labels must be +1 or -1")
    per = ad.softplus(ad.mul(response, Tensor(-labels)))
    return ad.weighted_sum(per, balanced_weights(labels))


def _gate_keys(model: ModelGraph) -> list[str]:
    return [f"gate:{gid}" for gid in model.gates]


def train(model: ModelGraph, data: PairStream, config: TrainConfig) -> tuple[ModelGraph, TrainHistory]:
    """Run SGD with momentum on the penalized objective; ``model`` is updated in place and returned.

    A zero learning rate freezes everything, BN running statistics included.
    """
    history = TrainHistory()
    live = dict(model.parameters())
    velocity = {k: np.zeros_like(v) for k, v in live.items()}
    frozen = config.lr == 0
    for epoch in range(1, config.epochs + 1):
        losses = []
        for _ in range(config.steps_per_epoch):
            z, x, y = data.batch(config.batch_size)
            params = param_tensors(model, requires_grad=True)
            try:
                with GradTape() as tape:
                    with _frozen_stats(model, frozen):
                        resp = siamese_forward(model, z, x, params, training=True)
                    task = tracking_task_loss(resp, y)
                    loss = total_loss(task, [params[k] for k in _gate_keys(model)], config.lam)
                grads = backward(loss, tape)
            except NonFiniteError as e:
                raise TrainingDiverged(epoch, str(e)) from e
            losses.append(task.item())
            if frozen:
                continue
            for key, arr in live.items():
                g = grads[params[key]]
                v = velocity[key]
                v *= config.momentum
                v += g
                arr -= config.lr * v
        if not all(np.isfinite(v).all() for v in live.values()):
            raise TrainingDiverged(epoch, "non-finite parameters")
        history.task_loss.append(float(np.mean(losses)))
        history.penalty.append(gate_l1(model))
        history.sparsity.append(sparsity_fraction(model))
    return model, history


class _frozen_stats:
    """Restore BN running statistics on exit when ``active``."""

    def __init__(self, model: ModelGraph, active: bool):
        self.model = model
        self.active = active

    def __enter__(self):
        if self.active:
            self.saved = [(n.weights, {k: n.weights[k].copy() for k in ("running_mean", "running_var")})
                          for n in self.model.nodes if n.kind == "bn"]
        return self

    def __exit__(self, *exc):
        if self.active:
            for weights, old in self.saved:
                for k, v in old.items():
                    weights[k][...] = v


def finetune(model: ModelGraph, data: PairStream, config: TrainConfig) -> tuple[ModelGraph, TrainHistory]:
    """Recover accuracy after surgery: the same loop with the penalty removed."""
    if config.mode != "finetune":
        raise ValueError("finetune needs a config with mode='finetune'")
    return train(model, data, config)
