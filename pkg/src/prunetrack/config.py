"""Pipeline configuration files.

Plain text, one ``key = value`` per line; ``#`` starts a comment. Lists are
comma separated. Unknown keys, and architecture keys that do not apply to the
chosen ``arch``, are errors.

Keys (defaults in brackets)::

    arch               mini_alex | mini_resnet | mini_vit | mini_encdec   (required)
    seed               master seed [0]
    out                output directory [runs]
    widths             mini_alex: 5 ints; mini_resnet: one trunk width per stage
    stages, blocks     mini_resnet
    layers, mlp_ratio  mini_vit
    stacks, ffn        mini_encdec
    dim, heads, patch  mini_vit, mini_encdec
    train_lambda [0.01]  train_lr [0.05]  train_momentum [0.9]
    train_epochs [5]     train_batch [8]  train_steps [20]
    finetune_lr [0.02]   finetune_momentum [0.9]  finetune_epochs [5]
    finetune_batch [8]   finetune_steps [20]
    budget_mode        global | layerwise | blockwise | decoupled [layerwise]
    budgets            strictly decreasing fractions [0.75,0.5,0.25]
    floor [1]  encoder_fraction  decoder_fraction
    bench_sequences [50]  bench_length [50]
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .planner import MODES as BUDGET_MODES
from .trainer import TrainConfig
from .zoo import ARCHITECTURES


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"config field {key!r}: {message}")
        self.key = key


ARCH_KEYS = {
    "mini_alex": ("widths",),
    "mini_resnet": ("stages", "blocks", "widths"),
    "mini_vit": ("layers", "dim", "heads", "mlp_ratio", "patch"),
    "mini_encdec": ("stacks", "dim", "heads", "ffn", "patch"),
}
_ALL_ARCH_KEYS = {k for keys in ARCH_KEYS.values() for k in keys}


@dataclass
class PipelineConfig:
    arch: str = ""
    seed: int = 0
    out: str = "runs"
    widths: list[int] | None = None
    stages: int | None = None
    blocks: int | None = None
    layers: int | None = None
    dim: int | None = None
    heads: int | None = None
    mlp_ratio: int | None = None
    patch: int | None = None
    stacks: int | None = None
    ffn: int | None = None
    train_lambda: float = 0.01
    train_lr: float = 0.05
    train_momentum: float = 0.9
    train_epochs: int = 5
    train_batch: int = 8
    train_steps: int = 20
    finetune_lr: float = 0.02
    finetune_momentum: float = 0.9
    finetune_epochs: int = 5
    finetune_batch: int = 8
    finetune_steps: int = 20
    budget_mode: str = "layerwise"
    budgets: list[float] = field(default_factory=lambda: [0.75, 0.5, 0.25])
    floor: int = 1
    encoder_fraction: float | None = None
    decoder_fraction: float | None = None
    bench_sequences: int = 50
    bench_length: int = 50

    def validate(self) -> "PipelineConfig":
        if not self.arch:
            raise ConfigError("arch", "missing architecture name")
        if self.arch not in ARCHITECTURES:
            raise ConfigError("arch", f"unknown architecture {self.arch!r}")
        for key in _ALL_ARCH_KEYS - set(ARCH_KEYS[self.arch]):
            if getattr(self, key) is not None:
                raise ConfigError(key, f"does not apply to {self.arch}")
        if not self.budgets:
            raise ConfigError("budgets", "budget list is empty")
        if any(not 0 < b <= 1 for b in self.budgets):
            raise ConfigError("budgets", "every budget must lie in (0, 1]")
        if any(a <= b for a, b in zip(self.budgets, self.budgets[1:])):
            raise ConfigError("budgets", "budgets must be strictly decreasing")
        if self.budget_mode not in BUDGET_MODES:
            raise ConfigError("budget_mode", f"must be one of {BUDGET_MODES}")
        if self.floor < 1:
            raise ConfigError("floor", "must be >= 1")
        if self.bench_sequences < 1 or self.bench_length < 2:
            raise ConfigError("bench_sequences", "need >= 1 sequence of >= 2 frames")
        try:
            self.train_config()
        except ValueError as e:
            raise ConfigError("train_*", str(e)) from None
        try:
            self.finetune_config()
        except ValueError as e:
            raise ConfigError("finetune_*", str(e)) from None
        return self

    def arch_kwargs(self) -> dict:
        kw = {k: getattr(self, k) for k in ARCH_KEYS[self.arch] if getattr(self, k) is not None}
        return kw

    def train_config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig(lam=self.train_lambda, lr=self.train_lr, momentum=self.train_momentum,
                           epochs=self.train_epochs, batch_size=self.train_batch,
                           steps_per_epoch=self.train_steps, seed=self.seed if seed is None else seed,
                           mode="sparsity-train")

    def finetune_config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig(lam=0.0, lr=self.finetune_lr, momentum=self.finetune_momentum,
                           epochs=self.finetune_epochs, batch_size=self.finetune_batch,
                           steps_per_epoch=self.finetune_steps, seed=self.seed if seed is None else seed,
                           mode="finetune")


_FIELDS = {f.name: f for f in dataclasses.fields(PipelineConfig)}


def _parse_value(key: str, raw: str):
    kind = str(_FIELDS[key].type)
    try:
        if kind.startswith("list[int]"):
            return [int(v) for v in raw.split(",") if v.strip()]
        if kind.startswith("list[float]"):
            return [float(v) for v in raw.split(",") if v.strip()]
        if kind.startswith("int"):
            return int(raw)
        if kind.startswith("float"):
            return float(raw)
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {kind.split(' ')[0]}") from None
    return raw


def parse_config(text: str) -> PipelineConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", "expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(key, "unknown key")
        if key in values:
            raise ConfigError(key, "given twice")
        values[key] = _parse_value(key, raw)
    return PipelineConfig(**values).validate()


def _fmt(v) -> str:
    if isinstance(v, list):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def config_to_text(cfg: PipelineConfig) -> str:
    """Canonical form: every set key in declaration order."""
    lines = []
    for name in _FIELDS:
        v = getattr(cfg, name)
        if v is None:
            continue
        lines.append(f"{name} = {_fmt(v)}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: PipelineConfig) -> str:
    """Provenance hash of a config; the output directory is where results go, not an input."""
    return hashlib.sha256(config_to_text(dataclasses.replace(cfg, out="")).encode()).hexdigest()


def load_config(path) -> PipelineConfig:
    return parse_config(Path(path).read_text())


def save_config(cfg: PipelineConfig, path) -> str:
    text = config_to_text(cfg)
    Path(path).write_text(text)
    return text
