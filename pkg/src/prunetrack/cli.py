"""Command line driver for the pruning pipeline.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.

CSV column orders:
  train_history.csv / finetune_history.csv: epoch,task_loss,penalty,sparsity_fraction
  surgery.csv:    layer,kept,removed
  metrics.csv:    AO,SR@0.5,SR@0.75,frames
  curves.csv:     kind,threshold,value
  cost.csv:       layer,kind,params,flops
  sweep.csv:      budget,AO,SR@0.5,SR@0.75,FLOPs,conv_FLOPs,params,params_MB,AO_before_finetune
  active_dims.csv: budget,layer,granularity,kept,total,fraction
  attention_modules.csv: budget,module,heads_kept,heads_total,active
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline, serialize, tracking
from .config import ConfigError, PipelineConfig, config_hash, parse_config, save_config
from .cost import count_flops
from .planner import BudgetSpec, PlanError, make_plan

log = logging.getLogger("prunetrack")


class CliError(RuntimeError):
    pass


def _stamp(seed: int, input_hash: str) -> str:
    return f"# seed={seed} input_sha256={input_hash}\n"


def _load_cfg(args) -> PipelineConfig:
    if not args.config:
        raise ConfigError("config", "--config is required for this command")
    try:
        text = Path(args.config).read_text()
    except OSError as e:
        raise ConfigError("config", str(e)) from None
    cfg = parse_config(text)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    return cfg.validate()


def _out_dir(args, cfg: PipelineConfig | None = None) -> Path:
    d = Path(args.out or (cfg.out if cfg else "."))
    d.mkdir(parents=True, exist_ok=True)
    return d


def _config_hash(cfg: PipelineConfig) -> str:
    return config_hash(cfg)


def _provenance(model, stage: str, seed: int, input_hash: str) -> None:
    model.metadata = dict(model.metadata)
    model.metadata["provenance"] = {"stage": stage, "seed": seed, "input_sha256": input_hash}


def _seed_of(model, args) -> int:
    if args.seed is not None:
        return args.seed
    return int(model.metadata.get("provenance", {}).get("seed", 0))


def _require(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"missing input file: {p}")
    return p


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args, cfg)
    save_config(cfg, out / "config.txt")
    model, hist = pipeline.run_train(cfg)
    _provenance(model, "train", cfg.seed, _config_hash(cfg))
    serialize.save_graph(model, out / "trained.graph.json")
    (out / "train_history.csv").write_text(_stamp(cfg.seed, _config_hash(cfg)) + hist.to_csv())
    print(out / "trained.graph.json")
    return 0


def cmd_plan(args) -> int:
    mpath = _require(args.model)
    model = serialize.load_graph(mpath)
    try:
        spec = BudgetSpec(args.mode, args.budget, args.floor, args.encoder_fraction, args.decoder_fraction)
    except PlanError as e:
        raise ConfigError("budget", str(e)) from None
    plan = make_plan(model, spec)
    plan.extra = {"seed": _seed_of(model, args), "input_sha256": serialize.file_hash(mpath)}
    out = _out_dir(args)
    serialize.save_plan(plan, out / "plan.json")
    print(out / "plan.json")
    return 0


def cmd_prune(args) -> int:
    mpath, ppath = _require(args.model), _require(args.plan)
    model = serialize.load_graph(mpath)
    plan = serialize.load_plan(ppath)
    if plan.gate_hash != model.gate_snapshot_hash():
        raise CliError("stale plan: its gate snapshot hash does not match the model's gates; re-run plan")
    pruned, report = pipeline.prune(model, plan)
    seed = _seed_of(model, args)
    h = serialize.text_hash(serialize.file_hash(mpath) + serialize.file_hash(ppath))
    _provenance(pruned, "prune", seed, h)
    out = _out_dir(args)
    serialize.save_graph(pruned, out / "pruned.graph.json")
    (out / "surgery.csv").write_text(_stamp(seed, h) + report.to_csv())
    print(f"residual {report.residual:.3e}; params {report.params_before} -> {report.params_after}")
    return 0


def cmd_finetune(args) -> int:
    mpath = _require(args.model)
    cfg = _load_cfg(args)
    model = serialize.load_graph(mpath)
    tuned, hist = pipeline.run_finetune(model, cfg)
    h = serialize.file_hash(mpath)
    _provenance(tuned, "finetune", cfg.seed, h)
    out = _out_dir(args, cfg)
    serialize.save_graph(tuned, out / "finetuned.graph.json")
    (out / "finetune_history.csv").write_text(_stamp(cfg.seed, h) + hist.to_csv())
    print(out / "finetuned.graph.json")
    return 0


def cmd_eval(args) -> int:
    mpath = _require(args.model)
    model = serialize.load_graph(mpath)
    n, length = args.sequences, args.length
    if args.config:
        cfg = _load_cfg(args)
        n, length = cfg.bench_sequences, cfg.bench_length
    m = tracking.evaluate(model, tracking.benchmark_suite(range(n), length))
    seed, h = _seed_of(model, args), serialize.file_hash(mpath)
    text = _stamp(seed, h) + "# success: IoU > t\nAO,SR@0.5,SR@0.75,frames\n"
    text += f"{m.ao!r},{m.sr50!r},{m.sr75!r},{m.n_frames}\n"
    curves = _stamp(seed, h) + "kind,threshold,value\n"
    curves += "".join(f"success,{t!r},{v!r}\n" for t, v in zip(tracking.SUCCESS_THRESHOLDS, m.success_curve))
    curves += "".join(f"precision,{t!r},{v!r}\n" for t, v in zip(tracking.PRECISION_THRESHOLDS, m.precision_curve))
    out = _out_dir(args)
    (out / "metrics.csv").write_text(text)
    (out / "curves.csv").write_text(curves)
    sys.stdout.write(text if args.format == "csv" else f"AO {m.ao:.4f}  SR@0.5 {m.sr50:.4f}  SR@0.75 {m.sr75:.4f}\n")
    return 0


def cmd_cost(args) -> int:
    mpath = _require(args.model)
    model = serialize.load_graph(mpath)
    size = args.input_size or model.metadata["search_size"]
    rep = count_flops(model, (1, 3, size, size))
    text = _stamp(_seed_of(model, args), serialize.file_hash(mpath)) + rep.to_csv()
    if args.out:
        (_out_dir(args) / "cost.csv").write_text(text)
    if args.format == "csv":
        sys.stdout.write(text)
    else:
        print(f"params {rep.total_params} ({rep.param_mb:.4f} MB)  FLOPs {rep.total_flops}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args, cfg)
    save_config(cfg, out / "config.txt")
    report = pipeline.sweep(cfg)
    for key, model in report.models.items():
        _provenance(model, "train" if key == "base" else "finetune", cfg.seed, _config_hash(cfg))
        serialize.save_graph(model, out / f"model_{key}.graph.json")
    (out / "sweep.csv").write_text(report.table_csv())
    (out / "active_dims.csv").write_text(report.active_dims_csv())
    if report.attention:
        (out / "attention_modules.csv").write_text(report.attention_csv())
    if args.format == "csv":
        sys.stdout.write(report.table_csv())
    else:
        for r in report.rows:
            print(f"{r['budget']!s:>6}  AO {r['AO']:.4f}  FLOPs {r['FLOPs']}  params {r['params']}")
    return 0


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=d(None), help="pipeline config file (key = value lines)")
    common.add_argument("--seed", type=int, default=d(None), help="override the master seed")
    common.add_argument("--out", default=d(None), help="output directory")
    common.add_argument("--format", choices=("text", "csv"), default=d("text"))
    return common


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prunetrack", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter,
                                parents=[_global_flags(False)])
    # global flags are accepted before or after the subcommand
    common = _global_flags(True)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="stage 1: sparsity-penalized training")
    sp = sub.add_parser("plan", parents=[common], help="compute keep-masks for a budget")
    sp.add_argument("--model", required=True)
    sp.add_argument("--budget", type=float, required=True)
    sp.add_argument("--mode", default="layerwise", choices=("global", "layerwise", "blockwise", "decoupled"))
    sp.add_argument("--floor", type=int, default=1)
    sp.add_argument("--encoder-fraction", type=float)
    sp.add_argument("--decoder-fraction", type=float)
    sp = sub.add_parser("prune", parents=[common], help="stage 2: remove pruned channels")
    sp.add_argument("--model", required=True)
    sp.add_argument("--plan", required=True)
    sp = sub.add_parser("finetune", parents=[common], help="stage 3: penalty-free fine-tuning")
    sp.add_argument("--model", required=True)
    sp = sub.add_parser("eval", parents=[common], help="run the synthetic tracking benchmark")
    sp.add_argument("--model", required=True)
    sp.add_argument("--sequences", type=int, default=len(tracking.BENCHMARK_SEEDS))
    sp.add_argument("--length", type=int, default=tracking.BENCHMARK_LENGTH)
    sp = sub.add_parser("cost", parents=[common], help="parameter and FLOPs report")
    sp.add_argument("--model", required=True)
    sp.add_argument("--input-size", type=int)
    sub.add_parser("sweep", parents=[common], help="full pipeline over a budget list")
    return p


COMMANDS = {"train": cmd_train, "plan": cmd_plan, "prune": cmd_prune, "finetune": cmd_finetune,
            "eval": cmd_eval, "cost": cmd_cost, "sweep": cmd_sweep}


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (CliError, OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
