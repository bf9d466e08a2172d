import json
import math

import numpy as np
import pytest

from prunetrack import serialize
from prunetrack.cli import main, make_parser
from prunetrack.config import ConfigError, config_hash, config_to_text, parse_config
from prunetrack.planner import BudgetSpec, make_plan
from prunetrack.serialize import FormatError, file_hash, text_hash

from _helpers import ARCHS, randomize_gates, toy_model

TINY = """\
arch = mini_alex
widths = 4,4,5,5,4
seed = 3
train_epochs = 1
train_steps = 2
train_batch = 2
finetune_epochs = 1
finetune_steps = 1
finetune_batch = 2
budgets = 0.75, 0.5, 0.25
bench_sequences = 2
bench_length = 4
"""


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY)
    return p


def run(*argv):
    return main([str(a) for a in argv])


# --- config ----------------------------------------------------------------

def test_parse_config_values():
    cfg = parse_config(TINY + "# comment\n\nbudget_mode = global  # trailing\n")
    assert cfg.widths == [4, 4, 5, 5, 4] and cfg.budgets == [0.75, 0.5, 0.25]
    assert cfg.budget_mode == "global" and cfg.train_lambda == 0.01 and cfg.seed == 3


def test_config_text_round_trip():
    cfg = parse_config(TINY)
    text = config_to_text(cfg)
    assert config_to_text(parse_config(text)) == text
    assert parse_config(text) == cfg


@pytest.mark.parametrize("text,key", [
    ("seed = 1\n", "arch"),
    ("arch = mini_lenet\n", "arch"),
    ("arch = mini_alex\nbogus = 1\n", "bogus"),
    ("arch = mini_alex\nheads = 2\n", "heads"),
    ("arch = mini_alex\nbudgets = 0.5, 0.75\n", "budgets"),
    ("arch = mini_alex\nbudgets =\n", "budgets"),
    ("arch = mini_alex\nbudgets = 0.5, 1.5\n", "budgets"),
    ("arch = mini_alex\nseed = one\n", "seed"),
    ("arch = mini_alex\nseed = 1\nseed = 2\n", "seed"),
    ("arch = mini_alex\ntrain_lr = -1\n", "train_*"),
    ("arch = mini_alex\nbudget_mode = random\n", "budget_mode"),
])
def test_config_errors_name_the_field(text, key):
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    assert exc.value.key == key and repr(key) in str(exc.value)


def test_config_line_without_equals():
    with pytest.raises(ConfigError):
        parse_config("arch mini_alex\n")


# --- serialization ---------------------------------------------------------

@pytest.mark.parametrize("arch", ARCHS)
def test_graph_round_trip_byte_identical(arch):
    m = randomize_gates(toy_model(arch, seed=2), np.random.default_rng(0))
    text = serialize.graph_to_json(m)
    back = serialize.graph_from_json(text)
    assert serialize.graph_to_json(back) == text
    arrays = dict(back.arrays())
    assert all(np.array_equal(a, arrays[k]) for k, a in m.arrays())
    assert back.head.attrs == m.head.attrs and back.gate_snapshot_hash() == m.gate_snapshot_hash()


def test_plan_round_trip_byte_identical():
    m = randomize_gates(toy_model("mini_encdec"), np.random.default_rng(1))
    p = make_plan(m, BudgetSpec("decoupled", 0.5, 1, 0.25, 0.75))
    p.extra = {"seed": 4, "input_sha256": "ab"}
    text = serialize.plan_to_json(p)
    back = serialize.plan_from_json(text)
    assert serialize.plan_to_json(back) == text
    assert back.spec == p.spec and back.gate_hash == p.gate_hash
    assert all(np.array_equal(back.masks[g], p.masks[g]) for g in p.masks)


def test_wrong_format_rejected():
    with pytest.raises(FormatError):
        serialize.graph_from_json(json.dumps({"format": "other"}))
    with pytest.raises(FormatError):
        serialize.plan_from_json(json.dumps({"format": "prunetrack-graph"}))
    doc = json.loads(serialize.graph_to_json(toy_model("mini_alex")))
    doc["version"] = 99
    with pytest.raises(FormatError):
        serialize.graph_from_json(json.dumps(doc))


def test_weights_are_little_endian_float64():
    doc = json.loads(serialize.graph_to_json(toy_model("mini_alex")))
    w = doc["nodes"][1]["weights"]["w"]
    arr = serialize._dec(w)
    assert list(arr.shape) == w["shape"] and arr.dtype == np.float64


# --- CLI -------------------------------------------------------------------

def test_help_documents_columns(capsys):
    with pytest.raises(SystemExit):
        make_parser().parse_args(["--help"])
    text = capsys.readouterr().out
    assert "AO,SR@0.5,SR@0.75,frames" in text and "layer,kind,params,flops" in text


def test_missing_config_exit_2(tmp_path, capsys):
    assert run("train") == 2
    assert run("train", "--config", tmp_path / "absent.cfg") == 2


def test_missing_arch_exit_2(tmp_path, capsys):
    p = tmp_path / "c.cfg"
    p.write_text("seed = 1\n")
    assert run("train", "--config", p) == 2
    assert "'arch'" in capsys.readouterr().err


def test_missing_model_file_exit_1(tmp_path, capsys):
    assert run("cost", "--model", tmp_path / "none.json") == 1
    assert "missing input file" in capsys.readouterr().err


def test_bad_budget_exit_2(tmp_path):
    m = tmp_path / "m.json"
    serialize.save_graph(toy_model("mini_alex"), m)
    assert run("plan", "--model", m, "--budget", "0", "--out", tmp_path) == 2


@pytest.fixture
def chain(tiny, tmp_path, capsys):
    out = tmp_path / "run"
    assert run("train", "--config", tiny, "--out", out) == 0
    assert run("plan", "--model", out / "trained.graph.json", "--budget", "0.5", "--out", out) == 0
    assert run("prune", "--model", out / "trained.graph.json", "--plan", out / "plan.json", "--out", out) == 0
    assert run("finetune", "--model", out / "pruned.graph.json", "--config", tiny, "--out", out) == 0
    assert run("eval", "--model", out / "finetuned.graph.json", "--sequences", 2, "--length", 4,
               "--out", out, "--format", "csv") == 0
    capsys.readouterr()
    return out


def test_full_chain_metrics_finite(chain):
    lines = [l for l in (chain / "metrics.csv").read_text().splitlines() if not l.startswith("#")]
    assert lines[0] == "AO,SR@0.5,SR@0.75,frames"
    values = [float(v) for v in lines[1].split(",")]
    assert all(math.isfinite(v) for v in values) and values[3] == 6
    curves = (chain / "curves.csv").read_text().splitlines()
    assert curves[1] == "kind,threshold,value" and len(curves) == 2 + 21 + 51


def test_trained_graph_round_trips(chain):
    text = (chain / "trained.graph.json").read_text()
    assert serialize.graph_to_json(serialize.graph_from_json(text)) == text
    for name in ("plan.json",):
        t = (chain / name).read_text()
        assert serialize.plan_to_json(serialize.plan_from_json(t)) == t


def test_provenance_chain(chain):
    trained, plan = chain / "trained.graph.json", chain / "plan.json"
    cfg = parse_config((chain / "config.txt").read_text())
    assert serialize.load_graph(trained).metadata["provenance"] == {
        "stage": "train", "seed": 3, "input_sha256": config_hash(cfg)}
    p = serialize.load_plan(plan)
    assert p.extra == {"seed": 3, "input_sha256": file_hash(trained)}
    pruned = serialize.load_graph(chain / "pruned.graph.json")
    assert pruned.metadata["provenance"]["input_sha256"] == text_hash(file_hash(trained) + file_hash(plan))
    tuned = serialize.load_graph(chain / "finetuned.graph.json")
    assert tuned.metadata["provenance"]["input_sha256"] == file_hash(chain / "pruned.graph.json")
    stamp = (chain / "metrics.csv").read_text().splitlines()[0]
    assert stamp == f"# seed=3 input_sha256={file_hash(chain / 'finetuned.graph.json')}"


def test_surgery_csv(chain):
    lines = (chain / "surgery.csv").read_text().splitlines()
    assert lines[1] == "layer,kept,removed" and lines[2] == "bn1,2,2"


def test_stale_plan_refused(chain, capsys):
    trained = chain / "trained.graph.json"
    m = serialize.load_graph(trained)
    m.gates["bn1.gamma"].values[0] += 0.5
    serialize.save_graph(m, trained)
    assert run("prune", "--model", trained, "--plan", chain / "plan.json", "--out", chain) == 1
    assert "stale plan" in capsys.readouterr().err


def test_full_budget_prune_is_exact(chain, capsys):
    trained = chain / "trained.graph.json"
    assert run("plan", "--model", trained, "--budget", "1.0", "--out", chain / "full") == 0
    assert run("prune", "--model", trained, "--plan", chain / "full" / "plan.json", "--out", chain / "full") == 0
    residual = float(capsys.readouterr().out.splitlines()[-1].split()[1].rstrip(";"))
    assert residual < 1e-9
    meta = (chain / "full" / "surgery.csv").read_text().splitlines()
    assert any("residual=0.0" in l for l in meta)


def test_cost_command(chain, capsys):
    assert run("cost", "--model", chain / "trained.graph.json", "--format", "csv") == 0
    out = capsys.readouterr().out.splitlines()
    assert out[2] == "layer,kind,params,flops" and out[-1].startswith("total,,")


def test_same_config_identical_outputs(tiny, tmp_path):
    for d in ("a", "b"):
        assert run("train", "--config", tiny, "--out", tmp_path / d) == 0
    for name in ("trained.graph.json", "train_history.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_flag_overrides_config(tiny, tmp_path):
    assert run("train", "--config", tiny, "--seed", "9", "--out", tmp_path) == 0
    assert "seed = 9" in (tmp_path / "config.txt").read_text()


def test_global_flags_before_subcommand(tiny, tmp_path):
    assert run("--config", tiny, "--out", tmp_path, "train") == 0
    assert (tmp_path / "trained.graph.json").is_file()


def test_sweep_rows_and_monotone_flops(tiny, tmp_path, capsys):
    assert run("sweep", "--config", tiny, "--out", tmp_path, "--format", "csv") == 0
    lines = [l for l in (tmp_path / "sweep.csv").read_text().splitlines() if not l.startswith("#")]
    header = lines[0].split(",")
    rows = [dict(zip(header, l.split(","))) for l in lines[1:]]
    assert [r["budget"] for r in rows] == ["base", "0.75", "0.5", "0.25"]
    flops = [int(r["FLOPs"]) for r in rows]
    assert all(a > b for a, b in zip(flops, flops[1:]))
    for key in ("base", "0.75", "0.5", "0.25"):
        assert (tmp_path / f"model_{key}.graph.json").is_file()
    assert not (tmp_path / "attention_modules.csv").exists()


def test_sweep_empty_budgets(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("arch = mini_alex\nbudgets =\n")
    assert run("sweep", "--config", p, "--out", tmp_path) == 2


def test_vit_sweep_attention_table(tmp_path):
    p = tmp_path / "vit.cfg"
    p.write_text("arch = mini_vit\nlayers = 2\ndim = 8\nheads = 4\nmlp_ratio = 2\n"
                 "train_epochs = 1\ntrain_steps = 1\ntrain_batch = 2\nfinetune_epochs = 1\n"
                 "finetune_steps = 1\nfinetune_batch = 2\nbudgets = 0.5, 0.25\n"
                 "bench_sequences = 1\nbench_length = 3\n")
    assert run("sweep", "--config", p, "--out", tmp_path) == 0
    lines = [l for l in (tmp_path / "attention_modules.csv").read_text().splitlines() if not l.startswith("#")]
    rows = [dict(zip(lines[0].split(","), l.split(","))) for l in lines[1:]]
    for b in ("0.5", "0.25"):
        sel = [r for r in rows if r["budget"] == b]
        assert len(sel) == 2
        assert sum(int(r["heads_kept"]) for r in sel) == 2 * max(1, math.ceil(float(b) * 4))
        assert all(r["active"] == "1" for r in sel)
