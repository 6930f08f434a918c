import hashlib

import pytest

from deskvla import checkpoint as ckio
from deskvla.cli import build_parser, main
from deskvla.quant import QuantizedTensor

SMALL = """\
top_shape = 16 16
wrist_shape = 8 8
patch = 4
d_model = 16
n_layers = 1
n_heads = 2
n_chunk = 10
head_hidden = 32
lora_rank = 4
val_fraction = 0.25
batch_size = 2
accum_steps = 2
max_ticks = 30
"""

SUBCOMMANDS = [["dataset", "gen"], ["dataset", "stats"], ["dataset", "validate"], ["train"], ["eval"],
               ["quantize"], ["deploy-sim"], ["diagnose", "vision"], ["diagnose", "oscillation"], ["report"]]


def _tree(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.mark.parametrize("cmd", SUBCOMMANDS, ids=lambda c: "-".join(c))
def test_help_lists_flags(cmd, capsys):
    assert main(cmd + ["--help"]) == 0
    out = capsys.readouterr().out
    sub = build_parser()._subparsers._group_actions[0].choices[cmd[0]]
    if len(cmd) > 1:
        sub = sub._subparsers._group_actions[0].choices[cmd[1]]
    for action in sub._actions:
        for opt in action.option_strings:
            assert opt in out
        if action.option_strings and action.help is None:
            pytest.fail(f"{action.option_strings} undocumented")


def test_usage_errors(tmp_path):
    assert main(["train", "--bogus"]) == 2
    assert main([]) == 2
    assert main(["deploy-sim"]) == 2


def test_domain_error_exit_one(tmp_path):
    assert main(["dataset", "stats", "--data", str(tmp_path / "missing")]) == 1


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.cfg"
    cfg.write_text(SMALL)
    c = ["--config", str(cfg), "--seed", "7"]
    for tag in ("a", "b"):
        d = root / tag
        assert main(["dataset", "gen", "--episodes", "4", "--out", str(d / "data")] + c) == 0
        assert main(["train", "--episodes", str(d / "data"), "--steps", "4", "--checkpoint-interval", "2",
                     "--lr-max", "1e-3", "--lr-min", "1e-5", "--freeze-vision", "--out", str(d / "ck")] + c) == 0
        assert main(["deploy-sim", "--checkpoint", str(d / "ck" / "best"), "--episodes", "2",
                     "--out", str(d / "deploy")] + c) == 0
        assert main(["diagnose", "vision", "--checkpoint", str(d / "ck" / "best"), "--data", str(d / "data"),
                     "--stride", "5", "--label", "frozen", "--train-episodes", "3",
                     "--out", str(d / "diag" / "vision.csv")] + c) == 0
        assert main(["diagnose", "oscillation", "--logs", str(d / "deploy"),
                     "--out", str(d / "diag" / "osc.csv")] + c) == 0
    return root, c


@pytest.mark.parametrize("part", ["data", "ck", "deploy", "diag"])
def test_byte_identical_reruns(pipeline, part):
    root, _ = pipeline
    assert _tree(root / "a" / part) == _tree(root / "b" / part)


def test_pipeline_outputs(pipeline):
    root, c = pipeline
    a = root / "a"
    assert (a / "ck" / "loss.csv").read_text().startswith("step,train_loss,val_loss,lr\n")
    assert {"best", "step_000002", "step_000004"} <= {p.name for p in (a / "ck").iterdir()}
    summary = (a / "deploy" / "summary.csv").read_text().splitlines()
    assert summary[0] == "episode,seed,success,ticks,deadline_misses,estop,final_distance"
    assert (a / "deploy" / "episode_0001.csv").exists()
    assert (a / "diag" / "vision.csv").read_text().splitlines()[1].startswith("frozen,3,")
    assert main(["dataset", "validate", "--data", str(a / "data")] + c) == 0
    assert main(["dataset", "stats", "--data", str(a / "data"), "--out", str(a / "stats.csv")] + c) == 0


def test_quantize_and_eval(pipeline, capsys):
    root, c = pipeline
    a = root / "a"
    q = a / "best.nf4"
    assert main(["quantize", "--in", str(a / "ck" / "best"), "--out", str(q)] + c) == 0
    stored = ckio.load(q).tensors("param.")
    assert isinstance(stored["blocks.0.q.weight"], QuantizedTensor)
    assert q.stat().st_size < (a / "ck" / "best").stat().st_size
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(a / "ck" / "best"), str(q), "--episodes", str(a / "data"),
                 "--out", str(a / "eval.csv")] + c) == 0
    rows = (a / "eval.csv").read_text().splitlines()
    assert rows[0] == "checkpoint,val_loss" and len(rows) == 3


def test_report(tmp_path):
    assert main(["report", "--out", str(tmp_path)]) == 0
    acc = dict(line.split(",") for line in (tmp_path / "accounting.csv").read_text().splitlines()[1:])
    assert acc["lora_params_per_layer"] == "163840"
    assert acc["full_params_per_layer"] == "26214400"
    assert acc["reduction_ratio"] == "160"
    assert acc["lora_params_total"] == "5242880"
    assert acc["bits_per_weight_nodq"] == "4.5"
    assert acc["payload_reduction_nodq"] == "8"
    lat = (tmp_path / "latency.csv").read_text().splitlines()
    assert "total,45" in lat
