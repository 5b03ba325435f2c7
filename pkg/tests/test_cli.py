import json
import subprocess
import sys

import numpy as np
import pytest

from calonet import cli
from calonet.causal import parse_json
from calonet.dataset import Coupling, Pattern, SynthConfig, load_ts

SMALL = SynthConfig(n_dims=3, length=24, n_classes=2, samples_per_class=4,
                    couplings=[[Coupling(0, 1, 0.9)], [Coupling(2, 0, 0.9)]],
                    patterns=[[Pattern(1, 4, 8)], [Pattern(2, 12, 8)]])


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def kv(out):
    return dict(line.split("=", 1) for line in out.strip().splitlines())


@pytest.fixture()
def data(tmp_path, capsys):
    cfg = tmp_path / "synth.json"
    cfg.write_text(json.dumps(SMALL.to_dict()))
    for name, seed in (("train.ts", 1), ("test.ts", 2)):
        assert run(capsys, "synth", "--config", cfg, "--seed", seed, "--out", tmp_path / name)[0] == 0
    run_cfg = tmp_path / "run.json"
    run_cfg.write_text(json.dumps({"train": {"epochs": 2, "batch_size": 4, "lr": 0.01}, "causal": {"threshold": 0.1}}))
    return tmp_path, run_cfg


def _train(capsys, tmp, cfg, out="run", *extra):
    return run(capsys, "train", "--train", tmp / "train.ts", "--test", tmp / "test.ts",
               "--config", cfg, "--out", tmp / out, *extra)


def test_synth_is_byte_identical(tmp_path, capsys):
    run(capsys, "synth", "--seed", 3, "--out", tmp_path / "a.ts")
    run(capsys, "synth", "--seed", 3, "--out", tmp_path / "b.ts")
    assert (tmp_path / "a.ts").read_bytes() == (tmp_path / "b.ts").read_bytes()
    ds = load_ts(tmp_path / "a.ts")
    assert (ds.n_dims, ds.length, len(ds)) == (6, 100, 40)


def test_train_writes_artifacts_and_accuracy(data, capsys):
    tmp, cfg = data
    code, out, _ = _train(capsys, tmp, cfg)
    assert code == 0
    assert {"model.json", "report.csv", "config.resolved.json"} <= {p.name for p in (tmp / "run").iterdir()}
    acc = float(kv(out)["accuracy"])
    last = (tmp / "run" / "report.csv").read_text().strip().splitlines()[-1].split(",")
    assert acc == float(last[4])
    resolved = json.loads((tmp / "run" / "config.resolved.json").read_text())
    assert resolved["encoder"]["embed_dim"] == 12 and resolved["causal"]["n_bins"] == 8
    assert resolved["train"]["epochs"] == 2 and resolved["data"]["norm"] == "z"


def test_same_seed_same_report_bytes(data, capsys):
    tmp, cfg = data
    _train(capsys, tmp, cfg, "a", "--seed", 7)
    _train(capsys, tmp, cfg, "b", "--seed", 7)
    assert (tmp / "a" / "report.csv").read_bytes() == (tmp / "b" / "report.csv").read_bytes()
    assert (tmp / "a" / "model.json").read_bytes() == (tmp / "b" / "model.json").read_bytes()


def test_resolved_config_reproduces_run(data, capsys):
    tmp, cfg = data
    _train(capsys, tmp, cfg, "a", "--seed", 4, "--gnn-direction", "sym")
    _train(capsys, tmp, tmp / "a" / "config.resolved.json", "b")
    assert (tmp / "a" / "report.csv").read_bytes() == (tmp / "b" / "report.csv").read_bytes()


def test_thread_count_does_not_change_results(data, capsys, monkeypatch):
    tmp, cfg = data
    _train(capsys, tmp, cfg, "a")
    monkeypatch.setenv("CALONET_THREADS", "4")
    _train(capsys, tmp, cfg, "b")
    assert (tmp / "a" / "report.csv").read_bytes() == (tmp / "b" / "report.csv").read_bytes()


def test_missing_train_flag_is_usage_error(tmp_path, capsys):
    code, out, err = run(capsys, "train", "--out", tmp_path)
    assert code == 1 and out == ""
    assert "usage:" in err and "--train" in err


def test_bad_config_is_exit_one(data, capsys):
    tmp, _ = data
    bad = tmp / "bad.json"
    bad.write_text(json.dumps({"encoder": {"conv_kernel": 4}}))
    assert _train(capsys, tmp, bad)[0] == 1
    bad.write_text(json.dumps({"optimizer": {}}))
    assert _train(capsys, tmp, bad)[0] == 1
    bad.write_text("{not json")
    assert _train(capsys, tmp, bad)[0] == 1


def test_unparsable_data_is_exit_one(tmp_path, capsys):
    (tmp_path / "x.ts").write_text("@dimensions 2\n@nonsense\n@data\n")
    code, _, err = run(capsys, "train", "--train", tmp_path / "x.ts", "--out", tmp_path / "o")
    assert code == 1 and "line 2" in err


def test_eval_matches_final_training_accuracy(data, capsys):
    tmp, cfg = data
    _, out, _ = _train(capsys, tmp, cfg)
    code, out2, _ = run(capsys, "eval", "--model", tmp / "run" / "model.json", "--data", tmp / "test.ts",
                        "--confusion", tmp / "cm.csv")
    assert code == 0
    assert kv(out2)["accuracy"] == kv(out)["accuracy"]
    cm = np.loadtxt(tmp / "cm.csv", delimiter=",")
    assert cm.sum() == 8


def test_eval_incompatible_dataset_is_exit_one(data, capsys):
    tmp, cfg = data
    _train(capsys, tmp, cfg)
    run(capsys, "synth", "--seed", 0, "--out", tmp / "six.ts")  # 6 dims
    assert run(capsys, "eval", "--model", tmp / "run" / "model.json", "--data", tmp / "six.ts")[0] == 1
    assert run(capsys, "eval", "--model", tmp / "nope.json", "--data", tmp / "test.ts")[0] == 1


def test_corrupt_model_is_exit_one(data, capsys):
    tmp, _ = data
    (tmp / "m.json").write_text('{"format": "calonet-model", "vers')
    assert run(capsys, "eval", "--model", tmp / "m.json", "--data", tmp / "test.ts")[0] == 1


def test_graph_dot_has_one_line_per_node(data, capsys):
    tmp, _ = data
    code, out, _ = run(capsys, "graph", "--data", tmp / "train.ts", "--sample", 0, "--format", "dot",
                       "--out", tmp / "g.dot")
    assert code == 0 and kv(out)["nodes"] == "3"
    lines = (tmp / "g.dot").read_text().splitlines()
    assert [ln for ln in lines if ln.strip().rstrip(";").isdigit()] == ["  0;", "  1;", "  2;"]
    assert len([ln for ln in lines if "->" in ln]) == int(kv(out)["edges"])


def test_graph_huge_threshold_has_no_edges(data, capsys):
    tmp, _ = data
    _, out, _ = run(capsys, "graph", "--data", tmp / "train.ts", "--threshold", 1e9, "--out", tmp / "g.dot")
    assert kv(out)["edges"] == "0"
    assert "->" not in (tmp / "g.dot").read_text()


def test_graph_json_round_trip_through_own_loader(data, capsys):
    tmp, _ = data
    run(capsys, "graph", "--data", tmp / "train.ts", "--sample", 5, "--format", "json", "--out", tmp / "a.json")
    run(capsys, "graph", "--from-json", tmp / "a.json", "--format", "json", "--out", tmp / "b.json")
    a, b = parse_json((tmp / "a.json").read_text()), parse_json((tmp / "b.json").read_text())
    assert a.scores.tobytes() == b.scores.tobytes() and a.threshold == b.threshold


def test_graph_sample_out_of_range(data, capsys):
    tmp, _ = data
    code, _, err = run(capsys, "graph", "--data", tmp / "train.ts", "--sample", 99, "--out", tmp / "g.dot")
    assert code == 1 and "out of range" in err


def test_explain_writes_unit_range_csv(data, capsys):
    tmp, cfg = data
    _train(capsys, tmp, cfg)
    for method in ("gradient", "gradient-x-input"):
        out_csv = tmp / f"sal-{method}.csv"
        code, out, _ = run(capsys, "explain", "--model", tmp / "run" / "model.json", "--data", tmp / "test.ts",
                           "--sample", 1, "--method", method, "--out", out_csv)
        assert code == 0 and kv(out) == {"rows": "3", "cols": "24"}
        s = np.loadtxt(out_csv, delimiter=",")
        assert s.shape == (3, 24) and s.min() >= 0 and s.max() <= 1
    a = (tmp / "sal-gradient.csv").read_bytes()
    run(capsys, "explain", "--model", tmp / "run" / "model.json", "--data", tmp / "test.ts",
        "--sample", 1, "--out", tmp / "again.csv")
    assert (tmp / "again.csv").read_bytes() == a


def test_csv_input_trains(data, capsys):
    from calonet.dataset import to_csv
    tmp, cfg = data
    for name in ("train", "test"):
        (tmp / f"{name}.csv").write_text(to_csv(load_ts(tmp / f"{name}.ts")))
    code, _, _ = run(capsys, "train", "--train", tmp / "train.csv", "--test", tmp / "test.csv",
                     "--config", cfg, "--out", tmp / "c", "--norm", "none")
    assert code == 0
    assert json.loads((tmp / "c" / "config.resolved.json").read_text())["data"]["norm"] == "none"


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "calonet", "synth", "--seed", "1", "--out", str(tmp_path / "s.ts")],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout == "samples=40\n"
    proc = subprocess.run([sys.executable, "-m", "calonet", "graph"], capture_output=True, text=True)
    assert proc.returncode == 1 and "usage:" in proc.stderr
