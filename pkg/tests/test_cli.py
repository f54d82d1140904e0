import json
import subprocess
import sys

import numpy as np
import pytest

from depthup import model, synth
from depthup.cli import main

SPEC = {"n_sequences": 2, "duration_s": 0.4, "width": 48, "height": 32}
NET = {"cascades": 2, "base_filters": 4, "input_h": 32, "input_w": 48}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.json").write_text(json.dumps(SPEC))
    assert main(["gen", "--spec", str(root / "spec.json"), "--out", str(root / "data"), "--seed", "2"]) == 0
    cfg = {"network": NET, "training": {"epochs": 1, "batch_size": 2, "eval_stride": 4},
           "data": {"dataset_dir": "data", "held_out": "seq1", "weights_out": "w.bin"}}
    (root / "run.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", str(root / "run.json")]) == 0
    return root


def test_gen_writes_sequences(workspace, capsys, tmp_path):
    seqs = synth.read_dataset(workspace / "data")
    assert [s.name for s in seqs] == ["seq0", "seq1"]
    assert all(len(s.rgb_ts) == 8 * len(s.depth_ts) == 96 for s in seqs)
    # same seed, same bytes
    assert main(["gen", "--spec", str(workspace / "spec.json"), "--out", str(tmp_path / "again"), "--seed", "2"]) == 0
    again = synth.read_dataset(tmp_path / "again")
    assert all(a.equals(b) for a, b in zip(seqs, again))


def test_gen_config_errors(tmp_path, capsys):
    assert main(["gen", "--out", str(tmp_path), "--duration", "0"]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text('{\n "n_sequences": 2,\n "duration_s": ,\n}')
    assert main(["gen", "--spec", str(bad), "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert "bad.json:3" in err and '"duration_s": ,' in err


def test_train_outputs(workspace):
    net = model.load_weights(workspace / "w.bin")
    assert net.config.cascades == 2
    log = json.loads((workspace / "w.log.json").read_text())
    assert log["held_out"] == "seq1" and len(log["history"]) == 1


def test_train_zero_epochs_and_determinism(workspace, capsys):
    args = ["train", "--config", str(workspace / "run.json")]
    assert main(args + ["--epochs", "0", "--weights-out", str(workspace / "w0.bin")]) == 0
    assert "zero epochs" in capsys.readouterr().out
    init = model.build(model.NetworkConfig(**NET), seed=0)
    for p, q in zip(model.load_weights(workspace / "w0.bin").params, init.params):
        np.testing.assert_array_equal(p.value, q.value)
    assert main(args + ["--weights-out", str(workspace / "w2.bin")]) == 0
    a = json.loads((workspace / "w.log.json").read_text())["history"][0]["train_loss"]
    b = json.loads((workspace / "w2.log.json").read_text())["history"][0]["train_loss"]
    assert a == b


def test_train_config_errors(workspace, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"training": {"epochz": 1}}))
    assert main(["train", "--config", str(cfg)]) == 1
    cfg.write_text(json.dumps({"data": {"dataset_dir": str(tmp_path / "none")}}))
    assert main(["train", "--config", str(cfg)]) == 2


def test_eval_report_and_json(workspace, capsys):
    out_json = workspace / "eval.json"
    assert main(["eval", "--weights", str(workspace / "w.bin"), "--data", str(workspace / "data"),
                 "--held-out", "seq1", "--deltas", "1,2", "--json", str(out_json)]) == 0
    text = capsys.readouterr().out
    assert "naive" in text and "flow" in text and "network" in text
    doc = json.loads(out_json.read_text())
    assert {r["delta"] for r in doc["results"]} == {1, 2}
    assert main(["eval", "--weights", str(workspace / "w.bin"), "--data", str(workspace / "data"),
                 "--held-out", "seq1", "--deltas", "1,2", "--json", str(workspace / "eval2.json")]) == 0
    assert (workspace / "eval2.json").read_text() == out_json.read_text()


def test_eval_errors(workspace, tmp_path):
    data = str(workspace / "data")
    assert main(["eval", "--weights", str(workspace / "w.bin"), "--data", data, "--held-out", "nope"]) == 1
    assert main(["eval", "--weights", str(workspace / "w.bin"), "--data", data, "--deltas", "0"]) == 1
    junk = tmp_path / "junk.bin"
    junk.write_bytes(b"garbage")
    assert main(["eval", "--weights", str(junk), "--data", data]) == 2
    assert main(["eval", "--weights", str(tmp_path / "absent.bin"), "--data", data]) == 2


def test_infer_writes_frames(workspace):
    out = workspace / "pred"
    assert main(["infer", "--weights", str(workspace / "w.bin"), "--seq", str(workspace / "data" / "seq1"),
                 "--out", str(out), "--frames", "5", "--pipelined"]) == 0
    doc = json.loads((out / "predictions.json").read_text())
    assert len(doc["frames"]) == 5 and (doc["width"], doc["height"]) == (48, 32)
    frame = np.fromfile(out / doc["frames"][0]["file"], dtype="<u2")
    assert frame.size == 48 * 32
    assert main(["infer", "--weights", str(workspace / "w.bin"), "--seq", str(workspace / "data" / "seq1"),
                 "--out", str(workspace / "pred_half"), "--frames", "2", "--half"]) == 0


def test_bench_and_ablate(workspace, capsys):
    assert main(["bench", "--weights", str(workspace / "w.bin"), "--seq", str(workspace / "data" / "seq0"),
                 "--frames", "4", "--warmup", "1", "--json", str(workspace / "bench.json")]) == 0
    assert "throughput" in capsys.readouterr().out
    assert json.loads((workspace / "bench.json").read_text())["pipelined_identical"] is True
    assert main(["ablate", "--config", str(workspace / "run.json"), "--cascades", "2",
                 "--json", str(workspace / "abl.json")]) == 0
    rows = json.loads((workspace / "abl.json").read_text())
    assert [r["name"] for r in rows][0] == "cascades=2" and len(rows) == 5


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "depthup", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "gen" in r.stdout and "ablate" in r.stdout
