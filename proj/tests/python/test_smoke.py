import math
import os
import subprocess

import pytest

import exitrec


def test_softmax_symmetry_and_extremes():
    assert exitrec.bidimensional_softmax(2.0, 2.0) == 0.5
    a = exitrec.bidimensional_softmax(3.0, -1.0)
    assert a + exitrec.bidimensional_softmax(-1.0, 3.0) == 1.0
    assert exitrec.bidimensional_softmax(1000.0, -1000.0) == 1.0
    assert exitrec.bidimensional_softmax(-1000.0, 1000.0) == 0.0


def test_auc():
    assert exitrec.auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert exitrec.auc([0.5, 0.5], [0, 1]) == 0.5
    with pytest.raises(exitrec.UndefinedMetric):
        exitrec.auc([0.2, 0.3], [1, 1])


def test_policy_rule():
    p = exitrec.ExitPolicy(tau=0.05, window=2)
    assert not exitrec.should_exit(p, 0.1, [0.1])
    assert exitrec.should_exit(p, 0.1, [0.1, 0.12])
    with pytest.raises(exitrec.NoHistory):
        exitrec.window_mean([], 2)
    with pytest.raises(exitrec.ConfigError):
        exitrec.ExitPolicy(tau=-1.0)
    exited, layer, _, evaluated = exitrec.replay(
        [(3, 0.5), (6, 0.5), (9, 0.5)], 0.5, 12, exitrec.ExitPolicy(tau=0.0))
    assert (exited, layer, evaluated) == (False, -1, 12)


def test_head_lr():
    assert exitrec.head_lr(0.1, 0.5, 0) == 0.1
    assert math.isclose(exitrec.head_lr(0.1, 0.5, 2), 0.1 * math.exp(-1.0))


def test_model_roundtrip_shapes():
    m = exitrec.new_model('{"num_layers": 2, "d_model": 16, "n_heads": 2, "d_ff": 32,'
                          ' "vocab_size": 64, "context_limit": 32, "exit_layers": [1]}')
    p = m.predict_yes([2, 10, 11, 12])
    assert 0.0 < p < 1.0
    assert m.phase == "initialized"


def test_cli_pipeline(tmp_path):
    cli = os.environ.get("EXITREC_CLI")
    if not cli:
        pytest.skip("EXITREC_CLI not set")
    n = exitrec.generate_synthetic("clustered", 200, 100, 3, tmp_path / "raw")
    assert n == 200 * 20
    run = lambda *a: subprocess.run([cli, *map(str, a)], capture_output=True, text=True)
    r = run("ingest", "--input", tmp_path / "raw" / "interactions.csv", "--threshold", 3,
            "--boundary", "gt", "--seed", 3, "--out", tmp_path / "split")
    assert r.returncode == 0, r.stderr
    assert sum(exitrec.split_sizes(tmp_path / "split")) == 200 * 17
    r = run("train-retriever", "--split", tmp_path / "split", "--out", tmp_path / "t.bin")
    assert r.returncode == 0, r.stderr
    hits = exitrec.retrieve(tmp_path / "t.bin", "u0", 4)
    assert len(hits) == 4 and all(u != "u0" for u, _ in hits)
    with pytest.raises(exitrec.DataError):
        exitrec.retrieve(tmp_path / "t.bin", "nobody", 4)
    r = run("ingest", "--input", tmp_path / "missing.csv", "--out", tmp_path / "x")
    assert r.returncode == 3
    r = run("sweep", "--traces", tmp_path / "missing.jsonl", "--out", tmp_path / "s.csv")
    assert r.returncode == 3
    r = run("train", "--split", tmp_path / "split", "--phase", "sideways", "--out", tmp_path / "m.ckpt")
    assert r.returncode == 2
