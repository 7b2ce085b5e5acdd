import re

import numpy as np
import pytest

from hvcnet.cli import main
from hvcnet.config import KEYS
from hvcnet.checkpoint import load_checkpoint, save_checkpoint
from hvcnet.ensemble import enumerate_subsets_naive
from hvcnet.predictions import PredictionMatrix

TINY = [
    "--set", "custom_ladder=true",
    "--set", "conv_filters=2 3 4 4 5 5 6 6 7",
    "--set", "train_subset=40",
    "--set", "test_subset=20",
    "--set", "batch_size=20",
    "--set", "augment=none",
]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_params_reports_core_count(capsys):
    code, out, _ = run(capsys, "params")
    assert code == 0
    assert re.search(r"core weights \(conv \+ head\): 1,512,480\n", out)


def test_help_lists_every_config_key(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for key in KEYS:
        assert re.search(rf"^\s+{key}\s", out, re.M), key


@pytest.mark.slow
def test_eval_untrained_checkpoint_is_near_chance(tmp_path, capsys):
    ckpt = tmp_path / "init.hvck"
    assert run(capsys, "init", "--seed", 3, "--out", ckpt)[0] == 0
    code, out, _ = run(capsys, "eval", "--ckpt", ckpt, "--proxy", "test")
    assert code == 0
    acc = float(out.split()[1])
    assert 0.05 <= acc <= 0.15


def test_dump_preds_and_ensemble_commands(tmp_path, capsys):
    ckpts = []
    for seed in (1, 2, 3):
        path = tmp_path / f"m{seed}.hvck"
        assert run(capsys, "init", *TINY[:4], "--seed", seed, "--out", path)[0] == 0
        ckpts.append(path)
    matrix = tmp_path / "p.hvcp"
    code, out, _ = run(capsys, "dump-preds", "--ckpt", *ckpts, "--out", matrix, "--proxy", "test", "--subset", 50)
    assert code == 0 and "3 x 50" in out
    m = PredictionMatrix.load(matrix)
    assert m.names == ["m1", "m2", "m3"]
    code, out, _ = run(capsys, "ensemble", "vote", "--matrix", matrix, "--models", "0,2")
    assert code == 0 and "models: 0,2" in out
    code, out, _ = run(capsys, "ensemble", "troublesome", "--matrix", matrix)
    assert code == 0 and "misclassified by all models" in out


def test_ensemble_count_matches_naive_on_k12_fixture(tmp_path, capsys):
    path = tmp_path / "k12.hvcp"
    assert run(capsys, "ensemble", "synthetic", "--k", 12, "--n", 1000, "--accuracy", 0.8, "--seed", 12, "--out", path)[0] == 0
    hist = tmp_path / "h.csv"
    code, out, _ = run(capsys, "ensemble", "count", "--matrix", path, "--sizes", "all", "--thresholds", "80,85", "--histogram", hist)
    assert code == 0
    oracle = enumerate_subsets_naive(PredictionMatrix.load(path), "all", thresholds=[80, 85])
    counts = np.loadtxt(hist, delimiter=",", skiprows=1, dtype=np.int64)
    assert np.array_equal(counts[:, 1], oracle.histogram)
    assert "subsets evaluated: 4,095 (exact)" in out
    assert re.search(rf"80\.00%\s+\d+\s+{oracle.at_least[0]:,}\n", out)


def test_ensemble_count_default_family(tmp_path, capsys):
    path = tmp_path / "k5.hvcp"
    run(capsys, "ensemble", "synthetic", "--k", 5, "--n", 100, "--out", path)
    code, out, _ = run(capsys, "ensemble", "count", "--matrix", path)
    assert code == 0 and "family: 2-" in out
    assert "subsets evaluated: 26 (exact)" in out  # 2**5 - 1 minus the 5 singletons


def test_augment_preview_writes_pgm(tmp_path, capsys):
    code, out, _ = run(capsys, "augment-preview", "--out-dir", tmp_path, "--count", 2, "--seed", 1, "--proxy", "train")
    assert code == 0
    files = sorted(tmp_path.glob("*.pgm"))
    assert len(files) == 4
    data = files[0].read_bytes()
    assert data.startswith(b"P5\n28 28\n255\n") and len(data) == len(b"P5\n28 28\n255\n") + 784
    code2, _, _ = run(capsys, "augment", "preview", "--out-dir", tmp_path / "b", "--count", 2, "--seed", 1, "--proxy", "train")
    assert code2 == 0
    assert [f.read_bytes() for f in files] == [f.read_bytes() for f in sorted((tmp_path / "b").glob("*.pgm"))]


@pytest.mark.slow
def test_train_is_deterministic_and_flags_override_config(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# tiny run\nepochs = 5\nseed = 9\n")
    logs = []
    for name in ("a", "b"):
        out_dir = tmp_path / name
        code, out, err = run(capsys, "train", "--config", cfg, "--epochs", 1, *TINY, "--proxy", "--out", out_dir)
        assert code == 0, err
        logs.append((out_dir / "metrics.log").read_text())
    assert logs[0] == logs[1]
    assert len(logs[0].strip().splitlines()) == 1


def test_exit_codes(tmp_path, capsys):
    assert run(capsys, "frobnicate")[0] == 1
    assert run(capsys)[0] == 1
    assert run(capsys, "init", "--set", "nonsense=1", "--out", tmp_path / "x")[0] == 1
    assert run(capsys, "train")[0] == 1
    assert run(capsys, "eval", "--ckpt", tmp_path / "missing.hvck", "--proxy", "test")[0] == 2
    junk = tmp_path / "junk.hvcp"
    junk.write_bytes(b"JUNKJUNKJUNKJUNKJUNK")
    code, _, err = run(capsys, "ensemble", "count", "--matrix", junk)
    assert code == 2 and "offset 0" in err


@pytest.mark.slow
def test_numeric_failure_exit_code(tmp_path, capsys):
    ckpt = tmp_path / "bad.hvck"
    assert run(capsys, "init", *TINY, "--set", "epochs=2", "--out", ckpt)[0] == 0
    loaded = load_checkpoint(ckpt)
    loaded.model.params["conv1.bn.gamma"].data[:] = np.nan
    save_checkpoint(ckpt, loaded.model, loaded.state)
    code, _, err = run(capsys, "train", *TINY, "--set", "epochs=2", "--proxy", "--resume", ckpt)
    assert code == 3, err
    assert "epoch" in err
