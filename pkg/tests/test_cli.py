import os
import filecmp

import numpy as np
import pytest

from stnet.cli import main
from stnet.config import RunConfig


def run_cli(*args):
    return main(list(args))


def test_dump_config_prints_defaults(capsys):
    assert run_cli("train", "--preset", "toy", "--dump-config") == 0
    out = capsys.readouterr().out
    assert "lr=0.001" in out
    assert "phase1_epochs=3" in out
    assert "channels=32" in out


def test_unknown_config_key_fails(capsys):
    assert run_cli("train", "--preset", "toy", "--set", "nonsense=1") == 2
    assert "unknown key" in capsys.readouterr().err


def test_seed_env_fallback(capsys, monkeypatch):
    monkeypatch.setenv("STDA_SEED", "777")
    run_cli("train", "--preset", "toy", "--dump-config")
    assert "seed=777" in capsys.readouterr().out
    monkeypatch.setenv("STDA_SEED", "99")
    run_cli("train", "--preset", "toy", "--seed", "5", "--dump-config")
    assert "seed=5" in capsys.readouterr().out


def _dir_trees_equal(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files:
        return False
    return all(_dir_trees_equal(os.path.join(a, d), os.path.join(b, d))
               for d in cmp.common_dirs)


def test_synth_is_byte_reproducible(tmp_path):
    common = ["--preset", "toy", "--seed", "7", "--videos", "3",
              "--set", "video_frames=8"]
    assert run_cli("synth", "--out", str(tmp_path / "a"), *common) == 0
    assert run_cli("synth", "--out", str(tmp_path / "b"), *common) == 0
    assert _dir_trees_equal(str(tmp_path / "a"), str(tmp_path / "b"))


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    """A dataset, a one-epoch training run, and its checkpoint."""
    root = tmp_path_factory.mktemp("cli")
    data = str(root / "data")
    out = str(root / "out")
    sets = ["--set", "video_frames=10", "--set", "train_videos=2",
            "--set", "test_videos=1", "--set", "steps_per_epoch=2",
            "--set", "phase1_epochs=1", "--set", "phase2_epochs=1",
            "--set", "eval_triples=1"]
    assert run_cli("synth", "--preset", "toy", "--seed", "3", "--out", data,
                   "--videos", "3", *sets) == 0
    code = run_cli("train", "--preset", "toy", "--seed", "3", "--data", data,
                   "--out", out, *sets)
    assert code == 0
    return data, out, sets


def test_train_writes_checkpoints_and_logs(tiny_run, capsys):
    data, out, sets = tiny_run
    assert os.path.exists(os.path.join(out, "final.stn1"))
    assert os.path.exists(os.path.join(out, "checkpoint_epoch_1.stn1"))


def test_eval_prints_three_numbers(tiny_run, capsys):
    data, out, sets = tiny_run
    assert run_cli("eval", "--preset", "toy", "--seed", "3", "--data", data,
                   "--checkpoint", os.path.join(out, "final.stn1"), *sets) == 0
    fields = capsys.readouterr().out.split()
    assert len(fields) == 3
    vals = [float(v) for v in fields]
    assert all(0.0 <= v <= 1.0 for v in vals)


def test_infer_writes_report(tiny_run, tmp_path):
    data, out, sets = tiny_run
    report = str(tmp_path / "report.txt")
    assert run_cli("infer", "--preset", "toy", "--seed", "3", "--data", data,
                   "--checkpoint", os.path.join(out, "final.stn1"),
                   "--video", "0", "--center", "2", "--mode", "shuffle",
                   "--min-score", "0.0", "--out", report, *sets) == 0
    lines = open(report).read().strip().splitlines()
    assert lines and all(line.startswith("frame=") for line in lines)
    frames = {line.split()[0] for line in lines}
    assert frames == {"frame=1", "frame=2", "frame=3"}


def test_infer_full_mode(tiny_run, capsys):
    data, out, sets = tiny_run
    assert run_cli("infer", "--preset", "toy", "--seed", "3", "--data", data,
                   "--checkpoint", os.path.join(out, "final.stn1"),
                   "--video", "0", "--center", "2", "--mode", "full",
                   "--min-score", "0.0", *sets) == 0
    out_text = capsys.readouterr().out
    assert "frame=2" in out_text and "frame=1" not in out_text


def test_bench_prints_ratio(tiny_run, capsys):
    data, out, sets = tiny_run
    assert run_cli("bench", "--preset", "toy", "--seed", "3", "--data", data,
                   "--checkpoint", os.path.join(out, "final.stn1"),
                   "--triples", "2", "--repeats", "2", *sets) == 0
    line = capsys.readouterr().out
    assert "fps_full=" in line and "fps_shuffle=" in line and "ratio=" in line


def test_eval_rejects_mismatched_checkpoint(tiny_run, capsys):
    data, out, sets = tiny_run
    code = run_cli("eval", "--preset", "toy", "--seed", "3", "--data", data,
                   "--checkpoint", os.path.join(out, "final.stn1"),
                   "--set", "channels=64", *sets)
    assert code == 2
    assert "error" in capsys.readouterr().err


def test_missing_dataset_fails(capsys):
    assert run_cli("eval", "--preset", "toy", "--data", "/nonexistent/path",
                   "--checkpoint", "also-missing.stn1") == 2


def test_toy_preset_documented_fields():
    cfg = RunConfig.toy()
    assert (cfg.enc_layers, cfg.dec_layers) == (2, 2)
    assert (cfg.levels, cfg.channels, cfg.heads, cfg.points) == (2, 32, 2, 2)
    assert cfg.num_queries == 20
    assert (cfg.phase1_epochs, cfg.phase2_epochs) == (3, 5)
