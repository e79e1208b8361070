import json

import numpy as np
import pytest

from delivr import checkpoint, cli, trainer
from delivr.bias import load_dump
from delivr.config import RunConfig

SMALL = ["--set", "model.width=16", "--set", "model.heads=2", "--set", "model.layers=1",
         "--set", "model.patch_size=8", "--set", "synth.height=16", "--set", "synth.width=16"]


def test_check_group_suite(capsys):
    assert cli.main(["check", "--suite", "group"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 4 and "all checks passed" in out


def test_usage_and_config_errors_exit_2(tmp_path, capsys):
    assert cli.main(["bogus"]) == 2
    assert cli.main(["train", "--set", "model.wdith=3"]) == 2
    assert cli.main(["train", "--set", "novalue"]) == 2
    bad = tmp_path / "bad.toml"
    bad.write_text("[model]\nheads = 0\n")
    assert cli.main(["--config", str(bad), "train"]) == 2
    assert "config error" in capsys.readouterr().err


def test_inspect_bias_writes_dump(tmp_path, capsys):
    out = tmp_path / "b.dlvb"
    assert cli.main(["inspect-bias", "--angles", "0.1,-0.2,0.3", "--out", str(out), "--set", "bias.delta=1"]) == 0
    mats = load_dump(out)
    assert mats["total"].shape == (48, 48)
    assert "blocked_pairs=512" in capsys.readouterr().out
    assert cli.main(["inspect-bias", "--angles", "0.1,nan"]) == 2


def test_synth_train_eval_round_trip(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("DELIVR_THREADS", "2")
    data, run = tmp_path / "data", tmp_path / "run"
    assert cli.main(["synth", "--count", "3", "--out", str(data), "--seed", "2"] + SMALL) == 0
    assert json.loads((data / "manifest.json").read_text())["seeds"] == [6, 7, 8]
    assert cli.main(["train", "--steps", "2", "--out", str(run), "--quiet"] + SMALL) == 0
    for name in ("report.json", "model.dlvc", "train.jsonl", "timing.json"):
        assert (run / name).is_file()
    capsys.readouterr()
    # the config is recovered from report.json next to the checkpoint
    assert cli.main(["eval", "--checkpoint", str(run / "model.dlvc"), "--data", str(data)]) == 0
    out = capsys.readouterr().out
    assert "PSNR" in out and "over 3 clips" in out


def test_eval_identity_model_on_clean_data(tmp_path, capsys):
    # a residual model with zero decoder returns the rainy centre frame, which
    # equals the clean frame when there is no rain and no noise
    cfg = RunConfig().replace(**{"model.residual": True, "model.layers": 1,
                                 "synth.streak_density": 0.0, "synth.noise_sigma": 0.0})
    model = trainer.build_model(cfg)
    model.params["decode.b"].data[:] = 0.0
    ckpt = tmp_path / "id.dlvc"
    checkpoint.save(ckpt, model.params)
    data = tmp_path / "clean"
    flags = ["--set", "model.residual=true", "--set", "model.layers=1",
             "--set", "synth.streak_density=0.0", "--set", "synth.noise_sigma=0.0"]
    assert cli.main(["synth", "--count", "2", "--out", str(data)] + flags) == 0
    capsys.readouterr()
    assert cli.main(["eval", "--checkpoint", str(ckpt), "--data", str(data), "--min-psnr", "40"] + flags) == 0
    line = capsys.readouterr().out.splitlines()[0]
    assert line.startswith("PSNR inf") or float(line.split()[1]) > 40


def test_eval_checkpoint_errors_exit_1(tmp_path, capsys):
    junk = tmp_path / "junk.dlvc"
    junk.write_bytes(b"junkjunkjunk")
    assert cli.main(["eval", "--checkpoint", str(junk)]) == 1
    assert "checkpoint" in capsys.readouterr().err
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "missing.dlvc")]) == 1
    model = trainer.build_model(RunConfig())
    ckpt = tmp_path / "m.dlvc"
    checkpoint.save(ckpt, model.params)
    assert cli.main(["eval", "--checkpoint", str(ckpt), "--set", "model.layers=1"]) == 1
    assert "does not match" in capsys.readouterr().err


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit) as err:
        cli.main(["--help"])
    assert err.value.code == 0
    out = capsys.readouterr().out
    assert "train.lr = 0.0002" in out and "bias.delta" in out


def test_global_flags_before_or_after_subcommand(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["--seed", "3", "synth", "--count", "1", "--out", str(a)]) == 0
    assert cli.main(["synth", "--count", "1", "--out", str(b), "--seed", "3"]) == 0
    assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
    assert np.array_equal(json.loads((a / "manifest.json").read_text())["seeds"], [3])
