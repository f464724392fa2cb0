import json

import pytest

from gsasv.cli import run


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert run(["gen-synth", "--preset", "tiny", "--out", str(data), "--seed", "3"]) == 0
    assert run(["gen-trials", "--meta", str(data / "meta.tsv"), "--eval-fraction", "0.25",
                "--out", str(data), "--seed", "3"]) == 0
    cfg = {
        "seed": 3,
        "data": {"asv": "data/asv.gseb", "cm": "data/cm.gseb", "meta": "data/meta.tsv",
                 "train_trials": "data/train.tsv", "eval_trials": "data/eval.tsv"},
        "model": {"variant": "SPS", "hidden_dims": [8, 8]},
        "train": {"epochs": 2, "batch_size": 64},
    }
    (root / "exp.json").write_text(json.dumps(cfg))
    return root


def test_gen_outputs(workspace):
    data = workspace / "data"
    for name in ("asv.gseb", "cm.gseb", "meta.tsv", "trials.tsv", "train.tsv", "eval.tsv",
                 "config.resolved.json", "manifest.json"):
        assert (data / name).is_file(), name


def test_train_eval_adapt(workspace, capsys):
    out = workspace / "run"
    assert run(["train", "--config", str(workspace / "exp.json"), "--out", str(out)]) == 0
    assert (out / "model.ckpt").is_file()
    assert (out / "trainlog.tsv").read_text().count("\n") == 3
    resolved = json.loads((out / "config.resolved.json").read_text())
    assert resolved["train"]["lr_init"] == 0.001 and resolved["model"]["variant"] == "SPS"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 3 and str(out / "model.ckpt") in manifest["outputs"]

    capsys.readouterr()
    assert run(["eval", "--model", str(out / "model.ckpt"), "--trials", str(workspace / "data/eval.tsv"),
                "--alpha", "0.95"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert {"eer_joint", "eer_bonafide", "eer_spoof"} <= set(report)
    assert (out / "eval" / "scores.tsv").is_file()

    assert run(["adapt", "--config", str(workspace / "exp.json"), "--model", str(out / "model.ckpt"),
                "--groups", "SRELU", "--add-srelu", "--epochs", "1", "--out", str(workspace / "adapted")]) == 0
    assert (workspace / "adapted" / "adaptlog.tsv").is_file()


def test_alpha_sweep_has_21_rows(workspace):
    out = workspace / "sweep"
    assert run(["sweep", "--config", str(workspace / "exp.json"), "--grid", "alpha=0:0.05:1",
                "--out", str(out)]) == 0
    lines = (out / "sweep.tsv").read_text().splitlines()
    assert lines[0].split("\t") == ["alpha", "eer_joint", "eer_bonafide", "eer_spoof"]
    assert len(lines) == 22


def test_score_and_replay(workspace):
    out = workspace / "replayed"
    assert run(["train", "--config", str(workspace / "exp.json"), "--out", str(out), "--epochs", "1"]) == 0
    first = (out / "model.ckpt").read_bytes()
    assert run(["score", "--model", str(out / "model.ckpt"), "--trials", str(workspace / "data/eval.tsv"),
                "--out", str(workspace / "scored")]) == 0
    assert (workspace / "scored" / "scores.tsv").read_text().count("\n") == len(
        (workspace / "data/eval.tsv").read_text().splitlines())
    (out / "model.ckpt").unlink()
    assert run(["replay", str(out / "manifest.json")]) == 0
    assert (out / "model.ckpt").read_bytes() == first


class TestExitCodes:
    def test_usage(self, capsys):
        assert run([]) == 1
        assert run(["bogus"]) == 1
        assert run(["train"]) == 1

    def test_unknown_config_key(self, tmp_path):
        (tmp_path / "c.json").write_text('{"modle": {}}')
        assert run(["train", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path)]) == 1

    def test_bad_grid(self, workspace, tmp_path):
        assert run(["sweep", "--config", str(workspace / "exp.json"), "--grid", "alpha=2",
                    "--out", str(tmp_path)]) == 1

    def test_data_error(self, workspace, tmp_path):
        bad = tmp_path / "bad.gseb"
        bad.write_bytes(b"garbage")
        assert run(["eval", "--model", str(workspace / "run" / "model.ckpt"), "--asv", str(bad),
                    "--trials", str(workspace / "data" / "eval.tsv"), "--out", str(tmp_path)]) == 2

    def test_missing_file(self, tmp_path):
        assert run(["gen-trials", "--meta", str(tmp_path / "nope.tsv"), "--out", str(tmp_path)]) == 2

    def test_numerical_abort(self, workspace, tmp_path):
        from gsasv.model import load_checkpoint, save_checkpoint

        model = load_checkpoint(workspace / "run" / "model.ckpt")
        model.head.W[0, 0] = float("nan")
        save_checkpoint(model, tmp_path / "nan.ckpt")
        assert run(["adapt", "--config", str(workspace / "exp.json"), "--model", str(tmp_path / "nan.ckpt"),
                    "--groups", "FC", "--out", str(tmp_path / "o")]) == 3
        assert run(["eval", "--model", str(tmp_path / "nan.ckpt"), "--trials", str(workspace / "data" / "eval.tsv"),
                    "--asv", str(workspace / "data" / "asv.gseb"), "--out", str(tmp_path / "e")]) == 3


def test_check_command(capsys):
    assert run(["check"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") >= 30
