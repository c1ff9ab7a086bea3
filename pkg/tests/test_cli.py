from __future__ import annotations

import csv
import json

import pytest

from builders import OraclePolicy
from iopgspo import policy_model as pm
from iopgspo.cli import EXIT_NAN, EXIT_OK, EXIT_USAGE, main

TINY = ["--width", "12", "--n-layers", "1", "--group-size", "4", "--prompt-batch", "4", "--G-rep", "2",
        "--token-budget", "800", "--eval-every", "2", "--eval-problems", "4", "--eval-samples", "2",
        "--final-eval-samples", "2", "--repair-probe-n", "3", "--pretrain-steps", "3", "--pretrain-batch", "4",
        "--coldstart-n", "8", "--sft-steps", "3", "--sft-batch", "4", "--warmup-steps", "1"]


def test_gen_data_is_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert main(["gen-data", "--n", "25", "--seed", "4", "--out", str(a)]) == EXIT_OK
    assert main(["gen-data", "--n", "25", "--seed", "4", "--out", str(b)]) == EXIT_OK
    lines = a.read_text().splitlines()
    assert len(lines) == 25 and a.read_bytes() == b.read_bytes()
    assert set(json.loads(lines[0])) == {"x", "y", "a", "y_star"}
    assert "wrote 25 examples" in capsys.readouterr().out


def test_gen_data_usage_errors(tmp_path, capsys):
    assert main(["gen-data", "--n", "0", "--out", str(tmp_path / "x")]) == EXIT_USAGE
    assert main(["gen-data", "--out", str(tmp_path / "missing" / "dir" / "x.jsonl")]) == EXIT_USAGE
    assert "error:" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["gen-data"])
    assert exc.value.code == 2


def test_align_debug_output(capsys):
    assert main(["align-debug", "STEP 3 STEP 5 ANS 5 EOS", "STEP 3 STEP 4 ANS 4 EOS", "--K", "1"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "2 edits" in out and "substitute(3,3)" in out
    assert "mask   m : 0001010" in out and "K=1 m : 0001000" in out


def test_align_debug_identical_and_files(tmp_path, capsys):
    (tmp_path / "y").write_text("STEP 3 ANS 3 EOS")
    assert main(["align-debug", "--y-file", str(tmp_path / "y"), "--repair-file", str(tmp_path / "y")]) == EXIT_OK
    assert "0 edits" in capsys.readouterr().out
    assert main(["align-debug", "STEP FOO", "STEP"]) == EXIT_USAGE
    assert main(["align-debug", "--y-file", str(tmp_path / "nope"), "STEP"]) == EXIT_USAGE
    assert main(["align-debug"]) == EXIT_USAGE


def test_config_errors(tmp_path):
    out = str(tmp_path / "run")
    assert main(["train", "--out", out, "--config", str(tmp_path / "missing.json")]) == EXIT_USAGE
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["train", "--out", out, "--config", str(tmp_path / "bad.json")]) == EXIT_USAGE
    (tmp_path / "unknown.json").write_text('{"warp_drive": 1}')
    assert main(["train", "--out", out, "--config", str(tmp_path / "unknown.json")]) == EXIT_USAGE
    assert main(["train", "--out", out, "--group-size", "1"]) == EXIT_USAGE
    assert main(["train", "--out", out, "--skip-sft"]) == EXIT_USAGE
    assert main(["train", "--out", out, "--resume", str(tmp_path / "none.ckpt")]) == EXIT_USAGE


@pytest.fixture
def init_ckpt(tmp_path):
    path = tmp_path / "init.ckpt"
    pm.save_checkpoint(path, pm.init(0, pm.Architecture(width=12, n_layers=1)))
    return path


def test_train_eval_and_resume(tmp_path, init_ckpt, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"token_budget": 5000, "lr": 1e-3}))
    out = tmp_path / "run"
    args = ["train", "--out", str(out), "--init", str(init_ckpt), "--skip-sft", "--config", str(cfg),
            "--token-budget", "800", "--checkpoint-every", "1"] + TINY
    assert main(args) == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["token_budget"] == 800 and manifest["config"]["lr"] == 1e-3  # flag > file
    assert {"config_hash", "paths", "seeds", "started", "finished"} <= set(manifest)
    final = json.loads((out / "final.json").read_text())
    assert final["tokens"] >= 800 and "repair_success" in final
    metrics = (out / "metrics.jsonl").read_bytes()

    again = tmp_path / "again"
    assert main(["train", "--out", str(again), "--init", str(init_ckpt), "--skip-sft", "--config", str(cfg),
                 "--token-budget", "800", "--checkpoint-every", "1"] + TINY) == EXIT_OK
    assert (again / "metrics.jsonl").read_bytes() == metrics
    assert main(["train", "--out", str(again), "--resume", str(again / "step00001.ckpt")]) == EXIT_OK
    assert (again / "metrics.jsonl").read_bytes() == metrics

    capsys.readouterr()
    assert main(["eval", "--ckpt", str(out / "final.ckpt"), "--n", "5", "--k", "2"]) == EXIT_OK
    line = capsys.readouterr().out.strip()
    assert line.startswith("avg@2 ") and "95% CI [" in line and line.endswith("over 5 problems")
    assert main(["eval", "--ckpt", str(tmp_path / "nope.ckpt")]) == EXIT_USAGE


def test_nonfinite_abort_exit_code(tmp_path, init_ckpt, monkeypatch):
    monkeypatch.setattr(pm, "sample", OraclePolicy(0.5))
    monkeypatch.setattr(pm, "apply_update", lambda *a, **k: False)
    args = ["train", "--out", str(tmp_path / "nan"), "--init", str(init_ckpt), "--skip-sft",
            "--max-nonfinite-steps", "2"] + TINY + ["--token-budget", "100000"]
    assert main(args) == EXIT_NAN


def test_sweep(tmp_path, capsys):
    out = tmp_path / "sweep"
    args = ["sweep", "--param", "K", "--values", "1,inf", "--seeds", "0", "--out", str(out),
            "--cache-dir", str(tmp_path / "cache")] + TINY
    assert main(args) == EXIT_OK
    rows = list(csv.reader((out / "sweep.csv").open()))
    assert rows[0] == ["K", "seed", "final_accuracy", "repair_success", "steps", "tokens"]
    assert [r[0] for r in rows[1:]] == ["1", "inf"]
    assert (out / "K=inf" / "seed=0" / "manifest.json").exists()
    assert main(args) == EXIT_USAGE  # cells already exist
    assert main(["sweep", "--param", "K", "--values", "2,2", "--out", str(tmp_path / "dup")] + TINY) == EXIT_USAGE
    assert main(["sweep", "--param", "warp", "--values", "1", "--out", str(tmp_path / "w")]) == EXIT_USAGE
    assert main(["sweep", "--param", "group_size", "--values", "x", "--out", str(tmp_path / "w")]) == EXIT_USAGE
