import json
from pathlib import Path

import numpy as np
import pytest

from conftest import tiny_config
from maformer import tensor as T
from maformer.analysis import count_params
from maformer.cli import main

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

MICRO = dict(stage_dims=[4, 4, 4, 4], mlp_ratio=1.0, window_sizes=[3, 2, 2, 2],
             stripe_widths=[3, 1, 1, 1], num_classes=2)


def write(tmp_path, name, obj):
    p = tmp_path / name
    p.write_text(json.dumps(obj))
    return str(p)


def small_train(tmp_path, **kw):
    d = {"model": tiny_config().to_dict(),
         "dataset": {"num_classes": 3, "train_size": 32, "val_size": 16},
         "epochs": 2, "batch_size": 16, **kw}
    return write(tmp_path, "train.json", d)


def test_describe_preset(capsys):
    assert main(["describe", "--config", "maformer_s"]) == 0
    out = capsys.readouterr().out
    assert "56x56" in out and "320" in out and "FLOPs (MAC convention)" in out
    assert len([line for line in out.splitlines() if line.strip().startswith(("1 ", "2 ", "3 ", "4 "))]) == 4


def test_describe_tiny_json_count(tmp_path, capsys):
    cfg = tiny_config()
    path = write(tmp_path, "m.json", cfg.to_dict())
    assert main(["describe", "--config", path, "--json"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["cost"]["total_params"] == count_params(cfg).total_params


def test_describe_train_config_in_repo(capsys):
    assert main(["describe", "--config", str(CONFIGS / "train_tiny.json")]) == 0
    assert "maformer_tiny" in capsys.readouterr().out


def test_describe_malformed(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"stage_dims": [8, 8,\n "x"}')
    assert main(["describe", "--config", str(bad)]) == 1
    assert "line 2" in capsys.readouterr().err
    wrong = write(tmp_path, "w.json", {**tiny_config().to_dict(), "num_heads": [3, 2, 2, 2]})
    assert main(["describe", "--config", wrong]) == 1
    assert "num_heads" in capsys.readouterr().err


def test_usage_errors(capsys):
    assert main(["frobnicate"]) == 1
    assert main(["describe"]) == 1
    assert main(["describe", "--config", "missing.json"]) == 1
    assert main(["--help"]) == 0


def test_gradcheck_refuses_oversize(capsys):
    assert main(["gradcheck", "--config", "maformer_s"]) == 1
    assert "50,000" in capsys.readouterr().err


def _corrupt_gelu(monkeypatch):
    orig = T.gelu

    def gelu(x):
        y = orig(x)
        if y.tape is not None:
            node = y.tape.nodes[-1]
            vjp = node.vjp
            node.vjp = lambda g: tuple(1.5 * v for v in vjp(g))
        return y

    monkeypatch.setattr(T, "gelu", gelu)


def test_gradcheck_catches_corrupted_backward(tmp_path, monkeypatch, capsys):
    _corrupt_gelu(monkeypatch)
    path = write(tmp_path, "micro.json", tiny_config(**MICRO).to_dict())
    assert main(["gradcheck", "--config", path, "--batch", "1"]) == 2
    assert capsys.readouterr().out.startswith("FAIL")


def test_train_then_eval(tmp_path, capsys):
    cfg = small_train(tmp_path)
    out = tmp_path / "run"
    assert main(["train", "--config", cfg, "--out-dir", str(out)]) == 0
    lines = (out / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 4 and all(json.loads(x)["split"] in ("train", "val") for x in lines)
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(out / "best.ckpt"), "--config", cfg]) == 0
    a = json.loads(capsys.readouterr().out)
    assert main(["eval", "--checkpoint", str(out / "best.ckpt"), "--config", cfg, "--shuffle-seed", "4"]) == 0
    b = json.loads(capsys.readouterr().out)
    assert a["accuracy"] == b["accuracy"] and a["n"] == 16


def test_eval_refuses_wrong_config(tmp_path, capsys):
    cfg = small_train(tmp_path)
    out = tmp_path / "run"
    assert main(["train", "--config", cfg, "--out-dir", str(out)]) == 0
    other = write(tmp_path, "other.json", tiny_config(global_kind="conv").to_dict())
    assert main(["eval", "--checkpoint", str(out / "best.ckpt"), "--config", other]) == 1
    assert "global_kind" in capsys.readouterr().err


def test_eval_missing_checkpoint(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "x.ckpt")]) == 1
    assert "x.ckpt" in capsys.readouterr().err


def test_train_seed_flag_changes_run(tmp_path):
    cfg = small_train(tmp_path)
    main(["train", "--config", cfg, "--out-dir", str(tmp_path / "a"), "--seed", "0"])
    main(["train", "--config", cfg, "--out-dir", str(tmp_path / "b"), "--seed", "1"])
    assert (tmp_path / "a" / "metrics.jsonl").read_text() != (tmp_path / "b" / "metrics.jsonl").read_text()


def test_ablate_cli(tmp_path, capsys):
    cfg = small_train(tmp_path, epochs=1, dataset={"num_classes": 3, "train_size": 16, "val_size": 8})
    grid = write(tmp_path, "grid.json", {"attention_kinds": ["shifted_window"], "global_kinds": ["gld", "none"],
                                         "fusion_variants": ["maf"]})
    assert main(["ablate", "--config", cfg, "--grid", grid, "--out-dir", str(tmp_path / "abl")]) == 0
    out = capsys.readouterr().out
    assert "shifted_window" in out and out.count("%") == 2
    assert len((tmp_path / "abl" / "ablation.jsonl").read_text().splitlines()) == 2
