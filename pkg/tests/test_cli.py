import csv
import json
import subprocess
import sys

import pytest

from hashta.cli import main
from hashta.fingerprint import load_table

CONFIG_TEXT = """
[model]
d = 4
l_st = 3
l_lt = 8
k = 4
n_heads = 2
m = 8
n_rounds = 2
variant = ETA
mlp_widths = 8
epochs = 2
learning_rate = 0.01
batch_size = 16
seed = 5

[data]
negatives_per_positive = 1

[synthetic]
n_users = 40
n_items = 60
n_categories = 6
events_per_user = 30
interest_categories_per_user = 2
favorites_per_category = 2
noise_rate = 0.2
long_term_gap_days = 14
impression_window_days = 30
seed = 1

[bench]
requests = 4
warmup = 1
candidates = 4
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """One synthetic log + trained checkpoint shared by the read-only tests."""
    root = tmp_path_factory.mktemp("cli")
    config = root / "hashta.ini"
    config.write_text(CONFIG_TEXT)
    log = root / "log.csv"
    ckpt = root / "model.htac"
    assert main(["gen-data", "--config", str(config), "--out", str(log)]) == 0
    assert main([
        "train", "--config", str(config), "--data", str(log), "--out", str(ckpt),
    ]) == 0
    return {"root": root, "config": config, "log": log, "ckpt": ckpt}


def run_json(capsys, argv):
    code = main(argv)
    out = capsys.readouterr().out
    return code, json.loads(out)


def test_gen_data_outputs(workdir, capsys):
    log = workdir["log"]
    assert log.exists()
    assert (workdir["root"] / "log.csv.interests.json").exists()
    lines = log.read_text().splitlines()
    assert len(lines) == 40 * 30
    assert all(len(line.split(",")) == 5 for line in lines[:20])
    # regeneration with the same config is byte-identical
    again = workdir["root"] / "again.csv"
    main(["gen-data", "--config", str(workdir["config"]), "--out", str(again)])
    capsys.readouterr()
    assert again.read_bytes() == log.read_bytes()


def test_train_artifacts(workdir):
    root, ckpt = workdir["root"], workdir["ckpt"]
    assert ckpt.exists()
    assert (root / "model.htac.ids.json").exists()
    rows = list(csv.DictReader(open(root / "model.htac.metrics.csv")))
    assert len(rows) == 2
    assert {"epoch", "train_loss", "val_auc", "seconds"} <= set(rows[0])
    ids = json.loads((root / "model.htac.ids.json").read_text())
    assert set(ids) == {"users", "items", "categories", "item_category"}


def test_eval_matches_train_and_writes_report(workdir, capsys):
    out = workdir["root"] / "eval.json"
    code, payload = run_json(capsys, [
        "eval", "--config", str(workdir["config"]),
        "--checkpoint", str(workdir["ckpt"]), "--data", str(workdir["log"]),
        "--out", str(out),
    ])
    assert code == 0
    assert payload["variant"] == "ETA"
    assert payload["label"].startswith("TA/HASH/8/")
    assert 0.0 <= payload["test_auc"] <= 1.0
    assert json.loads(out.read_text())["test_auc"] == payload["test_auc"]


def test_precompute_then_eval_is_identical(workdir, capsys):
    table_path = workdir["root"] / "items.etaf"
    code = main([
        "precompute", "--checkpoint", str(workdir["ckpt"]),
        "--data", str(workdir["log"]), "--out", str(table_path),
    ])
    capsys.readouterr()
    assert code == 0
    table = load_table(table_path)
    assert table.bits_per_round == 8 and table.rounds == 2

    base_args = [
        "eval", "--config", str(workdir["config"]),
        "--checkpoint", str(workdir["ckpt"]), "--data", str(workdir["log"]),
    ]
    _, plain = run_json(capsys, base_args)
    _, with_table = run_json(capsys, base_args + ["--fingerprints", str(table_path)])
    assert with_table["test_auc"] == plain["test_auc"]


def test_retrieve_prints_selection(workdir, capsys):
    code, payload = run_json(capsys, [
        "retrieve", "--config", str(workdir["config"]),
        "--checkpoint", str(workdir["ckpt"]), "--data", str(workdir["log"]),
        "--sample", "0", "--k", "2",
    ])
    assert code == 0
    assert payload["k"] == 2
    assert len(payload["positions"]) <= 2
    assert len(payload["items"]) == len(payload["positions"])
    assert all(0 <= p < payload["long_length"] for p in payload["positions"])
    assert payload["n_valid"] <= payload["long_length"]


def test_retrieve_rejects_bad_sample_index(workdir, capsys):
    code = main([
        "retrieve", "--config", str(workdir["config"]),
        "--checkpoint", str(workdir["ckpt"]), "--data", str(workdir["log"]),
        "--sample", "99999",
    ])
    assert code == 1
    assert "outside" in capsys.readouterr().err


def test_flag_overrides_config(workdir, capsys):
    ckpt = workdir["root"] / "override.htac"
    code, payload = run_json(capsys, [
        "train", "--config", str(workdir["config"]), "--data", str(workdir["log"]),
        "--out", str(ckpt), "--variant", "POOLING", "--epochs", "1",
    ])
    assert code == 0
    assert payload["variant"] == "POOLING"
    assert payload["label"].startswith("AVG/-/")
    rows = list(csv.DictReader(open(str(ckpt) + ".metrics.csv")))
    assert len(rows) == 1  # --epochs beat the config file's 2


def test_eval_rejects_mismatched_data(workdir, tmp_path, capsys):
    other = tmp_path / "other.csv"
    other.write_text("1,1,1,pv,100\n1,2,1,pv,200\n")
    code = main([
        "eval", "--checkpoint", str(workdir["ckpt"]), "--data", str(other),
    ])
    assert code == 1
    assert "vocabulary" in capsys.readouterr().err


def test_unknown_config_key_fails_cleanly(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[model]\nwat = 1\n")
    code = main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x.csv")])
    assert code == 0  # gen-data does not read [model]
    code = main([
        "train", "--config", str(bad), "--data", str(tmp_path / "x.csv"),
        "--out", str(tmp_path / "m.htac"),
    ])
    assert code == 1
    assert "unknown config key" in capsys.readouterr().err


def test_missing_file_fails_cleanly(capsys):
    code = main(["eval", "--checkpoint", "/no/such/file", "--data", "/none.csv"])
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_unknown_command_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_bench_ablation_tiny(workdir, capsys):
    out = workdir["root"] / "abl"
    code = main([
        "bench-ablation", "--config", str(workdir["config"]),
        "--variant", "POOLING,ETA", "--long-len", "8", "--epochs", "0",
        "--out", str(out),
    ])
    err = capsys.readouterr()
    assert code == 0
    rows = list(csv.DictReader(open(str(out) + ".csv")))
    assert [r["variant"] for r in rows] == ["POOLING", "ETA"]
    assert all(r["error"] == "" for r in rows)
    payload = json.loads((workdir["root"] / "abl.json").read_text())
    assert len(payload["records"]) == 2
    assert "AVG/-/8/-" in err.out


def test_bench_scaling_tiny(workdir, capsys):
    out = workdir["root"] / "scal"
    code = main([
        "bench-scaling", "--config", str(workdir["config"]),
        "--long-len", "4,8", "--out", str(out),
    ])
    capsys.readouterr()
    assert code == 0
    rows = list(csv.DictReader(open(str(out) + ".csv")))
    assert [int(r["l_lt"]) for r in rows] == [4, 8]
    assert all(float(r["retrieval_mean_us"]) > 0 for r in rows)


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "hashta", "--help"],
        capture_output=True, text=True, timeout=60,
    )
    assert proc.returncode == 0
    assert "bench-scaling" in proc.stdout
