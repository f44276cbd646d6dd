import json
import subprocess
import sys

import pytest
from conftest import ADULT_TEST, ADULT_TRAIN, needs_adult

from tlleak.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, main
from tlleak.data import load_dataset
from tlleak.runner import read_jsonl

TINY = f"""
[experiment]
name = cli-tiny
seed = 1
replicates = 2

[dataset]
train_path = {ADULT_TRAIN}
test_path = {ADULT_TEST}

[transfer]
paradigm = mapping
epochs = 1

[attack]
type = property
hidden_dims = 8
max_epochs = 3
"""


def test_missing_config(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "none.ini"), "--out", str(tmp_path / "r.jsonl")]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_incompatible_pairing_rejected_before_compute(tmp_path):
    cfg = tmp_path / "bad.ini"
    cfg.write_text(TINY.replace("type = property", "type = membership"))
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "r.jsonl")]) == EXIT_CONFIG
    assert not (tmp_path / "r.jsonl").exists()


def test_missing_data(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text(TINY.replace(str(ADULT_TRAIN), str(tmp_path / "gone.data")))
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "r.jsonl")]) == EXIT_DATA


def test_malformed_adult(tmp_path):
    bad = tmp_path / "adult.data"
    bad.write_text("1, 2, 3\n")
    assert main(["prepare-data", str(bad), str(bad), "--out", str(tmp_path / "out")]) == EXIT_DATA


def test_report_missing_file(tmp_path):
    assert main(["report", str(tmp_path / "none.jsonl")]) == EXIT_DATA


def test_report_empty_file(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    assert main(["report", str(tmp_path / "e.jsonl")]) == EXIT_CONFIG


def test_selftest(capsys):
    assert main(["selftest"]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.count("PASS") >= 8 and "FAIL" not in out


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "tlleak", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "prepare-data" in proc.stdout


def test_usage_error():
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 2


@needs_adult
def test_prepare_data(tmp_path):
    out = tmp_path / "prep"
    assert main(["prepare-data", str(ADULT_TRAIN), str(ADULT_TEST), "--out", str(out), "--keep-missing"]) == EXIT_OK
    counts = json.loads((out / "counts.json").read_text())
    assert counts["source_train"] == len(load_dataset(out / "source_train.txt"))
    assert counts["target_test"] == len(load_dataset(out / "target_test.txt"))
    assert counts["dropped_rows"] == 0


@needs_adult
def test_run_then_report(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text(TINY)
    results = tmp_path / "r.jsonl"
    assert main(["run", "--config", str(cfg), "--out", str(results)]) == EXIT_OK
    assert main(["run", "--config", str(cfg), "--seed", "7", "--replicates", "1", "--out", str(results)]) == EXIT_OK
    assert [r["seed"] for r in read_jsonl(results)] == [1, 2, 7]
    capsys.readouterr()
    assert main(["report", str(results), "--group-by", "defense,property"]) == EXIT_OK
    table = capsys.readouterr().out.splitlines()
    assert table[0].split()[:3] == ["defense", "property", "n"]
    assert table[2].split()[:3] == ["none", "sex=Male", "3"]
