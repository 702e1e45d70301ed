import csv
import subprocess
import sys

import pytest

from dpin.cli import main
from dpin.harness import METRICS_HEADER


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_no_arguments_prints_usage(capsys):
    code, _, err = run(capsys)
    assert code == 2 and err.startswith("usage: dpin")


def test_module_entry_point_exit_code():
    proc = subprocess.run([sys.executable, "-m", "dpin.cli"], capture_output=True, text=True)
    assert proc.returncode == 2 and "usage" in proc.stderr


def test_unknown_flag_is_usage_error(capsys):
    code, _, err = run(capsys, "train", "--config", "tiny", "--bogus")
    assert code == 2
    assert err.strip().startswith("error: usage:") and len(err.strip().splitlines()) == 1


def test_unknown_config_key_is_usage_error(capsys, tmp_path):
    code, _, err = run(capsys, "oracle", "--config", "oracle", "--set", "model.width=3", "--output-dir", str(tmp_path))
    assert code == 2 and err.startswith("error: config:")


def test_missing_config_file_is_io_error(capsys, tmp_path):
    code, _, err = run(capsys, "train", "--config", str(tmp_path / "none.toml"))
    assert code == 3 and err.startswith("error: io:")


def test_missing_checkpoint_is_io_error(capsys, tmp_path):
    code, _, err = run(capsys, "evaluate", "--config", "tiny", "--checkpoint", str(tmp_path / "c.npz"),
                       "--output-dir", str(tmp_path))
    assert code == 3 and err.startswith("error: io:")


def test_gradcheck_reports_error(capsys):
    code, out, _ = run(capsys, "gradcheck", "--config", "tiny", "--instances", "2")
    assert code == 0
    assert "status=ok" in out
    value = float(out.split("max_rel_error=")[1].split()[0])
    assert value <= 1e-4


def test_oracle_writes_table(capsys, tmp_path):
    code, out, _ = run(capsys, "oracle", "--config", "oracle", "--output-dir", str(tmp_path))
    assert code == 0 and "states=" in out
    with open(tmp_path / "oracle_q.csv", newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["user_id", "context", "ads", "organics", "page_index", "action", "q"]
    assert len(rows) > 1 and all(len(r[5]) == 3 for r in rows[1:])


def test_log_train_evaluate_pipeline(capsys, tmp_path):
    log = tmp_path / "log.jsonl"
    code, out, _ = run(capsys, "generate-log", "--config", "tiny", "--requests", "30", "--out", str(log))
    assert code == 0 and "history_length_means" in out
    code, out, _ = run(capsys, "train", "--config", "tiny", "--log", str(log), "--output-dir", str(tmp_path))
    assert code == 0
    for name in ("checkpoint.npz", "config.toml", "train_metrics.csv"):
        assert (tmp_path / name).exists()
    with open(tmp_path / "train_metrics.csv", newline="") as f:
        rows = list(csv.reader(f))
    assert tuple(rows[0]) == METRICS_HEADER and len(rows) == 1 + 2
    code, out, _ = run(capsys, "evaluate", "--config", "tiny", "--checkpoint", str(tmp_path / "checkpoint.npz"),
                       "--output-dir", str(tmp_path))
    assert code == 0 and (tmp_path / "eval_metrics.csv").exists()
    code, _, err = run(capsys, "evaluate", "--config", "tiny", "--variant", "no_cl",
                       "--checkpoint", str(tmp_path / "checkpoint.npz"), "--output-dir", str(tmp_path))
    assert code == 2 and err.startswith("error: config:")


def test_corrupt_log_is_data_error(capsys, tmp_path):
    log = tmp_path / "log.jsonl"
    assert run(capsys, "generate-log", "--config", "tiny", "--requests", "3", "--out", str(log))[0] == 0
    lines = log.read_text().splitlines()
    lines[1] = lines[1].replace('"action": [', '"action": [1, 1, 1, ')
    log.write_text("\n".join(lines) + "\n")
    code, _, err = run(capsys, "train", "--config", "tiny", "--log", str(log), "--output-dir", str(tmp_path))
    assert code == 4 and err.startswith("error: data:")


def test_ablate_writes_sorted_rows(capsys, tmp_path):
    code, out, _ = run(capsys, "ablate", "--config", "tiny", "--seeds", "1,0", "--variants", "no_cl,full",
                       "--output-dir", str(tmp_path))
    assert code == 0
    with open(tmp_path / "ablation_metrics.csv", newline="") as f:
        rows = list(csv.reader(f))
    assert [(r[2], r[1]) for r in rows[1:]] == [("full", "0"), ("full", "1"), ("no_cl", "0"), ("no_cl", "1")]


def test_env_output_dir_wins(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("DPIN_OUTPUT_DIR", str(tmp_path / "env"))
    code, _, _ = run(capsys, "oracle", "--config", "oracle", "--output-dir", str(tmp_path / "flag"))
    assert code == 0 and (tmp_path / "env" / "oracle_q.csv").exists()
