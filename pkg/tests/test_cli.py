import json
import subprocess
import sys

import pytest

from trainaccel.cli import main
from trainaccel.schemas import validate_csv, validate_report


def test_presets_listing(capsys):
    assert main(["presets"]) == 0
    assert "synthetic-fast" in capsys.readouterr().out.split()


def test_run_json_to_stdout(capsys):
    assert main(["run", "--config", "synthetic-fast", "--epochs", "1", "--amp", "off"]) == 0
    doc = json.loads(capsys.readouterr().out)
    validate_report(doc)
    assert doc["config"]["amp_enabled"] == "false" and doc["config"]["epochs"] == "1"


def test_run_overrides_and_csv(tmp_path):
    out = tmp_path / "r.csv"
    code = main(["run", "--config", "synthetic-fast", "--epochs", "2", "--ga-steps", "1", "--amp", "on",
                 "--prefetch", "3", "--pin-policy", "on", "--seed", "4", "--out", str(out), "--format", "csv"])
    assert code == 0
    rows = validate_csv(out)
    assert [r["epoch"] for r in rows] == [1, 2]


def test_run_csv_stdout(capsys):
    assert main(["run", "--config", "synthetic-fast", "--epochs", "1", "--format", "csv"]) == 0
    assert capsys.readouterr().out.startswith("run_id,epoch,train_loss")


def test_ablate_writes_both_reports(tmp_path, capsys):
    out = tmp_path / "abl"
    assert main(["ablate", "--config", "synthetic-fast", "--grid", "none;amp", "--out", str(out)]) == 0
    validate_report(json.loads((out / "ablation.json").read_text()))
    assert len(validate_csv(out / "ablation.csv")) == 2 * 5
    assert "baseline" in capsys.readouterr().out


def test_verify_passes(capsys):
    assert main(["verify"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "checks passed" in out


def test_config_error_exit_code(tmp_path, capsys):
    assert main(["run", "--config", "no-such-preset"]) == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("mystery = 3\n")
    assert main(["run", "--config", str(bad)]) == 1
    assert main(["ablate", "--config", "synthetic-fast", "--grid", "ga,warp", "--out", str(tmp_path)]) == 1
    assert "config error" in capsys.readouterr().err


def test_divergence_exit_code(tmp_path, capsys):
    cfg = tmp_path / "div.cfg"
    cfg.write_text("epochs = 2\ndataset.size = 200\noptimizer.learning_rate = 1e30\n")
    assert main(["run", "--config", str(cfg)]) == 2
    assert "diverged" in capsys.readouterr().err


def test_io_error_exit_code(tmp_path, capsys):
    assert main(["run", "--config", "synthetic-fast", "--out", str(tmp_path / "no" / "r.json")]) == 3
    cfg = tmp_path / "c.cfg"
    cfg.write_text(f"dataset.source = cifar10\ndataset.path = {tmp_path / 'missing'}\nmodel.kind = cnn\n")
    assert main(["run", "--config", str(cfg)]) == 3
    trunc = tmp_path / "t.bin"
    trunc.write_bytes(bytes(5000))
    cfg.write_text(f"dataset.source = cifar10\ndataset.path = {trunc}\nmodel.kind = cnn\n")
    assert main(["run", "--config", str(cfg)]) == 3
    assert "io error" in capsys.readouterr().err


def test_bad_on_off_is_usage_error():
    with pytest.raises(SystemExit) as info:
        main(["run", "--config", "synthetic-fast", "--amp", "maybe"])
    assert info.value.code == 1


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "trainaccel", "presets"], capture_output=True, text=True)
    assert res.returncode == 0 and "cifar10-subset" in res.stdout
