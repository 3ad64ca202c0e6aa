import csv
import json

import pytest

from flatlora import validation
from flatlora.cli import main

CONFIG = {
    "method": "flat_lora",
    "sigma": 0.1,
    "dataset": {"size": 200},
    "model": {"widths": [2, 8, 2], "rank": 2, "alpha": 4},
    "steps": 6,
    "batch_size": 32,
    "eval_every": 3,
    "seeds": [0, 1],
    "sharpness": {"samples": 2},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(CONFIG))
    return path


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_run_writes_results(config, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", str(config), "--out", str(out)]) == 0
    rows = read_rows(out / "results.csv")
    assert [r["seed"] for r in rows] == ["0", "1"] and all(r["status"] == "ok" for r in rows)
    assert "flat_lora" in capsys.readouterr().out


def test_run_uses_output_root_env(config, tmp_path, monkeypatch):
    monkeypatch.setenv("FLATLORA_OUTPUT_ROOT", str(tmp_path / "root"))
    assert main(["run", str(config)]) == 0
    assert (tmp_path / "root" / "exp" / "results.csv").exists()


def test_sweep_with_values(config, tmp_path):
    out = tmp_path / "sw"
    assert main(["sweep", str(config), "--param", "sigma", "--values", "0,0.2",
                 "--out", str(out)]) == 0
    rows = read_rows(out / "results.csv")
    assert [(r["value"], r["seed"]) for r in rows] == [("0.0", "0"), ("0.0", "1"),
                                                       ("0.2", "0"), ("0.2", "1")]


def test_sweep_rho_requires_values(config, tmp_path, capsys):
    assert main(["sweep", str(config), "--param", "rho", "--out", str(tmp_path)]) == 2
    assert "config error" in capsys.readouterr().err


def test_bad_config_exit_code(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"method": "lora", "sigma": 0.1}))
    assert main(["run", str(path), "--out", str(tmp_path)]) == 2
    assert "sigma" in capsys.readouterr().err


@pytest.mark.parametrize("dims,cells", [(1, 9), (2, 25)])
def test_landscape_from_checkpoint(config, tmp_path, dims, cells):
    out = tmp_path / "out"
    main(["run", str(config), "--out", str(out)])
    ckpt = out / "checkpoints" / "flat_lora_seed0.npz"
    stem = tmp_path / "surf"
    assert main(["landscape", str(ckpt), "--dims", str(dims), "--grid", "5" if dims == 2 else "9",
                 "--radius", "0.3", "--out", str(stem)]) == 0
    doc = json.loads((tmp_path / f"surf_landscape{dims}d.json").read_text())
    assert doc["dims"] == dims and len(doc["values"]) == cells
    assert len(read_rows(tmp_path / f"surf_landscape{dims}d.csv")) == cells


def test_validate_reports_each_check(monkeypatch, capsys):
    fast = (validation.check_lora_identities, validation.check_smoothing,
            validation.check_flatness_separation)
    monkeypatch.setattr(validation, "ALL_CHECKS", fast)
    assert main(["validate", "--skip-slow"]) == 0
    out = capsys.readouterr().out
    assert out.count("[PASS]") == 2 and "2/2 checks passed" in out
