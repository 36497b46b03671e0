import json
import subprocess
import sys

import pytest

from engagefuse.cli import main
from engagefuse.fileio import load_instances, load_model, load_predictions


@pytest.fixture
def workspace(tmp_path, sim_json, run_json):
    """A small simulated dataset already extracted to instances."""
    assert main(["generate", "--config", str(sim_json), "--seed", "2", "--out", str(tmp_path / "ds")]) == 0
    assert main(["extract", str(tmp_path / "ds"), "--out", str(tmp_path / "inst.csv")]) == 0
    return tmp_path


def read(path):
    return path.read_bytes()


def test_generate_writes_dataset(workspace):
    names = sorted(p.name for p in (workspace / "ds").iterdir())
    assert names == ["annotations.csv", "samples.csv", "schedule.csv", "sim_config.json", "states.csv"]
    assert json.loads((workspace / "ds" / "sim_config.json").read_text())["master_seed"] == 2


def test_commands_are_byte_reproducible(workspace, sim_json, run_json):
    again = workspace / "again"
    main(["generate", "--config", str(sim_json), "--seed", "2", "--out", str(again / "ds")])
    main(["extract", str(again / "ds"), "--out", str(again / "inst.csv")])
    for name in ("samples.csv", "annotations.csv", "schedule.csv", "states.csv"):
        assert read(workspace / "ds" / name) == read(again / "ds" / name)
    assert read(workspace / "inst.csv") == read(again / "inst.csv")
    for out in (workspace / "m1.json", workspace / "m2.json"):
        assert main(["train", str(workspace / "inst.csv"), "--config", str(run_json), "--out", str(out)]) == 0
    assert read(workspace / "m1.json") == read(workspace / "m2.json")


def test_train_and_predict(workspace, run_json, capsys):
    inst = workspace / "inst.csv"
    model = workspace / "model.json"
    assert main(["train", str(inst), "--config", str(run_json), "--section", "Assessment", "--out", str(model)]) == 0
    assert load_model(model).metadata["section"] == "Assessment"
    assert main(["train", str(inst), "--config", str(run_json), "--seed", "4", "--out",
                 str(workspace / "seeded.json")]) == 0
    assert load_model(workspace / "seeded.json").metadata["seed"] == 4
    assert main(["predict", str(model), str(inst), "--config", str(run_json), "--out",
                 str(workspace / "pred.csv")]) == 0
    preds = load_predictions(workspace / "pred.csv")
    instances = load_instances(inst)
    assert len(preds) == len(instances)
    for p in preds:
        assert 0.0 <= p.confidence_on <= 1.0
        assert (p.label.value == 1) == (p.confidence_on < 0.5)
    assert "warning" not in capsys.readouterr().err


def test_predict_warns_on_other_config(workspace, run_json, tmp_path, capsys):
    model = workspace / "model.json"
    main(["train", str(workspace / "inst.csv"), "--config", str(run_json), "--out", str(model)])
    other = tmp_path / "other.json"
    other.write_text(json.dumps({**json.loads(run_json.read_text()), "seed": 99}))
    assert main(["predict", str(model), str(workspace / "inst.csv"), "--config", str(other),
                 "--out", str(tmp_path / "p.csv")]) == 0
    assert "warning: model was trained under config" in capsys.readouterr().err


def test_evaluate_and_report(workspace, run_json, capsys):
    out = workspace / "eval"
    assert main(["evaluate", str(workspace / "inst.csv"), "--config", str(run_json), "--out", str(out)]) == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["metadata"]["protocol"] == "loso"
    assert (out / "metrics.csv").read_text().startswith("section,model,class,f1\n")
    assert main(["report", str(out / "metrics.json"), "--out", str(workspace / "rep")]) == 0
    table = (workspace / "rep" / "table.txt").read_text()
    for section in ("INSTR.", "ASSESS."):
        assert section in table
    assert table.count("On-Task") == table.count("Off-Task") == table.count("OVERALL") == 2
    assert (workspace / "rep" / "f1.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert "FUSION" in capsys.readouterr().out


def test_holdout_flag(workspace, run_json):
    out = workspace / "eval"
    assert main(["evaluate", str(workspace / "inst.csv"), "--config", str(run_json), "--protocol", "holdout",
                 "--out", str(out)]) == 0
    metadata = json.loads((out / "metrics.json").read_text())["metadata"]
    assert metadata["protocol"] == "holdout"
    assert {s["folds"] for s in metadata["sections"].values()} == {1}


@pytest.mark.parametrize("argv, fragment", [
    (["evaluate", "missing.csv", "--out", "x"], "missing.csv: file not found"),
    (["report", "missing.json", "--out", "x"], "missing.json: file not found"),
    (["predict", "missing.json", "i.csv", "--out", "x"], "missing.json: file not found"),
    (["generate", "--config", "missing.json", "--out", "x"], "missing.json"),
])
def test_errors_are_one_line(tmp_path, monkeypatch, capsys, argv, fragment):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 1
    err = capsys.readouterr().err
    assert err.count("\n") == 1 and err.startswith("engagefuse: error:") and fragment in err


def test_bad_config_is_reported(tmp_path, workspace, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"repeats": 0}))
    assert main(["evaluate", str(workspace / "inst.csv"), "--config", str(bad), "--out", str(tmp_path)]) == 1
    assert "repeats" in capsys.readouterr().err


def test_console_script_on_defaults(tmp_path):
    """Shipped simulation and run configs end to end through the installed entry point."""
    def run(*args):
        return subprocess.run([sys.executable, "-m", "engagefuse", *args], capture_output=True, text=True,
                              cwd=tmp_path)

    assert run("generate", "--out", "ds").returncode == 0
    assert run("extract", "ds", "--out", "inst.csv").returncode == 0
    proc = run("evaluate", "inst.csv", "--out", "ev")
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "ev" / "metrics.json").exists() and (tmp_path / "ev" / "metrics.csv").exists()
    proc = run("report", "ev/metrics.json", "--out", "rep")
    assert proc.returncode == 0
    assert {p.name for p in (tmp_path / "rep").iterdir()} == {"table.txt", "table.csv", "f1.png"}
    bad = run("evaluate", "nope.csv", "--out", "ev")
    assert bad.returncode != 0 and bad.stderr.count("\n") == 1
