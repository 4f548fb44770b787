import json
import subprocess
import sys

import pytest

from conftest import soft, tiny_experiment
from palletmask.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from palletmask.geometry import GridConfig, build_pallet


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "cfg.json"
    tiny_experiment(seeds=(0, 1)).dump(cfg_path)
    out = root / "run"
    assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == EXIT_OK
    return cfg_path, out


def test_train_outputs(trained, capsys):
    _, out = trained
    assert (out / "report.json").exists() and (out / "curve_mean.csv").exists()


def test_eval_from_checkpoints(trained, tmp_path, capsys):
    cfg_path, out = trained
    code = main(["eval", "--config", str(cfg_path), "--checkpoints", str(out), "--out", str(tmp_path)])
    assert code == EXIT_OK
    assert "space_utilization" in capsys.readouterr().out


def test_eval_oracle_mask(tmp_path, capsys):
    cfg_path = tmp_path / "c.json"
    tiny_experiment().dump(cfg_path)
    assert main(["eval", "--config", str(cfg_path), "--oracle-mask", "--episodes", "5"]) == EXIT_OK


def test_replay_ok_and_mismatch(trained, tmp_path, capsys):
    cfg_path, out = trained
    assert main(["replay", str(out / "replay_seed0.jsonl"), "--config", str(cfg_path)]) == EXIT_OK
    metrics = json.loads(capsys.readouterr().out)
    assert metrics == json.loads((out / "report.json").read_text())["per_seed"]["0"]
    other = tmp_path / "other.json"
    tiny_experiment(seeds=(5,)).dump(other)
    assert main(["replay", str(out / "replay_seed0.jsonl"), "--config", str(other)]) == EXIT_RUNTIME


def test_replay_truncated(trained, tmp_path):
    _, out = trained
    cut = tmp_path / "cut.jsonl"
    cut.write_text((out / "replay_seed0.jsonl").read_text()[:-30])
    assert main(["replay", str(cut)]) == EXIT_RUNTIME


def test_report(trained, capsys):
    _, out = trained
    assert main(["report", str(out), str(out / "report.json")]) == EXIT_OK
    assert "success_rate" in capsys.readouterr().out
    assert main(["report", "--json", str(out)]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)[0]["planner"] == "olmask"


def test_report_missing(tmp_path):
    assert main(["report", str(tmp_path / "nope")]) == EXIT_CONFIG


def test_annotate(tmp_path, capsys):
    pallet = build_pallet(GridConfig(6, 6, 6), [(soft(0, (3, 3, 3)), 0, 0, 0)])
    (tmp_path / "p.json").write_text(pallet.to_json())
    code = main(["annotate", "--pallet", str(tmp_path / "p.json"), "--box", "3,3,3", "--density", "5000", "--rigidity", "3",
                 "--out", str(tmp_path / "m.pgm")])
    assert code == EXIT_OK
    rows = capsys.readouterr().out.split()
    assert len(rows) == 6 and rows[0][0] == "."  # hard box on the soft one is rejected
    assert (tmp_path / "m.pgm").read_bytes().startswith(b"P5")


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["train", "--planner", "best"],
        ["annotate", "--box", "3,3"],
        ["annotate", "--box", "a,b,c"],
        ["train", "--config", "/nonexistent/cfg.json"],
        ["train", "--timesteps", "-5"],
    ],
)
def test_config_errors(argv):
    assert main(argv) == EXIT_CONFIG


def test_oversized_box_is_all_infeasible(capsys):
    assert main(["annotate", "--grid", "2", "2", "2", "--box", "3,3,3"]) == EXIT_OK
    assert capsys.readouterr().out.split() == ["..", ".."]


def test_runtime_errors(tmp_path):
    assert main(["annotate", "--box", "3,3,3", "--orientation", "9"]) == EXIT_RUNTIME
    assert main(["annotate", "--pallet", str(tmp_path / "missing.json"), "--box", "1,1,1"]) == EXIT_RUNTIME


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "palletmask", "report", "/nonexistent"], capture_output=True)
    assert r.returncode == EXIT_CONFIG
