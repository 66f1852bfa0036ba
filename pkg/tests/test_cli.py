import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from stablenode import checks
from stablenode.cli import main, parse_run_config, UsageError
from stablenode.dataset import load_demos, read_trajectory
from stablenode.trainer import save_checkpoint


@pytest.fixture(scope="module")
def model_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("m") / "model.json"
    save_checkpoint(checks.small_model(0), path)
    return path


def test_train_writes_checkpoint_and_report(tmp_path):
    cfg = {
        "seed": 0,
        "iterations": 3,
        "n_batch": 8,
        "data": "bundled:hook",
        "model": {"nominal_hidden": [8], "icnn_hidden": [4]},
        "solver": {"method": "rk4", "dt": 0.02},
    }
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    out = tmp_path / "trained.json"
    assert main(["train", "--config", str(tmp_path / "cfg.json"), "--out", str(out)]) == 0
    assert json.loads(out.read_text())["version"] == 1
    report = json.loads((tmp_path / "trained.report.json").read_text())
    assert len(report["losses"]) == 3
    assert len(report["evaluation"]["demos"]) == 7


def test_rollout_csv_reparses(tmp_path, model_path):
    out = tmp_path / "traj" / "r.csv"
    out.parent.mkdir()
    assert main(["rollout", "--model", str(model_path), "--x0=0.1,0.2", "--horizon", "5.0", "--out", str(out)]) == 0
    tr = read_trajectory(out)
    assert np.all(np.diff(tr.times) > 0)
    assert tr.times[-1] == pytest.approx(5.0)
    assert len(load_demos(out.parent)) == 1
    rep = json.loads((out.parent / "r.report.json").read_text())
    assert rep["samples"] == len(tr)


def test_rollout_fixed_step(tmp_path, model_path):
    out = tmp_path / "r.csv"
    assert main(["rollout", "--model", str(model_path), "--x0=0.1,0.2", "--horizon", "1", "--dt", "0.05", "--out", str(out)]) == 0
    assert len(read_trajectory(out)) == 21


def test_eval_and_portrait(tmp_path, model_path):
    rep = tmp_path / "eval.json"
    assert main(["eval", "--model", str(model_path), "--data", "bundled:angle", "--out", str(rep)]) == 0
    assert len(json.loads(rep.read_text())["demos"]) == 7
    svg = tmp_path / "p.svg"
    assert main(["portrait", "--model", str(model_path), "--bounds=-1,1,-1,1", "--grid", "12", "--out", str(svg)]) == 0
    root = ET.parse(svg).getroot()
    groups = {g.get("id"): g for g in root.iter("{http://www.w3.org/2000/svg}g")}
    assert set(groups) == {"corrective-active", "field", "attractors"}
    assert len(list(groups["attractors"])) == 1
    info = json.loads((tmp_path / "p.report.json").read_text())
    assert len(list(groups["corrective-active"])) == round(info["active_fraction"] * 144)


@pytest.mark.parametrize(
    "argv",
    [
        ["eval", "--model", "missing.json", "--data", "bundled:angle", "--out", "e.json"],
        ["rollout", "--model", "MODEL", "--x0=1,2,3", "--horizon", "1", "--out", "r.csv"],
        ["rollout", "--model", "MODEL", "--x0=1,2", "--horizon", "-1", "--out", "r.csv"],
        ["portrait", "--model", "MODEL", "--bounds=1,0,0,1", "--out", "p.svg"],
        ["portrait", "--model", "MODEL", "--bounds=0,1,0,1", "--out", "/nonexistent/dir/p.svg"],
        ["frobnicate"],
    ],
)
def test_invalid_input_exits_1(tmp_path, model_path, argv, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    argv = [str(model_path) if a == "MODEL" else a for a in argv]
    assert main(argv) == 1


def test_config_validation():
    with pytest.raises(UsageError, match="unknown keys"):
        parse_run_config({"seed": 0, "learning_rate": 1})
    with pytest.raises(UsageError, match="seed"):
        parse_run_config({"iterations": 1})
    with pytest.raises(UsageError, match="config.model"):
        parse_run_config({"seed": 0, "model": {"width": 3}})
    with pytest.raises(UsageError, match="config.solver"):
        parse_run_config({"seed": 0, "solver": {"method": "heun"}})
    run = parse_run_config({"seed": 4, "corrective": {"alpha": 0.01}, "model": {"attractors": [[0, 0], [0, -0.2]], "lyapunov_mode": "product"}})
    assert run.train.seed == 4
    assert run.train.corrective.alpha == 0.01
    assert run.model.attractors == ((0, 0), (0, -0.2))


def test_train_missing_data_dir_exits_1(tmp_path):
    (tmp_path / "cfg.json").write_text(json.dumps({"seed": 0, "data": str(tmp_path / "nope")}))
    assert main(["train", "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "m.json")]) == 1


def test_runtime_failure_exits_2(tmp_path, model_path):
    out = tmp_path / "r.csv"
    argv = ["rollout", "--model", str(model_path), "--x0=0.1,0.2", "--horizon", "100", "--max-steps", "3", "--out", str(out)]
    assert main(argv) == 2
    assert not out.exists()


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--seed", "1"]) == 0
    assert "[FAIL]" not in capsys.readouterr().out
