import csv
import json

import pytest
import yaml

from hyperfc.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, main

TINY = {
    "seed": 2, "architecture": "FiLM",
    "ppo": {"num_envs": 2, "num_steps": 32, "minibatch": 32, "epochs": 1, "iterations": 2},
    "scenario": {"horizon": 30},
    "train": {"checkpoint_every": 1},
    "eval": {"episodes": 10, "batch": 4},
}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(TINY))
    assert main(["train", "--config", str(cfg), "--out", str(root / "run")]) == EXIT_OK
    return root


def test_trim_level(capsys):
    assert main(["trim", "--json"]) == EXIT_OK
    data = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert data["residual"] < 1e-6 and abs(data["attitude"][0]) < 1e-4
    assert data["omega"] == [0.0, 0.0, 0.0] or max(map(abs, data["omega"])) < 1e-12


def test_trim_turn(capsys):
    import math
    assert main(["trim", "--kappa", "0.02", "--json"]) == EXIT_OK
    data = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert abs(math.degrees(data["bank"]) - 42.0) < 2.0


@pytest.mark.parametrize("argv", [["trim", "--kappa", "5"], ["trim", "--kappa", "nan"],
                                  ["trim", "--gamma", "1.2"]])
def test_trim_usage_errors(argv, capsys):
    assert main(argv) == EXIT_CONFIG
    assert "error" in capsys.readouterr().err


def test_train_outputs(trained):
    run = trained / "run"
    assert (run / "checkpoint_latest.json").exists() and (run / "checkpoint_00002.json").exists()
    assert (run / "resolved_config.yaml").exists()
    with open(run / "train_log.csv") as fh:
        assert [r["iteration"] for r in csv.DictReader(fh)] == ["1", "2"]


def test_resume_continues(trained, tmp_path):
    cfg = trained / "tiny.yaml"
    other = tmp_path / "other"
    assert main(["train", "--config", str(cfg), "--out", str(other), "--iterations", "1"]) == 0
    assert main(["train", "--config", str(cfg), "--out", str(other), "--resume"]) == 0
    for name in ("train_log.csv", "checkpoint_latest.json"):
        assert (other / name).read_bytes() == (trained / "run" / name).read_bytes()


def test_eval_reports(trained):
    ckpt = str(trained / "run" / "checkpoint_latest.json")
    outs = []
    for name in ("e1", "e2"):
        out = trained / name
        assert main(["eval", "--checkpoint", ckpt, "--protocol", "both", "--episodes", "10",
                     "--seed", "3", "--out", str(out), "--log-worst"]) == EXIT_OK
        outs.append(out)
    for f in ("static_table.csv", "static_curve.csv", "flutter_table.csv",
              "flutter_episodes.csv"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
    with open(outs[0] / "static_table.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows[-1]["actuator"] == "All" and rows[-1]["episodes"] == "10"
    with open(outs[0] / "flutter_episodes.csv") as fh:
        assert {r["kind"] for r in csv.DictReader(fh)} == {"flutter"}
    with open(outs[0] / "static_episodes.csv") as fh:
        assert {r["kind"] for r in csv.DictReader(fh)} == {"stuck_at_onset"}

    log = outs[0] / "static_worst_episode.jsonl"
    assert main(["plot-data", "--log", str(log), "--out", str(trained / "plots")]) == EXIT_OK
    assert (trained / "plots" / "attitude.csv").exists()


def test_analyze(capsys, tmp_path):
    assert main(["analyze", "--arch", "MLP", "--arch", "FiLM", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "13897" in out
    with open(tmp_path / "analysis.csv") as fh:
        rows = {r["architecture"]: r for r in csv.DictReader(fh)}
    assert rows["MLP"]["params"] == "13897" and rows["MLP"]["flops"] == "13824"


def test_error_exit_codes(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "missing.yaml")]) == EXIT_IO
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"airframe": "nowhere.yaml"}))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == EXIT_IO
    assert "nowhere.yaml" in capsys.readouterr().err
    cfg.write_text(yaml.safe_dump({"bogus": 1}))
    assert main(["train", "--config", str(cfg)]) == EXIT_CONFIG
    assert main(["analyze"]) == EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text("{}")
    assert main(["eval", "--checkpoint", str(bad)]) == EXIT_IO
    with pytest.raises(SystemExit):
        main(["fly"])
