import json
import subprocess
import sys

import pytest

from taskcond.cli import main
from taskcond.cond import DemoLibrary, load_demo


def test_demo_learn_gencond(tmp_path, capsys):
    raw, demos = tmp_path / "raw", tmp_path / "demos"
    assert main(["demo", "--out", str(raw)]) == 0
    files = sorted(raw.glob("*.json"))
    assert len(files) == 15
    assert {"task_name", "condition", "trajectory", "goal_anchor"} <= set(json.loads(files[0].read_text()))
    assert main(["learn", "--raw", str(raw), "--out", str(demos)]) == 0
    lib = DemoLibrary.load(demos)
    assert len(lib.records) == 15
    assert load_demo(sorted(demos.glob("*.json"))[0]).condition.task_name == "grasp bottle"
    capsys.readouterr()
    assert main(["gencond", "grasp jar", "--source", "mock", "--demos", str(demos), "--exclude-same-verb"]) == 0
    out = capsys.readouterr().out
    assert "verdict: Success, attempts: 1" in out and "- gripper grasping jar" in out
    assert main(["gencond", "open microwave", "--source", "env", "--demos", str(demos)]) == 0
    assert "- microwave is open" in capsys.readouterr().out
    assert main(["gencond", "grasp jar", "--source", "env", "--demos", str(demos)]) == 1


def test_run_pt_and_report(tmp_path, capsys, library):
    out = tmp_path / "pt"
    assert main(["run-pt", "--verb", "grasp", "--episodes", "1", "--seed", "1", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert text.startswith("PT Name | w/o Cond | w/ Cond FromEnv | w/ Cond from LLM")
    assert main(["report", str(out / "primitive.json"), "--format", "csv"]) == 0
    assert capsys.readouterr().out.startswith("PT Name,w/o Cond")
    assert (out / "primitive_episodes.jsonl").exists() and any((out / "traces").iterdir())


def test_run_lht_case(tmp_path, capsys):
    assert main(["run-lht", "--case", "NovelObjects", "--lht-episodes", "1"]) == 0
    rows = capsys.readouterr().out.splitlines()[1:]
    assert rows and all(r.split(" | ")[2:4] == ["-", "-"] for r in rows)


def test_errors_exit_nonzero(tmp_path, capsys):
    assert main(["gencond", "fly bottle", "--source", "mock"]) == 2
    assert "UnknownVerb" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["bench", "--episodes", "x"])


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "taskcond", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "gencond" in res.stdout
