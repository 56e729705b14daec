import json
import subprocess
import sys

import numpy as np
import pytest

from ssmprune.checkpoint import read_checkpoint
from ssmprune.cli import main


@pytest.fixture()
def work(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["init", "--preset", "toy", "--out", "m.st", "--seed", "1"]) == 0
    assert main(["synth", "--model", "m.st", "--n-seq", "4", "--seq-len", "12", "--out", "c.jsonl"]) == 0
    assert main(["calibrate", "--model", "m.st", "--calib", "c.jsonl", "--out", "s.st"]) == 0
    return tmp_path


def test_wanda_ratio_zero_leaves_checkpoint_identical(work):
    assert main(["prune", "--model", "m.st", "--method", "wanda", "--stats", "s.st", "--ratio", "0.0",
                 "--out", "p.st"]) == 0
    assert (work / "p.st").read_bytes() == (work / "m.st").read_bytes()
    report = json.loads((work / "p.st.report.json").read_text())
    assert report["sparsity"] == 0.0


def test_inspect_large_preset_fractions(capsys):
    assert main(["inspect", "--preset", "mamba2-2.7b"]) == 0
    out = capsys.readouterr().out
    assert "in_proj 67.33%" in out and "out_proj 32.59%" in out and "head pattern MVA" in out


def test_merge_then_inspect(tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["init", "--preset", "tiny", "--out", "t.st"]) == 0
    assert main(["prune", "--model", "t.st", "--method", "merge", "--factor", "2", "--out", "u.st"]) == 0
    capsys.readouterr()
    assert main(["inspect", "u.st"]) == 0
    assert "heads 1 " in capsys.readouterr().out
    plan = json.loads((tmp_path / "u.st.plan.json").read_text())
    assert plan["method"] == "merge" and plan["layers"][0]["merge_factor"] == 2


@pytest.mark.parametrize("method,extra", [("state", []), ("headdim", []), ("flap", ["--ratio", "0.25"]),
                                          ("wanda", ["--targets", "out_proj"])])
def test_prune_methods_and_eval(work, method, extra, capsys):
    assert main(["prune", "--model", "m.st", "--method", method, "--stats", "s.st", "--out", "p.st", *extra]) == 0
    pruned = read_checkpoint(work / "p.st")
    assert np.isfinite(pruned.params.embedding.data).all()
    assert main(["eval", "--model", "p.st", "--data", "c.jsonl", "--report", "e.json"]) == 0
    rep = json.loads((work / "e.json").read_text())
    assert rep["perplexity"] >= 1.0 and rep["token_count"] == 44


def test_replay_saved_plan(work):
    assert main(["prune", "--model", "m.st", "--method", "state", "--stats", "s.st", "--out", "a.st"]) == 0
    assert main(["prune", "--model", "m.st", "--from-plan", "a.st.plan.json", "--out", "b.st"]) == 0
    assert (work / "a.st").read_bytes() == (work / "b.st").read_bytes()


def test_sweeps(work):
    assert main(["sweep", "--model", "m.st", "--data", "c.jsonl", "--stats", "s.st", "--kind", "ratio",
                 "--report", "r.json", "--csv", "r.csv"]) == 0
    rows = json.loads((work / "r.json").read_text())["sweep"]
    assert [r["ratio"] for r in rows] == [0.0, 0.25, 0.5]
    assert (work / "r.csv").read_text().startswith("table,target")
    assert main(["sweep", "--model", "m.st", "--data", "c.jsonl", "--stats", "s.st", "--kind", "component",
                 "--ratios", "0.1", "--report", "k.json"]) == 0
    assert len(json.loads((work / "k.json").read_text())["component"]) == 3


def test_eval_throughput(work):
    assert main(["eval", "--model", "m.st", "--data", "c.jsonl", "--throughput", "1,4", "--report", "t.json"]) == 0
    rep = json.loads((work / "t.json").read_text())
    assert rep["throughput"][0]["seq_len"] == 4 and rep["notes"]


def test_exit_codes(work, capsys):
    assert main(["prune", "--model", "m.st", "--method", "bogus", "--out", "x.st"]) == 1
    assert main(["inspect", "missing.st"]) == 2
    assert main(["prune", "--model", "m.st", "--method", "flap", "--out", "x.st"]) == 2  # needs --stats
    assert main(["prune", "--model", "m.st", "--method", "merge", "--factor", "3", "--out", "x.st"]) == 2
    assert main(["eval", "--model", "m.st", "--data", "c.jsonl", "--threads", "0"]) == 1
    (work / "bad.st").write_bytes(b"\x00" * 3)
    assert main(["inspect", "bad.st"]) == 2
    err = capsys.readouterr().err
    assert "error:" in err


def test_environment_override(work, monkeypatch):
    monkeypatch.setenv("SSMPRUNE_RATIO", "0.0")
    assert main(["prune", "--model", "m.st", "--method", "wanda", "--stats", "s.st", "--out", "p.st"]) == 0
    assert (work / "p.st").read_bytes() == (work / "m.st").read_bytes()
    # an explicit flag still wins
    assert main(["prune", "--model", "m.st", "--method", "wanda", "--stats", "s.st", "--ratio", "0.5",
                 "--out", "q.st"]) == 0
    assert (work / "q.st").read_bytes() != (work / "m.st").read_bytes()
    monkeypatch.setenv("SSMPRUNE_RATIO", "lots")
    assert main(["prune", "--model", "m.st", "--method", "wanda", "--stats", "s.st", "--out", "p.st"]) == 1


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "ssmprune", "inspect", "--preset", "tiny"], capture_output=True,
                       text=True, cwd=tmp_path)
    assert r.returncode == 0 and "d_model 4" in r.stdout
