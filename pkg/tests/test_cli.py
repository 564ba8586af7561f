import subprocess
import sys

import numpy as np
import pytest

from dstgcn.cli import build_parser, main
from dstgcn.data import load_speed_matrix
from dstgcn.evaluation import MetricsReport

TINY = ["--window", "8", "--blocks", "1", "--hidden", "8", "--out-dim", "8", "--gse-hidden", "4",
        "--iters", "4", "--val-every", "2", "--lr", "1e-3"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--nodes", 5, "--steps", 300, "--seed", 1, "--noise", 0.5, "--out", root / "d") == 0
    assert run("train", "--data", root / "d/speeds.csv", "--graph", root / "d/graph.csv", "--seed", 0,
               "--out", root / "run", *TINY) == 0
    return root


def test_train_outputs(workspace):
    assert {p.name for p in (workspace / "run").iterdir()} >= {"config.txt", "loss.csv", "model.ckpt"}
    lines = (workspace / "run/loss.csv").read_text().splitlines()
    assert lines[0] == "iteration,loss,val_rmse" and len(lines) == 5
    assert lines[1].endswith(",") and not lines[2].endswith(",")
    assert "hidden = 8" in (workspace / "run/config.txt").read_text()


def test_impute_complete_input_is_unchanged(workspace):
    out = workspace / "imp.csv"
    assert run("impute", "--model", workspace / "run", "--data", workspace / "d/speeds.csv",
               "--graph", workspace / "d/graph.csv", "--out", out) == 0
    assert out.read_bytes() == (workspace / "d/speeds.csv").read_bytes()


def test_impute_fills_zeros(workspace, tmp_path):
    sm = load_speed_matrix(workspace / "d/speeds.csv")
    holes = sm.values.copy()
    holes[2, 10:20] = 0.0
    from dstgcn.data import save_speed_matrix

    save_speed_matrix(sm.with_values(holes), tmp_path / "holes.csv")
    assert run("impute", "--model", workspace / "run", "--data", tmp_path / "holes.csv",
               "--graph", workspace / "d/graph.csv", "--out", tmp_path / "out.csv") == 0
    filled = load_speed_matrix(tmp_path / "out.csv").values
    assert (filled[2, 10:20] != 0).all()
    np.testing.assert_array_equal(filled[holes != 0], holes[holes != 0])


def test_shape_mismatch(workspace, capsys):
    assert run("synth", "--nodes", 6, "--steps", 300, "--seed", 1, "--out", workspace / "d6") == 0
    code = run("impute", "--model", workspace / "run", "--data", workspace / "d6/speeds.csv",
               "--graph", workspace / "d6/graph.csv", "--out", workspace / "x.csv")
    assert code == 3
    assert capsys.readouterr().err.strip().startswith("error: shape-mismatch:")


def test_usage_errors(workspace, tmp_path, capsys):
    assert run("train", "--bogus") == 2
    assert run("synth", "--nodes", 5, "--steps", 10, "--out", tmp_path) == 2  # seed is mandatory
    assert run("mask", "--pattern", "scm", "--ratio", 0.4, "--seed", 1, "--shape", "5x8", "--out", tmp_path / "m") == 2
    (tmp_path / "bad.txt").write_text("learning_rat = 0.1\n")
    capsys.readouterr()
    assert run("train", "--config", tmp_path / "bad.txt") == 2
    assert "error: usage: unknown config keys: learning_rat" in capsys.readouterr().err


def test_data_error(tmp_path, capsys):
    (tmp_path / "s.csv").write_text("a,b\n1,x\n")
    (tmp_path / "g.csv").write_text("a,b,1\n")
    assert run("impute", "--model", tmp_path, "--data", tmp_path / "s.csv", "--graph", tmp_path / "g.csv",
               "--out", tmp_path / "o.csv") == 3
    assert capsys.readouterr().err.startswith("error: data-error:")


def test_config_file_with_override(workspace, tmp_path):
    cfg = tmp_path / "run.txt"
    cfg.write_text(f"data = {workspace / 'd/speeds.csv'}\ngraph = {workspace / 'd/graph.csv'}\n"
                   "window = 8\nblocks = 1\nhidden = 6\nout_dim = 6\ngse_hidden = 4\n"
                   "iters = 2\nseed = 5\nno_gse = true\n")
    assert run("train", "--config", cfg, "--hidden", 4, "--out", tmp_path / "run") == 0
    text = (tmp_path / "run/config.txt").read_text()
    assert "hidden = 4" in text and "use_gse = False" in text and "seed = 5" in text


def test_mask_deterministic(workspace, tmp_path):
    args = ["mask", "--pattern", "bm", "--ratio", 0.4, "--seed", 7, "--graph", workspace / "d/graph.csv",
            "--shape", "5x20"]
    assert run(*args, "--out", tmp_path / "a.csv") == 0
    assert run(*args, "--out", tmp_path / "b.csv") == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    m = np.loadtxt(tmp_path / "a.csv", delimiter=",")
    assert ((m == 0).sum(axis=0) == 2).all()


def test_evaluate_and_report(workspace, tmp_path):
    ev = tmp_path / "ev"
    args = ["evaluate", "--model", workspace / "run", "--data", workspace / "d/speeds.csv",
            "--graph", workspace / "d/graph.csv", "--seed", 2, "--split", "all", "--period", 288,
            "--ratios", "0.6,0.2", "--out"]
    assert run(*args, ev) == 0
    report = MetricsReport.read(ev / "report.csv")
    assert len(report.cells()) == 8 and "historical_average" in report.models()
    assert run(*args, tmp_path / "ev2") == 0
    assert (ev / "report.csv").read_bytes() == (tmp_path / "ev2/report.csv").read_bytes()

    assert run("report", "--report", ev / "report.csv", "--out", tmp_path / "plots") == 0
    files = sorted(p.name for p in (tmp_path / "plots").iterdir())
    assert len(files) == 12 and "bm_mape.csv" in files
    lines = (tmp_path / "plots/rm_rmse.csv").read_text().splitlines()
    assert lines[0] == "ratio,dstgcn,mean_fill,historical_average"
    assert [float(l.split(",")[0]) for l in lines[1:]] == [0.2, 0.6]
    first = {f: (tmp_path / "plots" / f).read_bytes() for f in files}
    assert run("report", "--report", ev / "report.csv", "--out", tmp_path / "plots") == 0
    assert first == {f: (tmp_path / "plots" / f).read_bytes() for f in files}


def test_report_rejects_malformed(tmp_path):
    (tmp_path / "r.csv").write_text("not,a,report\n")
    assert run("report", "--report", tmp_path / "r.csv", "--out", tmp_path / "p") == 3


def test_transitions_export(workspace, tmp_path):
    out = tmp_path / "tw.csv"
    assert run("transitions", "--model", workspace / "run", "--data", workspace / "d/speeds.csv",
               "--graph", workspace / "d/graph.csv", "--node", "node_2", "--times", "0,5", "--out", out) == 0
    rows = [l.split(",") for l in out.read_text().splitlines()[1:]]
    assert len(rows) == 4
    for row in rows:
        assert abs(sum(float(x) for x in row[2:]) - 1) < 1e-9
    assert run("transitions", "--model", workspace / "run", "--data", workspace / "d/speeds.csv",
               "--graph", workspace / "d/graph.csv", "--node", "nope", "--out", out) == 3


def test_help_lists_every_flag():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    for name, p in sub.choices.items():
        text = p.format_help()
        for action in p._actions:
            for flag in action.option_strings:
                assert flag in text, (name, flag)
            if action.option_strings and action.dest != "help":
                assert action.help, (name, action.dest)


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "dstgcn.cli", "report", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "--report" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "dstgcn.cli", "nope"], capture_output=True, text=True)
    assert proc.returncode == 2
