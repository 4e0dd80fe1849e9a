import json
import math
import subprocess
import sys

import pytest

from mhm.cli import (EXIT_FAILED, EXIT_OK, EXIT_RESTART, EXIT_USAGE, UsageError, format_convergence_table,
                     format_scaling_table, main, parse_config, run_convergence_study, run_scaling_study,
                     write_table_csv)
from mhm.config import RunConfig


def test_parse_valid():
    cfg = parse_config("--n 4 --l 0 --m 1 --k 2 --r 1 --workers 4".split(), environ={})
    assert (cfg.n, cfg.l, cfg.m, cfg.k, cfg.r, cfg.workers) == (4, 0, 1, 2, 1, 4)


@pytest.mark.parametrize("args", [["--l", "2", "--k", "2"], ["--bogus", "1"], ["--n", "x"], ["--workers", "0"],
                                  ["--mode", "mpi"], ["--problem", "nope"], ["--checkpoint-mode", "fine"]])
def test_parse_rejects(args):
    with pytest.raises(UsageError):
        parse_config(args, environ={})


def test_file_then_flags(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"n": 8, "workers": 2, "problem": "zero"}))
    cfg = parse_config(["--workers", "8"], config_file=path, environ={})
    assert (cfg.n, cfg.workers, cfg.problem) == (8, 8, "zero")
    path.write_text(json.dumps({"speed": 3}))
    with pytest.raises(UsageError):
        parse_config([], config_file=path, environ={})


def test_env_checkpoint_dir(tmp_path):
    cfg = parse_config([], environ={"MHM_CHECKPOINT_DIR": str(tmp_path)})
    assert cfg.checkpoint_dir == str(tmp_path) and cfg.checkpoint_mode == "fine"
    cfg = parse_config(["--checkpoint-dir", "/x", "--checkpoint-mode", "coarse"],
                       environ={"MHM_CHECKPOINT_DIR": str(tmp_path)})
    assert cfg.checkpoint_dir == "/x" and cfg.checkpoint_mode == "coarse"


def test_convergence_zero_source():
    rows = run_convergence_study(RunConfig(n=1, r=0, problem="zero", mode="sequential"), 2)
    assert [r["l2_error"] for r in rows] == [0.0, 0.0]
    assert all(math.isnan(r["rate"]) for r in rows)
    assert "-" in format_convergence_table(rows)


def test_convergence_rows_and_nesting():
    base = RunConfig(n=2, r=1, l=1, m=1, mode="sequential")
    rows = run_convergence_study(base, 2)
    assert [r["n"] for r in rows] == [2, 4] and rows[1]["H"] == 0.25
    assert rows[1]["L_l"] == 56 * 2 and rows[0]["rate"] != rows[0]["rate"]
    assert rows[1]["rate"] == pytest.approx(math.log2(rows[0]["l2_error"] / rows[1]["l2_error"]))
    # enriching the multiplier space (m -> 2m) never hurts
    finer = run_convergence_study(base.with_(m=2), 2)
    for a, b in zip(rows, finer):
        assert b["l2_error"] <= a["l2_error"] * (1 + 1e-10)
    with pytest.raises(Exception):
        run_convergence_study(base, 1)


def test_scaling_table(tmp_path):
    rows = run_scaling_study(RunConfig(n=2, r=0), [1, 2])
    assert rows[0]["efficiency"] == pytest.approx(100.0)
    assert rows[0]["speedup"] == pytest.approx(1.0)
    assert all(r["factorizations"] == 8 for r in rows)
    text = format_scaling_table(rows)
    assert text.splitlines()[0].split() == ["workers", "time", "(s)", "speedup", "efficiency"]
    assert text.splitlines()[1].endswith("100.00%")
    write_table_csv(rows, tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "workers,wall_time,factorizations,speedup,efficiency"


def test_main_run_writes_outputs(tmp_path):
    code = main(["run", "--n", "2", "--r", "0", "--mode", "sequential", "--output-dir", str(tmp_path)])
    assert code == EXIT_OK
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["status"] == "ok" and report["dof_counts"]["L_l"] == 16
    assert (tmp_path / "solution.vtk").exists() and (tmp_path / "global.csv").exists()


def test_main_exit_codes(tmp_path, capsys):
    assert main(["run", "--l", "2", "--k", "2"]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["scale", "--worker-counts", "1,x"]) == EXIT_USAGE
    out = tmp_path / "failed"
    code = main(["run", "--n", "2", "--workers", "1", "--failure-plan", "0:after=0:kind=SolveLocal:crash",
                 "--grace-period", "0.2", "--heartbeat-interval", "0.05", "--output-dir", str(out)])
    assert code == EXIT_FAILED
    report = json.loads((out / "report.json").read_text())
    assert report["status"] == "failed" and report["error"]
    assert main(["resume", "--n", "2", "--checkpoint-dir", str(tmp_path / "none")]) == EXIT_RESTART
    assert "restart refused" in capsys.readouterr().err


def test_main_crash_and_resume(tmp_path):
    ck = str(tmp_path / "ck")
    args = ["--n", "2", "--mode", "sequential", "--checkpoint-dir", ck]
    assert main(["run", *args, "--inject-master-crash", "locals:5"]) == EXIT_FAILED
    assert main(["resume", *args, "--output-dir", str(tmp_path / "o")]) == EXIT_OK
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    assert report["factorizations"] == 3 and report["resumed_from"] == "PostSplit"


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "mhm.cli", "run", "--n", "1", "--r", "0", "--mode", "sequential"],
                          capture_output=True, text=True, timeout=60)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["tasks"]["total"] == 4
