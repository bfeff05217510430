import csv
import json
import subprocess
import sys

import pytest

from gridlan.cli import main, parse_cores


def lines(path):
    return path.read_text().splitlines()


def rows(path):
    return list(csv.reader(l for l in lines(path) if not l.startswith("#")))


@pytest.fixture
def ep_jobs(tmp_path):
    p = tmp_path / "jobs.json"
    p.write_text(json.dumps({
        "workloads": {"ep": {"total_work": 12677.6}},
        "jobs": [{"job_id": "ep26", "queue": "gridlan", "procs": 26, "workload": "ep",
                  "submit_at_s": 60, "user": "researcher"}],
    }))
    return p


def test_validate_paper(capsys):
    assert main(["validate", "paper"]) == 0
    assert "ok" in capsys.readouterr().out


def test_validate_duplicate_id(tmp_path, paper_raw, capsys):
    paper_raw["clients"][2]["id"] = "n01"
    p = tmp_path / "dup.json"
    p.write_text(json.dumps(paper_raw))
    assert main(["validate", str(p)]) == 1
    assert "'n01'" in capsys.readouterr().err


def test_validate_missing_file(tmp_path):
    assert main(["validate", str(tmp_path / "none.json")]) == 1


def test_bad_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["bench", "latency", "--trials", "many"])
    assert exc.value.code == 1


def test_latency_table_shape(capsys):
    assert main(["bench", "latency", "--trials", "200"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("# gridlan ") and "seed=0" in out[0]
    table = list(csv.reader(out[1:]))
    assert table[0] == ["endpoint", "kind", "trials", "mean_us", "stddev_us"]
    assert len(table) == 9
    assert [r[1] for r in table[1:]] == ["host", "node"] * 4


def test_latency_zero_trials():
    assert main(["bench", "latency", "--trials", "0"]) == 1


def test_latency_writes_file(tmp_path):
    assert main(["bench", "latency", "--trials", "10", "--out", str(tmp_path)]) == 0
    assert len(rows(tmp_path / "latency.csv")) == 9


def test_speedup_csv(tmp_path):
    rc = main(["bench", "speedup", "--cores", "1..3,26", "--trials", "4", "--work", "260",
               "--out", str(tmp_path)])
    assert rc == 0
    table = rows(tmp_path / "speedup.csv")
    assert table[0] == ["n_cores", "trial", "elapsed_s", "placement", "t1_over_n"]
    assert len(table) == 1 + 4 * 4
    assert {r[0] for r in table[1:]} == {"1", "2", "3", "26"}


def test_speedup_oversize_cores(tmp_path):
    assert main(["bench", "speedup", "--cores", "27", "--trials", "1", "--work", "1",
                 "--out", str(tmp_path)]) == 1


def test_speedup_comparison(tmp_path):
    rc = main(["bench", "speedup", "--cores", "26", "--trials", "1", "--comparison",
               "--out", str(tmp_path)])
    assert rc == 0
    assert len(rows(tmp_path / "comparison.csv")) == 65


@pytest.mark.parametrize("spec,expected", [
    ("1..4", [1, 2, 3, 4]),
    ("1,2,8", [1, 2, 8]),
    ("1..2,26", [1, 2, 26]),
])
def test_parse_cores(spec, expected):
    assert parse_cores(spec) == expected


def test_calibrate_reports_fit(tmp_path, capsys):
    assert main(["calibrate", "--out", str(tmp_path)]) == 0
    d = json.loads(capsys.readouterr().out)
    assert d["achieved"]["comparison_parity_cores"] == 38
    assert abs(d["achieved"]["grid_elapsed_s"] - 212) < 212 * 0.05
    assert (tmp_path / "calibration.json").exists()


def test_calibrate_infeasible():
    assert main(["calibrate", "--target-time", "0"]) == 2


def test_boot_prints_transcripts(capsys):
    assert main(["boot", "--until", "60"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("# gridlan")
    assert sum(1 for l in out if l.endswith("\tReady")) == 4


def test_boot_kill_needs_matching_at():
    assert main(["boot", "--kill", "n01"]) == 1


def test_run_single_job(tmp_path, ep_jobs):
    out = tmp_path / "out"
    assert main(["run", "--jobs", str(ep_jobs), "--out", str(out)]) == 0
    ev = [r[1] for r in rows(out / "journal.csv")[1:]]
    assert ev == ["Queued", "Running", "Completed"]


def test_run_kill_mid_job(tmp_path, ep_jobs):
    out = tmp_path / "out"
    assert main(["run", "--jobs", str(ep_jobs), "--out", str(out),
                 "--kill", "n02", "--at", "150"]) == 0
    ev = [r[1] for r in rows(out / "journal.csv")[1:]]
    assert ev == ["Queued", "Running", "Interrupted", "Queued", "Running", "Completed"]


def test_run_empty_jobs(tmp_path):
    jobs = tmp_path / "jobs.json"
    jobs.write_text("[]")
    out = tmp_path / "out"
    assert main(["run", "--jobs", str(jobs), "--out", str(out), "--until", "100"]) == 0
    assert rows(out / "journal.csv") == [["job_id", "event", "time_s", "detail"]]
    assert sum(1 for l in lines(out / "transcripts.tsv") if l.endswith("\tReady")) == 4


def test_run_unknown_injection_target(tmp_path, ep_jobs):
    assert main(["run", "--jobs", str(ep_jobs), "--out", str(tmp_path),
                 "--kill", "n09", "--at", "10"]) == 2


def test_run_unauthorized_job_is_usage_error(tmp_path):
    jobs = tmp_path / "jobs.json"
    jobs.write_text(json.dumps([{"job_id": "x", "procs": 1, "workload": {"total_work": 1},
                                 "user": "mallory"}]))
    assert main(["run", "--jobs", str(jobs), "--out", str(tmp_path / "o")]) == 1


def test_run_from_manifest(tmp_path, ep_jobs):
    m = tmp_path / "manifest.json"
    m.write_text(json.dumps({"config": "paper", "jobs": "jobs.json", "seed": 7,
                             "out": str(tmp_path / "r"), "trace": True}))
    assert main(["run", "--manifest", str(m)]) == 0
    hdr = lines(tmp_path / "r" / "journal.csv")[0]
    assert "seed=7" in hdr
    assert (tmp_path / "r" / "trace.tsv").exists()


def test_env_overrides(tmp_path, ep_jobs, monkeypatch):
    monkeypatch.setenv("GRIDLAN_SEED", "99")
    monkeypatch.setenv("GRIDLAN_OUT", str(tmp_path / "env"))
    assert main(["run", "--jobs", str(ep_jobs)]) == 0
    assert "seed=99" in lines(tmp_path / "env" / "journal.csv")[0]


def test_reports_reproducible(tmp_path, ep_jobs):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        main(["run", "--jobs", str(ep_jobs), "--out", str(out), "--trace",
              "--kill", "n03.vm", "--at", "100", "--seed", "5"])
        outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    assert outs[0] == outs[1]
    assert set(outs[0]) == {"journal.csv", "health.csv", "trace.tsv", "transcripts.tsv"}


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "gridlan", "validate", "paper"],
                       capture_output=True, text=True)
    assert r.returncode == 0
