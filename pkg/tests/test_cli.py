import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from comono_rdd.cli import main


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    path = d / "data.csv"
    assert main(["simulate", "--dgp", "linear", "--n", "4000", "--seed", "7",
                 "--out", str(path), "--truth-out", str(d / "truth.json")]) == 0
    return path


def test_simulate_outputs(data):
    rows = _rows(data)
    assert len(rows) == 4000 and set(rows[0]) == {"y", "d", "x1", "x2"}
    truth = json.loads((data.parent / "truth.json").read_text())
    assert truth["dgp"] == "linear" and truth["params"]["c"] == 0.5


def test_estimate_q_pipeline(data, tmp_path):
    out = tmp_path / "q.csv"
    assert main(["estimate-q", "--in", str(data), "--out", str(out),
                 "--bootstrap-draws", "10", "--threads", "1"]) == 0
    rows = _rows(out)
    assert len(rows) == 100 and list(rows[0]) == ["y", "qhat", "lower", "upper"]
    y = np.array([float(r["y"]) for r in rows])
    q = np.array([float(r["qhat"]) if r["qhat"] else np.nan for r in rows])
    m = (y > 0.6) & (y < 1.4)
    assert np.nanmax(np.abs(q[m] - 0.5 * y[m])) < 0.1
    lo = np.array([float(r["lower"]) if r["lower"] else np.nan for r in rows])
    assert np.all(lo[m] <= q[m])
    manifest = json.loads((tmp_path / "q.manifest.json").read_text())
    for key in ("config", "inputs", "resolved", "counts", "tool"):
        assert key in manifest
    assert manifest["inputs"]["in"]["sha256"]
    assert "threads" not in manifest["config"]
    points = _rows(tmp_path / "q_points.csv")
    assert points and "g1_extrapolated" in points[0]


def test_bare_estimate_q_uses_defaults(data, tmp_path):
    out = tmp_path / "q.csv"
    assert main(["estimate-q", "--in", str(data), "--out", str(out), "--bootstrap-draws", "0"]) == 0
    res = json.loads((tmp_path / "q.manifest.json").read_text())["resolved"]
    text = json.dumps(res)
    assert "rule_of_thumb" in text and "cross_validated" in text


def test_missing_column_exits_3(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("d,x1,x2\n1,0.1,0.2\n0,0.9,0.9\n")
    code = main(["estimate-q", "--in", str(bad), "--out", str(tmp_path / "q.csv")])
    assert code == 3
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "MissingColumn" and err["exit_code"] == 3


def test_missing_file_exits_3(tmp_path):
    assert main(["estimate-q", "--in", str(tmp_path / "nope.csv")]) == 3


def test_estimation_failure_exits_4(data, tmp_path, capsys):
    code = main(["estimate-q", "--in", str(data), "--epsilon", "1e-12",
                 "--out", str(tmp_path / "q.csv"), "--bootstrap-draws", "0"])
    assert code == 4
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["exit_code"] == 4


def test_usage_errors_exit_2(data, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["estimate-q", "--in", str(data), "--level", "1.5"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 2
    code = main(["policy", "--in", str(data), "--rule", "x9 <= 1",
                 "--out", str(tmp_path / "p.json"), "--bootstrap-draws", "0"])
    assert code == 2


def test_cate_policy_and_sweep(data, tmp_path):
    cate = tmp_path / "cate.csv"
    assert main(["cate", "--in", str(data), "--at", "0.25,0.5", "--at", "0.99,0.99",
                 "--out", str(cate), "--bootstrap-draws", "0"]) == 0
    rows = _rows(cate)
    assert rows[0]["s"] == "1" and abs(float(rows[0]["tau"]) - 0.375) < 0.1
    assert float(rows[0]["tau"]) == float(rows[0]["ey1"]) - float(rows[0]["ey0"])
    assert rows[1]["s"] == "0" and rows[1]["tau"] == ""

    pol = tmp_path / "policy.json"
    assert main(["policy", "--in", str(data), "--rule", "x1<=0.5", "--out", str(pol),
                 "--bootstrap-draws", "0"]) == 0
    res = json.loads(pol.read_text())
    assert res["theta"] == 0.0 and res["n_affected"] == 0.0

    sweep = tmp_path / "sweep.csv"
    assert main(["policy-sweep", "--in", str(data), "--axis", "x1", "--cutoffs", "0.5:0.7:3",
                 "--out", str(sweep), "--bootstrap-draws", "5", "--threads", "1"]) == 0
    rows = _rows(sweep)
    assert [float(r["cutoff"]) for r in rows] == [0.5, 0.6, 0.7]
    assert list(rows[0]) == ["cutoff", "theta", "theta_lower", "theta_upper",
                             "n_affected", "n_identified"]
    assert float(rows[0]["theta"]) == 0.0
    assert float(rows[2]["n_affected"]) > float(rows[1]["n_affected"]) > 0


def test_diagnose(data, tmp_path):
    out = tmp_path / "diag.json"
    assert main(["diagnose", "--in", str(data), "--out", str(out)]) == 0
    res = json.loads(out.read_text())
    assert res["statistic"] >= 0 and not res["violated"] and res["n_pairs"] == 10


def test_replay_is_byte_identical(data, tmp_path):
    first = tmp_path / "a"
    first.mkdir()
    out = first / "bands.csv"
    assert main(["bootstrap", "--in", str(data), "--out", str(out), "--bootstrap-draws", "8",
                 "--seed", "5", "--threads", "1"]) == 0
    again = tmp_path / "b"
    assert main(["replay", str(first / "bands.manifest.json"), "--out-dir", str(again),
                 "--threads", "3"]) == 0
    for name in ("bands.csv", "bands.manifest.json"):
        assert (first / name).read_bytes() == (again / name).read_bytes()


def test_replay_rejects_changed_input(data, tmp_path):
    copy = tmp_path / "data.csv"
    copy.write_bytes(data.read_bytes())
    out = tmp_path / "q.csv"
    assert main(["estimate-q", "--in", str(copy), "--out", str(out), "--bootstrap-draws", "0",
                 "--b", "0.2"]) == 0
    with open(copy, "a") as fh:
        fh.write("1.0,1,0.1,0.1\n")
    assert main(["replay", str(tmp_path / "q.manifest.json"), "--out-dir",
                 str(tmp_path / "r")]) == 3


def test_entry_point_runs():
    res = subprocess.run([sys.executable, "-m", "comono_rdd.cli", "--version"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "0.1.0" in res.stdout
