import csv
import json

import numpy as np
import pytest
import yaml

from phasedvfs.cli import main

SIM = ["simulate", "--gen", "poisson", "--qps", "3", "--duration-ms", "15000", "--seed", "1"]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_simulate_writes_outputs(tmp_path):
    out = tmp_path / "run"
    assert main(SIM + ["--policy", "greenllm", "--out", str(out)]) == 0
    for name in ("result.json", "decisions.csv", "report.csv", "config.yaml"):
        assert (out / name).is_file()
    doc = json.loads((out / "result.json").read_text())
    assert doc["energy"]["total_j"] > 0
    assert yaml.safe_load((out / "config.yaml").read_text())["seed"] == 1
    assert read_csv(out / "decisions.csv")[0]["action"] == "init"


def test_simulate_is_byte_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(SIM + ["--policy", "greenllm", "--out", str(a)]) == 0
    assert main(SIM + ["--policy", "greenllm", "--out", str(b)]) == 0
    for name in ("result.json", "decisions.csv", "report.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_config_file_and_override(tmp_path):
    cfg = tmp_path / "exp.yaml"
    cfg.write_text(yaml.safe_dump({"policy": "defaultnv", "seed": 4,
                                   "trace": {"gen": "poisson", "qps": 2, "duration_ms": 10000},
                                   "slo": {"margin_decode": 0.8}}))
    out = tmp_path / "o"
    assert main(["simulate", "--config", str(cfg), "--margin-decode", "0.7", "--out", str(out)]) == 0
    doc = json.loads((out / "result.json").read_text())
    assert doc["config"]["slo"]["margin_decode"] == 0.7
    assert doc["config"]["policy"]["kind"] == "defaultnv"


@pytest.mark.parametrize("args", [
    ["simulate", "--gen", "poisson", "--qps", "3", "--duration-ms", "1000"],               # no seed
    SIM + ["--policy", "turbo"],
    SIM + ["--profile", "missing.profile"],
    SIM + ["--margin-decode", "5"],
    ["simulate", "--trace", "nope.csv"],
    ["sweep", "--gen", "poisson", "--seed", "1", "--freqs", "1000"],
    ["fit", "--kind", "power", "--samples", "absent.csv"],
    ["report", "--baseline", "defaultnv"],
    ["frobnicate"],
])
def test_config_errors_exit_1_and_write_nothing(tmp_path, args):
    out = tmp_path / "never"
    assert main(args + ["--out", str(out)]) == 1
    assert not out.exists()


def test_sweep_and_assert_convex(tmp_path):
    base = ["sweep", "--gen", "decode_micro", "--tps", "1600", "--duration-ms", "20000", "--seed", "0",
            "--metric", "decode"]
    out = tmp_path / "sw"
    assert main(base + ["--freqs", "210:1410:300", "--assert-convex", "--out", str(out)]) == 0
    rows = read_csv(out / "sweep.csv")
    assert [int(r["freq_mhz"]) for r in rows] == [210, 510, 810, 1110, 1410]
    assert min(float(r["norm"]) for r in rows) == 1.0
    # a range that stops below the optimum is monotone, so the flag trips
    assert main(base + ["--freqs", "1110:1410:300", "--assert-convex", "--out", str(tmp_path / "s2")]) == 2


def test_fit_power_round_trip(tmp_path):
    f = np.arange(210, 1411, 60)
    p = 3e-7 * f ** 3 - 5.1e-4 * f ** 2 + 0.3001 * f + 140
    samples = tmp_path / "p.csv"
    samples.write_text("freq_mhz,power_w\n" + "".join(f"{a},{b}\n" for a, b in zip(f, p)))
    out = tmp_path / "frag.yaml"
    assert main(["fit", "--kind", "power", "--samples", str(samples), "--out", str(out)]) == 0
    doc = yaml.safe_load(out.read_text())
    assert doc["power"]["k3"] == pytest.approx(3e-7, rel=1e-6)
    assert doc["power"]["k0"] == pytest.approx(140, rel=1e-6)
    assert doc["diagnostics"]["r2"] == pytest.approx(1.0)


def test_fit_rank_deficient_is_config_error(tmp_path):
    samples = tmp_path / "p.csv"
    samples.write_text("freq_mhz,power_w\n900,200\n900,201\n")
    assert main(["fit", "--kind", "power", "--samples", str(samples), "--out", str(tmp_path / "x.yaml")]) == 1


def test_report_combines_runs(tmp_path):
    dirs = []
    for pol in ("defaultnv", "greenllm"):
        d = tmp_path / pol
        assert main(SIM + ["--policy", pol, "--out", str(d)]) == 0
        dirs.append(str(d))
    out = tmp_path / "rep"
    assert main(["report", *dirs, "--workload", "chat", "--out", str(out)]) == 0
    rows = read_csv(out / "report.csv")
    assert rows[0]["method"] == "defaultnv" and float(rows[0]["rel_decode_energy"]) == 1.0
    assert float(rows[1]["rel_decode_energy"]) < 1.0
    for name in ("report.txt", "report.json", "freq_series.csv", "ttft_hist.csv"):
        assert (out / name).is_file()
    assert main(["report", dirs[1], "--out", str(tmp_path / "r2")]) == 1


def test_microbench(tmp_path):
    out = tmp_path / "mb"
    assert main(["microbench", "--kind", "decode", "--levels", "400,1200", "--duration-ms", "15000",
                 "--policies", "defaultnv,greenllm", "--out", str(out)]) == 0
    rows = read_csv(out / "microbench.csv")
    assert len(rows) == 4
