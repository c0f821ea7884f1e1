import csv
import json
from pathlib import Path

import numpy as np
import pytest

from budsim.cli import main
from budsim.report import write_outputs
from budsim.scenario import scenario_from_dict
from budsim.sim import Ecosystem


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    sc = scenario_from_dict({
        "name": "report", "seed": 2, "duration_s": 70.0,
        "rotation": {"enabled": True, "period_s": 20},
        "recording": {"host": True},
        "bp": {"enabled": True, "period_s": 20, "window_s": 40},
        "subject": {"hr_bpm": 60, "vtt_ms": 120},
    })
    eco = Ecosystem(sc)
    eco.run()
    write_outputs(eco, out, figures=True)
    return out


def test_output_tree(run_dir):
    for name in ("trace.jsonl", "summary.json", "host/records.csv", "host/ppg.csv",
                 "host/imu.csv", "host/temp.csv", "host/vitals.csv",
                 "left/records.csv", "right/records.csv",
                 "figures/ppg.png", "figures/vitals.png", "figures/energy.png"):
        assert (run_dir / name).exists(), name


def test_long_csv_schema(run_dir):
    with open(run_dir / "host" / "records.csv") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        assert header == ["t_us", "peripheral", "channel", "value"]
        rows = [next(reader) for _ in range(5)]
    for row in rows:
        int(row[0]), int(row[3])
        assert row[1] in ("ppg", "imu9", "temp")


def test_wide_csv_contiguous_times(run_dir):
    with open(run_dir / "host" / "ppg.csv") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        assert header == ["t_us", "green", "red", "ir"]
        t = [int(row[0]) for row in reader]
    deltas = set(np.diff(t))
    assert deltas == {20_000}  # 50 Hz grid


def test_vitals_csv_has_all_six(run_dir):
    with open(run_dir / "host" / "vitals.csv") as fh:
        names = {row["vital"] for row in csv.DictReader(fh)}
    assert {"hr", "hrv", "spo2", "rr", "bp", "temp_core"} <= names


def test_summary_contents(run_dir):
    summary = json.loads((run_dir / "summary.json").read_text())
    assert summary["vitals"]["hr_bpm"]["abs_err"] <= 1.0
    assert summary["host_seq_audit"]["gaps"] == 0
    assert all(link["balanced"] for link in summary["links"].values())


def test_cli_run_and_trace(tmp_path, capsys):
    scenario = tmp_path / "mini.yaml"
    scenario.write_text(
        "name: mini\nseed: 1\nduration_s: 25\n"
        "rotation: {enabled: true, period_s: 10}\n"
        "recording: {host: false, device: false}\nbp: {enabled: false}\n"
    )
    out = tmp_path / "out"
    assert main(["run", str(scenario), "--out", str(out), "--no-figures"]) == 0
    printed = capsys.readouterr().out
    assert "gaps 0" in printed and "swaps 2" in printed
    assert (out / "trace.jsonl").exists()

    assert main(["trace", str(out / "trace.jsonl"), "--filter", "role_swap"]) == 0
    lines = [l for l in capsys.readouterr().out.splitlines() if l.strip()]
    assert lines and all("role_swap" in l for l in lines)


def test_cli_seed_override_changes_outputs(tmp_path):
    scenario = tmp_path / "mini.yaml"
    scenario.write_text("name: mini\nseed: 1\nduration_s: 16\n"
                        "recording: {host: true}\nrotation: {enabled: false}\n")
    outs = []
    for seed in (1, 2):
        out = tmp_path / f"out{seed}"
        main(["run", str(scenario), "--seed", str(seed), "--out", str(out), "--no-figures"])
        outs.append((out / "host" / "ppg.csv").read_bytes())
    assert outs[0] != outs[1]


def test_cli_vitals_on_recorded_csv(run_dir, capsys):
    assert main(["vitals", str(run_dir / "host" / "ppg.csv")]) == 0
    out = capsys.readouterr().out
    result = json.loads(out[out.index("{"):])
    assert abs(result["hr_bpm"] - 60.0) <= 1.0
    assert abs(result["rr_bpm"] - 15.0) <= 1.0
    assert abs(result["r_ratio"] - 0.5) <= 0.05


def test_cli_validate_model(tmp_path, capsys):
    from budsim.mlengine import serialize_model
    from test_mlengine import simple_model

    rng = np.random.default_rng(5)
    good = tmp_path / "good.obml"
    good.write_bytes(serialize_model(simple_model(rng)))
    assert main(["validate-model", str(good)]) == 0
    assert "OK" in capsys.readouterr().out

    bad = tmp_path / "bad.obml"
    bad.write_bytes(serialize_model(simple_model(rng, n_extra_layers=62)))
    assert main(["validate-model", str(bad)]) == 1
    assert "65 > 64" in capsys.readouterr().out

    corrupt = tmp_path / "corrupt.obml"
    blob = bytearray(good.read_bytes())
    blob[6] ^= 1
    corrupt.write_bytes(bytes(blob))
    assert main(["validate-model", str(corrupt)]) == 1
