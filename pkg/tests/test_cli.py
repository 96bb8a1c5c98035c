import csv
import json

import pytest

import commands
from config import TESTBEDS
from main import main

LAYER = {"B": 2, "n_heads": 8, "L": 512, "M": 1024, "hscale": 2, "f": 1.2, "ffn_type": "simple", "t_olp_dense_ms": 1.5}


@pytest.fixture
def run_spec(tmp_path):
    (tmp_path / "layers.json").write_text(json.dumps({"layers": [LAYER, {**LAYER, "f": "*"}, LAYER]}))
    spec = {
        "cluster_profile": "testbed-b",
        "layers": "layers.json",
        "parallel": "testbed-b",
        "de": {"generations": 10, "seed": 4},
    }
    path = tmp_path / "run_spec.json"
    path.write_text(json.dumps(spec))
    return path


def test_synth_then_fit_recovers_profile(tmp_path):
    bench = tmp_path / "bench.csv"
    profile_path = tmp_path / "profile.json"
    assert main(["synth", "--profile", "testbed-a", "--noise", "0", "--out", str(bench)]) == 0
    assert main(["fit", str(bench), "--out", str(profile_path)]) == 0

    fitted = json.loads(profile_path.read_text())
    expected = TESTBEDS["testbed-a"]["profile"]
    for kind in ("a2a", "ag", "rs", "ar", "gemm"):
        assert fitted[kind]["alpha_ms"] == pytest.approx(expected.model(kind).alpha, rel=1e-6)
        assert fitted[kind]["beta_ms_per_unit"] == pytest.approx(expected.model(kind).beta, rel=1e-6)


def test_fit_reports_bad_rows(tmp_path, caplog):
    one_row = tmp_path / "one.csv"
    one_row.write_text("kind,n,t_ms\na2a,1024,0.3\n")
    assert main(["fit", str(one_row), "--out", str(tmp_path / "p.json")]) == 2

    foo = tmp_path / "foo.csv"
    foo.write_text("kind,n,t_ms\nfoo,1024,0.3\n")
    assert main(["fit", str(foo), "--out", str(tmp_path / "p.json")]) == 2
    assert ":2: unknown kind 'foo'" in caplog.text


def test_fit_quality_threshold(tmp_path):
    bench = tmp_path / "bench.csv"
    assert main(["synth", "--profile", "testbed-b", "--noise", "0", "--out", str(bench)]) == 0
    assert main(["fit", str(bench), "--out", str(tmp_path / "p.json"), "--r2-threshold", "1.01"]) == 3


def test_plan_is_reproducible(tmp_path, run_spec):
    first, second = tmp_path / "first", tmp_path / "second"
    assert main(["plan", "--spec", str(run_spec), "--out-dir", str(first)]) == 0
    assert main(["plan", "--spec", str(run_spec), "--out-dir", str(second)]) == 0
    assert (first / "plan.json").read_bytes() == (second / "plan.json").read_bytes()

    plan = json.loads((first / "plan.json").read_text())
    assert len(plan["layers"]) == 3
    assert plan["partition"]["label"] == "fsmoe"
    assert all(entry["plan"]["r_fwd"] >= 1 for entry in plan["layers"])


def test_plan_single_layer_has_no_gradient_in_window(tmp_path):
    (tmp_path / "layers.json").write_text(json.dumps([LAYER]))
    code = main(["plan", "--profile", "testbed-b", "--parallel", "testbed-b",
                 "--layers", str(tmp_path / "layers.json"), "--out-dir", str(tmp_path)])
    assert code == 0
    plan = json.loads((tmp_path / "plan.json").read_text())
    assert plan["layers"][0]["plan"]["t_gar_bwd"] == 0
    assert plan["partition"]["unassigned_tail"] > 0


def test_plan_errors(tmp_path, run_spec):
    assert main(["plan", "--out-dir", str(tmp_path)]) == 2
    assert main(["plan", "--spec", str(tmp_path / "missing.json")]) == 2
    assert main(["plan", "--spec", str(run_spec), "--population", "3", "--out-dir", str(tmp_path)]) == 2


def test_r_max_precedence(tmp_path, run_spec, monkeypatch):
    monkeypatch.setenv("MOE_PLAN_R_MAX", "1")
    assert main(["plan", "--spec", str(run_spec), "--out-dir", str(tmp_path / "env")]) == 0
    plan = json.loads((tmp_path / "env" / "plan.json").read_text())
    assert {(e["plan"]["r_fwd"], e["plan"]["r_bwd"]) for e in plan["layers"]} == {(1, 1)}

    assert main(["plan", "--spec", str(run_spec), "--r-max", "2", "--out-dir", str(tmp_path / "flag")]) == 0
    plan = json.loads((tmp_path / "flag" / "plan.json").read_text())
    assert all(e["plan"]["r_fwd"] <= 2 and e["plan"]["r_bwd"] <= 2 for e in plan["layers"])


def test_simulate_all_styles(tmp_path, run_spec):
    out = tmp_path / "out"
    assert main(["plan", "--spec", str(run_spec), "--out-dir", str(out)]) == 0
    code = main(["simulate", "--spec", str(run_spec), "--plan", str(out / "plan.json"),
                 "--style", "all", "--out-dir", str(out)])
    assert code == 0

    report = json.loads((out / "simulation.json").read_text())
    assert set(report) == {"fsmoe", "fsmoe_no_iio", "pipemoe", "tutel", "sequential"}
    assert report["fsmoe"]["speedup_vs_sequential"] > 1
    assert report["sequential"]["speedup_vs_sequential"] == pytest.approx(1.0)
    for row in report.values():
        assert set(row["utilization_bwd"]) == {"inter_link", "intra_link", "compute"}
        assert row["total_ms"] == pytest.approx(row["fwd_ms"] + row["bwd_ms"])

    events = json.loads((out / "trace_fsmoe.json").read_text())
    assert events
    for event in events:
        assert {"name", "ph", "ts", "dur", "pid", "tid"} <= set(event)
        assert event["ph"] == "X"
    forward_us = report["fsmoe"]["fwd_ms"] * 1000.0
    assert all(event["ts"] >= forward_us - 1e-6 for event in events if event["pid"].startswith("fsmoe bwd"))
    timelines = json.loads((out / "timeline_sequential.json").read_text())
    assert set(timelines) == {"fwd", "bwd"}
    for timeline in timelines.values():
        durations = sum(task["end_ms"] - task["start_ms"] for task in timeline["tasks"])
        assert timeline["makespan_ms"] == pytest.approx(durations)


def test_simulate_honours_phase(tmp_path, run_spec):
    spec = json.loads(run_spec.read_text())
    backward_only = tmp_path / "backward_only.json"
    backward_only.write_text(json.dumps({**spec, "phase": "bwd"}))
    out = tmp_path / "bwd"
    assert main(["simulate", "--spec", str(backward_only), "--out-dir", str(out)]) == 0
    row = json.loads((out / "simulation.json").read_text())["fsmoe"]
    assert "fwd_ms" not in row and "utilization_fwd" not in row
    assert row["total_ms"] == pytest.approx(row["bwd_ms"])
    assert set(json.loads((out / "timeline_fsmoe.json").read_text())) == {"bwd"}

    out = tmp_path / "fwd"
    assert main(["simulate", "--spec", str(backward_only), "--phase", "fwd", "--out-dir", str(out)]) == 0
    row = json.loads((out / "simulation.json").read_text())["fsmoe"]
    assert "bwd_ms" not in row
    assert row["total_ms"] == pytest.approx(row["fwd_ms"])
    events = json.loads((out / "trace_fsmoe.json").read_text())
    assert {event["pid"] for event in events} == {f"fsmoe fwd/L{i}" for i in range(3)}


def test_de_weights_from_flags(tmp_path, run_spec):
    assert main(["plan", "--spec", str(run_spec), "--de-f", "0.5", "--de-cr", "0.3",
                 "--out-dir", str(tmp_path / "ok")]) == 0
    assert main(["plan", "--spec", str(run_spec), "--de-cr", "1.5", "--out-dir", str(tmp_path / "bad")]) == 2
    assert main(["plan", "--spec", str(run_spec), "--de-f", "0", "--out-dir", str(tmp_path / "bad")]) == 2


def test_sweep_from_run_spec(tmp_path):
    spec = {
        "cluster_profile": "testbed-b",
        "parallel": "testbed-b",
        "r_max": 4,
        "output_dir": str(tmp_path / "out"),
        "grid": {"B": [1], "n_heads": [8], "M": [1024], "hscale": [2], "f": [1.2, "*"], "ffn_type": ["simple"]},
    }
    path = tmp_path / "sweep_spec.json"
    path.write_text(json.dumps(spec))
    assert main(["sweep", "--spec", str(path), "--quiet"]) == 0

    with open(tmp_path / "out" / "sweep.csv", newline="") as sweep_file:
        rows = list(csv.DictReader(sweep_file))
    # L comes from the testbed-b preset
    assert len(rows) == 2 * len(TESTBEDS["testbed-b"]["L"])
    assert {row["f"] for row in rows} == {"1.2", "*"}
    assert all(int(row["r_fwd"]) <= 4 and int(row["r_bwd"]) <= 4 for row in rows)

    path.write_text(json.dumps({**spec, "grid": {"heads": [8]}}))
    assert main(["sweep", "--spec", str(path), "--quiet"]) == 2
    # a custom layout has no preset sequence lengths to borrow
    custom = {"P": 32, "n_dp": 8, "n_mp": 4, "n_ep": 8, "n_esp": 4, "gpus_per_node": 4}
    path.write_text(json.dumps({**spec, "parallel": custom}))
    assert main(["sweep", "--spec", str(path), "--quiet"]) == 2


def test_simulate_rejects_bad_plan(tmp_path, run_spec):
    bad = tmp_path / "plan.json"
    bad.write_text(json.dumps({"layers": [{"index": 0}]}))
    assert main(["simulate", "--spec", str(run_spec), "--plan", str(bad), "--out-dir", str(tmp_path)]) == 2


def test_sweep(tmp_path):
    first, second = tmp_path / "first", tmp_path / "second"
    assert main(["sweep", "--testbed", "testbed-b", "--limit", "4", "--quiet", "--out-dir", str(first)]) == 0
    assert main(["sweep", "--testbed", "testbed-b", "--limit", "4", "--quiet", "--jobs", "2",
                 "--out-dir", str(second)]) == 0
    assert (first / "sweep.csv").read_bytes() == (second / "sweep.csv").read_bytes()
    assert (first / "sweep_summary.json").read_bytes() == (second / "sweep_summary.json").read_bytes()

    with open(first / "sweep.csv", newline="") as sweep_file:
        rows = list(csv.DictReader(sweep_file))
    assert [int(row["case"]) for row in rows] == [0, 1, 2, 3]
    for row in rows:
        assert float(row["fsmoe_ms"]) <= float(row["fsmoe_no_iio_ms"]) <= float(row["sequential_ms"])
        assert float(row["fsmoe_ms"]) < float(row["pipemoe_ms"])

    summary = json.loads((first / "sweep_summary.json").read_text())
    assert summary["cases"] == 4
    assert summary["speedup_fsmoe_over"]["pipemoe"] > 1


def test_sweep_needs_confirmation(tmp_path, monkeypatch):
    monkeypatch.setattr(commands, "SWEEP_CONFIRM_LIMIT", 2)
    assert main(["sweep", "--testbed", "testbed-b", "--limit", "3", "--quiet", "--out-dir", str(tmp_path)]) == 2
    assert main(["sweep", "--testbed", "testbed-b", "--limit", "3", "--quiet", "--yes",
                 "--out-dir", str(tmp_path)]) == 0


def test_compare(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    a.write_text(json.dumps({"x": [1.0, 2.0], "label": "fsmoe"}))
    b.write_text(json.dumps({"x": [1.0, 2.001], "label": "fsmoe"}))
    assert main(["compare", str(a), str(a)]) == 0
    assert main(["compare", str(a), str(b)]) == 1
    assert main(["compare", str(a), str(b), "--rel-tol", "1e-3"]) == 0
    assert main(["compare", str(a), str(tmp_path / "missing.json")]) == 2


@pytest.mark.parametrize("gate", ["gshard", "sigmoid", "xmoe", "ec"])
def test_route_every_gate(tmp_path, gate):
    assert main(["route", "--gate", gate, "--L", "64", "--M", "16", "--out-dir", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "route.json").read_text())
    assert report["tokens"] == 2 * 64
    assert report["kept"] + report["dropped"] == report["routed"]
    assert sum(report["expert_load"]) == report["kept"]
    assert report["round_trip_error"] < 1e-9
    if gate == "ec":
        assert report["dropped"] == 0


def test_route_drops_past_capacity(tmp_path):
    assert main(["route", "--f", "0.5", "--L", "64", "--M", "16", "--out-dir", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "route.json").read_text())
    assert report["capacity"] == 16
    assert report["dropped"] > 0
    assert report["drop_fraction"] == pytest.approx(report["dropped"] / report["routed"])

    assert main(["route", "--f", "*", "--noise", "--out-dir", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "route.json").read_text())["dropped"] == 0


def test_route_errors(tmp_path):
    assert main(["route", "--gate", "switch", "--out-dir", str(tmp_path)]) == 2
    assert main(["route", "--k", "9", "--out-dir", str(tmp_path)]) == 2
    assert main(["route", "--f", "0", "--out-dir", str(tmp_path)]) == 2
