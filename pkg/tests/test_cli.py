"""CLI surface tests: subcommands, exit codes, determinism."""

from __future__ import annotations

import json

import pytest

from kitsune.cli import main
from kitsune.graph import loads_graph
from kitsune.queue_model import CheckResult


def run_cli(capsys, *argv: str) -> tuple[int, str, str]:
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_graph_list(capsys):
    code, out, _ = run_cli(capsys, "graph", "--list")
    assert code == 0
    names = out.strip().splitlines()
    assert names == sorted(names)
    assert "nerf-chain" in names
    assert len(names) == 6


def test_graph_roundtrips_through_serializer(capsys):
    code, out, _ = run_cli(capsys, "graph", "--builtin", "backprop-multicast")
    assert code == 0
    g = loads_graph(out)
    assert g.name == "backprop-multicast"
    assert set(g.nodes) == {"dact", "dgrad", "wgrad"}


def test_graph_param_override(capsys):
    code, out, _ = run_cli(capsys, "graph", "--builtin", "mlp-wide-hidden", "--param", "hidden=256")
    assert code == 0
    g = loads_graph(out)
    assert g.nodes["fc1"].output_shape[1] == 256


def test_select_and_pipeline_emit_json(capsys):
    code, out, _ = run_cli(capsys, "select", "--builtin", "mgn-mlp")
    assert code == 0
    sel = json.loads(out)
    assert sel["coverage"] == 1.0

    code, out, _ = run_cli(capsys, "pipeline", "--builtin", "mgn-mlp")
    assert code == 0
    pipes = json.loads(out)
    assert pipes and pipes[0]["stages"]


def test_balance_reports_allocation(capsys):
    code, out, _ = run_cli(capsys, "balance", "--builtin", "backprop-multicast")
    assert code == 0
    doc = json.loads(out)
    assert doc["machine"] == "a100"
    ctas = doc["pipelines"][0]["cta"]
    assert sum(ctas.values()) > 0


def test_simulate_strips_events_by_default(capsys):
    code, out, _ = run_cli(capsys, "simulate", "--builtin", "mgn-mlp", "--mode", "dataflow")
    assert code == 0
    doc = json.loads(out)
    assert doc["mode"] == "dataflow"
    assert doc["events"] == [] and doc["samples"] == []

    code, out, _ = run_cli(capsys, "simulate", "--builtin", "mgn-mlp", "--mode", "dataflow", "--events")
    assert code == 0
    assert json.loads(out)["events"]


def test_simulate_honors_machine_env(capsys, monkeypatch):
    monkeypatch.setenv("KITSUNE_MACHINE", "a100-2x-sm-l2")
    code, out, _ = run_cli(capsys, "simulate", "--builtin", "mgn-mlp", "--mode", "bsp")
    assert code == 0
    assert json.loads(out)["machine"] == "a100-2x-sm-l2"


def test_report_csv_is_deterministic(capsys):
    args = ("report", "--builtin", "mgn-mlp", "--builtin", "backprop-multicast")
    code1, out1, _ = run_cli(capsys, *args)
    code2, out2, _ = run_cli(capsys, *args)
    assert code1 == code2 == 0
    assert out1 == out2
    assert out1.splitlines()[0].startswith("graph,mode,")


def test_report_traffic_json(capsys):
    code, out, _ = run_cli(capsys, "report", "--builtin", "mgn-mlp", "--table", "traffic", "--format", "json")
    assert code == 0
    doc = json.loads(out)
    modes = {row["mode"] for row in doc["rows"]}
    assert modes == {"bsp", "vertical", "dataflow"}


def test_report_util_quadrants(capsys):
    code, out, _ = run_cli(capsys, "report", "--builtin", "mgn-mlp", "--table", "util")
    assert code == 0
    doc = json.loads(out)
    for by_mode in doc.values():
        for q in by_mode.values():
            total = q["both_low"] + q["low_sm"] + q["low_dram"] + q["neither_low"]
            assert total == pytest.approx(1.0, abs=1e-6)


def test_sweep_identity_variant(capsys):
    code, out, _ = run_cli(capsys, "sweep", "--builtin", "mgn-mlp", "--variant", "a100")
    assert code == 0
    rows = out.strip().splitlines()[1:]
    assert rows
    assert all(line.endswith("1.000000") for line in rows)


def test_check_queue_clean(capsys):
    code, out, _ = run_cli(capsys, "check-queue", "--items", "4")
    assert code == 0
    lines = out.strip().splitlines()
    assert len(lines) == 4  # depth {2,3} x consumers {1,2}
    assert all(line.endswith("ok") for line in lines)


def test_check_queue_violation_exits_2(capsys, monkeypatch):
    import kitsune.cli as cli

    def broken_matrix(**kwargs):
        return [CheckResult(ok=False, states=1, violation="overwrite before consume")]

    monkeypatch.setattr(cli, "check_matrix", broken_matrix)
    code, out, _ = run_cli(capsys, "check-queue")
    assert code == 2
    assert "VIOLATION" in out


def test_check_queue_curve(capsys):
    code, out, _ = run_cli(capsys, "check-queue", "--curve")
    assert code == 0
    lines = out.strip().splitlines()
    assert lines[0] == "payload_bytes,queue_gbps,aggregate_gbps,latency_us,spilled"
    assert len(lines) == 8
    peak = dict(zip(lines[0].split(","), lines[5].split(",")))  # 131072 row
    assert peak["payload_bytes"] == "131072"
    assert float(peak["aggregate_gbps"]) == pytest.approx(2000.0, rel=0.10)


def test_output_file(tmp_path, capsys):
    path = tmp_path / "trace.json"
    code, out, _ = run_cli(capsys, "simulate", "--builtin", "mgn-mlp", "--mode", "bsp", "--output", str(path))
    assert code == 0
    assert out == ""
    assert json.loads(path.read_text())["mode"] == "bsp"


def test_unknown_builtin_is_user_error(capsys):
    code, _, err = run_cli(capsys, "simulate", "--builtin", "nope", "--mode", "bsp")
    assert code == 1
    assert "unknown builtin" in err


def test_missing_graph_is_user_error(capsys):
    code, _, err = run_cli(capsys, "select")
    assert code == 1
    assert "--builtin" in err


def test_bad_mode_is_user_error(capsys):
    code, _, _ = run_cli(capsys, "simulate", "--builtin", "mgn-mlp", "--mode", "warp")
    assert code == 1


def test_bad_param_is_user_error(capsys):
    code, _, err = run_cli(capsys, "graph", "--builtin", "mgn-mlp", "--param", "batch=huge")
    assert code == 1
    assert "integer" in err
