from __future__ import annotations

import json
from pathlib import Path

import pytest

from qkdn.cli import main
from qkdn.config import (MEASURED_LINKS, ConfigInvalid, dump_config, load_config,
                         median_link_parameters, reference_config, validate_config)
from qkdn.harness import REQUIREMENTS, compute_throughput_budget, requirements_trace, run_scenario
from qkdn.network import telemetry_week

ROOT = Path(__file__).resolve().parents[1]
REFERENCE = ROOT / "configs" / "reference_16node.json"


def test_throughput_budget_examples():
    assert compute_throughput_budget(17.34) == pytest.approx(179.5, abs=0.05)
    assert compute_throughput_budget(1.0) == pytest.approx(3112.0)
    assert compute_throughput_budget(34.68) == pytest.approx(89.7, abs=0.05)
    with pytest.raises(ValueError):
        compute_throughput_budget(0.0)


def test_requirements_all_resolve():
    report = requirements_trace(ROOT)
    assert set(report) == set(REQUIREMENTS) and len(report) == 15
    assert all(v["status"] in ("MAPPED", "EXCLUDED") for v in report.values())
    assert all(not v.get("missing") for v in report.values())
    assert [k for k, v in report.items() if v["status"] == "EXCLUDED"] == ["S_NOP"]


def test_requirements_flags_missing_tests(tmp_path):
    (tmp_path / "tests").mkdir()
    report = requirements_trace(tmp_path)
    assert {v["status"] for v in report.values()} == {"UNMAPPED_REQUIREMENT", "EXCLUDED"}


def test_shipped_config_is_the_reference():
    assert REFERENCE.read_text() == dump_config(reference_config())
    assert load_config(REFERENCE) == validate_config(reference_config())


def test_unmeasured_links_take_the_median():
    assert median_link_parameters() == (2.1, 0.25, 2.05, 0.5)
    cfg = reference_config()
    link = next(l for l in cfg["links"] if l["id"] == "1-2")
    assert link["assumed"] and link["skr_bps"] == 2100.0
    assert all(not l["assumed"] for l in cfg["links"] if l["id"] in MEASURED_LINKS)


def bad_file(tmp_path, mutate) -> tuple[Path, str]:
    cfg = reference_config()
    mutate(cfg)
    path = tmp_path / "bad.json"
    text = dump_config(cfg)
    path.write_text(text)
    return path, text


def line_no(text: str, needle: str) -> int:
    return next(i for i, line in enumerate(text.splitlines(), 1) if needle in line)


def test_schema_error_points_at_line(tmp_path):
    path, text = bad_file(tmp_path, lambda c: c["links"][3].update(qber_pct=61.5))
    with pytest.raises(ConfigInvalid) as err:
        load_config(path)
    (diag,) = err.value.diagnostics
    assert diag.startswith(f"line {line_no(text, '61.5')}: links/3/qber_pct")


def test_semantic_errors_point_at_line(tmp_path):
    path, text = bad_file(tmp_path, lambda c: c["links"][5].update(b="n99"))
    with pytest.raises(ConfigInvalid) as err:
        load_config(path)
    assert err.value.diagnostics == [f"line {line_no(text, 'n99')}: links/5/b: unknown node n99"]


def test_disconnected_graph_rejected():
    cfg = reference_config()
    cfg["links"] = [l for l in cfg["links"] if l["id"] not in ("9-10", "7-16")]
    with pytest.raises(ConfigInvalid) as err:
        validate_config(cfg)
    assert "not connected" in err.value.diagnostics[0]


def test_malformed_json_reports_line(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text('{\n  "name": "x",\n  "seed": ,\n}')
    with pytest.raises(ConfigInvalid) as err:
        load_config(path)
    assert err.value.diagnostics[0].startswith("line 3:")


def test_cli_validate(tmp_path, capsys):
    assert main(["validate", "--config", str(REFERENCE)]) == 0
    assert "ok (17 nodes, 16 links)" in capsys.readouterr().out
    path, _ = bad_file(tmp_path, lambda c: c["saes"][0].update(node="n5"))
    assert main(["validate", "--config", str(path)]) == 1
    assert "must attach to a USER node" in capsys.readouterr().out


def test_cli_run_writes_outputs_and_trace_checks(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", "--scenario", "POLICY_AUDIT", "--exchanges", "5", "--out", str(out)]) == 0
    assert "POLICY_AUDIT: 5/5 exchanges succeeded" in capsys.readouterr().out
    names = {p.name for p in out.iterdir()}
    assert names == {"metrics.json", "metrics.csv", "alarms.csv", "telemetry.csv", "trace.jsonl",
                     "topology.json"}
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["audits"]["probes_allowed"] == [] and metrics["alarms"] == {"POLICY_DENY": 7}
    assert (out / "metrics.csv").read_text().count("\n") == 6
    assert main(["trace-check", str(out)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines == ["ordering: ok", "topology_hiding: ok", "flow_direction: ok",
                     "akms_controller: ok", "demarcation: ok"]


def test_cli_trace_check_flags_violations(tmp_path, capsys):
    out = tmp_path / "run"
    run_scenario(reference_config(), "BASELINE", exchanges=2, out_dir=out)
    trace = out / "trace.jsonl"
    rec = json.loads(trace.read_text().splitlines()[-1])
    rec.update({"seq": rec["seq"] + 1, "from": "CKMS:n3", "to": "SAE:alice", "kind": "ERROR",
                "payload": {"reason": "via CKMS:n3"}})
    trace.write_text(trace.read_text() + json.dumps(rec) + "\n")
    assert main(["trace-check", str(out)]) == 1
    assert "topology_hiding: 1 violations" in capsys.readouterr().out


def test_cli_requirements(capsys):
    assert main(["requirements", "--root", str(ROOT)]) == 0
    assert json.loads(capsys.readouterr().out)["S_NOP"]["status"] == "EXCLUDED"


def test_cli_reports_invalid_config(tmp_path, capsys):
    path, _ = bad_file(tmp_path, lambda c: c.update(seed=-1))
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
    assert "seed" in capsys.readouterr().err


def test_small_run_is_deterministic(tmp_path):
    for d in ("a", "b"):
        run_scenario(reference_config(), "FAULT_REROUTE", exchanges=9, out_dir=tmp_path / d)
    for name in ("trace.jsonl", "metrics.json", "metrics.csv", "alarms.csv", "telemetry.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    run_scenario(reference_config(), "FAULT_REROUTE", exchanges=9, seed=8, out_dir=tmp_path / "c")
    assert (tmp_path / "c" / "trace.jsonl").read_bytes() != (tmp_path / "a" / "trace.jsonl").read_bytes()


def test_fault_reroute_phases():
    rep = run_scenario(reference_config(), "FAULT_REROUTE", exchanges=9).report
    intact, bypass, isolated = rep.phases
    assert intact["succeeded"] == bypass["succeeded"] == 3
    assert all("n16" in p for p in bypass["paths"])
    assert isolated["failures"] == {"NO_PATH": 3}


def test_starvation_scenario_alarms_once_per_failure():
    rep = run_scenario(reference_config(), "STARVATION").report
    failed = rep.exchanges - rep.succeeded
    assert failed > 0 and rep.failures == {"KEY_STARVATION": failed}
    assert rep.alarms["KEY_STARVATION"] == failed
    assert rep.audits["one_time_use"]["reused"] == []


def test_telemetry_day_matches_link_parameters():
    stats = telemetry_week(reference_config(), days=1.0)
    assert set(stats) == {l["id"] for l in reference_config()["links"]}
    skr_mean, _, qber_mean, _ = MEASURED_LINKS["7-8"]
    assert stats["7-8"]["skr_mean"] == pytest.approx(skr_mean, rel=0.05)
    assert stats["7-8"]["qber_mean"] == pytest.approx(qber_mean, rel=0.05)
