import json
from pathlib import Path

import pytest

from frontscan.cli import main

HERE = Path(__file__).parent


def test_ingest_golden(tmp_path):
    out = tmp_path / "norm.jsonl"
    assert main(["ingest", "-i", str(HERE / "fixtures" / "cnames_raw.jsonl"), "-o", str(out)]) == 0
    assert out.read_text() == (HERE / "golden" / "cnames_normalized.jsonl").read_text()


def test_ingest_empty(tmp_path):
    src = tmp_path / "empty.jsonl"
    src.write_text("")
    out = tmp_path / "out.jsonl"
    assert main(["ingest", "-i", str(src), "-o", str(out)]) == 0
    assert out.read_text() == ""


def test_ingest_bad_path():
    assert main(["ingest", "-i", "/no/such/file.jsonl"]) == 2


def test_ingest_garbage_is_runtime_error(tmp_path):
    src = tmp_path / "junk.jsonl"
    src.write_text("junk\njunk\n")
    assert main(["ingest", "-i", str(src)]) == 1


def test_usage_errors():
    assert main([]) == 2
    assert main(["scan", "--sets", "x", "--parallelism", "0"]) == 2


def test_staged_commands_match_pipeline(tmp_path):
    """ingest -> build-sets -> scan -> classify -> report reproduces the pipeline's artifacts."""
    from frontscan.simulator.scenario import Simulation, builtin_scenario

    with Simulation(builtin_scenario("mixed"), tmp_path / "state") as sim:
        raw = tmp_path / "raw.jsonl"
        raw.write_text("".join(line + "\n" for line in sim.cname_lines()))
        amap = tmp_path / "amap.json"
        amap.write_text(json.dumps({ip: f"{h}:{p}" for ip, (h, p) in sim.address_map.items()}))
        knobs = ["--seed", "3", "--retry-delay", "0", "--address-map", str(amap)]
        assert main(["ingest", "-i", str(raw), "-o", str(tmp_path / "obs.jsonl")]) == 0
        assert main(["build-sets", "-i", str(tmp_path / "obs.jsonl"), "-o", str(tmp_path / "sets.jsonl")]) == 0
        assert main(["scan", "--sets", str(tmp_path / "sets.jsonl"), "-o", str(tmp_path / "out.jsonl")] + knobs) == 0
        assert main(["classify", "-i", str(tmp_path / "out.jsonl"), "-o", str(tmp_path / "v.jsonl")]) == 0
        assert main(["report", "-i", str(tmp_path / "v.jsonl"), "-o", str(tmp_path / "r.md")]) == 0
        assert main(["pipeline", "--scenario", "mixed", "--out-dir", str(tmp_path / "p"), "--seed", "3",
                     "--retry-delay", "0", "--state-dir", str(tmp_path / "state")]) == 0
    assert (tmp_path / "v.jsonl").read_text() == (tmp_path / "p" / "verdicts.jsonl").read_text()
    assert (tmp_path / "r.md").read_text() == (tmp_path / "p" / "report.md").read_text()


def test_config_file_supplies_defaults(tmp_path, capsys):
    conf = tmp_path / "frontscan.toml"
    conf.write_text('seed = 11\nretry_delay = 0\n[pipeline]\nscenario = "permissive"\nformat = "csv"\n'
                    f'out_dir = "{tmp_path / "out"}"\n')
    assert main(["--config", str(conf), "pipeline"]) == 0
    assert (tmp_path / "out" / "report.csv").exists()
    # flags override the file
    assert main(["--config", str(conf), "pipeline", "--format", "json"]) == 0
    assert json.loads((tmp_path / "out" / "report.json").read_text())["groups"][0]["fronting_band"] == "RED"


def test_bad_config(tmp_path):
    conf = tmp_path / "bad.toml"
    conf.write_text("seed = [")
    assert main(["--config", str(conf), "pipeline", "--scenario", "strict", "--out-dir", str(tmp_path)]) == 2


def test_pipeline_refuses_unlisted_targets(tmp_path):
    raw = tmp_path / "raw.jsonl"
    raw.write_text('{"alias": "a.example", "cname": "x.cdn.example", "ip": "203.0.113.10"}\n'
                   '{"alias": "b.example", "cname": "x.cdn.example", "ip": "203.0.113.11"}\n')
    assert main(["pipeline", "--input", str(raw), "--out-dir", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o" / "outcomes.jsonl").exists()


def test_malformed_scenario_exit_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"edges": 5}')
    assert main(["pipeline", "--scenario", str(bad), "--out-dir", str(tmp_path)]) == 2
    assert main(["demo", "--scenario", str(bad)]) == 2


@pytest.mark.parametrize("scenario,status,log_host", [("permissive", 200, "d0victim000000.sim.test"),
                                                      ("strict", 421, None)])
def test_demo_command(tmp_path, scenario, status, log_host):
    out = tmp_path / "t.json"
    assert main(["demo", "--scenario", scenario, "-o", str(out)]) == 0
    tr = json.loads(out.read_text())
    assert tr["status"] == status and tr["attacker_log_host"] == log_host
    for key in ("sni", "cert_subject", "host_before", "host_after", "ua_before", "ua_after",
                "attacker_log_host", "response_len"):
        assert key in tr


def test_simulate_writes_address_map(tmp_path):
    amap, cn = tmp_path / "amap.json", tmp_path / "cnames.jsonl"
    assert main(["simulate", "--scenario", "mixed", "--duration", "0", "--address-map-out", str(amap),
                 "--cnames-out", str(cn), "--state-dir", str(tmp_path / "s")]) == 0
    assert set(json.loads(amap.read_text())) == {"198.51.100.10", "198.51.100.20"}
    assert len(cn.read_text().splitlines()) == 8


def test_report_with_popularity(tmp_path):
    assert main(["pipeline", "--scenario", "permissive", "--out-dir", str(tmp_path / "p"), "--retry-delay", "0"]) == 0
    verdicts = tmp_path / "p" / "verdicts.jsonl"
    pop = tmp_path / "top.csv"
    pop.write_text("1,tenant00.sim.test\n2,tenant01.sim.test\n3,unmapped.example\n4,other.example\n")
    est = tmp_path / "est.json"
    assert main(["report", "-i", str(verdicts), "--popularity", str(pop), "--cnames",
                 str(tmp_path / "p" / "observations.jsonl"), "--estimate-output", str(est), "-o", "-"]) == 0
    doc = json.loads(est.read_text())
    assert (doc["tracked"], doc["frontable_tracked_pct"], doc["frontable_total_pct"]) == (2, 100.0, 50.0)
