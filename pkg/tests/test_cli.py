"""Command line round trips."""

import csv
import json

from faultdir.cli import _gen_scenario, _graph_spec, main
from faultdir.scenario import validate_scenario


def test_graph_spec_parsing():
    assert _graph_spec("ring:12") == {"kind": "ring", "n": 12}
    assert _graph_spec("grid:4x5") == {"kind": "grid", "rows": 4, "cols": 5}
    assert _graph_spec("path:9") == {"kind": "path", "n": 9}
    assert _graph_spec("random:16:0.3:7") == {"kind": "random", "n": 16,
                                              "p": 0.3, "seed": 7}


def test_gen_scenarios_are_valid_and_seeded(tmp_path):
    for seed in range(6):
        sc = _gen_scenario({"kind": "random", "n": 14, "p": 0.3, "seed": 2},
                           "strong", 2, seed, ops=6, failures=2, horizon=4000)
        validate_scenario(sc)
    a = _gen_scenario({"kind": "ring", "n": 10}, "weak", 2, 5, 4, 1, 1000)
    b = _gen_scenario({"kind": "ring", "n": 10}, "weak", 2, 5, 4, 1, 1000)
    assert a == b


def test_run_then_check_round_trip(tmp_path):
    scen_path = tmp_path / "scen.json"
    out_dir = tmp_path / "art"
    rc = main(["gen", "--graph", "ring:12", "--seed", "4", "--ops", "6",
               "--failures", "1", "--out", str(scen_path)])
    assert rc == 0 and scen_path.exists()

    rc = main(["run", str(scen_path), "--out-dir", str(out_dir)])
    assert rc == 0
    record = json.loads((out_dir / "record.json").read_text())
    assert record["ops"] and all(o["phase"] == "done" for o in record["ops"])
    events = (out_dir / "events.jsonl").read_text().strip().splitlines()
    assert len(events) == record["event_count"]
    with open(out_dir / "ledger.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and {"bucket", "messages", "cost"} <= set(rows[0])

    rc = main(["check", str(out_dir / "record.json")])
    assert rc == 0
    report = json.loads((out_dir / "bound_report.json").read_text())
    assert report["ok"] is True
    assert all(line["passed"] for line in report["lines"])


def test_check_fails_on_planted_violation(tmp_path):
    scen_path = tmp_path / "scen.json"
    out_dir = tmp_path / "art"
    main(["gen", "--graph", "grid:3x4", "--seed", "1", "--ops", "4",
          "--failures", "1", "--out", str(scen_path)])
    main(["run", str(scen_path), "--out-dir", str(out_dir)])
    rec_path = out_dir / "record.json"
    record = json.loads(rec_path.read_text())
    record["publish"]["len"] = "100000"
    rec_path.write_text(json.dumps(record))
    rc = main(["check", str(rec_path), "--out", str(out_dir / "rep.json")])
    assert rc == 1
    report = json.loads((out_dir / "rep.json").read_text())
    assert not report["ok"]


def test_run_reports_findings_with_nonzero_exit(tmp_path, capsys):
    # a duplicate publish is rejected and logged as a finding
    sc = {"name": "bad", "mode": "strong", "rho": 2, "seed": 0,
          "graph": {"kind": "ring", "n": 8},
          "events": [{"t": 0, "do": "publish", "node": 1}]}
    scen_path = tmp_path / "scen.json"
    scen_path.write_text(json.dumps(sc))
    assert main(["run", str(scen_path), "--out-dir",
                 str(tmp_path / "a")]) == 0


def test_partition_stats_output(capsys):
    rc = main(["partition-stats", "--graph", "ring:10", "--mode", "strong",
               "--rho", "2", "--seed", "0"])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert out["valid"] is True
    assert out["n"] == 10
    assert out["levels"][0]["clusters"]
    sizes = {c["id"] for lvl in out["levels"] for c in lvl["clusters"]}
    assert len(sizes) == sum(len(l["clusters"]) for l in out["levels"])
