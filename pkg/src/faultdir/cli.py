"""Command line front end.

Subcommands:
    run             simulate a scenario file, write record/events/ledger
    check           evaluate the bound report for a saved record
    gen             generate a seeded random scenario file
    partition-stats build the cluster hierarchy for a graph and dump it

`check` exits nonzero when any inequality fails, so it can gate CI.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import random
import sys

from faultdir.bounds import check_bounds
from faultdir.partition import build_hierarchy, verify_partition
from faultdir.scenario import Runtime, build_graph


def _graph_spec(text: str) -> dict:
    """Parse compact graph descriptions: ring:12, grid:4x5, path:9,
    random:16:0.3"""
    parts = text.split(":")
    kind = parts[0]
    if kind == "ring":
        return {"kind": "ring", "n": int(parts[1])}
    if kind == "path":
        return {"kind": "path", "n": int(parts[1])}
    if kind == "grid":
        rows, cols = parts[1].split("x")
        return {"kind": "grid", "rows": int(rows), "cols": int(cols)}
    if kind == "random":
        spec = {"kind": "random", "n": int(parts[1]), "p": float(parts[2])}
        if len(parts) > 3:
            spec["seed"] = int(parts[3])
        return spec
    raise argparse.ArgumentTypeError(f"bad graph spec {text!r}")


def _write_artifacts(rt: Runtime, record: dict, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "record.json"), "w") as fh:
        json.dump(record, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "events.jsonl"), "w") as fh:
        fh.write(rt.sim.dump_events())
    with open(os.path.join(out_dir, "ledger.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["bucket", "messages", "cost",
                                           "const", "logn", "nlogn"])
        w.writeheader()
        for row in rt.sim.ledger.as_rows():
            w.writerow(row)


def cmd_run(args) -> int:
    with open(args.scenario) as fh:
        sc = json.load(fh)
    rt = Runtime(sc)
    rt.run()
    record = rt.record()
    _write_artifacts(rt, record, args.out_dir)
    done = sum(1 for o in record["ops"] if o["phase"] == "done")
    print(f"{sc.get('name', args.scenario)}: {done}/{len(record['ops'])} ops "
          f"done, {len(record['failures'])} failures, "
          f"{record['event_count']} events -> {args.out_dir}")
    if record["findings"]:
        print(f"findings: {record['findings']}", file=sys.stderr)
        return 1
    return 0


def cmd_check(args) -> int:
    with open(args.record) as fh:
        record = json.load(fh)
    rep = check_bounds(record)
    out_path = args.out or os.path.join(os.path.dirname(args.record) or ".",
                                        "bound_report.json")
    with open(out_path, "w") as fh:
        json.dump(rep.as_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    for line in rep.lines:
        mark = "PASS" if line.passed else "FAIL"
        print(f"[{mark}] {line.formula}: observed {line.observed} "
              f"bound {line.bound} ({line.detail})")
    print(f"report -> {out_path}")
    return 0 if rep.ok else 1


def _gen_scenario(graph_spec: dict, mode: str, rho: int, seed: int,
                  ops: int, failures: int, horizon: int,
                  concurrent: bool = True, move_frac: float = 0.5) -> dict:
    rng = random.Random(seed)
    g = build_graph(graph_spec)
    nodes = sorted(g.nodes())
    scratch = build_graph(graph_spec)
    kills = []
    attempts = 0
    while len(kills) < failures and attempts < 300:
        attempts += 1
        e = rng.choice(sorted(scratch.alive_edges()))
        if scratch.would_disconnect(e):
            continue
        scratch.kill_edge(e)
        kills.append(e)

    events = [{"t": 0, "do": "publish", "node": rng.choice(nodes)}]
    slots = ops + len(kills)
    step = max(1, horizon // max(slots, 1))
    t = 0
    n_moves = int(round(ops * move_frac))
    kinds = ["lookup"] * (ops - n_moves) + ["move"] * n_moves
    rng.shuffle(kinds)
    pending_kills = list(kills)
    last_mover = events[0]["node"]
    for kind in kinds:
        t += rng.randint(1, 2 * step)
        node = rng.choice(nodes)
        ev = {"t": t, "do": kind, "node": node}
        if kind == "move":
            while node == last_mover and len(nodes) > 1:
                node = rng.choice(nodes)
            ev["node"] = node
            last_mover = node
        if pending_kills and rng.random() < 0.5:
            e = pending_kills.pop(0)
            if concurrent and kind == "lookup" and rng.random() < 0.5:
                ev["fail_during"] = list(e)
                ev["fail_delay"] = rng.randint(0, 3)
            else:
                events.append({"t": t, "do": "fail", "edge": list(e)})
                t += rng.randint(1, step)
                ev["t"] = t
        events.append(ev)
    for e in pending_kills:
        t += rng.randint(1, step)
        events.append({"t": t, "do": "fail", "edge": list(e)})
    events.sort(key=lambda ev: ev["t"])
    return {"name": f"gen-{graph_spec['kind']}-s{seed}", "mode": mode,
            "rho": rho, "seed": seed, "graph": graph_spec, "events": events}


def cmd_gen(args) -> int:
    sc = _gen_scenario(args.graph, args.mode, args.rho, args.seed,
                       args.ops, args.failures, args.horizon)
    out = args.out or os.path.join(args.out_dir, f"{sc['name']}.json")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    with open(out, "w") as fh:
        json.dump(sc, fh, indent=1)
        fh.write("\n")
    print(f"{len(sc['events'])} events -> {out}")
    return 0


def cmd_partition_stats(args) -> int:
    g = build_graph(args.graph)
    hier = build_hierarchy(g, rho=args.rho, mode=args.mode, seed=args.seed)
    hier.measure()
    chk = verify_partition(hier)
    out = {
        "n": len(g.nodes()), "mode": hier.mode, "rho": hier.rho,
        "diameter": str(hier.diameter0), "top": hier.top,
        "sigma": str(hier.sigma), "overlap": hier.overlap,
        "radii": {str(i): str(hier.radius(i))
                  for i in range(-1, hier.top + 1)},
        "shortcut_offset": hier.shortcut_offset(),
        "valid": chk["ok"],
        "levels": [
            {"level": lvl,
             "clusters": [{"id": c.id, "leader": c.leader,
                           "size": len(c.members)}
                          for c in hier.clusters_at(lvl)]}
            for lvl in hier.all_levels() if lvl >= 0
        ],
    }
    print(json.dumps(out, indent=1, sort_keys=True))
    return 0 if chk["ok"] else 1


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="faultdir",
                                 description="directory protocol simulator")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p_run = sub.add_parser("run", help="simulate a scenario file")
    p_run.add_argument("scenario")
    p_run.add_argument("--out-dir", default="out")
    p_run.set_defaults(fn=cmd_run)

    p_chk = sub.add_parser("check", help="evaluate bounds for a record")
    p_chk.add_argument("record")
    p_chk.add_argument("--out", default=None)
    p_chk.set_defaults(fn=cmd_check)

    p_gen = sub.add_parser("gen", help="generate a seeded scenario")
    p_gen.add_argument("--graph", type=_graph_spec, default="ring:12")
    p_gen.add_argument("--mode", choices=("strong", "weak"), default="strong")
    p_gen.add_argument("--rho", type=int, default=2)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--ops", type=int, default=8)
    p_gen.add_argument("--failures", type=int, default=1)
    p_gen.add_argument("--horizon", type=int, default=5000)
    p_gen.add_argument("--out", default=None)
    p_gen.add_argument("--out-dir", default="out")
    p_gen.set_defaults(fn=cmd_gen)

    p_ps = sub.add_parser("partition-stats", help="dump the hierarchy")
    p_ps.add_argument("--graph", type=_graph_spec, default="ring:12")
    p_ps.add_argument("--mode", choices=("strong", "weak"), default="strong")
    p_ps.add_argument("--rho", type=int, default=2)
    p_ps.add_argument("--seed", type=int, default=0)
    p_ps.set_defaults(fn=cmd_partition_stats)

    args = ap.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
