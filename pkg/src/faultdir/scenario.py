"""Scenario files, the sequential workload driver and run records.

A scenario is a plain JSON-able dict: a graph recipe, partition knobs and
an event list. The driver executes events strictly one after another and
waits for full quiescence between them (no open operations, no pending
repair work, empty event heap), so every measurement is taken in a
settled system. A failure can instead be strapped to an operation with
``fail_during``, which injects it a fixed delay after the operation
starts; such operations overlap active repair and are flagged transient
in the run record.
"""

from __future__ import annotations

import json
import random
from fractions import Fraction

from faultdir.failure import FailureEngine
from faultdir.graph import (Graph, build_spt, edge_id, grid_graph, path_graph,
                            random_graph, ring_graph)
from faultdir.partition import (build_hierarchy, preprocess_leaders,
                                verify_partition)
from faultdir.protocol import Directory
from faultdir.sim import Simulator


def q(x):
    """Exact values as strings so records survive JSON round trips."""
    if isinstance(x, Fraction):
        return str(x) if x.denominator != 1 else str(x.numerator)
    return x


def unq(s):
    if isinstance(s, str):
        return Fraction(s) if "/" in s else int(s)
    return s


def _qify(x):
    """Deep copy with every Fraction rendered exactly."""
    if isinstance(x, Fraction):
        return q(x)
    if isinstance(x, dict):
        return {k: _qify(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_qify(v) for v in x]
    return x


def build_graph(spec: dict) -> Graph:
    kind = spec["kind"]
    if kind == "ring":
        return ring_graph(spec["n"], spec.get("weights", 1))
    if kind == "grid":
        return grid_graph(spec["rows"], spec["cols"], spec.get("weight", 1))
    if kind == "path":
        return path_graph(spec["n"], spec.get("weight", 1))
    if kind == "random":
        return random_graph(spec["n"], spec["p"], spec["seed"],
                            spec.get("wmin", 1), spec.get("wmax", 4))
    if kind == "edges":
        g = Graph()
        for u, v, w in spec["edges"]:
            g.add_edge(u, v, w)
        return g
    raise ValueError(f"unknown graph kind {kind!r}")


OP_EVENTS = ("publish", "lookup", "move")


def validate_scenario(sc: dict) -> None:
    g = build_graph(sc["graph"])
    if sc.get("mode", "strong") not in ("strong", "weak"):
        raise ValueError("mode must be 'strong' or 'weak'")
    if int(sc.get("rho", 2)) < 2:
        raise ValueError("rho must be at least 2")
    nodes = set(g.nodes())
    published = False
    for k, ev in enumerate(sc.get("events", [])):
        do = ev.get("do")
        if do in OP_EVENTS:
            if ev["node"] not in nodes:
                raise ValueError(f"event {k}: node {ev['node']} not in graph")
            if do == "publish":
                published = True
            elif not published:
                raise ValueError(f"event {k}: {do} before any publish")
            edge = ev.get("fail_during")
        elif do == "fail":
            edge = ev["edge"]
        else:
            raise ValueError(f"event {k}: unknown event {do!r}")
        if do == "fail" or (do in OP_EVENTS and edge is not None):
            e = edge_id(*edge)
            if not g.is_alive(e):
                raise ValueError(f"event {k}: edge {edge} missing or already down")
            if g.would_disconnect(e):
                raise ValueError(f"event {k}: killing {edge} disconnects the graph")
            g.kill_edge(e)


class Runtime:
    """Builds the whole stack for one scenario and drives its events."""

    def __init__(self, sc: dict):
        validate_scenario(sc)
        self.sc = sc
        self.g = build_graph(sc["graph"])
        self.hier = build_hierarchy(self.g, rho=int(sc.get("rho", 2)),
                                    mode=sc.get("mode", "strong"),
                                    seed=int(sc.get("seed", 0)))
        self.hier.measure()
        self.pre_check = verify_partition(self.hier)
        if not self.pre_check["ok"]:
            raise RuntimeError(f"partition invalid at build: {self.pre_check}")
        self.sim = Simulator(self.g)
        for x in sorted(self.g.nodes()):
            self.sim.trees[x] = build_spt(self.g, x)
            self.sim.known_dead[x] = set()
        self.ldir, exchanges = preprocess_leaders(self.hier)
        for _u, _x, cost in exchanges:
            self.sim.charge_only("setup", cost, size="logn")
        self.dir = Directory(self.sim, self.hier, self.ldir)
        self.engine = FailureEngine(self.dir)
        self.engine.setup_index()
        self.sim.timers["inject_fail"] = self._inject_fail
        self.issued = []
        # issue-time geometry the bound checks need: distance from the
        # previous request source, and the path right after publish
        self._last_source = None
        self._source_dist = {}
        self._publish_snap = None

    def _inject_fail(self, data):
        self.engine.fail_edge(tuple(data))

    def _settle(self, context: str) -> None:
        self.sim.run()
        stuck = [op.id for op in self.dir.ops.values() if op.open()]
        if stuck:
            raise RuntimeError(f"{context}: operations never finished: {stuck}")
        if not self.dir.quiescent():
            raise RuntimeError(f"{context}: system not quiescent after drain")

    def run(self) -> dict:
        for k, ev in enumerate(self.sc.get("events", [])):
            do = ev["do"]
            if do == "fail":
                self.engine.fail_edge(tuple(ev["edge"]))
            else:
                starter = {"publish": self.dir.start_publish,
                           "lookup": self.dir.start_lookup,
                           "move": self.dir.start_move}[do]
                if do in ("publish", "move"):
                    # distance between consecutive request sources on the
                    # graph alive right now; the competitive baseline
                    if self._last_source is not None:
                        self._source_dist[f"{do}?"] = self.g.distance(
                            self._last_source, ev["node"])
                op = starter(ev["node"])
                self.issued.append(op)
                if do in ("publish", "move") and op.phase != "rejected":
                    d = self._source_dist.pop(f"{do}?", None)
                    if d is not None:
                        self._source_dist[op.id] = d
                    self._last_source = ev["node"]
                else:
                    self._source_dist.pop(f"{do}?", None)
                if ev.get("fail_during") is not None:
                    delay = unq(ev.get("fail_delay", 0))
                    self.sim.call_later(delay, "inject_fail",
                                        ev["fail_during"])
            self._settle(f"event {k} ({do})")
            if do == "publish" and self._publish_snap is None \
                    and self.issued[-1].phase == "done":
                self._publish_snap = {
                    "len": q(self._chain_length()),
                    "top": self.hier.top,
                    "f": self.dir.failure_count}
        return self.record()

    def _chain_length(self):
        """Sum of alive-graph distances along the current directory path."""
        chain = self.dir.path_view()
        total = 0
        for (_, a), (_, b) in zip(chain, chain[1:]):
            total += self.g.distance(a, b)
        return total

    def record(self) -> dict:
        led = self.sim.ledger
        ops = []
        for op in self.issued:
            msgs, cost = led.total(f"op:{op.id}")
            _, reply_cost = led.total(f"op:{op.id}:reply")
            transient = (op.f_at_complete is not None
                         and op.f_at_complete > op.f_at_issue)
            src_d = self._source_dist.get(op.id)
            ops.append({
                "id": op.id, "kind": op.kind, "issuer": op.issuer,
                "phase": op.phase,
                "t_issue": q(op.t_issue), "t_complete": q(op.t_complete),
                "f_at_issue": op.f_at_issue, "f_at_complete": op.f_at_complete,
                "transient": transient,
                "stale_walk": (op.walk_min_built_f is not None
                               and op.walk_min_built_f < op.f_at_issue),
                "discovery_level": op.discovery_level,
                "via_shortcut": op.via_shortcut,
                "owner_at_issue": op.owner_at_issue,
                "dist_at_issue": q(op.dist_at_issue),
                "dist_prev_source": q(src_d) if src_d is not None else None,
                "value": op.value, "version": op.version,
                "read_t": q(op.read_t),
                "flags": list(op.flags),
                "messages": msgs, "cost": q(cost), "reply_cost": q(reply_cost),
            })
        failures = []
        for rec in self.engine.failures:
            frec = dict(rec)
            frec["stats"] = _qify(rec["stats"])
            frec["costs"] = {}
            for cat in ("recluster", "spt_update", "path_update",
                        "preprocess", "resend"):
                msgs, cost = led.total(f"repair:{cat}:f{rec['fid']}")
                frec["costs"][cat] = {"messages": msgs, "cost": q(cost)}
            failures.append(frec)
        setup_msgs, setup_cost = led.total("setup")
        intervals = []
        for iv in self.dir.token_intervals:
            intervals.append({"version": iv["version"], "holder": iv["holder"],
                              "t_from": q(iv["t_from"]),
                              "t_to": q(iv.get("t_to"))})
        post = verify_partition(self.hier, post_failure=True) \
            if self.engine.failures else self.pre_check
        d_alive = 0
        for t in self.sim.trees.values():
            d_alive = max(d_alive, max(t.dist.values()))
        return {
            "scenario": self.sc,
            "mode": self.hier.mode, "rho": self.hier.rho,
            "n": len(self.g.nodes()),
            "diameter": q(self.hier.diameter0),
            "d_alive": q(d_alive),
            "top": self.hier.top, "base_top": self.hier.base_top,
            "sigma": q(self.hier.sigma), "overlap": self.hier.overlap,
            "radii": {str(i): q(self.hier.radius(i))
                      for i in range(-1, self.hier.top + 1)},
            "delta": self.hier.shortcut_offset(),
            "c_prime": q(self.hier.shortcut_factor()),
            "setup": {"messages": setup_msgs, "cost": q(setup_cost)},
            "publish": self._publish_snap,
            "path": self._path_geometry(),
            "ops": ops,
            "failures": failures,
            "findings": list(self.dir.findings),
            "token_intervals": intervals,
            "owner_trace": [[q(t), x] for t, x in self.dir.owner_trace],
            "partition_pre": self.pre_check,
            "partition_post": post,
            "ledger": led.as_rows(),
            "event_count": len(self.sim.events),
        }

    def _path_geometry(self) -> list[dict]:
        """Final directory path, bottom-up, with the build epoch of every
        node state and the distance to the next node measured on the graph
        as it stood when the later of the two links was written."""
        if self.dir.token_value is None:
            return []
        chain = list(reversed(self.dir.path_view()))
        epochs = {}
        out = []
        for idx, (level, node) in enumerate(chain):
            st = self.dir.nodes[node].levels[level]
            built_f = st.built_f if st.built_f is not None else 0
            row = {"level": level, "node": node, "built_f": built_f,
                   "built_t": q(st.built_t) if st.built_t is not None else None,
                   "dist_next": None, "dist_next_now": None, "pair_f": None}
            if idx + 1 < len(chain):
                up_level, up_node = chain[idx + 1]
                up_st = self.dir.nodes[up_node].levels[up_level]
                up_f = up_st.built_f if up_st.built_f is not None else 0
                pair_f = max(built_f, up_f)
                g_then = epochs.get(pair_f)
                if g_then is None:
                    g_then = build_graph(self.sc["graph"])
                    for frec in self.engine.failures[:pair_f]:
                        g_then.kill_edge(tuple(frec["edge"]))
                    epochs[pair_f] = g_then
                row["pair_f"] = pair_f
                row["dist_next"] = q(g_then.distance(node, up_node))
                row["dist_next_now"] = q(self.g.distance(node, up_node))
            out.append(row)
        return out


def run_scenario(sc: dict) -> dict:
    return Runtime(sc).run()


# -- canned scenario generators --------------------------------------------------


def gen_scenario(name: str, seed: int = 0) -> dict:
    """Deterministic example workloads used by the test suite and the CLI."""
    rng = random.Random((hash(name) & 0xFFFF) * 100003 + seed)
    if name == "ring-basic":
        n = 12
        nodes = list(range(n))
        events = [{"do": "publish", "node": 3}]
        for _ in range(6):
            events.append({"do": "lookup", "node": rng.choice(nodes)})
        cur = 3
        for _ in range(4):
            nxt = rng.choice([x for x in nodes if x != cur])
            events.append({"do": "move", "node": nxt})
            cur = nxt
        return {"name": name, "graph": {"kind": "ring", "n": n},
                "mode": "strong", "rho": 2, "seed": seed, "events": events}
    if name == "grid-failures":
        rows, cols = 4, 4
        nodes = list(range(rows * cols))
        events = [{"do": "publish", "node": 5}]
        events += [{"do": "lookup", "node": rng.choice(nodes)} for _ in range(3)]
        events.append({"do": "fail", "edge": [5, 6]})
        events += [{"do": "lookup", "node": rng.choice(nodes)} for _ in range(3)]
        events.append({"do": "fail", "edge": [9, 13]})
        cur = None
        for _ in range(3):
            cands = [x for x in nodes if x != cur]
            cur = rng.choice(cands)
            events.append({"do": "move", "node": cur})
            events.append({"do": "lookup", "node": rng.choice(nodes)})
        return {"name": name, "graph": {"kind": "grid", "rows": rows,
                                        "cols": cols},
                "mode": "strong", "rho": 2, "seed": seed, "events": events}
    if name == "move-sequence":
        n = 16
        nodes = list(range(n))
        cur = 0
        events = [{"do": "publish", "node": cur}]
        for _ in range(10):
            nxt = rng.choice([x for x in nodes if x != cur])
            events.append({"do": "move", "node": nxt})
            cur = nxt
        return {"name": name, "graph": {"kind": "ring", "n": n,
                                        "weights": [1 + (i % 3) for i in range(n)]},
                "mode": "strong", "rho": 2, "seed": seed, "events": events}
    if name == "random-weak":
        g_seed = seed + 11
        n = 14
        events = [{"do": "publish", "node": 2}]
        nodes = list(range(n))
        for _ in range(4):
            events.append({"do": "lookup", "node": rng.choice(nodes)})
        cur = 2
        for _ in range(3):
            nxt = rng.choice([x for x in nodes if x != cur])
            events.append({"do": "move", "node": nxt})
            cur = nxt
        return {"name": name, "graph": {"kind": "random", "n": n, "p": 0.25,
                                        "seed": g_seed},
                "mode": "weak", "rho": 2, "seed": seed, "events": events}
    if name == "transient-lookup":
        rows, cols = 4, 4
        events = [{"do": "publish", "node": 15},
                  {"do": "lookup", "node": 0, "fail_during": [10, 11],
                   "fail_delay": 1},
                  {"do": "lookup", "node": 0},
                  {"do": "move", "node": 6, "fail_during": [1, 2],
                   "fail_delay": 1},
                  {"do": "lookup", "node": 12}]
        return {"name": name, "graph": {"kind": "grid", "rows": rows,
                                        "cols": cols},
                "mode": "strong", "rho": 2, "seed": seed, "events": events}
    raise ValueError(f"unknown scenario name {name!r}")


def scenario_names() -> list[str]:
    return ["ring-basic", "grid-failures", "move-sequence", "random-weak",
            "transient-lookup"]


def load_scenario(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)


def dump_record(rec: dict, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(rec, fh, indent=1, sort_keys=True)
        fh.write("\n")
