"""Deterministic discrete-event simulator with FIFO links and cost ledger.

Time is exact (ints/Fractions). Events are ordered by (time, sequence
number), so identical inputs replay identically, byte for byte.

Two transport classes:

* routed: hop-by-hop along the sender's current shortest path tree, one
  event per edge traversal, FIFO per edge direction. Messages in flight
  on an edge when it dies are lost; the endpoints later compare their
  per-edge send/receive logs and the sender-side endpoint resends over a
  fresh route (duplicate delivery is suppressed by message id).
* bulk: direct delivery after an explicit cost/latency, used for fanouts
  whose delivery is guaranteed by the resend machinery anyway
  (broadcasts, belief refreshes, tree-delta notices). The full cost and
  message count still hit the ledger.
"""

from __future__ import annotations

import heapq
import json
from fractions import Fraction

from faultdir.graph import Graph, EdgeId, edge_id, dijkstra

SIZES = ("const", "logn", "nlogn")


def _q(x) -> str:
    """Exact string form of a time or cost."""
    return str(Fraction(x))


class CostLedger:
    """Message counts and traversal costs aggregated per bucket.

    Bucket names are strings like 'op:look3', 'repair:recluster:f0:c12'
    or 'setup'; report helpers aggregate by prefix.
    """

    def __init__(self):
        self.rows: dict[str, dict] = {}

    def charge(self, bucket: str, cost, size: str = "const", count: int = 1) -> None:
        assert size in SIZES, size
        row = self.rows.setdefault(bucket, {"messages": 0, "cost": 0,
                                            "const": 0, "logn": 0, "nlogn": 0})
        row["messages"] += count
        row["cost"] += cost
        row[size] += count

    def total(self, prefix: str) -> tuple[int, object]:
        msgs, cost = 0, 0
        for bucket, row in self.rows.items():
            if bucket == prefix or bucket.startswith(prefix + ":"):
                msgs += row["messages"]
                cost += row["cost"]
        return msgs, cost

    def buckets(self, prefix: str) -> list[str]:
        return sorted(b for b in self.rows
                      if b == prefix or b.startswith(prefix + ":"))

    def as_rows(self) -> list[dict]:
        out = []
        for bucket in sorted(self.rows):
            row = self.rows[bucket]
            out.append({"bucket": bucket, "messages": row["messages"],
                        "cost": _q(row["cost"]), "const": row["const"],
                        "logn": row["logn"], "nlogn": row["nlogn"]})
        return out


class Message:
    _next_id = 0

    def __init__(self, kind: str, src: int, dst: int, payload: dict,
                 size: str = "const", bucket: str = "misc"):
        self.id = Message._next_id
        Message._next_id += 1
        self.kind = kind
        self.src = src
        self.dst = dst
        self.payload = payload
        self.size = size
        self.bucket = bucket
        self.route: list[int] = []
        self.at = src
        self.blocked: set[EdgeId] = set()
        self.traveled = 0
        self.lost = False
        # a no_reroute message must not detour around a dead edge; it is
        # delivered where it stands with payload["stuck"] set instead
        self.no_reroute = False

    def __repr__(self):
        return f"<msg {self.id} {self.kind} {self.src}->{self.dst} at {self.at}>"


class Simulator:
    """Owns the clock, the event heap, links, logs and the ledger.

    Protocol layers register one handler per message kind and may also
    register named timer callbacks. The simulator knows nothing about
    directory semantics; it moves messages and keeps accounts.
    """

    def __init__(self, g: Graph):
        self.g = g
        self.now = 0
        self._seq = 0
        self._heap: list = []
        self.ledger = CostLedger()
        self.handlers: dict[str, callable] = {}
        self.timers: dict[str, callable] = {}
        # per-node shortest path trees and per-root known-dead sets are
        # installed by the runtime after preprocessing
        self.trees = {}
        self.known_dead: dict[int, set[EdgeId]] = {}
        # per-edge, per-direction transcripts for the resend protocol
        self.sent_log: dict[tuple[EdgeId, int], list[int]] = {}
        self.recv_log: dict[tuple[EdgeId, int], list[int]] = {}
        self.in_flight: dict[EdgeId, list[Message]] = {}
        self._delivered: set[tuple[int, int]] = set()
        self.events: list[dict] = []
        self.event_limit = 5_000_000
        self._processed = 0

    # -- logging -----------------------------------------------------------

    def log(self, etype: str, **fields) -> None:
        rec = {"t": _q(self.now), "seq": self._seq, "type": etype}
        rec.update(fields)
        self.events.append(rec)

    def dump_events(self) -> str:
        return "\n".join(json.dumps(e, sort_keys=True) for e in self.events) + "\n"

    # -- scheduling ----------------------------------------------------------

    def schedule(self, delay, kind: str, data) -> int:
        seq = self._seq
        self._seq += 1
        heapq.heappush(self._heap, (self.now + delay, seq, kind, data))
        return seq

    def call_later(self, delay, timer_name: str, data=None) -> None:
        assert timer_name in self.timers, timer_name
        self.schedule(delay, "timer:" + timer_name, data)

    # -- transport -----------------------------------------------------------

    def send(self, msg: Message) -> None:
        """Routed transport along the sender's current tree."""
        if msg.src == msg.dst:
            msg.at = msg.dst
            self.schedule(0, "deliver", msg)
            return
        msg.at = msg.src
        self._forward(msg)

    def send_on_path(self, msg: Message, path: list[int]) -> None:
        """Routed transport along an explicit node path (e.g. a cluster
        spanning tree path). Falls back to tree routing on breakage."""
        assert path[0] == msg.src and path[-1] == msg.dst
        if msg.src == msg.dst:
            msg.at = msg.dst
            self.schedule(0, "deliver", msg)
            return
        msg.at = msg.src
        msg.route = list(path[1:])
        self._hop(msg)

    def _route_from(self, x: int, msg: Message) -> list[int] | None:
        """Next route from x to msg.dst given x's knowledge plus the edges
        this message has already bounced off."""
        tree = self.trees.get(x)
        avoid = set(msg.blocked) | self.known_dead.get(x, set())
        if tree is not None and tree.root == x:
            path = tree.path_from_root(msg.dst)
            if all(edge_id(path[i], path[i + 1]) not in avoid
                   for i in range(len(path) - 1)):
                return path[1:]
        adj = {u: {v: w for v, w in nbrs.items() if edge_id(u, v) not in avoid}
               for u, nbrs in self.g._adj.items()}
        dist, parent = dijkstra(adj, x, targets={msg.dst})
        if msg.dst not in dist:
            return None
        path = []
        cur = msg.dst
        while cur != x:
            path.append(cur)
            cur = parent[cur]
        path.reverse()
        return path

    def _forward(self, msg: Message) -> None:
        route = self._route_from(msg.at, msg)
        if route is None:
            raise RuntimeError(f"no route for {msg} from {msg.at}")
        msg.route = route
        self._hop(msg)

    def _hop(self, msg: Message) -> None:
        nxt = msg.route[0]
        e = edge_id(msg.at, nxt)
        if not self.g.is_alive(e):
            if msg.no_reroute:
                msg.payload["stuck"] = True
                msg.dst = msg.at
                self.schedule(0, "deliver", msg)
                return
            # sender-side endpoint knows instantly; bounce and re-route
            msg.blocked.add(e)
            self._forward(msg)
            return
        direction = 0 if msg.at < nxt else 1
        self.sent_log.setdefault((e, direction), []).append(msg.id)
        self.in_flight.setdefault(e, []).append(msg)
        self.schedule(self.g.weight(e), "hop", msg)

    def bulk(self, msg: Message, cost, delay=None, count: int = 1) -> None:
        """Direct delivery with explicit cost; latency defaults to cost."""
        self.ledger.charge(msg.bucket, cost, msg.size, count=count)
        msg.traveled = cost
        self.schedule(cost if delay is None else delay, "deliver", msg)

    def charge_only(self, bucket: str, cost, size: str = "const", count: int = 1) -> None:
        self.ledger.charge(bucket, cost, size, count=count)

    # -- failure hooks ---------------------------------------------------------

    def capture_in_flight(self, e: EdgeId) -> list[Message]:
        """Mark every message currently crossing e as lost; they stay in
        the sent log and the resend exchange recovers them."""
        e = edge_id(*e)
        lost = self.in_flight.pop(e, [])
        for m in lost:
            m.lost = True
        return lost

    def resend(self, msg: Message, frm: int, dead: EdgeId, bucket: str) -> Message:
        """Re-issue a lost message from its sending side as a fresh copy.
        The original stays lost so its stale hop event is ignored."""
        clone = Message(msg.kind, msg.src, msg.dst, msg.payload,
                        size=msg.size, bucket=bucket)
        clone.blocked = set(msg.blocked)
        clone.blocked.add(edge_id(*dead))
        clone.at = frm
        self._forward(clone)
        return clone

    # -- main loop ---------------------------------------------------------------

    def run(self, horizon=None) -> None:
        while self._heap:
            if horizon is not None and self._heap[0][0] > horizon:
                break
            t, seq, kind, data = heapq.heappop(self._heap)
            self.now = t
            self._processed += 1
            if self._processed > self.event_limit:
                raise RuntimeError("event limit exceeded; likely livelock")
            if kind == "hop":
                self._process_hop(data)
            elif kind == "deliver":
                self._deliver(data)
            elif kind.startswith("timer:"):
                self.timers[kind[6:]](data)
            else:
                raise RuntimeError(f"unknown event kind {kind}")

    def _process_hop(self, msg: Message) -> None:
        if msg.lost:
            return
        nxt = msg.route.pop(0)
        e = edge_id(msg.at, nxt)
        direction = 0 if msg.at < nxt else 1
        self.recv_log.setdefault((e, direction), []).append(msg.id)
        flights = self.in_flight.get(e)
        if flights and msg in flights:
            flights.remove(msg)
        self.ledger.charge(msg.bucket, self.g.weight(e), msg.size)
        msg.traveled += self.g.weight(e)
        msg.at = nxt
        if msg.at == msg.dst:
            self._deliver(msg)
        elif msg.route:
            self._hop(msg)
        else:
            self._forward(msg)

    def _deliver(self, msg: Message) -> None:
        key = (msg.dst, msg.id)
        if key in self._delivered:
            return
        self._delivered.add(key)
        handler = self.handlers.get(msg.kind)
        if handler is None:
            raise RuntimeError(f"no handler for message kind {msg.kind}")
        handler(msg)

    def idle(self) -> bool:
        return not self._heap
