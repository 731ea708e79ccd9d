"""Weighted undirected graphs with exact arithmetic and repairable shortest path trees.

Weights are ints or fractions.Fraction, never floats, so every distance
comparison made by the simulator is exact and runs are reproducible.
Deleted edges are tombstoned rather than forgotten: message logs and
repair bookkeeping still need to refer to them.
"""

from __future__ import annotations

import heapq
import random
from fractions import Fraction

EdgeId = tuple[int, int]


def edge_id(u: int, v: int) -> EdgeId:
    """Canonical undirected edge key (smaller endpoint first)."""
    return (u, v) if u < v else (v, u)


def parse_weight(text: str):
    """Parse an edge weight. Accepts ints, 'p/q' fractions and decimals.

    Decimals go through Fraction's exact decimal parsing, so '1.5'
    becomes 3/2 with no binary rounding.
    """
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        pass
    try:
        w = Fraction(text)
    except (ValueError, ZeroDivisionError) as exc:
        raise ValueError(f"bad weight {text!r}") from exc
    if w.denominator == 1:
        return int(w)
    return w


class Graph:
    """Undirected weighted graph with tombstoned edge deletion."""

    def __init__(self):
        self._adj: dict[int, dict[int, object]] = {}
        self._weights: dict[EdgeId, object] = {}
        self._dead: set[EdgeId] = set()
        self._version = 0
        self._sssp_cache: dict[int, tuple[dict, dict]] = {}

    # -- construction ----------------------------------------------------

    def add_node(self, u: int) -> None:
        self._adj.setdefault(u, {})

    def add_edge(self, u: int, v: int, w) -> None:
        if u == v:
            raise ValueError(f"self-loop at node {u}")
        if w < 1:
            raise ValueError(f"edge weight {w} below 1 on edge {u}-{v}")
        e = edge_id(u, v)
        if e in self._weights:
            raise ValueError(f"duplicate edge {u}-{v}")
        self.add_node(u)
        self.add_node(v)
        self._weights[e] = w
        self._adj[u][v] = w
        self._adj[v][u] = w
        self._bump()

    def _bump(self):
        self._version += 1
        self._sssp_cache.clear()

    # -- queries ---------------------------------------------------------

    @property
    def version(self) -> int:
        return self._version

    def nodes(self) -> list[int]:
        return sorted(self._adj)

    @property
    def n(self) -> int:
        return len(self._adj)

    def has_node(self, u: int) -> bool:
        return u in self._adj

    def neighbors(self, u: int) -> dict[int, object]:
        """Alive neighbors of u mapped to edge weights."""
        return self._adj[u]

    def alive_edges(self) -> list[EdgeId]:
        return sorted(e for e in self._weights if e not in self._dead)

    def all_edges(self) -> list[EdgeId]:
        return sorted(self._weights)

    def dead_edges(self) -> set[EdgeId]:
        return set(self._dead)

    def weight(self, e: EdgeId):
        """Weight of an edge, dead or alive."""
        return self._weights[edge_id(*e)]

    def is_alive(self, e: EdgeId) -> bool:
        e = edge_id(*e)
        return e in self._weights and e not in self._dead

    # -- mutation ----------------------------------------------------------

    def kill_edge(self, e: EdgeId) -> None:
        """Tombstone an edge. The weight stays queryable."""
        e = edge_id(*e)
        if e not in self._weights:
            raise KeyError(f"unknown edge {e}")
        if e in self._dead:
            raise ValueError(f"edge {e} already deleted")
        self._dead.add(e)
        u, v = e
        del self._adj[u][v]
        del self._adj[v][u]
        self._bump()

    # -- connectivity ------------------------------------------------------

    def _reach(self, start: int, skip: EdgeId | None = None) -> set[int]:
        seen = {start}
        stack = [start]
        while stack:
            x = stack.pop()
            for y in self._adj[x]:
                if skip is not None and edge_id(x, y) == skip:
                    continue
                if y not in seen:
                    seen.add(y)
                    stack.append(y)
        return seen

    def is_connected(self) -> bool:
        if not self._adj:
            return True
        start = next(iter(self._adj))
        return len(self._reach(start)) == self.n

    def would_disconnect(self, e: EdgeId) -> bool:
        """True if deleting e (currently alive) would disconnect the graph."""
        e = edge_id(*e)
        if not self.is_alive(e):
            raise ValueError(f"edge {e} not alive")
        u, v = e
        return v not in self._reach(u, skip=e)

    # -- shortest paths ----------------------------------------------------

    def sssp(self, source: int) -> tuple[dict[int, object], dict[int, int | None]]:
        """Single-source distances and parents on the alive graph, cached
        until the next mutation. Parent ties go to the smaller node id."""
        hit = self._sssp_cache.get(source)
        if hit is not None:
            return hit
        dist, parent = dijkstra(self._adj, source)
        self._sssp_cache[source] = (dist, parent)
        return dist, parent

    def distance(self, u: int, v: int):
        dist, _ = self.sssp(u)
        if v not in dist:
            raise ValueError(f"no path from {u} to {v}")
        return dist[v]

    def eccentricity(self, u: int):
        dist, _ = self.sssp(u)
        if len(dist) != self.n:
            raise ValueError("graph is disconnected")
        return max(dist.values())

    def diameter(self):
        return max(self.eccentricity(u) for u in self.nodes())

    def center(self) -> int:
        """Node with minimum eccentricity, ties to the smaller id."""
        best = None
        best_ecc = None
        for u in self.nodes():
            ecc = self.eccentricity(u)
            if best_ecc is None or ecc < best_ecc:
                best, best_ecc = u, ecc
        return best

    def neighborhood(self, u: int, r) -> dict[int, object]:
        """Nodes within distance r of u (u included), mapped to distance."""
        dist, _ = self.sssp(u)
        return {v: d for v, d in dist.items() if d <= r}


def dijkstra(adj, source, targets=None):
    """Dijkstra over an adjacency dict; returns (dist, parent).

    Deterministic: nodes settle in (distance, id) order and the parent
    of a node is the smallest-id optimal predecessor.
    """
    dist = {source: 0}
    parent: dict[int, int | None] = {source: None}
    done: set[int] = set()
    heap = [(0, source)]
    remaining = set(targets) if targets is not None else None
    while heap:
        d, u = heapq.heappop(heap)
        if u in done:
            continue
        done.add(u)
        if remaining is not None:
            remaining.discard(u)
            if not remaining:
                break
        for v, w in adj[u].items():
            nd = d + w
            if v not in dist or nd < dist[v]:
                dist[v] = nd
                parent[v] = u
                heapq.heappush(heap, (nd, v))
            elif nd == dist[v] and v not in done and u < parent[v]:
                parent[v] = u
    return dist, parent


class ShortestPathTree:
    """Shortest path tree of one root over its known-alive view of the graph.

    The tree supports incremental repair after an edge death: only the
    subtree that hangs below the dead edge is recomputed, and the repair
    reports exactly which tree edges were dropped and added so that edge
    endpoints can keep their membership indexes current.
    """

    def __init__(self, root: int, dist: dict, parent: dict):
        self.root = root
        self.dist = dist
        self.parent = parent

    @classmethod
    def build(cls, g: Graph, root: int, blocked: set[EdgeId] | None = None) -> "ShortestPathTree":
        """Fresh tree from root over alive edges minus `blocked`."""
        if blocked:
            adj = {
                u: {v: w for v, w in nbrs.items() if edge_id(u, v) not in blocked}
                for u, nbrs in g._adj.items()
            }
        else:
            adj = g._adj
        dist, parent = dijkstra(adj, root)
        if len(dist) != g.n:
            raise ValueError(f"root {root} cannot reach every node")
        return cls(root, dist, parent)

    def copy(self) -> "ShortestPathTree":
        return ShortestPathTree(self.root, dict(self.dist), dict(self.parent))

    def tree_edges(self) -> set[EdgeId]:
        return {edge_id(u, p) for u, p in self.parent.items() if p is not None}

    def contains_edge(self, e: EdgeId) -> bool:
        u, v = edge_id(*e)
        return self.parent.get(u) == v or self.parent.get(v) == u

    def child_endpoint(self, e: EdgeId) -> int:
        """The endpoint of tree edge e on the side away from the root."""
        u, v = edge_id(*e)
        if self.parent.get(u) == v:
            return u
        if self.parent.get(v) == u:
            return v
        raise ValueError(f"edge {e} not in tree")

    def children_map(self) -> dict[int, list[int]]:
        ch: dict[int, list[int]] = {u: [] for u in self.parent}
        for u, p in self.parent.items():
            if p is not None:
                ch[p].append(u)
        for lst in ch.values():
            lst.sort()
        return ch

    def subtree(self, v: int) -> set[int]:
        """All nodes at or below v."""
        ch = self.children_map()
        out = set()
        stack = [v]
        while stack:
            x = stack.pop()
            out.add(x)
            stack.extend(ch[x])
        return out

    def path_from_root(self, v: int) -> list[int]:
        path = []
        x = v
        while x is not None:
            path.append(x)
            x = self.parent[x]
        path.reverse()
        return path

    def next_hop(self, v: int) -> int:
        """First node on the tree path from the root toward v."""
        path = self.path_from_root(v)
        if len(path) < 2:
            raise ValueError(f"{v} is the root")
        return path[1]

    def repair(self, g: Graph, e: EdgeId, known_dead: set[EdgeId]) -> tuple[list[EdgeId], list[EdgeId]]:
        """Reattach the subtree cut off by dead edge e.

        `known_dead` is the edge set the tree's owner currently knows to be
        dead; the repair routes around those and nothing else, so a root
        that has not yet heard about some other failure may legitimately
        adopt that dead edge (the endpoint index flags it afterwards).

        Returns (removed_tree_edges, added_tree_edges). No-op if e is not
        a tree edge.
        """
        e = edge_id(*e)
        if not self.contains_edge(e):
            return [], []
        before = self.tree_edges()
        cut = self.child_endpoint(e)
        lost = self.subtree(cut)
        # Seed every lost node with its best attachment to the kept part.
        ndist: dict[int, object] = {}
        nparent: dict[int, int] = {}
        heap = []
        for s in sorted(lost):
            for x, w in g._adj[s].items():
                if x in lost or edge_id(s, x) in known_dead:
                    continue
                nd = self.dist[x] + w
                if s not in ndist or nd < ndist[s] or (nd == ndist[s] and x < nparent[s]):
                    ndist[s] = nd
                    nparent[s] = x
        for s, nd in ndist.items():
            heapq.heappush(heap, (nd, s))
        done: set[int] = set()
        while heap:
            d, u = heapq.heappop(heap)
            if u in done or d > ndist.get(u, d):
                continue
            done.add(u)
            for v, w in g._adj[u].items():
                if v not in lost or edge_id(u, v) in known_dead:
                    continue
                nd = d + w
                if v not in ndist or nd < ndist[v]:
                    ndist[v] = nd
                    nparent[v] = u
                    heapq.heappush(heap, (nd, v))
                elif nd == ndist[v] and v not in done and u < nparent[v]:
                    nparent[v] = u
        if len(done) != len(lost):
            raise ValueError(f"subtree below {e} cannot be reattached")
        for s in lost:
            self.dist[s] = ndist[s]
            self.parent[s] = nparent[s]
        after = self.tree_edges()
        removed = sorted(before - after)
        added = sorted(after - before)
        return removed, added


def build_spt(g: Graph, root: int) -> ShortestPathTree:
    return ShortestPathTree.build(g, root)


def affected_spts(trees: dict[int, ShortestPathTree], e: EdgeId) -> dict[int, int]:
    """Roots whose tree uses edge e, mapped to the endpoint of e whose own
    root path survives the deletion (the parent-side endpoint)."""
    e = edge_id(*e)
    out = {}
    for root in sorted(trees):
        t = trees[root]
        if t.contains_edge(e):
            child = t.child_endpoint(e)
            u, v = e
            out[root] = v if child == u else u
    return out


# -- parsing and generators ------------------------------------------------


def load_graph(text: str) -> Graph:
    """Parse an edge list: one 'u v w' triple per line, '#' comments.

    Rejects self-loops, duplicate edges, weights below 1 and disconnected
    inputs.
    """
    g = Graph()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"line {lineno}: expected 'u v w', got {raw!r}")
        try:
            u, v = int(parts[0]), int(parts[1])
        except ValueError as exc:
            raise ValueError(f"line {lineno}: bad node id in {raw!r}") from exc
        w = parse_weight(parts[2])
        try:
            g.add_edge(u, v, w)
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from exc
    if g.n == 0:
        raise ValueError("empty graph")
    if not g.is_connected():
        raise ValueError("graph is disconnected")
    return g


def dump_graph(g: Graph) -> str:
    lines = [f"{u} {v} {g.weight((u, v))}" for u, v in g.alive_edges()]
    return "\n".join(lines) + "\n"


def ring_graph(n: int, weights=None) -> Graph:
    """Cycle 0-1-...-(n-1)-0. `weights` may be a constant or a list."""
    if n < 3:
        raise ValueError("ring needs n >= 3")
    g = Graph()
    for i in range(n):
        w = 1
        if weights is not None:
            w = weights[i] if isinstance(weights, (list, tuple)) else weights
        g.add_edge(i, (i + 1) % n, w)
    return g


def grid_graph(rows: int, cols: int, weight=1) -> Graph:
    g = Graph()
    for r in range(rows):
        for c in range(cols):
            u = r * cols + c
            if c + 1 < cols:
                g.add_edge(u, u + 1, weight)
            if r + 1 < rows:
                g.add_edge(u, u + cols, weight)
    if g.n == 1:
        g.add_node(0)
    return g


def path_graph(n: int, weight=1) -> Graph:
    g = Graph()
    for i in range(n - 1):
        g.add_edge(i, i + 1, weight)
    return g


def random_graph(n: int, p: float, seed: int, wmin: int = 1, wmax: int = 4) -> Graph:
    """Connected G(n, p) with integer weights in [wmin, wmax].

    Rerolls the whole graph until connected (bounded retries).
    """
    rng = random.Random(seed)
    for _ in range(200):
        g = Graph()
        for u in range(n):
            g.add_node(u)
        for u in range(n):
            for v in range(u + 1, n):
                if rng.random() < p:
                    g.add_edge(u, v, rng.randint(wmin, wmax))
        if g.n == n and g.is_connected():
            return g
    raise ValueError(f"could not draw a connected graph with n={n}, p={p}")
