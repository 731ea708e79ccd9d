"""Sparse partition hierarchies over weighted graphs.

Each level i carries a partition of the nodes into clusters whose diameter
is bounded by sigma * r_i, such that any r_i-neighborhood meets at most
`overlap` clusters. Level -1 is the singleton partition, the top level is
the whole node set led by a global root. Clustering uses random
exponential shifts; the achieved sigma and overlap are measured after the
build and those measured values parameterize every downstream bound check.

Clusters keep explicit spanning trees rooted at their leaders. In strong
mode trees live inside the induced subgraph; in weak mode they are pruned
shortest path trees over the whole graph and may pass through non-member
nodes.
"""

from __future__ import annotations

import math
import random
from fractions import Fraction

from faultdir.graph import Graph, EdgeId, edge_id, dijkstra


class Cluster:
    """One cluster: members, leader and a spanning tree rooted at the leader.

    tree_parent maps every tree node to its parent (leader maps to None).
    In weak mode the tree may contain non-member pass-through nodes; every
    tree node lies on the tree path of at least one member.
    """

    def __init__(self, cid: int, level: int, members: set[int], leader: int,
                 tree_parent: dict[int, int | None], origin: str = "build",
                 parent_id: int | None = None):
        self.id = cid
        self.level = level
        self.members = set(members)
        self.leader = leader
        self.tree_parent = dict(tree_parent)
        self.origin = origin
        self.parent_id = parent_id
        self.child_ids: list[int] = []

    def tree_nodes(self) -> set[int]:
        return set(self.tree_parent)

    def tree_edges(self) -> set[EdgeId]:
        return {edge_id(u, p) for u, p in self.tree_parent.items() if p is not None}

    def contains_tree_edge(self, e: EdgeId) -> bool:
        u, v = edge_id(*e)
        return self.tree_parent.get(u) == v or self.tree_parent.get(v) == u

    def tree_path_to_leader(self, u: int) -> list[int]:
        path = [u]
        while self.tree_parent[path[-1]] is not None:
            path.append(self.tree_parent[path[-1]])
        return path

    def tree_path_cost(self, u: int, g: Graph):
        path = self.tree_path_to_leader(u)
        return sum(g.weight((path[k], path[k + 1])) for k in range(len(path) - 1))

    def tree_child_endpoint(self, e: EdgeId) -> int:
        u, v = edge_id(*e)
        if self.tree_parent.get(u) == v:
            return u
        if self.tree_parent.get(v) == u:
            return v
        raise ValueError(f"edge {e} not in cluster tree")

    def subtree_nodes(self, top: int) -> set[int]:
        """Tree nodes at or below `top`."""
        ch: dict[int, list[int]] = {x: [] for x in self.tree_parent}
        for x, p in self.tree_parent.items():
            if p is not None:
                ch[p].append(x)
        out: set[int] = set()
        stack = [top]
        while stack:
            x = stack.pop()
            out.add(x)
            stack.extend(ch[x])
        return out

    def diameter(self, g: Graph, mode: str):
        """Largest member-to-member distance; induced distances in strong
        mode, whole-graph distances in weak mode. 0 for singletons."""
        if len(self.members) <= 1:
            return 0
        if mode == "strong":
            best = 0
            for u in self.members:
                dist = _induced_sssp(g, u, self.members)
                for m in self.members:
                    if m not in dist:
                        raise ValueError(f"cluster {self.id} induced subgraph disconnected")
                    if dist[m] > best:
                        best = dist[m]
            return best
        best = 0
        for u in self.members:
            dist, _ = g.sssp(u)
            for m in self.members:
                if dist[m] > best:
                    best = dist[m]
        return best

    def induced_connected(self, g: Graph) -> bool:
        if len(self.members) <= 1:
            return True
        start = next(iter(self.members))
        dist = _induced_sssp(g, start, self.members)
        return all(m in dist for m in self.members)


def _induced_sssp(g: Graph, source: int, allowed: set[int]) -> dict:
    adj = {u: {v: w for v, w in g.neighbors(u).items() if v in allowed} for u in allowed}
    dist, _ = dijkstra(adj, source)
    return dist


def _rational_exp_shift(rng: random.Random, rate: float, cap: float) -> Fraction:
    # Exponential draw, redrawn while >= cap so cluster radii stay below r
    # deterministically, converted to an exact rational so every later
    # comparison is reproducible across platforms.
    while True:
        u = rng.random()
        if u <= 0.0:
            continue
        val = -math.log(u) / rate
        if val < cap:
            return Fraction(val).limit_denominator(1 << 30)


def build_partition(g: Graph, r, mode: str, rng: random.Random,
                    max_retries: int = 16) -> list[tuple[int, set[int]]]:
    """Partition the alive graph into clusters for radius parameter r.

    Every node draws an exponential shift with rate ln(n)/r and joins the
    center with the smallest shifted distance. Weak mode measures shifted
    distances through the whole graph; strong mode grows clusters along
    edges so each induced subgraph stays connected. Returns a list of
    (center, member_set) pairs; leaders are chosen separately.
    """
    if mode not in ("weak", "strong"):
        raise ValueError(f"unknown mode {mode!r}")
    nodes = g.nodes()
    n = len(nodes)
    if n == 1:
        return [(nodes[0], {nodes[0]})]
    if r >= g.diameter():
        # one cluster already satisfies the radius; skip the lottery
        return [(g.center(), set(nodes))]
    rate = math.log(n) / float(r)
    for _ in range(max_retries):
        shifts = {u: _rational_exp_shift(rng, rate, float(r)) for u in nodes}
        top = max(shifts.values())
        starts = {u: top - shifts[u] for u in nodes}
        if mode == "weak":
            assign = {}
            for v in nodes:
                best = None
                for c in nodes:
                    dist, _ = g.sssp(c)
                    key = starts[c] + dist[v]
                    if best is None or key < best[0] or (key == best[0] and c < best[1]):
                        best = (key, c)
                assign[v] = best[1]
        else:
            assign = _grow_strong(g, nodes, starts)
        groups: dict[int, set[int]] = {}
        for v, c in assign.items():
            groups.setdefault(c, set()).add(v)
        clusters = sorted(groups.items())
        if mode == "strong":
            ok = all(_strong_connected(g, members) for _, members in clusters)
            if not ok:
                continue
        return clusters
    raise ValueError(f"could not build a connected strong partition for r={r}")


def _grow_strong(g: Graph, nodes, starts) -> dict[int, int]:
    # Multi-source Dijkstra where each wave only expands through nodes it
    # already owns, so clusters are connected by construction.
    import heapq

    assign: dict[int, int] = {}
    heap = [(starts[c], c, c) for c in nodes]
    heapq.heapify(heap)
    while heap:
        p, c, x = heapq.heappop(heap)
        if x in assign:
            continue
        assign[x] = c
        for y, w in g.neighbors(x).items():
            if y not in assign:
                heapq.heappush(heap, (p + w, c, y))
    return assign


def _strong_connected(g: Graph, members: set[int]) -> bool:
    start = next(iter(members))
    seen = {start}
    stack = [start]
    while stack:
        x = stack.pop()
        for y in g.neighbors(x):
            if y in members and y not in seen:
                seen.add(y)
                stack.append(y)
    return seen == members


def choose_leader(g: Graph, members: set[int], mode: str) -> int:
    """Cluster center: member with minimum eccentricity, ties to smaller id."""
    if len(members) == 1:
        return next(iter(members))
    best = None
    for u in sorted(members):
        if mode == "strong":
            dist = _induced_sssp(g, u, members)
        else:
            dist, _ = g.sssp(u)
        ecc = max(dist[m] for m in members)
        if best is None or ecc < best[0]:
            best = (ecc, u)
    return best[1]


def cluster_tree(g: Graph, leader: int, members: set[int], mode: str) -> dict[int, int | None]:
    """Spanning tree reaching all members, rooted at the leader.

    Strong mode: shortest path tree inside the induced subgraph. Weak
    mode: shortest path tree over the whole graph pruned to the union of
    member root paths (may keep non-member pass-through nodes).
    """
    if mode == "strong":
        adj = {u: {v: w for v, w in g.neighbors(u).items() if v in members} for u in members}
        dist, parent = dijkstra(adj, leader)
        if len(dist) != len(members):
            raise ValueError("induced subgraph disconnected")
        return {u: parent[u] for u in members}
    dist, parent = g.sssp(leader)
    keep: set[int] = set()
    for m in members:
        x = m
        while x not in keep:
            keep.add(x)
            if parent[x] is None:
                break
            x = parent[x]
    return {u: (parent[u] if u != leader else None) for u in keep}


class Hierarchy:
    """The level stack of partitions plus the measured quality parameters."""

    def __init__(self, g: Graph, mode: str, rho: int, seed: int):
        self.g = g
        self.mode = mode
        self.rho = rho
        self.seed = seed
        self.levels: dict[int, dict[int, Cluster]] = {}
        self.assign: dict[tuple[int, int], int] = {}
        self._next_cid = 0
        self.base_top = 0
        self.top = 0
        self.diameter0 = None
        self.sigma = None
        self.overlap = None

    # -- structure accessors ---------------------------------------------

    def new_cid(self) -> int:
        cid = self._next_cid
        self._next_cid += 1
        return cid

    def add_cluster(self, cluster: Cluster) -> None:
        self.levels.setdefault(cluster.level, {})[cluster.id] = cluster
        for m in cluster.members:
            self.assign[(cluster.level, m)] = cluster.id

    def cluster(self, cid_level: int, cid: int) -> Cluster:
        return self.levels[cid_level][cid]

    def cluster_of(self, level: int, node: int) -> Cluster:
        return self.levels[level][self.assign[(level, node)]]

    def clusters_at(self, level: int) -> list[Cluster]:
        return [self.levels[level][cid] for cid in sorted(self.levels[level])]

    def all_levels(self) -> list[int]:
        return sorted(self.levels)

    def radius(self, i: int):
        """Search radius of level i: min(D, rho^i) for the built levels,
        rho^i for levels added by a layer extension, 0 at level -1."""
        if i <= -1:
            return 0
        if i <= self.base_top:
            return min(self.diameter0, self.rho ** i)
        return self.rho ** i

    def leader(self, level: int, node: int) -> int:
        return self.cluster_of(level, node).leader

    @property
    def root(self) -> int:
        return self.clusters_at(self.top)[0].leader

    def clusters_intersecting(self, v: int, i: int) -> list[Cluster]:
        """Ground-truth clusters at level i meeting N(v, r_i) on the alive
        graph (the oracle the leader directory is measured against)."""
        hood = self.g.neighborhood(v, self.radius(i))
        out = []
        for c in self.clusters_at(i):
            if any(m in hood for m in c.members):
                out.append(c)
        return out

    def descendants(self, level: int, cid: int) -> list[int]:
        """cid plus every cluster split off from it, recursively."""
        out = [cid]
        stack = list(self.levels[level][cid].child_ids)
        while stack:
            x = stack.pop()
            out.append(x)
            stack.extend(self.levels[level][x].child_ids)
        return sorted(out)

    # -- measured parameters ----------------------------------------------

    def measure(self) -> None:
        """Record achieved sigma and overlap over the built levels."""
        sigma = Fraction(1)
        overlap = 1
        for i in self.all_levels():
            r = self.radius(i)
            if r == 0:
                continue
            for c in self.clusters_at(i):
                d = c.diameter(self.g, self.mode)
                if d > sigma * r:
                    sigma = Fraction(d, 1) / r if not isinstance(d, Fraction) else d / r
            for u in self.g.nodes():
                k = len(self.clusters_intersecting(u, i))
                overlap = max(overlap, k)
        self.sigma = sigma
        self.overlap = overlap

    # -- derived constants -------------------------------------------------

    def shortcut_factor(self):
        """Smallest power of rho large enough that a shortcut registered
        `shortcut_offset` levels up is always inside the searcher's
        neighborhood, both before and after failures."""
        s, p = self.sigma, self.rho
        need1 = 2 + Fraction(2 * (s * p + p + s), (p - 1) * p)
        need2 = (1 + Fraction(2 * s * (p + 1) + p, p - 1)) / s
        need = max(need1, need2)
        c = 1
        while c < need:
            c *= p
        return c

    def shortcut_offset(self) -> int:
        target = self.shortcut_factor() * self.sigma
        k = 0
        power = 1
        while power < target:
            power *= self.rho
            k += 1
        return k

    def shortcut_level(self, i: int) -> int:
        return min(i + self.shortcut_offset(), self.top)


def build_hierarchy(g: Graph, rho: int = 2, mode: str = "strong", seed: int = 0) -> Hierarchy:
    """Build the full level stack: singletons at -1, exponential-shift
    partitions at 0..h-1, the whole node set at the top."""
    if rho < 2:
        raise ValueError("rho must be at least 2")
    if g.n < 2:
        raise ValueError("need at least two nodes")
    if not g.is_connected():
        raise ValueError("graph is disconnected")
    hier = Hierarchy(g, mode, rho, seed)
    D = g.diameter()
    hier.diameter0 = D
    h = 0
    power = 1
    while power < D:
        power *= rho
        h += 1
    hier.base_top = h
    hier.top = h

    for u in g.nodes():
        hier.add_cluster(Cluster(hier.new_cid(), -1, {u}, u, {u: None}))
    rng = random.Random(seed)
    for i in range(h):
        r = hier.radius(i)
        for _center, members in build_partition(g, r, mode, rng):
            leader = choose_leader(g, members, mode)
            tree = cluster_tree(g, leader, members, mode)
            hier.add_cluster(Cluster(hier.new_cid(), i, members, leader, tree))
    root = g.center()
    root_tree = {u: p for u, p in g.sssp(root)[1].items()}
    hier.add_cluster(Cluster(hier.new_cid(), h, set(g.nodes()), root, root_tree))
    hier.measure()
    return hier


def verify_partition(hier: Hierarchy, sigma=None, post_failure: bool = False) -> dict:
    """Check the whole stack against the partition property.

    Uses the hierarchy's measured sigma/overlap unless an explicit sigma
    is given. After failures the diameter allowance doubles and the top
    level is exempt (its radius argument no longer tracks the grown
    diameter). Returns a report dict with per-level stats and an 'ok' flag.
    """
    g = hier.g
    sigma = sigma if sigma is not None else hier.sigma
    allow = 2 * sigma if post_failure else sigma
    report = {"levels": [], "ok": True, "problems": []}

    def problem(msg):
        report["ok"] = False
        report["problems"].append(msg)

    nodes = set(g.nodes())
    for i in hier.all_levels():
        r = hier.radius(i)
        clusters = hier.clusters_at(i)
        seen: set[int] = set()
        max_diam = 0
        for c in clusters:
            if c.members & seen:
                problem(f"level {i}: overlapping members in cluster {c.id}")
            seen |= c.members
            if c.leader not in c.members:
                problem(f"level {i}: leader {c.leader} outside cluster {c.id}")
            d = c.diameter(g, hier.mode)
            max_diam = max(max_diam, d)
            skip_diam = post_failure and i == hier.top
            if r > 0 and d > allow * r and not skip_diam:
                problem(f"level {i}: cluster {c.id} diameter {d} > {allow * r}")
            if hier.mode == "strong" and not c.induced_connected(g):
                problem(f"level {i}: cluster {c.id} induced subgraph disconnected")
            _check_tree(hier, c, problem)
        if seen != nodes:
            problem(f"level {i}: clusters do not cover all nodes")
        max_k = 0
        for u in g.nodes():
            k = len(hier.clusters_intersecting(u, i))
            max_k = max(max_k, k)
        limit = hier.overlap if not post_failure else None
        if limit is not None and max_k > limit:
            problem(f"level {i}: neighborhood meets {max_k} clusters > {limit}")
        report["levels"].append({
            "level": i, "r": str(r), "clusters": len(clusters),
            "max_diameter": str(max_diam), "max_overlap": max_k,
        })
    tops = hier.clusters_at(hier.top)
    if len(tops) != 1 or tops[0].members != nodes:
        problem("top level is not the whole node set")
    return report


def _check_tree(hier: Hierarchy, c: Cluster, problem) -> None:
    g = hier.g
    if c.tree_parent.get(c.leader, "missing") is not None:
        problem(f"cluster {c.id}: leader is not the tree root")
        return
    for u, p in c.tree_parent.items():
        if p is None:
            continue
        if p not in c.tree_parent:
            problem(f"cluster {c.id}: dangling tree parent {p}")
            return
        if not g.is_alive((u, p)):
            problem(f"cluster {c.id}: tree edge {edge_id(u, p)} is dead")
    # reachability and member coverage
    covered: set[int] = set()
    for m in c.members:
        if m not in c.tree_parent:
            problem(f"cluster {c.id}: member {m} not on tree")
            return
        x = m
        hops = 0
        while x is not None:
            covered.add(x)
            x = c.tree_parent[x]
            hops += 1
            if hops > len(c.tree_parent) + 1:
                problem(f"cluster {c.id}: tree has a cycle")
                return
    extra = set(c.tree_parent) - covered
    if extra:
        problem(f"cluster {c.id}: tree nodes {sorted(extra)} serve no member")
    if hier.mode == "strong" and not set(c.tree_parent) <= c.members:
        problem(f"cluster {c.id}: non-member tree node in strong mode")


class LeaderDirectory:
    """Per-node beliefs about cluster leadership in each level neighborhood.

    believed[u][x][i] is who u thinks leads x's level-i cluster. Beliefs
    start exact (preprocessing) and are refreshed by broadcast fanouts
    after reclustering, so they can be stale in flight.
    """

    def __init__(self):
        self.believed: dict[int, dict[int, dict[int, int]]] = {}

    def set_belief(self, u: int, x: int, level: int, leader: int) -> None:
        self.believed.setdefault(u, {}).setdefault(x, {})[level] = leader

    def believed_leader(self, u: int, x: int, level: int) -> int | None:
        return self.believed.get(u, {}).get(x, {}).get(level)

    def neighborhood_clusters(self, hier: Hierarchy, u: int, level: int,
                              dist=None) -> dict[int, list[int]]:
        """Believed leaders of clusters meeting N(u, r_level), mapped to the
        witness nodes supporting each belief. Distances come from `dist`
        (the caller's current tree) or the alive graph."""
        r = hier.radius(level)
        if dist is None:
            hood = hier.g.neighborhood(u, r)
        else:
            hood = {v: d for v, d in dist.items() if d <= r}
        out: dict[int, list[int]] = {}
        for x in sorted(hood):
            led = self.believed_leader(u, x, level)
            if led is not None:
                out.setdefault(led, []).append(x)
        return out


def preprocess_leaders(hier: Hierarchy) -> tuple[LeaderDirectory, list[tuple[int, int, int]]]:
    """Seed exact beliefs: u learns, for every level i, the leader of every
    node within r_i. Returns the directory plus the (u, x, cost) exchange
    list so the runtime can charge the setup ledger."""
    ldir = LeaderDirectory()
    exchanges = []
    g = hier.g
    for u in g.nodes():
        dist, _ = g.sssp(u)
        for i in range(0, hier.top + 1):
            r = hier.radius(i)
            for x, d in sorted(dist.items()):
                if d > r:
                    continue
                ldir.set_belief(u, x, i, hier.leader(i, x))
                if x != u:
                    exchanges.append((u, x, d))
    return ldir, exchanges
