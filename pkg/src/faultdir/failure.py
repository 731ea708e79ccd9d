"""Edge failure handling: tree repair, cluster splits and layer extension.

When an edge dies its endpoints notice instantly and patch their own
shortest path trees; every other tree owner is told by a routed notice
from the surviving side, repairs on arrival, and pushes tree-delta
notices to the endpoints of every edge that entered or left its tree.
An endpoint that sees a dead edge being adopted answers with another
notice, so all trees converge to true shortest path trees at quiescence
even though every owner works from its own partial knowledge.

Clusters whose spanning tree lost an edge split: the detached part
becomes a new cluster led by the member closest to the cut. The old
leader decides whether the directory path must jump to the new leader
(a five step locked pointer update keeps concurrent walkers safe) and
the new cluster is announced to its members, who refresh the beliefs of
everyone within their search radius. Split notices travel along the
cluster tree itself and park at a second cut until the region learns
its new leader, so nested failures resolve in causal order.

At the top the root instead checks whether the repair stretched some
node beyond the reach of the current level stack; if the detached part
is far enough away, new levels are added on top (a layer extension)
rather than splitting the root cluster.
"""

from __future__ import annotations

from fractions import Fraction

from faultdir.graph import edge_id
from faultdir.partition import Cluster
from faultdir.sim import Message


class Txn:
    """One five-step path update: lock neighbors, install the replacement,
    repoint, collect clears, erase the old node."""

    def __init__(self, tid, spec, up, down, added_by):
        self.id = tid
        self.spec = spec
        self.up = up
        self.down = down
        self.added_by = added_by
        self.state = "locking"
        self.needed: set[int] = set()
        self.got: set[int] = set()
        self.clear_needed: set[int] = set()
        self.cleared: set[int] = set()


class FailureEngine:
    def __init__(self, directory):
        self.dir = directory
        self.sim = directory.sim
        self.hier = directory.hier
        self.g = directory.sim.g
        # which node trees use each edge, as known at the endpoints
        self.edge_roots: dict[tuple, set[int]] = {}
        self.parked: dict[int, list[tuple[int, dict]]] = {}
        self.verdict_wait: dict[int, list[dict]] = {}
        self.verdict_pending: set[int] = set()
        self.detach_log: dict[int, list[dict]] = {}
        self.retired: dict[int, Cluster] = {}
        self.failures: list[dict] = []
        self.txns: dict[str, Txn] = {}
        self._txn_seq = 0
        directory.engine = self
        for kind in ("spt_notify", "spt_delta", "cluster_notify", "leader_xfer",
                     "split_verdict", "ext_verdict", "bcast", "refresh",
                     "txn_lock", "txn_grant", "txn_install", "txn_repoint",
                     "txn_clear", "lock_release"):
            self.sim.handlers[kind] = getattr(self, "_on_" + kind)
        self.sim.timers["resend_exchange"] = self._resend_exchange

    def setup_index(self) -> None:
        for root in sorted(self.sim.trees):
            for e in self.sim.trees[root].tree_edges():
                self.edge_roots.setdefault(e, set()).add(root)

    def quiet(self) -> bool:
        if self.verdict_pending:
            return False
        if any(self.parked.values()) or any(self.verdict_wait.values()):
            return False
        if self.txns:
            return False
        return not any(ns.pending_init for ns in self.dir.nodes.values())

    # -- per-failure message shape accounting -------------------------------------
    # Counts and worst distances per repair category, kept out of the cost
    # ledger so the shape checks see message counts rather than hop counts.

    def _stat_recluster(self, fid, cid, level, kind, dist, n=1):
        if fid >= len(self.failures):
            return
        rows = self.failures[fid]["stats"]["recluster"]
        row = rows.setdefault(str(cid), {"level": level, "msgs": 0, "max_dist": 0,
                                         "xfer_msgs": 0, "xfer_dist": 0,
                                         "bcast_msgs": 0, "bcast_max_dist": 0,
                                         "extension": False})
        if kind == "xfer":
            row["xfer_msgs"] += n
            row["xfer_dist"] = max(row["xfer_dist"], dist)
        elif kind == "bcast":
            row["bcast_msgs"] += n
            row["bcast_max_dist"] = max(row["bcast_max_dist"], dist)
        else:
            row["msgs"] += n
            row["max_dist"] = max(row["max_dist"], dist)

    def _stat_path(self, fid, dist):
        if fid >= len(self.failures):
            return
        row = self.failures[fid]["stats"]["path_update"]
        row["msgs"] += 1
        row["max_dist"] = max(row["max_dist"], dist)

    def _stat_preproc(self, fid, fan_r, dist):
        if fid >= len(self.failures):
            return
        pre = self.failures[fid]["stats"]["preprocess"]
        pre["msgs"] += 1
        row = pre["rows"].setdefault(str(fan_r), {"msgs": 0, "max_dist": 0})
        row["msgs"] += 1
        row["max_dist"] = max(row["max_dist"], dist)

    def stat_sc_update(self, fid, level, clamp, dist):
        if fid >= len(self.failures):
            return
        self.failures[fid]["stats"]["sc_update"].append(
            {"level": level, "clamp": clamp, "dist": dist})

    def _stat_path_msg(self, msg, fid):
        # deferred messages get handled twice; count the delivery once
        if getattr(msg, "_path_counted", False):
            return
        msg._path_counted = True
        self._stat_path(fid, msg.traveled)

    # -- failure entry point ----------------------------------------------------

    def fail_edge(self, e) -> dict:
        e = edge_id(*e)
        fid = len(self.failures)
        self.g.kill_edge(e)
        if not self.g.is_connected():
            raise RuntimeError(f"failure of {e} disconnects the graph")
        self.dir.failure_count += 1
        rec = {"fid": fid, "edge": list(e), "t": str(self.sim.now),
               "top": self.hier.top,
               "splits": [], "extension": None, "ext_check": None, "lost": 0,
               "stats": {"recluster": {}, "path_update": {"msgs": 0, "max_dist": 0},
                         "preprocess": {"msgs": 0, "rows": {}},
                         "sc_update": []}}
        self.failures.append(rec)
        self.sim.log("failure", fid=fid, edge=list(e))
        lost = self.sim.capture_in_flight(e)
        rec["lost"] = len(lost)
        a, b = e
        for x in (a, b):
            self.sim.known_dead.setdefault(x, set()).add(e)
        # split notices travel along each broken cluster tree, sent by the
        # surviving-side endpoint, and never detour around further cuts
        for level in range(0, self.hier.top):
            for c in self.hier.clusters_at(level):
                if not c.contains_tree_edge(e):
                    continue
                child = c.tree_child_endpoint(e)
                surv = a if child == b else b
                payload = {"cluster": c.id, "level": level, "edge": list(e),
                           "fid": fid}
                msg = Message("cluster_notify", surv, c.leader, payload,
                              size="logn",
                              bucket=f"repair:recluster:f{fid}:c{c.id}")
                msg.no_reroute = True
                self.sim.send_on_path(msg, c.tree_path_to_leader(surv))
        # the endpoints patch their own trees at zero message cost
        for x in (a, b):
            t = self.sim.trees[x]
            if t.contains_edge(e):
                if x == self.hier.root:
                    self._root_repair(e, fid)
                else:
                    removed, added = t.repair(self.g, e, self.sim.known_dead[x])
                    self._send_deltas(x, removed, added, fid)
                    self.dir.reevaluate(x)
        # remote tree owners are notified by the surviving endpoint
        for w in sorted(self.edge_roots.get(e, set()) - {a, b}):
            t = self.sim.trees[w]
            if t.contains_edge(e):
                surv = a if t.child_endpoint(e) == b else b
            else:
                surv = a
            self._route_msg("spt_notify", surv, w, {"edge": list(e), "fid": fid},
                            "logn", f"repair:spt_update:f{fid}")
        # log reconciliation across the surviving network recovers messages
        # that died on the edge
        dist_a, _ = self.g.sssp(a)
        d_alive = dist_a[b]
        rec["d_alive"] = str(d_alive)
        had_traffic = bool(lost) or any(
            key[0] == e for key in self.sim.sent_log)
        if had_traffic:
            self.sim.call_later(d_alive, "resend_exchange",
                                {"edge": e, "fid": fid, "lost": lost,
                                 "d_alive": d_alive})
        return rec

    def _route_msg(self, kind, src, dst, payload, size, bucket):
        self.sim.send(Message(kind, src, dst, payload, size=size, bucket=bucket))

    def _resend_exchange(self, data):
        e = data["edge"]
        fid = data["fid"]
        bucket = f"repair:resend:f{fid}"
        self.sim.charge_only(bucket, 2 * data["d_alive"], size="logn", count=2)
        for m in sorted(data["lost"], key=lambda m: m.id):
            self.sim.resend(m, frm=m.at, dead=e, bucket=bucket)

    # -- shortest path tree convergence ----------------------------------------

    def _send_deltas(self, owner, removed, added, fid):
        t = self.sim.trees[owner]
        entries = [("remove", ed) for ed in sorted(removed)]
        entries += [("add", ed) for ed in sorted(added)]
        for op, ed in entries:
            for z in sorted(set(ed)):
                payload = {"root": owner, "edge": list(ed), "op": op, "fid": fid}
                if z == owner:
                    self._apply_delta(z, payload)
                else:
                    self.sim.bulk(Message("spt_delta", owner, z, payload,
                                          size="logn",
                                          bucket=f"repair:spt_update:f{fid}"),
                                  cost=t.dist[z])

    def _apply_delta(self, z, payload):
        ed = edge_id(*payload["edge"])
        root = payload["root"]
        if payload["op"] == "remove":
            self.edge_roots.get(ed, set()).discard(root)
            return
        self.edge_roots.setdefault(ed, set()).add(root)
        # z is an endpoint of ed; if that edge is actually dead, the owner
        # adopted it blind and needs to hear about the failure
        if not self.g.is_alive(ed):
            self._route_msg("spt_notify", z, root,
                            {"edge": list(ed), "fid": payload["fid"]},
                            "logn", f"repair:spt_update:f{payload['fid']}")

    def _on_spt_delta(self, msg):
        self._apply_delta(msg.dst, msg.payload)

    def _on_spt_notify(self, msg):
        w = msg.dst
        e = edge_id(*msg.payload["edge"])
        fid = msg.payload["fid"]
        self.sim.known_dead.setdefault(w, set()).add(e)
        t = self.sim.trees[w]
        if not t.contains_edge(e):
            return
        if w == self.hier.root:
            self._root_repair(e, fid)
        else:
            removed, added = t.repair(self.g, e, self.sim.known_dead[w])
            self._send_deltas(w, removed, added, fid)
            self.dir.reevaluate(w)

    # -- cluster splits ----------------------------------------------------------

    def _on_cluster_notify(self, msg):
        p = msg.payload
        self._stat_recluster(p["fid"], p["cluster"], p["level"], "notify",
                             msg.traveled)
        if p.pop("stuck", None):
            # parked below a second cut; resumes once this region learns
            # its post-split leader
            self.parked.setdefault(p["level"], []).append((msg.dst, p))
            self.sim.log("notify_parked", node=msg.dst, level=p["level"],
                         edge=p["edge"])
            return
        self._process_notify(msg.dst, p)

    def _process_notify(self, y, p):
        level = p["level"]
        e = edge_id(*p["edge"])
        fid = p["fid"]
        c = self.hier.levels.get(level, {}).get(p["cluster"])
        if c is None:
            self.dir.finding("notify_unknown_cluster", level=level,
                             cluster=p["cluster"])
            return
        if c.leader != y:
            self._route_msg("cluster_notify", y, c.leader, p, "logn",
                            f"repair:recluster:f{fid}:c{c.id}")
            return
        if c.id in self.verdict_pending:
            self.verdict_wait.setdefault(c.id, []).append(p)
            return
        if c.contains_tree_edge(e):
            self._apply_split(c, e, fid)
            return
        for entry in self.detach_log.get(c.id, []):
            if e[0] in entry["nodes"] and e[1] in entry["nodes"]:
                if entry["child"] is None:
                    self.dir.finding("notify_obsolete", level=level,
                                     edge=list(e))
                    return
                child = self.hier.levels[level][entry["child"]]
                p2 = dict(p)
                p2["cluster"] = child.id
                self._route_msg("cluster_notify", y, child.leader, p2, "logn",
                                f"repair:recluster:f{fid}:c{child.id}")
                return
        self.dir.finding("notify_no_target", level=level, edge=list(e),
                         cluster=c.id)

    def _wake_parked(self, level):
        waiting = self.parked.pop(level, [])
        for y, p in waiting:
            e = edge_id(*p["edge"])
            target = None
            for c in self.hier.clusters_at(level):
                if c.contains_tree_edge(e):
                    target = c
                    break
            if target is None:
                self.dir.finding("notify_obsolete", level=level, edge=list(e))
                continue
            p2 = dict(p)
            p2["cluster"] = target.id
            if target.leader == y:
                self._process_notify(y, p2)
                continue
            bucket = f"repair:recluster:f{p['fid']}:c{target.id}"
            if y in target.tree_parent:
                msg = Message("cluster_notify", y, target.leader, p2,
                              size="logn", bucket=bucket)
                msg.no_reroute = True
                self.sim.send_on_path(msg, target.tree_path_to_leader(y))
            else:
                self._route_msg("cluster_notify", y, target.leader, p2,
                                "logn", bucket)

    def _tree_dist_from(self, parent_map, src):
        """Accumulated weights from src down/up along a parent map."""
        out = {src: 0}
        # walk up from every node until hitting a known prefix
        for x in parent_map:
            chain = []
            cur = x
            while cur not in out:
                chain.append(cur)
                cur = parent_map[cur]
                if cur is None:
                    break
            if cur is None and chain:
                continue
            base = out.get(cur, 0)
            for node in reversed(chain):
                base = base + self.g.weight((node, parent_map[node]))
                out[node] = base
        return out

    def _apply_split(self, c, e, fid):
        level = c.level
        y = c.leader
        v = c.tree_child_endpoint(e)
        det_nodes = c.subtree_nodes(v)
        # capture the detached piece of the tree before pruning the parent
        tree2 = {x: (None if x == v else c.tree_parent[x]) for x in det_nodes}
        members2 = sorted(c.members & det_nodes)
        for x in det_nodes:
            c.tree_parent.pop(x, None)
        c.members -= set(members2)
        self._prune_useless(c)
        rec = self.failures[fid]
        if not members2:
            self.detach_log.setdefault(c.id, []).append(
                {"child": None, "members": frozenset(), "nodes": frozenset(det_nodes),
                 "v": v, "fid": fid})
            rec["splits"].append({"level": level, "parent": c.id, "child": None,
                                  "size": 0})
            self.sim.log("split_prune", level=level, cluster=c.id, edge=list(e))
            self._wake_parked(level)
            return
        if v in set(members2):
            w = v
        else:
            w = self._nearest_member(tree2, v, members2)
        xfer_path = None
        if w != v:
            tree2 = self._reroot(tree2, w)
            # capture the v-to-w walk before pruning can drop v itself
            xfer_path = [v]
            while tree2[xfer_path[-1]] is not None:
                xfer_path.append(tree2[xfer_path[-1]])
        tree2 = self._prune_map(tree2, set(members2), w)
        c2 = Cluster(self.hier.new_cid(), level, set(members2), w, tree2,
                     origin=f"split:f{fid}", parent_id=c.id)
        c.child_ids.append(c2.id)
        self.hier.add_cluster(c2)
        self.verdict_pending.add(c2.id)
        self.detach_log.setdefault(c.id, []).append(
            {"child": c2.id, "members": frozenset(members2),
             "nodes": frozenset(det_nodes), "v": v, "fid": fid})
        st = self.dir.nodes[y].levels.get(level)
        on_path = st is not None and st.on_path and st.added_by in c2.members
        rec["splits"].append({"level": level, "parent": c.id, "child": c2.id,
                              "size": len(members2), "on_path": on_path})
        self.sim.log("split", level=level, cluster=c.id, child=c2.id,
                     leader=w, size=len(members2))
        if w != v:
            # the old structural knowledge moves from the cut to the leader
            msg = Message("leader_xfer", v, w,
                          {"cluster": c2.id, "level": level, "fid": fid},
                          size="nlogn",
                          bucket=f"repair:recluster:f{fid}:c{c2.id}")
            self.sim.send_on_path(msg, xfer_path)
        if on_path:
            self.queue_txn(y, {"level": level, "bcast": c2.id, "fid": fid})
        else:
            self._route_msg("split_verdict", y, v,
                            {"cluster": c2.id, "level": level, "fid": fid,
                             "final": w}, "logn",
                            f"repair:path_update:f{fid}")
        self._wake_parked(level)

    def _nearest_member(self, tree2, v, members2):
        dist = self._tree_dist_from(tree2, v)
        best = None
        for m in members2:
            key = (dist.get(m), m)
            if dist.get(m) is None:
                continue
            if best is None or key < best:
                best = key
        return best[1]

    def _reroot(self, parent_map, new_root):
        out = dict(parent_map)
        path = [new_root]
        while out[path[-1]] is not None:
            path.append(out[path[-1]])
        for i in range(len(path) - 1):
            out[path[i + 1]] = path[i]
        out[new_root] = None
        return out

    def _prune_map(self, parent_map, members, root):
        """Drop non-member leaf chains (weak mode pass-throughs with no
        member below)."""
        out = dict(parent_map)
        changed = True
        while changed:
            changed = False
            children = {x: 0 for x in out}
            for x, p in out.items():
                if p is not None:
                    children[p] += 1
            for x in sorted(out):
                if x != root and children[x] == 0 and x not in members:
                    del out[x]
                    changed = True
        return out

    def _prune_useless(self, c):
        c.tree_parent = self._prune_map(c.tree_parent, c.members, c.leader)

    # -- verdicts and announcements ------------------------------------------------

    def _on_leader_xfer(self, msg):
        # knowledge handoff; nothing to compute, but the shape report wants it
        p = msg.payload
        self._stat_recluster(p["fid"], p["cluster"], p["level"], "xfer",
                             msg.traveled)

    def _on_split_verdict(self, msg):
        p = msg.payload
        self._stat_path(p["fid"], msg.traveled)
        if msg.dst != p["final"]:
            self._route_msg("split_verdict", msg.dst, p["final"], p, "logn",
                            f"repair:path_update:f{p['fid']}")
            return
        self._verdict_arrived(p["cluster"], p["level"], p["fid"])

    def _verdict_arrived(self, cid, level, fid):
        self.verdict_pending.discard(cid)
        c = self.hier.levels[level][cid]
        self._broadcast_cluster(c, fid, [(level, c.leader)],
                                fan_r=self.hier.radius(level), extension=False)
        for p in self.verdict_wait.pop(cid, []):
            self._process_notify(c.leader, p)

    def _broadcast_cluster(self, c, fid, entries, fan_r, extension):
        lead = c.leader
        bucket = f"repair:recluster:f{fid}:c{c.id}"
        payload = {"entries": entries, "fid": fid, "extension": extension,
                   "fan_r": str(fan_r)}
        if fid < len(self.failures):
            row = self.failures[fid]["stats"]["recluster"].setdefault(
                str(c.id), {"level": c.level, "msgs": 0, "max_dist": 0,
                            "xfer_msgs": 0, "xfer_dist": 0, "bcast_msgs": 0,
                            "bcast_max_dist": 0, "extension": False})
            row["extension"] = row["extension"] or extension
        for x in sorted(c.members):
            if x == lead:
                self._apply_bcast(lead, payload, fan_r)
            else:
                cost = c.tree_path_cost(x, self.g)
                self._stat_recluster(fid, c.id, c.level, "bcast", cost)
                self.sim.bulk(Message("bcast", lead, x, payload, size="logn",
                                      bucket=bucket), cost=cost)

    def _on_bcast(self, msg):
        self._apply_bcast(msg.dst, msg.payload, None)

    def _apply_bcast(self, x, payload, fan_r_value):
        fid = payload["fid"]
        for level, leader in payload["entries"]:
            self.dir.refresh_belief(x, x, level, leader)
        if payload["extension"]:
            self.dir.re_register(x, fid)
        fan_r = fan_r_value
        if fan_r is None:
            txt = payload["fan_r"]
            fan_r = Fraction(txt) if "/" in txt else int(txt)
        tree = self.sim.trees[x]
        bucket = f"repair:preprocess:f{fid}"
        for z in sorted(tree.dist):
            if z == x or tree.dist[z] > fan_r:
                continue
            self._stat_preproc(fid, fan_r, tree.dist[z])
            self.sim.bulk(Message("refresh", x, z,
                                  {"about": x, "entries": payload["entries"],
                                   "fid": fid}, size="logn", bucket=bucket),
                          cost=tree.dist[z])

    def _on_refresh(self, msg):
        z = msg.dst
        about = msg.payload["about"]
        for level, leader in msg.payload["entries"]:
            self.dir.refresh_belief(z, about, level, leader)

    # -- stale adder chains ----------------------------------------------------------

    def maybe_fix_adder(self, y, level):
        if level < 0 or level >= self.hier.top:
            return
        ns = self.dir.nodes[y]
        st = ns.levels.get(level)
        if st is None or not st.on_path or st.added_by is None:
            return
        c = self._cluster_led_by(y, level)
        if c is None:
            return
        if st.added_by == y or st.added_by in c.members:
            return
        if ns.busy_txn is not None and ns.busy_txn.spec.get("level") == level:
            return
        for spec in ns.pending_init:
            if spec.get("level") == level:
                return
        fid = max(0, self.dir.failure_count - 1)
        self.queue_txn(y, {"level": level, "bcast": None, "fid": fid})

    def _cluster_led_by(self, y, level):
        for c in self.hier.clusters_at(level):
            if c.leader == y:
                return c
        return None

    def _resolve_adder(self, y, level, adder):
        """Follow the detach chain to the cluster now containing the adder.
        Returns (target_leader, via_endpoint) or None."""
        c = self._cluster_led_by(y, level)
        if c is None:
            return None
        hops = 0
        via = None
        while adder not in c.members:
            nxt = None
            for entry in self.detach_log.get(c.id, []):
                if adder in entry["members"]:
                    nxt = self.hier.levels[level][entry["child"]]
                    via = entry["v"]
                    break
            if nxt is None:
                return None
            c = nxt
            hops += 1
            if hops > len(self.g.nodes()):
                return None
        return c.leader, via if via is not None else c.leader

    # -- path update transactions --------------------------------------------------

    def queue_txn(self, y, spec):
        self.dir.nodes[y].pending_init.append(spec)
        self.try_init(y)

    def try_init(self, y):
        ns = self.dir.nodes[y]
        while ns.pending_init and not ns.locked():
            spec = ns.pending_init.pop(0)
            if spec.get("ext"):
                self._init_extension_txn(y, spec)
                continue
            level = spec["level"]
            st = ns.levels.get(level)
            fid = spec["fid"]
            if st is None or not st.on_path:
                self._orphan_verdict(y, spec)
                continue
            resolved = self._resolve_adder(y, level, st.added_by)
            if resolved is None or resolved[0] == y:
                self._orphan_verdict(y, spec)
                continue
            target, via = resolved
            tid = f"tx{self._txn_seq}"
            self._txn_seq += 1
            txn = Txn(tid, dict(spec, target=target, via=via), st.up, st.down,
                      st.added_by)
            txn.needed = {n for n in (st.up, st.down) if n is not None and n != y}
            txn.clear_needed = {n for n in (st.up, st.down) if n is not None}
            ns.busy_txn = txn
            self.txns[tid] = txn
            self.sim.log("txn_start", txn=tid, node=y, level=level,
                         target=target)
            if not txn.needed:
                self._locks_done(y, txn)
                continue
            for n in sorted(txn.needed):
                self._route_msg("txn_lock", y, n,
                                {"txn": tid, "level": level, "initiator": y,
                                 "fid": fid},
                                "const", f"repair:path_update:f{fid}")

    def _orphan_verdict(self, y, spec):
        """A queued update became moot, but a pending announcement gate must
        still open."""
        if spec.get("bcast") is None:
            return
        cid = spec["bcast"]
        level = spec["level"]
        fid = spec["fid"]
        c = self.hier.levels[level][cid]
        self._route_msg("split_verdict", y, c.leader,
                        {"cluster": cid, "level": level, "fid": fid,
                         "final": c.leader}, "logn",
                        f"repair:path_update:f{fid}")

    def _on_txn_lock(self, msg):
        z = msg.dst
        p = msg.payload
        self._stat_path_msg(msg, p["fid"])
        ns = self.dir.nodes[z]
        if ns.busy_txn is not None:
            # still collecting locks and the requester outranks us: back off
            if ns.busy_txn.state == "locking" and p["initiator"] < z:
                self._abort_txn(z)
            else:
                ns.queued_locks.append(msg)
                return
        ns.grants[p["txn"]] = p["level"]
        self._route_msg("txn_grant", z, p["initiator"],
                        {"txn": p["txn"], "fid": p["fid"]},
                        "const", f"repair:path_update:f{p['fid']}")

    def _abort_txn(self, z):
        ns = self.dir.nodes[z]
        txn = ns.busy_txn
        fid = txn.spec["fid"]
        for n in sorted(txn.got):
            if n != z:
                self._route_msg("lock_release", z, n,
                                {"txn": txn.id, "fid": fid}, "const",
                                f"repair:path_update:f{fid}")
        ns.pending_init.insert(0, txn.spec)
        ns.busy_txn = None
        self.txns.pop(txn.id, None)
        self.sim.log("txn_abort", txn=txn.id, node=z)

    def _on_lock_release(self, msg):
        self._stat_path_msg(msg, msg.payload.get("fid", len(self.failures)))
        ns = self.dir.nodes[msg.dst]
        ns.grants.pop(msg.payload["txn"], None)
        self._maintenance(msg.dst)

    def _on_txn_grant(self, msg):
        y = msg.dst
        self._stat_path_msg(msg, msg.payload["fid"])
        ns = self.dir.nodes[y]
        txn = ns.busy_txn
        if txn is None or txn.id != msg.payload["txn"]:
            # granted to an aborted attempt; give it back
            self._route_msg("lock_release", y, msg.src,
                            {"txn": msg.payload["txn"],
                             "fid": msg.payload["fid"]}, "const",
                            f"repair:path_update:f{msg.payload['fid']}")
            return
        txn.got.add(msg.src)
        if txn.got >= txn.needed and txn.state == "locking":
            self._locks_done(y, txn)

    def _locks_done(self, y, txn):
        txn.state = "installing"
        spec = txn.spec
        fid = spec["fid"]
        payload = {"txn": txn.id, "initiator": y, "level": spec["level"],
                   "up": txn.up, "down": txn.down, "added_by": txn.added_by,
                   "target": spec["target"], "bcast": spec.get("bcast"),
                   "fid": fid, "bands": spec.get("bands"),
                   "top_level": spec.get("top_level"),
                   "bcast_bands": spec.get("bcast_bands"),
                   "entries": spec.get("entries")}
        # route through the cut endpoint: it is the one node certain to know
        # the way into the detached region
        first = spec.get("via") or spec["target"]
        if first == y:
            first = spec["target"]
        self._route_msg("txn_install", y, first, payload, "logn",
                        f"repair:path_update:f{fid}")

    def _on_txn_install(self, msg):
        p = msg.payload
        self._stat_path_msg(msg, p["fid"])
        if msg.dst != p["target"]:
            self._route_msg("txn_install", msg.dst, p["target"], p, "logn",
                            f"repair:path_update:f{p['fid']}")
            return
        w = msg.dst
        ns = self.dir.nodes[w]
        # a grant held for this very transaction must not block its install
        locked_other = ns.busy_txn is not None or any(
            t != p["txn"] for t in ns.grants)
        if locked_other:
            ns.deferred.append(msg)
            return
        fid = p["fid"]
        bucket = f"repair:path_update:f{fid}"
        if p["bands"] is not None:
            self._apply_band_install(w, p)
        else:
            st = ns.level(p["level"])
            if st.on_path:
                self.dir.finding("install_collision", node=w, level=p["level"])
            st.on_path = True
            st.up = p["up"]
            st.down = p["down"]
            st.added_by = p["added_by"]
            st.built_t = self.sim.now
            st.built_f = self.dir.failure_count
            self.dir._register_shortcut(w, p["level"], bucket)
        for n, direction, at_level in ((p["up"], "down", p["level"] + 1),
                                       (p["down"], "up", p["level"] - 1)):
            if n is None:
                continue
            self._route_msg("txn_repoint", w, n,
                            {"txn": p["txn"], "initiator": p["initiator"],
                             "at_level": at_level, "set": direction,
                             "new_node": w, "fid": fid}, "const", bucket)
        if p.get("bcast") is not None:
            self._verdict_arrived(p["bcast"], p["level"], fid)
        if p.get("bcast_bands"):
            for cid in p["bcast_bands"]:
                self.verdict_pending.discard(cid)
            c2 = self.hier.levels[p["bands"][0]][p["bcast_bands"][0]]
            self._broadcast_cluster(c2, fid, p["entries"],
                                    fan_r=self.hier.radius(self.hier.top),
                                    extension=True)
            for cid in p["bcast_bands"]:
                for q in self.verdict_wait.pop(cid, []):
                    self._process_notify(c2.leader, q)
        self.maybe_fix_adder(w, p["level"])

    def _apply_band_install(self, w, p):
        ns = self.dir.nodes[w]
        bands = p["bands"]
        for level, leader in p["entries"]:
            self.dir.refresh_belief(w, w, level, leader)
        for j in bands:
            st = ns.level(j)
            st.on_path = True
            st.down = p["down"] if j == bands[0] else w
            st.up = w if j < bands[-1] else self.hier.root
            st.added_by = p["added_by"]
            st.built_t = self.sim.now
            st.built_f = self.dir.failure_count
        self.dir.re_register(w, p["fid"])

    def _on_txn_repoint(self, msg):
        z = msg.dst
        p = msg.payload
        self._stat_path_msg(msg, p["fid"])
        ns = self.dir.nodes[z]
        st = ns.levels.get(p["at_level"])
        if st is not None and st.on_path:
            if p["set"] == "down":
                st.down = p["new_node"]
                st.built_t = self.sim.now
                st.built_f = self.dir.failure_count
            else:
                st.up = p["new_node"]
        else:
            self.dir.finding("repoint_off_path", node=z, level=p["at_level"])
        ns.grants.pop(p["txn"], None)
        self._route_msg("txn_clear", z, p["initiator"],
                        {"txn": p["txn"], "fid": p["fid"]},
                        "const", f"repair:path_update:f{p['fid']}")
        self._maintenance(z)

    def _on_txn_clear(self, msg):
        y = msg.dst
        self._stat_path_msg(msg, msg.payload.get("fid", len(self.failures)))
        ns = self.dir.nodes[y]
        txn = ns.busy_txn
        if txn is None or txn.id != msg.payload["txn"]:
            return
        txn.cleared.add(msg.src)
        if txn.cleared < txn.clear_needed:
            return
        spec = txn.spec
        fid = spec["fid"]
        bucket = f"repair:path_update:f{fid}"
        level = spec["level"]
        st = ns.levels.get(level)
        if st is not None:
            st.on_path = False
            st.up = st.down = st.added_by = None
        ns.hints[level] = (spec["target"], level)
        self.dir._unregister_shortcut(y, level, bucket)
        if spec.get("ext"):
            st_top = ns.level(spec["top_level"])
            st_top.on_path = True
            st_top.down = spec["target"]
            st_top.up = None
            st_top.added_by = txn.added_by
            st_top.built_t = self.sim.now
            st_top.built_f = self.dir.failure_count
            self.dir.re_register(y, fid)
        ns.busy_txn = None
        self.txns.pop(txn.id, None)
        self.sim.log("txn_done", txn=txn.id, node=y, level=level)
        self._maintenance(y)

    def _maintenance(self, z):
        ns = self.dir.nodes[z]
        while ns.queued_locks and ns.busy_txn is None:
            msg = ns.queued_locks.pop(0)
            p = msg.payload
            ns.grants[p["txn"]] = p["level"]
            self._route_msg("txn_grant", z, p["initiator"],
                            {"txn": p["txn"], "fid": p["fid"]}, "const",
                            f"repair:path_update:f{p['fid']}")
        self.dir.drain_deferred(z)
        if not ns.locked():
            self.try_init(z)

    # -- the top level: repair plus possible layer extension -------------------------

    def _root_repair(self, e, fid):
        root = self.hier.root
        top_c = self.hier.clusters_at(self.hier.top)[0]
        pre_parent = dict(top_c.tree_parent)
        t = self.sim.trees[root]
        removed, added = t.repair(self.g, e, self.sim.known_dead[root])
        self._send_deltas(root, removed, added, fid)
        self.dir.reevaluate(root)
        in_mirror = pre_parent.get(e[0]) == e[1] or pre_parent.get(e[1]) == e[0]
        if not in_mirror:
            top_c.tree_parent = dict(t.parent)
            return
        v = e[0] if pre_parent.get(e[0]) == e[1] else e[1]
        det = self._subtree_of(pre_parent, v)
        far_d = max(t.dist.values())
        far = min(x for x in t.dist if t.dist[x] == far_d)
        sigma, rho, h = self.hier.sigma, self.hier.rho, self.hier.top
        threshold = sigma * rho ** (h + 1) - 4 * sigma * rho ** h
        check = {"h": h, "far_node": far, "far_dist": str(far_d),
                 "threshold": str(threshold), "crossing": far in det,
                 "trigger_edge": None, "trigger_weight": None,
                 "triggered": False, "h_new": None}
        self.failures[fid]["ext_check"] = check
        ext = None
        if far in det:
            path = t.path_from_root(far)
            crossing = []
            for k in range(len(path) - 1):
                a, b = path[k], path[k + 1]
                if (a in det) != (b in det):
                    crossing.append(edge_id(a, b))
            estar = max(crossing, key=lambda ed: (self.g.weight(ed), ed))
            check["trigger_edge"] = list(estar)
            check["trigger_weight"] = str(self.g.weight(estar))
            if self.g.weight(estar) > threshold:
                h_new = 0
                while sigma * rho ** h_new <= t.dist[far]:
                    h_new += 1
                check["h_new"] = h_new
                if h_new > h:
                    check["triggered"] = True
                    ext = {"from": h, "to": h_new, "trigger_edge": list(estar),
                           "trigger_weight": str(self.g.weight(estar)),
                           "threshold": str(threshold),
                           "far_node": far, "far_dist": str(t.dist[far])}
        if ext is None:
            top_c.tree_parent = dict(t.parent)
            return
        self.failures[fid]["extension"] = ext
        self.sim.log("extension", fid=fid, to=ext["to"])
        self._install_extension(v, det, ext["to"], fid, pre_parent)

    def _subtree_of(self, parent_map, v):
        ch = {}
        for x, p in parent_map.items():
            if p is not None:
                ch.setdefault(p, []).append(x)
        out = set()
        stack = [v]
        while stack:
            x = stack.pop()
            out.add(x)
            stack.extend(ch.get(x, []))
        return out

    def _install_extension(self, v, det, h_new, fid, pre_parent):
        root = self.hier.root
        h_old = self.hier.top
        top_old = self.hier.clusters_at(h_old)[0]
        all_nodes = set(self.g.nodes())
        V2 = set(det)
        V1 = all_nodes - V2
        v1_parent = {x: p for x, p in pre_parent.items() if x in V1}
        v2_parent = {x: (None if x == v else pre_parent[x]) for x in V2}
        band_c2_ids = []
        c1_first = None
        for j in range(h_old, h_new):
            c1 = Cluster(self.hier.new_cid(), j, set(V1), root, v1_parent,
                         origin=f"ext:f{fid}", parent_id=top_old.id)
            c2 = Cluster(self.hier.new_cid(), j, set(V2), v, v2_parent,
                         origin=f"ext:f{fid}", parent_id=top_old.id)
            if j == h_old:
                del self.hier.levels[h_old][top_old.id]
                self.retired[top_old.id] = top_old
                c1_first = c1
            self.hier.add_cluster(c1)
            self.hier.add_cluster(c2)
            band_c2_ids.append(c2.id)
            self.verdict_pending.add(c2.id)
        c_top = Cluster(self.hier.new_cid(), h_new, all_nodes, root,
                        dict(self.sim.trees[root].parent),
                        origin=f"ext:f{fid}", parent_id=top_old.id)
        self.hier.top = h_new
        self.hier.add_cluster(c_top)
        entries_v1 = [(j, root) for j in range(h_old, h_new)] + [(h_new, root)]
        entries_v2 = [(j, v) for j in range(h_old, h_new)] + [(h_new, root)]
        ns_root = self.dir.nodes[root]
        st_old = ns_root.levels.get(h_old)
        if st_old is None or not st_old.on_path:
            raise RuntimeError("root lost its top path state")
        adder = st_old.added_by
        old_down = st_old.down
        # the root is authoritative for its own part right away
        self._broadcast_cluster(c1_first, fid, entries_v1,
                                fan_r=self.hier.radius(h_new), extension=True)
        if adder in V1 or adder == root:
            for j in range(h_old, h_new):
                st = ns_root.level(j)
                st.on_path = True
                st.down = old_down if j == h_old else root
                st.up = root
                st.added_by = adder
                st.built_t = self.sim.now
                st.built_f = self.dir.failure_count
            st_top = ns_root.level(h_new)
            st_top.on_path = True
            st_top.down = root
            st_top.up = None
            st_top.added_by = adder
            st_top.built_t = self.sim.now
            st_top.built_f = self.dir.failure_count
            self.dir.re_register(root, fid)
            self._route_msg("ext_verdict", root, v,
                            {"bands": band_c2_ids,
                             "level": h_old, "entries": entries_v2,
                             "fid": fid}, "logn",
                            f"repair:path_update:f{fid}")
        else:
            self.queue_txn(root, {"ext": True, "level": h_old, "target": v,
                                  "via": None, "bcast": None, "fid": fid,
                                  "bands": list(range(h_old, h_new)),
                                  "top_level": h_new,
                                  "bcast_bands": band_c2_ids,
                                  "entries": entries_v2})

    def _init_extension_txn(self, y, spec):
        ns = self.dir.nodes[y]
        st = ns.levels.get(spec["level"])
        if st is None or not st.on_path:
            raise RuntimeError("extension lost the top path state")
        adder = st.added_by
        fid = spec["fid"]
        if adder in self.hier.levels[spec["level"]][spec["bcast_bands"][0]].members:
            pass  # adder is in the detached part: proceed with the handoff
        else:
            # a move re-anchored the path under the root while the extension
            # was queued; install the band states locally instead
            for j in spec["bands"]:
                stj = ns.level(j)
                stj.on_path = True
                stj.down = st.down if j == spec["bands"][0] else y
                stj.up = y
                stj.added_by = adder
                stj.built_t = self.sim.now
                stj.built_f = self.dir.failure_count
            st_top = ns.level(spec["top_level"])
            st_top.on_path = True
            st_top.down = y
            st_top.up = None
            st_top.added_by = adder
            st_top.built_t = self.sim.now
            st_top.built_f = self.dir.failure_count
            self.dir.re_register(y, fid)
            self._route_msg("ext_verdict", y, spec["target"],
                            {"bands": spec["bcast_bands"], "level": spec["level"],
                             "entries": spec["entries"], "fid": fid}, "logn",
                            f"repair:path_update:f{fid}")
            return
        tid = f"tx{self._txn_seq}"
        self._txn_seq += 1
        txn = Txn(tid, spec, None, st.down, adder)
        txn.needed = {n for n in (st.down,) if n is not None and n != y}
        txn.clear_needed = {n for n in (st.down,) if n is not None}
        ns.busy_txn = txn
        self.txns[tid] = txn
        self.sim.log("txn_start", txn=tid, node=y, level=spec["level"],
                     target=spec["target"])
        if not txn.needed:
            self._locks_done(y, txn)
            return
        for n in sorted(txn.needed):
            self._route_msg("txn_lock", y, n,
                            {"txn": tid, "level": spec["level"], "initiator": y,
                             "fid": fid},
                            "const", f"repair:path_update:f{fid}")

    def _on_ext_verdict(self, msg):
        p = msg.payload
        fid = p["fid"]
        self._stat_path_msg(msg, fid)
        for cid in p["bands"]:
            self.verdict_pending.discard(cid)
        c2 = self.hier.levels[p["level"]][p["bands"][0]]
        self._broadcast_cluster(c2, fid, p["entries"],
                                fan_r=self.hier.radius(self.hier.top),
                                extension=True)
        for cid in p["bands"]:
            for q in self.verdict_wait.pop(cid, []):
                self._process_notify(c2.leader, q)
