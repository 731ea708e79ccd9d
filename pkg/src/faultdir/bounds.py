"""Inequality checks over run records.

Every check here works from the JSON-safe dict produced by
``Runtime.record()``, never from live objects, so reports can be
regenerated offline from saved artifacts.  Formula ids used in report
lines are documented in the README bound table.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction


def _num(x):
    if x is None:
        return None
    if isinstance(x, str):
        return Fraction(x)
    if isinstance(x, Fraction):
        return x
    return Fraction(x)


def _fmt(x) -> str:
    if isinstance(x, Fraction):
        return str(x.numerator) if x.denominator == 1 else str(x)
    return str(x)


class LedgerView:
    """Prefix sums over serialized cost ledger rows."""

    def __init__(self, rows: list[dict]):
        self.rows = [(r["bucket"], r["messages"], _num(r["cost"]))
                     for r in rows]

    def total(self, prefix: str) -> tuple[int, Fraction]:
        msgs, cost = 0, Fraction(0)
        probe = prefix + ":"
        for bucket, m, c in self.rows:
            if bucket == prefix or bucket.startswith(probe):
                msgs += m
                cost += c
        return msgs, cost

    def level_costs(self, op_id: str, tag: str) -> dict[int, Fraction]:
        """level -> summed cost of the op:<id>:L<k>:<tag> buckets."""
        out: dict[int, Fraction] = {}
        head = f"op:{op_id}:L"
        for bucket, _m, c in self.rows:
            if not bucket.startswith(head):
                continue
            lvl_s, _, kind = bucket[len(head):].partition(":")
            if kind != tag:
                continue
            lvl = int(lvl_s)
            out[lvl] = out.get(lvl, Fraction(0)) + c
        return out


@dataclass
class CheckLine:
    formula: str
    passed: bool
    observed: str
    bound: str
    detail: str = ""

    def as_dict(self) -> dict:
        return {"formula": self.formula, "passed": self.passed,
                "observed": self.observed, "bound": self.bound,
                "detail": self.detail}


@dataclass
class BoundReport:
    lines: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(line.passed for line in self.lines)

    def add(self, formula, passed, observed, bound, detail="") -> None:
        self.lines.append(CheckLine(formula, bool(passed), _fmt(observed),
                                    _fmt(bound), detail))

    def as_dict(self) -> dict:
        return {"ok": self.ok, "lines": [l.as_dict() for l in self.lines]}

    def failed(self) -> list[CheckLine]:
        return [l for l in self.lines if not l.passed]


class _Group:
    """Folds many same-formula instances into a single report line."""

    def __init__(self, formula: str):
        self.formula = formula
        self.n = 0
        self.skipped = 0
        self.fails: list[str] = []
        self.worst = None  # (slack ratio, observed, bound, label)

    def hit(self, observed, bound, label: str) -> None:
        self.n += 1
        ok = observed <= bound
        if not ok:
            self.fails.append(f"{label}: {_fmt(observed)} > {_fmt(bound)}")
        if bound > 0:
            ratio = Fraction(observed) / bound
        else:
            ratio = Fraction(0) if observed <= 0 else Fraction(10 ** 9)
        if self.worst is None or ratio > self.worst[0]:
            self.worst = (ratio, observed, bound, label)

    def skip(self) -> None:
        self.skipped += 1

    def emit(self, rep: BoundReport, always: bool = False) -> None:
        if self.n == 0:
            if always:
                note = "no instances"
                if self.skipped:
                    note += f" ({self.skipped} reported only)"
                rep.add(self.formula, True, "-", "-", note)
            return
        _ratio, obs, bnd, label = self.worst
        detail = f"{self.n} checked, tightest at {label}"
        if self.skipped:
            detail += f", {self.skipped} reported only"
        if self.fails:
            shown = "; ".join(self.fails[:4])
            if len(self.fails) > 4:
                shown += f"; +{len(self.fails) - 4} more"
            detail += f"; FAILED {shown}"
        rep.add(self.formula, not self.fails, obs, bnd, detail)


class _Rec:
    """Parsed view of one run record."""

    def __init__(self, record: dict):
        self.rec = record
        self.mode = record["mode"]
        self.rho = Fraction(record["rho"])
        self.sigma = _num(record["sigma"])
        self.overlap = Fraction(record["overlap"])
        self.top = record["top"]
        self.n = record["n"]
        self.d_alive = _num(record["d_alive"])
        self.c_prime = _num(record["c_prime"])
        self.delta = record["delta"]
        self.radii = {int(k): _num(v) for k, v in record["radii"].items()}
        self.f_total = len(record["failures"])
        self.led = LedgerView(record["ledger"])

    def radius(self, i: int) -> Fraction:
        if i < min(self.radii):
            return Fraction(0)
        if i > max(self.radii):
            i = max(self.radii)
        return self.radii[i]

    # per-level search cost, one-way probe fan-out
    def search_bound(self, j: int, f_seen: int) -> Fraction:
        r = self.radius(j)
        if f_seen == 0:
            return self.overlap * (1 + self.sigma) * r
        wide = (1 + 2 * self.sigma) * r
        if self.mode == "strong":
            return (self.overlap + f_seen) * wide
        return (f_seen + 1) * self.overlap * wide

    # distance between adjacent path nodes at levels j and j-1
    def pair_bound(self, j: int, f_seen: int) -> Fraction:
        lo, hi = self.radius(j - 1), self.radius(j)
        s = self.sigma if f_seen == 0 else 2 * self.sigma
        return s * (lo + hi) + hi

    def lookup_bound(self, level: int, f_seen: int) -> Fraction:
        """End-to-end request cost at discovery level ``level``: probes out
        and back per level, one intra-cluster jump, then the walk down."""
        lp = max(level, 0)
        total = Fraction(0)
        for j in range(0, lp + 1):
            total += 2 * self.search_bound(j, f_seen)
            total += self.pair_bound(j, f_seen)
        total += 2 * self.sigma * self.radius(lp)
        return total

    def move_level_coeff(self, f_seen: int) -> Fraction:
        """Per-level inventory of one relocation, as a multiple of the level
        radius: search fan-out, the two fresh links, and the long-range
        pointer rewrite (two messages within a cluster c'*sigma levels up)."""
        s, rho, i_eff = self.sigma, self.rho, self.overlap
        if f_seen == 0:
            search = i_eff * (1 + s)
            link = s * (rho + 1) / rho + 1
        else:
            if self.mode == "strong":
                i_eff = self.overlap + f_seen
            else:
                i_eff = (f_seen + 1) * self.overlap
            search = i_eff * (1 + 2 * s)
            link = 2 * s * (rho + 1) / rho + 1
        sc = 4 * self.c_prime * s * s
        return search + link + sc

    def move_c4(self, f_seen: int) -> Fraction:
        i_eff = self.overlap if f_seen == 0 else (
            self.overlap + f_seen if self.mode == "strong"
            else (f_seen + 1) * self.overlap)
        return self.move_level_coeff(f_seen) / (self.sigma * (self.sigma + i_eff))


def optimal_move_cost(g, sources: list[int]):
    """Any schedule serving the requests in order pays at least the distance
    between consecutive request sites."""
    total = 0
    for a, b in zip(sources, sources[1:]):
        total += g.distance(a, b)
    return total


# ---------------------------------------------------------------------------
# individual checks


def _check_completion(rx: _Rec, rep: BoundReport) -> None:
    bad = [(o["id"], o["phase"]) for o in rx.rec["ops"] if o["phase"] != "done"]
    rep.add("completion", not bad, len(rx.rec["ops"]) - len(bad),
            len(rx.rec["ops"]),
            "all requests finished" if not bad else f"stuck: {bad[:6]}")


def _check_path_chain(rx: _Rec, rep: BoundReport) -> None:
    levels = [row["level"] for row in rx.rec["path"]]
    if not levels and rx.rec["publish"] is None:
        rep.add("path-chain", True, "-", "-", "nothing published")
        return
    want = list(range(-1, rx.top + 1))
    rep.add("path-chain", levels == want, len(levels), len(want),
            "one pointer per level, bottom to root"
            if levels == want else f"levels {levels}")


def _check_partition(rx: _Rec, rep: BoundReport) -> None:
    pre = rx.rec["partition_pre"]
    post = rx.rec["partition_post"]
    ok = pre["ok"] and post["ok"]
    detail = "cover radius, stretch and overlap hold before and after repairs"
    if not ok:
        detail = f"pre={pre.get('findings')} post={post.get('findings')}"
    rep.add("post-partition", ok, "ok" if ok else "violated", "ok", detail)


def _check_publish(rx: _Rec, rep: BoundReport) -> None:
    snap = rx.rec["publish"]
    if snap is None:
        return
    h = snap["top"]
    s, rho = rx.sigma, rx.rho
    bound = s * (rho + 1) * (rho ** (h + 1) - 1) / ((rho - 1) * rho)
    note = ""
    if snap["f"] > 0:
        bound *= 2
        note = f" (doubled, {snap['f']} failures before publish)"
    obs = _num(snap["len"])
    rep.add("publish-length", obs <= bound, obs, bound,
            f"first path, height {h}{note}")


def _check_pairs(rx: _Rec, rep: BoundReport) -> None:
    grp = _Group("pair-distance")
    rows = rx.rec["path"]
    for row in rows:
        if row["dist_next"] is None:
            continue
        i = row["level"]
        s = rx.sigma if row["pair_f"] == 0 else 2 * rx.sigma
        bound = s * (rx.radius(i) + rx.radius(i + 1)) + rx.radius(i + 1)
        grp.hit(_num(row["dist_next"]), bound, f"levels {i}/{i + 1}")
    grp.emit(rep)


def _check_linearization(rx: _Rec, rep: BoundReport) -> None:
    grp = _Group("lookup-linearization")
    by_version = {iv["version"]: iv for iv in rx.rec["token_intervals"]}
    for op in rx.rec["ops"]:
        if op["kind"] != "look" or op["phase"] != "done":
            continue
        iv = by_version.get(op["version"])
        ok = iv is not None and op["read_t"] is not None
        if ok:
            rt = _num(op["read_t"])
            t0, t1 = _num(iv["t_from"]), _num(iv["t_to"])
            ok = t0 <= rt and (t1 is None or rt <= t1)
            ok = ok and _num(op["t_issue"]) <= rt <= _num(op["t_complete"])
        grp.hit(0 if ok else 1, 0, op["id"])
    grp.emit(rep, always=True)


def _check_search_levels(rx: _Rec, rep: BoundReport) -> None:
    grp = _Group("search-level")
    for op in rx.rec["ops"]:
        if op["kind"] not in ("look", "move") or op["phase"] != "done":
            continue
        if op["transient"] or op["stale_walk"]:
            grp.skip()
            continue
        f_seen = op["f_at_issue"]
        for lvl, cost in sorted(rx.led.level_costs(op["id"], "query").items()):
            grp.hit(cost, rx.search_bound(lvl, f_seen),
                    f"{op['id']} level {lvl}")
    grp.emit(rep, always=True)


def _check_lookup_total(rx: _Rec, rep: BoundReport) -> None:
    cost_grp = _Group("lookup-total")
    ratio_grp = _Group("lookup-ratio")
    for op in rx.rec["ops"]:
        if op["kind"] != "look" or op["phase"] != "done":
            continue
        if op["transient"] or op["stale_walk"]:
            cost_grp.skip()
            ratio_grp.skip()
            continue
        lvl = op["discovery_level"]
        if lvl is None:
            continue
        f_seen = op["f_at_issue"]
        _m, total = rx.led.total(f"op:{op['id']}")
        _m, reply = rx.led.total(f"op:{op['id']}:reply")
        measured = total - reply
        fb = rx.lookup_bound(lvl, f_seen)
        cost_grp.hit(measured, fb, f"{op['id']} L{lvl}")
        # competitive ratio against the distance to the owner at issue
        # time; only meaningful when discovery above level 0 guarantees
        # the owner was not arbitrarily close
        d = _num(op["dist_at_issue"])
        if f_seen == 0 and lvl >= 1 and d and d > 0:
            floor = rx.radius(lvl - 1)
            ratio_grp.hit(measured / d, fb / floor, f"{op['id']} L{lvl}")
    cost_grp.emit(rep, always=True)
    ratio_grp.emit(rep, always=True)


def _check_move_ratio(rx: _Rec, rep: BoundReport) -> None:
    moves = [o for o in rx.rec["ops"]
             if o["kind"] == "move" and o["phase"] == "done"]
    if not moves:
        return
    paid = Fraction(0)
    base = Fraction(0)
    f_max = 0
    for op in moves:
        _m, cost = rx.led.total(f"op:{op['id']}")
        paid += cost
        d = _num(op["dist_prev_source"])
        if d is not None:
            base += d
        f_max = max(f_max, op["f_at_issue"],
                    op["f_at_complete"] or op["f_at_issue"])
    if base == 0:
        rep.add("move-ratio", True, _fmt(paid), "-",
                f"{len(moves)} relocations but zero baseline, skipped")
        return
    h = rx.top
    c4 = rx.move_c4(f_max)
    i_eff = rx.overlap if f_max == 0 else (
        rx.overlap + f_max if rx.mode == "strong"
        else (f_max + 1) * rx.overlap)
    bound = 2 * c4 * (h + 1) * rx.rho * rx.sigma * (rx.sigma + i_eff)
    if f_max > 0:
        bound += rx.f_total * h * rx.d_alive / base
    ratio = paid / base
    rep.add("move-ratio", ratio <= bound, ratio, bound,
            f"{len(moves)} relocations, paid {_fmt(paid)} vs baseline "
            f"{_fmt(base)}, c4={_fmt(c4)}")


def _split_children(frec: dict) -> list[dict]:
    return [s for s in frec["splits"] if s["child"] is not None]


def _check_splits(rx: _Rec, rep: BoundReport) -> None:
    grp = _Group("split-count")
    for frec in rx.rec["failures"]:
        h = frec["top"]
        kids = [s for s in _split_children(frec) if s["level"] < h]
        bound = h if rx.mode == "strong" else rx.overlap * h
        grp.hit(Fraction(len(kids)), Fraction(bound), f"failure {frec['fid']}")
    grp.emit(rep)


def _check_descendants(rx: _Rec, rep: BoundReport) -> None:
    parent_of: dict[int, int] = {}
    for frec in rx.rec["failures"]:
        for s in _split_children(frec):
            parent_of[s["child"]] = s["parent"]
    if not parent_of:
        return
    counts: dict[int, int] = {}
    for child, parent in parent_of.items():
        root = parent
        while root in parent_of:
            root = parent_of[root]
        counts[root] = counts.get(root, 1) + 1
    grp = _Group("descendant-count")
    for root, parts in sorted(counts.items()):
        grp.hit(Fraction(parts), Fraction(rx.f_total + 1), f"family {root}")
    grp.emit(rep)


def _check_extension_rule(rx: _Rec, rep: BoundReport) -> None:
    grp = _Group("extension-rule")
    for frec in rx.rec["failures"]:
        chk = frec["ext_check"]
        fid = frec["fid"]
        if chk is None:
            grp.hit(Fraction(0 if frec["extension"] is None else 1),
                    Fraction(0), f"failure {fid} (root untouched)")
            continue
        crossing = chk["crossing"]
        w = _num(chk["trigger_weight"])
        thresh = _num(chk["threshold"])
        far = _num(chk["far_dist"])
        should = bool(crossing and w is not None and w > thresh
                      and chk["h_new"] is not None and chk["h_new"] > chk["h"])
        did = chk["triggered"]
        ok = did == should and (frec["extension"] is not None) == did
        if ok and did:
            # new height must be the least one whose reach covers the far node
            hn = chk["h_new"]
            ok = rx.sigma * rx.rho ** hn > far and (
                hn == 0 or rx.sigma * rx.rho ** (hn - 1) <= far)
        grp.hit(Fraction(0 if ok else 1), Fraction(0), f"failure {fid}")
    grp.emit(rep)


def _check_recluster_shape(rx: _Rec, rep: BoundReport) -> None:
    msgs_grp = _Group("recluster-broadcast")
    dist_grp = _Group("recluster-distance")
    xfer_grp = _Group("recluster-transfer")
    a = 2
    for frec in rx.rec["failures"]:
        fid = frec["fid"]
        child_ids = {s["child"] for s in _split_children(frec)}
        for cid_s, row in frec["stats"]["recluster"].items():
            cid = int(cid_s)
            r = rx.radius(row["level"])
            is_child = cid in child_ids
            # parent trees are only pruned; split-off and rebuilt trees may
            # be rerooted once per failure they live through
            stretch = 1
            if is_child:
                stretch = 2 if rx.f_total == 1 else 2 ** rx.f_total
            base = rx.sigma * r
            label = f"f{fid} cluster {cid}"
            msgs_grp.hit(Fraction(row["bcast_msgs"]), Fraction(a * rx.n), label)
            dist_grp.hit(_num(row["bcast_max_dist"]), stretch * base,
                         label + " bcast")
            dist_grp.hit(_num(row["max_dist"]), stretch * base,
                         label + " notify")
            if rx.mode == "strong" and rx.f_total == 1:
                xfer_grp.hit(Fraction(row["xfer_msgs"]), Fraction(0), label)
            else:
                xfer_grp.hit(Fraction(row["xfer_msgs"]), Fraction(1), label)
                xfer_grp.hit(_num(row["xfer_dist"]), stretch * base,
                             label + " dist")
    msgs_grp.emit(rep)
    dist_grp.emit(rep)
    xfer_grp.emit(rep)


def _check_path_update_shape(rx: _Rec, rep: BoundReport) -> None:
    grp = _Group("path-update-shape")
    b = 16
    for frec in rx.rec["failures"]:
        st = frec["stats"]["path_update"]
        events = len(_split_children(frec)) + (
            1 if frec["extension"] is not None else 0)
        bound = Fraction(b * max(1, events))
        grp.hit(Fraction(st["msgs"]), bound, f"f{frec['fid']} msgs")
        grp.hit(_num(st["max_dist"]), rx.d_alive, f"f{frec['fid']} dist")
    grp.emit(rep)


def _check_sc_update_shape(rx: _Rec, rep: BoundReport) -> None:
    grp = _Group("sc-update-shape")
    for frec in rx.rec["failures"]:
        for k, row in enumerate(frec["stats"]["sc_update"]):
            bound = 2 * rx.sigma * rx.radius(row["clamp"])
            grp.hit(_num(row["dist"]), bound, f"f{frec['fid']} row {k}")
    grp.emit(rep)


def _check_preprocess_shape(rx: _Rec, rep: BoundReport) -> None:
    msgs_grp = _Group("preprocess-volume")
    dist_grp = _Group("preprocess-distance")
    for frec in rx.rec["failures"]:
        pre = frec["stats"]["preprocess"]
        msgs_grp.hit(Fraction(pre["msgs"]), Fraction(rx.n * rx.n),
                     f"f{frec['fid']}")
        for fan_s, row in pre["rows"].items():
            dist_grp.hit(_num(row["max_dist"]), _num(fan_s),
                         f"f{frec['fid']} fan {fan_s}")
    msgs_grp.emit(rep)
    dist_grp.emit(rep)


def _check_findings(rx: _Rec, rep: BoundReport) -> None:
    finds = rx.rec["findings"]
    rep.add("protocol-findings", not finds, len(finds), 0,
            "no invariant trips" if not finds else str(finds[:4]))


CHECKS = (
    _check_completion,
    _check_path_chain,
    _check_partition,
    _check_findings,
    _check_publish,
    _check_pairs,
    _check_linearization,
    _check_search_levels,
    _check_lookup_total,
    _check_move_ratio,
    _check_splits,
    _check_descendants,
    _check_extension_rule,
    _check_recluster_shape,
    _check_path_update_shape,
    _check_sc_update_shape,
    _check_preprocess_shape,
)


def check_bounds(record: dict) -> BoundReport:
    rx = _Rec(record)
    rep = BoundReport()
    for chk in CHECKS:
        chk(rx, rep)
    return rep
