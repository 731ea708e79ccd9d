"""Sparse partition hierarchy: construction, verification, preprocessing."""

import random
from fractions import Fraction

import pytest

from faultdir.graph import grid_graph, load_graph, path_graph, random_graph, ring_graph
from faultdir.partition import (
    Hierarchy, build_hierarchy, build_partition, choose_leader, cluster_tree,
    preprocess_leaders, verify_partition,
)
from oracles import brute_cluster_diameter, brute_intersection_count, fw_all_pairs


def test_r_at_least_diameter_single_cluster():
    g = ring_graph(8)
    clusters = build_partition(g, g.diameter(), "strong", random.Random(0))
    assert len(clusters) == 1
    assert clusters[0][1] == set(range(8))


def test_r_below_min_weight_singletons():
    g = ring_graph(6, weights=3)
    for mode in ("weak", "strong"):
        clusters = build_partition(g, 2, mode, random.Random(1))
        assert len(clusters) == 6
        assert all(len(m) == 1 for _, m in clusters)


@pytest.mark.parametrize("mode", ["weak", "strong"])
def test_grid_partition_verifies(mode):
    g = grid_graph(8, 8)
    hier = build_hierarchy(g, rho=2, mode=mode, seed=11)
    report = verify_partition(hier)
    assert report["ok"], report["problems"]
    assert 1 <= hier.sigma < 2
    assert hier.overlap >= 1


def test_two_node_hierarchy():
    g = load_graph("0 1 1\n")
    hier = build_hierarchy(g, rho=2, mode="strong", seed=0)
    assert hier.base_top == 0
    assert sorted(hier.all_levels()) == [-1, 0]
    assert len(hier.clusters_at(-1)) == 2
    top = hier.clusters_at(0)
    assert len(top) == 1 and top[0].members == {0, 1}
    assert hier.root == 0  # tie on eccentricity goes to the smaller id


def test_unit_path_levels_and_radii():
    g = path_graph(9)  # diameter 8
    hier = build_hierarchy(g, rho=2, mode="strong", seed=3)
    assert hier.base_top == 3
    assert [hier.radius(i) for i in range(-1, 4)] == [0, 1, 2, 4, 8]
    assert hier.radius(5) == 32  # hypothetical extension level


def test_radius_caps_at_initial_diameter():
    g = path_graph(6)  # diameter 5, h = 3, r_3 = min(5, 8) = 5
    hier = build_hierarchy(g, rho=2, mode="weak", seed=0)
    assert hier.base_top == 3
    assert hier.radius(3) == 5


@pytest.mark.parametrize("mode", ["weak", "strong"])
def test_random_graph_invariants(mode):
    g = random_graph(32, 0.15, seed=8)
    hier = build_hierarchy(g, rho=2, mode=mode, seed=8)
    report = verify_partition(hier)
    assert report["ok"], report["problems"]
    # cross-check measured parameters against the brute-force oracle
    for i in hier.all_levels():
        r = hier.radius(i)
        for c in hier.clusters_at(i):
            d = brute_cluster_diameter(g, c.members, mode)
            if r > 0:
                assert d <= hier.sigma * r
        for u in [0, 9, 31]:
            assert brute_intersection_count(g, hier, u, i) <= hier.overlap


def test_level_minus_one_and_top():
    g = grid_graph(4, 4)
    hier = build_hierarchy(g, rho=2, mode="strong", seed=2)
    for c in hier.clusters_at(-1):
        assert len(c.members) == 1 and c.diameter(g, "strong") == 0
    assert len(hier.clusters_at(hier.top)) == 1
    for u in g.nodes():
        assert len(hier.clusters_intersecting(u, hier.top)) == 1
        assert len(hier.clusters_intersecting(u, -1)) == 1


def test_leaders_are_centers():
    g = path_graph(5)
    assert choose_leader(g, {0, 1, 2, 3, 4}, "strong") == 2
    assert choose_leader(g, {0, 1}, "weak") == 0  # tie to smaller id
    assert choose_leader(g, {3}, "strong") == 3


def test_cluster_tree_strong_stays_inside():
    g = ring_graph(6)
    tree = cluster_tree(g, 1, {0, 1, 2}, "strong")
    assert set(tree) == {0, 1, 2}
    assert tree[1] is None and tree[0] == 1 and tree[2] == 1


def test_cluster_tree_weak_annotates_passthrough():
    # members 0 and 2 with 1 in the middle: weak tree must route through 1
    g = path_graph(3)
    tree = cluster_tree(g, 0, {0, 2}, "weak")
    assert set(tree) == {0, 1, 2}
    assert tree[2] == 1 and tree[1] == 0


def test_tree_paths_within_diameter_bound():
    for mode in ("weak", "strong"):
        g = random_graph(24, 0.2, seed=5)
        hier = build_hierarchy(g, rho=2, mode=mode, seed=5)
        for i in hier.all_levels():
            r = hier.radius(i)
            for c in hier.clusters_at(i):
                for m in c.members:
                    cost = c.tree_path_cost(m, g)
                    if r > 0:
                        assert cost <= hier.sigma * r


def test_neighborhood_clusters_matches_oracle():
    g = grid_graph(5, 5)
    hier = build_hierarchy(g, rho=2, mode="strong", seed=4)
    ldir, _ = preprocess_leaders(hier)
    for u in (0, 12, 24):
        for i in range(0, hier.top + 1):
            believed = ldir.neighborhood_clusters(hier, u, i)
            truth = {c.leader for c in hier.clusters_intersecting(u, i)}
            assert set(believed) == truth
            assert len(believed) <= hier.overlap


def test_preprocess_tables_and_costs():
    g = load_graph("0 1 1\n")
    hier = build_hierarchy(g, rho=2, mode="weak", seed=0)
    ldir, exchanges = preprocess_leaders(hier)
    lead = hier.leader(0, 0)
    assert ldir.believed_leader(0, 1, 0) == lead
    assert ldir.believed_leader(1, 0, 0) == lead
    # one remote exchange per direction at level 0
    assert exchanges == [(0, 1, 1), (1, 0, 1)]


def test_preprocess_ring_matches_oracle():
    g = ring_graph(16)
    hier = build_hierarchy(g, rho=2, mode="strong", seed=7)
    ldir, _ = preprocess_leaders(hier)
    dist = fw_all_pairs(g)
    for u in g.nodes():
        for i in range(0, hier.top + 1):
            r = hier.radius(i)
            for x in g.nodes():
                want = hier.leader(i, x) if dist[u][x] <= r else None
                assert ldir.believed_leader(u, x, i) == want


def test_shortcut_constants_exact():
    g = grid_graph(6, 6)
    hier = build_hierarchy(g, rho=2, mode="strong", seed=9)
    c = hier.shortcut_factor()
    s, p = hier.sigma, hier.rho
    assert c >= 2 + Fraction(2 * (s * p + p + s), (p - 1) * p)
    assert c * s >= 1 + Fraction(2 * s * (p + 1) + p, p - 1)
    # power of rho
    k = c
    while k > 1:
        assert k % p == 0
        k //= p
    off = hier.shortcut_offset()
    assert p ** off >= c * s > p ** (off - 1)
    assert hier.shortcut_level(hier.top) == hier.top


def test_build_hierarchy_rejects_tiny():
    g = load_graph("0 1 1\n")
    with pytest.raises(ValueError):
        build_hierarchy(g, rho=1, mode="strong", seed=0)
    from faultdir.graph import Graph
    g1 = Graph()
    g1.add_node(0)
    with pytest.raises(ValueError):
        build_hierarchy(g1, rho=2, mode="strong", seed=0)


def test_determinism_same_seed():
    g = random_graph(20, 0.2, seed=3)
    a = build_hierarchy(g, rho=2, mode="weak", seed=42)
    g2 = random_graph(20, 0.2, seed=3)
    b = build_hierarchy(g2, rho=2, mode="weak", seed=42)
    for i in a.all_levels():
        sig_a = sorted((c.leader, tuple(sorted(c.members))) for c in a.clusters_at(i))
        sig_b = sorted((c.leader, tuple(sorted(c.members))) for c in b.clusters_at(i))
        assert sig_a == sig_b
