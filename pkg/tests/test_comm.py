import itertools
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gridswitch.comm import (Arborescence, AttackSpec, CommGraph, DeviceHealth, TreeSet,
                             admissible_trees, build_tree_set, corruption,
                             count_arborescences, enumerate_arborescences, resilience_exists,
                             route)
from gridswitch.errors import CapExceeded, ConfigError, TopologyError

MEAS = (np.array([50.0, 50.1, 49.9, 50.2]), np.array([1e3, 2e3, 3e3, 4e3]),
        np.array([100.0, 200.0, 300.0, 400.0]))


def brute_force_count(graph, root):
    """Every (n-1)-subset of directed edges, kept if it is a valid arborescence."""
    directed = [(a, b) for a, b in graph.links] + [(b, a) for a, b in graph.links]
    count = 0
    for edges in itertools.combinations(directed, graph.n - 1):
        try:
            Arborescence(root, frozenset(edges)).validate(graph)
        except TopologyError:
            continue
        count += 1
    return count


def random_connected(n, rng):
    """Random spanning tree plus random extra links."""
    order = rng.permutation(n)
    links = {tuple(sorted((int(order[i]), int(order[rng.integers(i)])))) for i in range(1, n)}
    for a, b in itertools.combinations(range(n), 2):
        if rng.random() < 0.3:
            links.add((a, b))
    return CommGraph(n, frozenset(links))


# -- graph and tree types -----------------------------------------------------

def test_comm_graph_rejects_disconnected_and_bad_links():
    with pytest.raises(TopologyError):
        CommGraph(3, frozenset({(0, 1)}))
    with pytest.raises(ConfigError):
        CommGraph(3, frozenset({(0, 0), (0, 1), (1, 2)}))


def test_arborescence_validation():
    g = CommGraph.ring(4)
    Arborescence.chain([0, 1, 2, 3]).validate(g)
    with pytest.raises(TopologyError):
        Arborescence(0, frozenset({(0, 1), (1, 2)})).validate(g)  # too few edges
    with pytest.raises(TopologyError):
        Arborescence(0, frozenset({(0, 1), (2, 1), (2, 3)})).validate(g)  # in-degree 2
    with pytest.raises(TopologyError):
        Arborescence.star(0, 4).validate(g)  # 0-2 is not a link of the ring


def test_tree_set_rejects_duplicates():
    t = Arborescence.chain([0, 1, 2])
    with pytest.raises(TopologyError):
        TreeSet([t, t])


def test_tree_set_json_is_one_based():
    doc = json.loads(TreeSet([Arborescence.chain([0, 1, 2])]).to_json())
    assert doc["trees"][0] == {"root": 1, "edges": [[1, 2], [2, 3]]}


def test_depth():
    assert Arborescence.chain([0, 1, 2, 3]).depth == 3
    assert Arborescence.star(2, 5).depth == 1


# -- routing ------------------------------------------------------------------

def test_route_without_attacks_is_identity_on_tree_edges():
    tree = Arborescence.chain([0, 1, 2, 3])
    rec = route(MEAS, tree, [], 6.0)
    for mat, vals in zip((rec.omega, rec.p, rec.q), MEAS):
        np.testing.assert_array_equal(np.diag(mat), vals)
        for l in range(4):
            for m in range(4):
                if l != m:
                    assert mat[l, m] == (vals[m] if (m, l) in tree.edges else 0.0)
    assert rec.leader_ref == 50.0


def test_route_fdi_reaches_every_receiver_of_the_sender():
    # DG 2 (index 1) sends to DGs 1 and 3
    tree = Arborescence(1, frozenset({(1, 0), (1, 2), (2, 3)}))
    att = AttackSpec("FDI", 1, t_a=5.0, magnitude=(0.5, 0, 0))
    rec = route(MEAS, tree, [att], 5.0)
    assert rec.omega[0, 1] == pytest.approx(MEAS[0][1] + 0.5)
    assert rec.omega[2, 1] == pytest.approx(MEAS[0][1] + 0.5)
    assert rec.omega[3, 2] == MEAS[0][2]
    assert rec.omega[1, 1] == MEAS[0][1]  # local sensing is trusted
    before = route(MEAS, tree, [att], 4.99)
    assert before.omega[0, 1] == MEAS[0][1]


@pytest.mark.parametrize("tree", [Arborescence.chain([0, 1, 2, 3]),
                                  Arborescence(0, frozenset({(0, 2), (2, 1), (2, 3)}))])
def test_route_mitm_corrupts_both_directions(tree):
    att = AttackSpec("MITM", (1, 2), t_a=0.0, magnitude=(0, 1000.0, 0))
    rec = route(MEAS, tree, [att], 1.0)
    for m, l in tree.edges:
        bias = 1000.0 if {m, l} == {1, 2} else 0.0
        assert rec.p[l, m] == pytest.approx(MEAS[1][m] + bias)


def test_fdi_and_mitm_compose_additively():
    att = [AttackSpec("FDI", 0, 0.0, (1.0, 0, 0)), AttackSpec("MITM", (0, 1), 0.0, (0.25, 0, 0))]
    c = corruption(att, 3, 1.0)
    assert c[0, 1, 0] == pytest.approx(1.25)
    assert c[0, 2, 0] == pytest.approx(1.0)
    assert c[0, 0, 1] == pytest.approx(0.25)
    assert np.all(np.diagonal(c, axis1=1, axis2=2) == 0)


def test_attack_on_missing_device():
    g = CommGraph.ring(4)
    with pytest.raises(ConfigError):
        AttackSpec("MITM", (0, 2)).check(g)
    with pytest.raises(ConfigError):
        AttackSpec("FDI", 7).check(g)
    with pytest.raises(ConfigError):
        route(MEAS, Arborescence.chain([0, 1, 2, 3]), [AttackSpec("MITM", (0, 2))], 0.0,
              graph=g)


def test_ramp_waveform():
    a = AttackSpec("FDI", 0, t_a=2.0, magnitude=(1.0, 10.0, 0.0), waveform="ramp")
    np.testing.assert_allclose(a.value(3.5), [1.5, 15.0, 0.0])
    np.testing.assert_array_equal(a.value(1.0), 0.0)


@given(st.integers(0, 3), st.floats(-5, 5), st.floats(-5e3, 5e3), st.floats(0, 10))
def test_diagonal_never_corrupted(target, w, p, t):
    tree = Arborescence.star(0, 4)
    rec = route(MEAS, tree, [AttackSpec("FDI", target, 0.0, (w, p, 0.0))], t)
    np.testing.assert_array_equal(np.diag(rec.omega), MEAS[0])
    np.testing.assert_array_equal(np.diag(rec.p), MEAS[1])


# -- enumeration and counting -------------------------------------------------

def test_enumeration_small_cases():
    assert len(enumerate_arborescences(CommGraph(1, frozenset()), 0)) == 1
    for root in range(4):
        assert len(enumerate_arborescences(CommGraph.ring(4), root)) == 4
        assert len(enumerate_arborescences(CommGraph.complete(4), root)) == 16


def test_count_small_cases():
    path = CommGraph(3, frozenset({(0, 1), (1, 2)}))
    assert count_arborescences(path, 0) == 1
    assert count_arborescences(CommGraph(2, frozenset(), require_connected=False), 0) == 0
    assert count_arborescences(CommGraph.complete(4), 0) == 16


@pytest.mark.parametrize("graph", [CommGraph.ring(4), CommGraph.complete(4),
                                   CommGraph(5, frozenset({(0, 1), (1, 2), (2, 3), (3, 4),
                                                           (0, 2), (1, 4)}))])
def test_enumeration_matches_brute_force(graph):
    for root in range(graph.n):
        assert len(enumerate_arborescences(graph, root)) == brute_force_count(graph, root)


def test_enumerated_trees_valid_and_ordered():
    rng = np.random.default_rng(7)
    for n in range(3, 8):
        g = random_connected(n, rng)
        trees = enumerate_arborescences(g, 0)
        for t in trees:
            t.validate(g)
        keys = [t.sorted_edges for t in trees]
        assert keys == sorted(keys) and len(set(keys)) == len(keys)


def test_enumeration_cap():
    with pytest.raises(CapExceeded) as exc:
        enumerate_arborescences(CommGraph.complete(6), 0, cap=100)
    assert exc.value.cap == 100


def test_enumeration_disconnected():
    g = CommGraph(3, frozenset({(0, 1)}), require_connected=False)
    with pytest.raises(TopologyError):
        enumerate_arborescences(g, 0)


def test_build_tree_set_default_first_and_depth_filter():
    g = CommGraph.complete(4)
    default = Arborescence.chain([0, 1, 2, 3])
    ts = build_tree_set(g, default)
    assert ts[0] == default and len(ts) == 64
    shallow = build_tree_set(g, Arborescence.star(0, 4), max_depth=1)
    assert len(shallow) == 4 and all(t.depth == 1 for t in shallow)


# -- admissibility and resilience ---------------------------------------------

def test_admissible_empty_health_keeps_everything():
    ts = build_tree_set(CommGraph.complete(4))
    assert len(admissible_trees(ts, DeviceHealth())) == len(ts)


def test_admissible_star_survives_n_minus_1_fdi():
    ts = build_tree_set(CommGraph.complete(4))
    left = admissible_trees(ts, DeviceHealth(frozenset({0, 1, 2})))
    assert list(left) == [Arborescence.star(3, 4)]


def test_admissible_all_transmitters_compromised():
    ts = build_tree_set(CommGraph.complete(4))
    assert len(admissible_trees(ts, DeviceHealth(frozenset(range(4))))) == 0


def test_resilience_examples():
    k4, ring = CommGraph.complete(4), CommGraph.ring(4)
    for bad in itertools.combinations(range(4), 3):
        assert resilience_exists(k4, DeviceHealth(frozenset(bad)))
    assert resilience_exists(k4, DeviceHealth())
    # ring with transmitters 1 and 3 lost: exhaustive filter agrees with the fast check
    health = DeviceHealth(frozenset({0, 2}))
    exhaustive = len(admissible_trees(build_tree_set(ring), health)) > 0
    assert resilience_exists(ring, health) == exhaustive is False


def test_resilience_matches_exhaustive_filter_on_random_graphs():
    rng = np.random.default_rng(3)
    for _ in range(30):
        n = int(rng.integers(3, 6))
        g = random_connected(n, rng)
        tx = frozenset(int(v) for v in np.flatnonzero(rng.random(n) < 0.4))
        links = sorted(g.links)
        rep = frozenset(l for l in links if rng.random() < 0.2)
        health = DeviceHealth(tx, rep)
        exhaustive = len(admissible_trees(build_tree_set(g), health)) > 0
        assert resilience_exists(g, health) == exhaustive


@given(st.sets(st.integers(0, 4), max_size=4), st.integers(0, 4))
def test_fdi_monotonicity(bad, extra):
    ts = build_tree_set(CommGraph.complete(5))
    before = set(admissible_trees(ts, DeviceHealth(frozenset(bad))))
    after = set(admissible_trees(ts, DeviceHealth(frozenset(bad | {extra}))))
    assert after <= before
