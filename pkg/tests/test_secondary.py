import numpy as np
import pytest
from hypothesis import given, strategies as st

from gridswitch.comm import Arborescence, AttackSpec, CommGraph, ReceivedMatrix, route
from gridswitch.errors import TopologyError
from gridswitch.grid import DroopParams, GridConfig, steady_state, simulate
from gridswitch.secondary import (ControllerGains, SecondaryRates, compute_tpr,
                                  consensus_rates, objectives_residual)

GAINS = ControllerGains(40.0, 20.0)
DROOP4 = [DroopParams()] * 4


def straight_line_rates(rec, tree, k1, k2, droop):
    """Loop-by-loop evaluation of the consensus laws, used as an oracle."""
    n = rec.n
    dw, dv = np.zeros(n), np.zeros(n)
    for l in range(n):
        acc_w = 0.0
        acc_v = 0.0
        for m, recv in tree.edges:
            if recv != l:
                continue
            acc_w += rec.omega[l, m] - rec.omega[l, l]
            acc_w += droop[m].d_p * rec.p[l, m] - droop[l].d_p * rec.p[l, l]
            acc_v += droop[m].d_q * rec.q[l, m] - droop[l].d_q * rec.q[l, l]
        if l == tree.root:
            acc_w += rec.leader_ref - rec.omega[l, l]
        dw[l] = k1 * acc_w
        dv[l] = k2 * acc_v
    return dw, dv


def test_gains_validation():
    with pytest.raises(ValueError):
        ControllerGains(0.0, 1.0)
    with pytest.raises(ValueError):
        ControllerGains(1.0, 1.0, pinning=np.array([1.0, 1.0]))
    np.testing.assert_array_equal(GAINS.for_tree(Arborescence.star(2, 3)).pinning, [0, 0, 1])


def test_two_dg_chain_example():
    tree = Arborescence.chain([0, 1])
    rec = route((np.array([50.0, 49.5]), np.array([1e3, 1e3]), np.array([0.0, 0.0])), tree,
                [], 0.0)
    r = consensus_rates(rec, tree, GAINS, [DroopParams()] * 2)
    assert r.d_omega_dot[1] == pytest.approx(20.0)
    assert r.d_omega_dot[0] == 0.0


def test_matches_straight_line_oracle(rng):
    for _ in range(20):
        tree = Arborescence.from_parents([-1, 0, 1, int(rng.integers(0, 3))])
        meas = (50 + rng.normal(0, 0.3, 4), rng.uniform(1e3, 1e4, 4), rng.uniform(1e2, 1e3, 4))
        att = [AttackSpec("FDI", int(rng.integers(4)), 0.0, rng.normal(0, 1, 3) * [1, 1e3, 1e2])]
        rec = route(meas, tree, att, 1.0, leader_ref=50.0 + rng.normal(0, 0.1))
        droop = [DroopParams(d_p=rng.uniform(5e-5, 1e-4), d_q=rng.uniform(5e-5, 1e-4))
                 for _ in range(4)]
        got = consensus_rates(rec, tree, GAINS, droop)
        want = straight_line_rates(rec, tree, 40.0, 20.0, droop)
        np.testing.assert_allclose(got.d_omega_dot, want[0], rtol=1e-12, atol=1e-9)
        np.testing.assert_allclose(got.d_v_dot, want[1], rtol=1e-12, atol=1e-9)


def test_support_mismatch_raises():
    tree = Arborescence.chain([0, 1, 2])
    rec = route((np.full(3, 50.0), np.ones(3), np.ones(3)), tree, [], 0.0)
    rec.omega[0, 2] = 50.0
    with pytest.raises(TopologyError):
        consensus_rates(rec, tree, GAINS, [DroopParams()] * 3)


@given(st.lists(st.floats(0.5, 2.0), min_size=4, max_size=4),
       st.floats(1e3, 1e4), st.floats(1e2, 2e3), st.integers(0, 3))
def test_exact_zero_at_synchronism(scale, p_unit, q_unit, root):
    """Nominal frequency and droop-proportional sharing give identically zero rates."""
    droop = [DroopParams(d_p=1e-4 / s, d_q=1e-4 / s, p_rated=1e4, q_rated=5e3) for s in scale]
    p = np.array([p_unit / d.d_p * 1e-4 for d in droop])
    q = np.array([q_unit / d.d_q * 1e-4 for d in droop])
    tree = Arborescence.star(root, 4)
    rec = route((np.full(4, 50.0), p, q), tree, [], 0.0)
    r = consensus_rates(rec, tree, GAINS, droop)
    assert np.max(np.abs(r.d_omega_dot)) < 1e-12 and np.max(np.abs(r.d_v_dot)) < 1e-12


def test_tpr_simple_cases():
    assert compute_tpr(SecondaryRates(np.zeros(3), np.zeros(3))) == 0.0
    a = SecondaryRates(np.array([1.0, 2.0]), np.array([0.5, -1.0]))
    b = SecondaryRates(np.array([-3.0, 0.25]), np.array([2.0, 0.0]))
    ab = SecondaryRates(a.d_omega_dot + b.d_omega_dot, a.d_v_dot + b.d_v_dot)
    assert compute_tpr(ab) == pytest.approx(compute_tpr(a) + compute_tpr(b))


def test_fdi_shift_equals_bias_contribution():
    tree = Arborescence(0, frozenset({(0, 1), (1, 2), (1, 3)}))  # DG 2 has out-degree 2
    meas = (np.full(4, 50.0), np.full(4, 5e3), np.full(4, 1e3))
    clean = compute_tpr(consensus_rates(route(meas, tree, [], 0.0), tree, GAINS, DROOP4))
    for mag, expect in [((0.3, 0, 0), 40 * 2 * 0.3),
                        ((0, 800.0, 0), 40 * 2 * 1e-4 * 800.0),
                        ((0, 0, 500.0), 20 * 2 * 1e-4 * 500.0)]:
        att = [AttackSpec("FDI", 1, 0.0, mag)]
        dirty = compute_tpr(consensus_rates(route(meas, tree, att, 0.0), tree, GAINS, DROOP4))
        assert dirty - clean == pytest.approx(expect, rel=1e-9)


@given(st.sampled_from(["FDI", "MITM"]), st.integers(0, 3),
       st.floats(0.1, 3.0), st.floats(0.1, 3e3), st.floats(0.1, 1e3), st.booleans())
def test_attack_signature(kind, where, w, p, q, negative):
    tree = Arborescence.chain([0, 1, 2, 3])
    sign = -1.0 if negative else 1.0
    # DG 4 sends nothing on this chain, so FDI targets are DGs 1-3
    target = where % 3 if kind == "FDI" else tree.sorted_edges[where % 3]
    meas = (np.full(4, 50.0), np.full(4, 7e3), np.full(4, 2e3))
    att = [AttackSpec(kind, target, 0.0, (sign * w, sign * p, sign * q))]
    clean = compute_tpr(consensus_rates(route(meas, tree, [], 0.0), tree, GAINS, DROOP4))
    dirty = compute_tpr(consensus_rates(route(meas, tree, att, 0.0), tree, GAINS, DROOP4))
    assert abs(dirty) > abs(clean)


def test_objectives_residual_synchronized_trajectory():
    cfg = GridConfig.ring(3, load_p=np.array([4e3, 6e3, 8e3]), load_q=1e3, t_total=0.05)
    traj = simulate(cfg, state0=steady_state(cfg))
    r = objectives_residual(traj, cfg.droop)
    assert r.freq_err < 1e-9 and r.p_share_err < 1e-9 and r.q_share_err < 1e-9
