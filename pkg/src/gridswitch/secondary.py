"""Leader-follower consensus secondary control and the fused abnormality.

Rates follow the single-integrator laws

    d(delta_omega_l)/dt = K1 * ( sum_m a_lm (omega_m - omega_l) + g_l (omega_ref - omega_l)
                                 + sum_m a_lm (Dp_m P_m - Dp_l P_l) )
    d(delta_v_l)/dt     = K2 *   sum_m a_lm (Dq_m Q_m - Dq_l Q_l)

evaluated on *received* neighbour values, where ``a_lm = 1`` on the edges
of the active arborescence and ``g_l = 1`` only at its root.  The fused
abnormality ``T_pr`` is the sum of all these rates.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .comm import Arborescence, ReceivedMatrix
from .errors import TopologyError


@dataclass(frozen=True)
class ControllerGains:
    k1: float = 40.0
    k2: float = 20.0
    pinning: np.ndarray | None = None

    def __post_init__(self):
        if self.k1 <= 0 or self.k2 <= 0:
            raise ValueError("secondary gains must be positive")
        if self.pinning is not None:
            g = np.asarray(self.pinning, dtype=float)
            if not np.all((g == 0) | (g == 1)) or g.sum() != 1:
                raise ValueError("pinning must select exactly one root")
            object.__setattr__(self, "pinning", g)

    def for_tree(self, tree: Arborescence) -> "ControllerGains":
        g = np.zeros(tree.n)
        g[tree.root] = 1.0
        return ControllerGains(self.k1, self.k2, g)


class SecondaryRates(NamedTuple):
    d_omega_dot: np.ndarray
    d_v_dot: np.ndarray


def _droop_arrays(droop):
    if isinstance(droop, tuple) and len(droop) == 2 and not hasattr(droop[0], "d_p"):
        return np.asarray(droop[0], float), np.asarray(droop[1], float)
    return (np.array([d.d_p for d in droop]), np.array([d.d_q for d in droop]))


def rates_batch(r: np.ndarray, adj: np.ndarray, pin: np.ndarray, refs: np.ndarray,
                k1: float, k2: float, d_p: np.ndarray, d_q: np.ndarray):
    """Vectorized consensus rates.

    ``r`` is (T, 3, n, n) received values, ``adj`` (T, n, n) with
    ``adj[t, l, m] = 1`` for edge m -> l, ``pin`` (T, n), ``refs`` (T,).
    Returns two (T, n) arrays.
    """
    w, p, q = r[:, 0], r[:, 1], r[:, 2]
    own_w = np.diagonal(w, axis1=1, axis2=2)
    own_p = np.diagonal(p, axis1=1, axis2=2)
    own_q = np.diagonal(q, axis1=1, axis2=2)
    deg = adj.sum(axis=2)
    sum_w = (adj * w).sum(axis=2)
    sum_p = (adj * p * d_p[None, None, :]).sum(axis=2)
    sum_q = (adj * q * d_q[None, None, :]).sum(axis=2)
    dw = k1 * (sum_w - deg * own_w + pin * (refs[:, None] - own_w)
               + sum_p - deg * d_p * own_p)
    dv = k2 * (sum_q - deg * d_q * own_q)
    return dw, dv


def adjacency_from_parents(parents: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    parents = np.atleast_2d(parents)
    T, n = parents.shape
    adj = np.zeros((T, n, n))
    tt, ll = np.nonzero(parents >= 0)
    adj[tt, ll, parents[tt, ll]] = 1.0
    pin = (parents < 0).astype(float)
    return adj, pin


def consensus_rates(received: ReceivedMatrix, tree: Arborescence, gains: ControllerGains,
                    droop) -> SecondaryRates:
    """Secondary-control rates for every DG given what each DG received.

    ``droop`` is a sequence of DroopParams or a ``(d_p, d_q)`` array pair.
    """
    n = received.n
    adj = tree.adjacency()
    off = ~np.eye(n, dtype=bool) & (adj == 0)
    for mat in (received.omega, received.p, received.q):
        if np.any(mat[off] != 0):
            raise TopologyError("received values present on an edge outside the tree")
    pin = gains.pinning if gains.pinning is not None else gains.for_tree(tree).pinning
    d_p, d_q = _droop_arrays(droop)
    r = np.stack([received.omega, received.p, received.q])[None]
    dw, dv = rates_batch(r, adj[None], pin[None], np.array([received.leader_ref]),
                         gains.k1, gains.k2, d_p, d_q)
    return SecondaryRates(dw[0], dv[0])


def compute_tpr(rates) -> float:
    d_omega_dot, d_v_dot = rates
    return float(np.sum(d_omega_dot) + np.sum(d_v_dot))


def tpr_batch(r, parents, refs, k1, k2, d_p, d_q) -> np.ndarray:
    """Analytic fused abnormality for each of T routed candidates."""
    adj, pin = adjacency_from_parents(parents)
    dw, dv = rates_batch(r, adj, pin, np.asarray(refs, float), k1, k2,
                         np.asarray(d_p, float), np.asarray(d_q, float))
    return dw.sum(axis=1) + dv.sum(axis=1)


class Residuals(NamedTuple):
    freq_err: float
    p_share_err: float
    q_share_err: float


def objectives_series(traj, droop: Sequence) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-sample frequency error and droop-weighted sharing spreads."""
    d_p, d_q = _droop_arrays(droop)
    omega_ref = droop[0].omega_nom if hasattr(droop[0], "omega_nom") else 50.0
    freq = np.max(np.abs(traj.omega - omega_ref), axis=1)
    wp = traj.p_meas * d_p
    wq = traj.q_meas * d_q
    return freq, wp.max(axis=1) - wp.min(axis=1), wq.max(axis=1) - wq.min(axis=1)


def objectives_residual(traj, droop: Sequence) -> Residuals:
    """Secondary objectives at the horizon: frequency restoration and sharing."""
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    f, p, q = objectives_series(traj, droop)
    return Residuals(float(f[-1]), float(p[-1]), float(q[-1]))
