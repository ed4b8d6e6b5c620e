"""Closed-loop attack detection and spanning-tree switching.

Every detector sample the live measurements are routed over the active
arborescence and the fused abnormality is estimated.  A trigger freezes
the secondary corrections (the hold), every candidate tree is scored
with the same estimator, and the first conforming one is enforced when
the hold budget expires.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .comm import AttackSpec, CommGraph, DeviceHealth, TreeSet, route_batch
from .errors import AllTreesCompromised, CalibrationError
from .estimator import MLPParams, featurize_batch
from .grid import GridConfig, GridState, Trajectory, step_rk4
from .secondary import ControllerGains, adjacency_from_parents, objectives_series, rates_batch, \
    tpr_batch

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-6


@dataclass(frozen=True)
class ThresholdPolicy:
    sigma: float
    quantile: float = 0.999
    safety_factor: float = 3.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise CalibrationError("sigma must be positive")


def calibrate_sigma(clean_estimates, quantile: float = 0.999, safety_factor: float = 3.0,
                    floor: float = SIGMA_FLOOR, min_samples: int = 1000) -> ThresholdPolicy:
    """Threshold from the tail of attack-free estimates."""
    est = np.abs(np.asarray(clean_estimates, float))
    if est.size < min_samples:
        raise CalibrationError(f"need at least {min_samples} clean estimates, got {est.size}")
    sigma = safety_factor * float(np.quantile(est, quantile))
    return ThresholdPolicy(max(sigma, floor), quantile, safety_factor)


@dataclass(frozen=True)
class Trigger:
    time: float
    estimate: float
    tree_index: int


def detect(estimate: float, policy: ThresholdPolicy, t: float = 0.0,
           tree_index: int = 0) -> Trigger | None:
    """Strict threshold test on the magnitude of the estimate."""
    if abs(estimate) > policy.sigma:
        return Trigger(t, float(estimate), tree_index)
    return None


class AnalyticDetector:
    """Exact fused abnormality from the received values (no learning)."""

    def __init__(self, config: GridConfig, gains: ControllerGains):
        self.k1, self.k2 = gains.k1, gains.k2
        self.d_p, self.d_q = config.d_p, config.d_q

    def estimate_batch(self, r, parents, refs) -> np.ndarray:
        return tpr_batch(r, parents, refs, self.k1, self.k2, self.d_p, self.d_q)


class ANNDetector:
    def __init__(self, params: MLPParams):
        self.params = params

    def estimate_batch(self, r, parents, refs) -> np.ndarray:
        return self.params.predict(featurize_batch(r, refs))


@dataclass(frozen=True)
class HoldState:
    """Secondary corrections frozen at a trigger, and the hold budget in seconds."""

    delta_omega: np.ndarray
    delta_v: np.ndarray
    duration: float
    start: float = 0.0

    def __post_init__(self):
        if self.duration < 0:
            raise ValueError("hold duration must be non-negative")
        if not (np.all(np.isfinite(self.delta_omega)) and np.all(np.isfinite(self.delta_v))):
            raise ValueError("held corrections must be finite")


@dataclass
class SwitchDecision:
    index: int
    estimates: np.ndarray
    time: float
    search_time: float = 0.0


def search_topology(trees: TreeSet, detector, measurements, attacks: Sequence[AttackSpec],
                    t: float, policy: ThresholdPolicy, leader_ref: float = 50.0,
                    chunk: int = 4096) -> SwitchDecision:
    """Score every candidate tree in order and pick the first conforming one."""
    import time as _time

    t0 = _time.perf_counter()
    parents = trees.parents
    est = np.empty(len(trees))
    for s in range(0, len(trees), chunk):
        r, refs = route_batch(measurements, parents[s:s + chunk], attacks, t, leader_ref)
        est[s:s + chunk] = detector.estimate_batch(r, parents[s:s + chunk], refs)
    ok = np.flatnonzero(np.abs(est) <= policy.sigma)
    if ok.size == 0:
        raise AllTreesCompromised("no candidate tree conforms to the threshold", est)
    return SwitchDecision(int(ok[0]), est, t, _time.perf_counter() - t0)


@dataclass(frozen=True)
class EngineSettings:
    cadence: float = 0.01  # s between detector samples
    hold: float = 0.1  # s of simulated search latency
    arm_time: float = 3.0  # detector ignores start-up transients before this
    recovery_band: float = 0.05  # Hz


@dataclass
class ClosedLoopResult:
    trajectory: Trajectory
    triggers: list
    decisions: list
    trees: TreeSet
    attacks: list
    compromised: bool = False
    residuals: dict = field(default_factory=dict)
    holds: list = field(default_factory=list)

    @property
    def attack_start(self) -> float | None:
        return min((a.t_a for a in self.attacks), default=None)

    @property
    def first_trigger(self) -> Trigger | None:
        return self.triggers[0] if self.triggers else None

    @property
    def detection_latency(self) -> float | None:
        if self.first_trigger is None or self.attack_start is None:
            return None
        return self.first_trigger.time - self.attack_start

    @property
    def final_tree(self):
        return self.trees[int(self.trajectory.extra["active_tree_index"][-1])]

    def freq_error(self, omega_ref=50.0) -> np.ndarray:
        return np.max(np.abs(self.trajectory.omega - omega_ref), axis=1)

    def recovery_time(self, band=0.05, omega_ref=50.0) -> float | None:
        """First instant after attack onset from which the frequency error stays in band."""
        if self.attack_start is None:
            return None
        t = self.trajectory.t
        err = self.freq_error(omega_ref)
        after = t >= self.attack_start - 1e-12
        bad = np.flatnonzero(after & (err >= band))
        if bad.size == 0:
            return float(self.attack_start)
        if bad[-1] == len(t) - 1:
            return None
        return float(t[bad[-1] + 1])


def run_closed_loop(config: GridConfig, graph: CommGraph, trees: TreeSet,
                    attacks: Sequence[AttackSpec], detector=None,
                    policy: ThresholdPolicy | None = None,
                    gains: ControllerGains = ControllerGains(),
                    settings: EngineSettings = EngineSettings(), mitigation: bool = True,
                    state0: GridState | None = None) -> ClosedLoopResult:
    """Simulate the microgrid with detection and (optionally) topology switching.

    Without a detector this is the plain attacked system on the default
    tree.  With ``mitigation=False`` triggers are logged but never acted on.
    """
    for a in attacks:
        a.check(graph)
    if detector is not None and policy is None:
        raise ValueError("a detector needs a threshold policy")
    n, dt = config.n, config.dt
    d_p, d_q = config.d_p, config.d_q
    ref = config.omega_ref
    cadence = max(1, int(round(settings.cadence / dt)))
    hold_steps = int(round(settings.hold / dt))

    active = 0
    adj, pin = adjacency_from_parents(trees.parents[active])
    holding = False
    hold_end = None
    pending = None
    compromised = False
    prev_triggered = False
    triggers, decisions, holds = [], [], []

    zero = np.zeros(n)
    refs = np.array([ref])

    def rates(s: GridState):
        if holding:
            return zero, zero
        r, _ = route_batch((s.omega, s.p_meas, s.q_meas), trees.parents[active][None], attacks,
                           s.t, ref)
        dw, dv = rates_batch(r, adj, pin, refs, gains.k1, gains.k2, d_p, d_q)
        return dw[0], dv[0]

    state = state0 if state0 is not None else GridState.flat_start(config)
    t0 = state.t
    states, tree_idx = [state], [active]
    for k in range(config.n_steps):
        t = t0 + k * dt
        if holding and k >= hold_end:
            holding = False
            if pending is not None:
                active = pending.index
                adj, pin = adjacency_from_parents(trees.parents[active])
                log.info("t=%.3f s: switched to tree %d", t, active)
                pending = None
        if (detector is not None and not holding and k % cadence == 0
                and t >= settings.arm_time - 1e-12):
            meas = (state.omega, state.p_meas, state.q_meas)
            r, rr = route_batch(meas, trees.parents[active][None], attacks, t, ref)
            est = float(detector.estimate_batch(r, trees.parents[active][None], rr)[0])
            trig = detect(est, policy, t, active)
            if trig is not None and (mitigation or not prev_triggered):
                triggers.append(trig)
            prev_triggered = trig is not None
            if trig is not None and mitigation:
                holding = True
                hold_end = k + hold_steps
                holds.append(HoldState(state.delta_omega.copy(), state.delta_v.copy(),
                                       settings.hold, t))
                try:
                    pending = search_topology(trees, detector, meas, attacks, t, policy, ref)
                    decisions.append(pending)
                except AllTreesCompromised:
                    log.warning("t=%.3f s: every candidate tree is compromised", t)
                    compromised = True
                    pending = None
                    hold_end = config.n_steps + 1  # hold until the end of the run
                    holds[-1] = HoldState(holds[-1].delta_omega, holds[-1].delta_v,
                                          config.t_total - t, t)
        state = step_rk4(state, config, rates, t_next=t0 + (k + 1) * dt)
        states.append(state)
        tree_idx.append(active)
    traj = Trajectory.from_states(states, active_tree_index=np.array(tree_idx))
    res = ClosedLoopResult(traj, triggers, decisions, trees, list(attacks), compromised,
                           holds=holds)
    f, p, q = objectives_series(traj, config.droop)
    res.residuals = {"freq_err": float(f[-1]), "p_share_err": float(p[-1]),
                     "q_share_err": float(q[-1])}
    return res


def true_health(attacks: Sequence[AttackSpec]) -> DeviceHealth:
    return DeviceHealth.from_attacks(attacks)
