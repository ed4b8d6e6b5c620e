"""Reduced-order islanded AC microgrid under droop primary control.

Each DG is a droop-controlled source whose frequency and voltage follow
their droop set-points through a first-order lag, with filtered power
measurements.  DGs are coupled through lossless lines: active power
exchange is sinusoidal in the angle difference, reactive power exchange
linear in the voltage difference.

State vector layout (length ``7 * n``)::

    [theta | omega | v | p_meas | q_meas | delta_omega | delta_v]
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import optimize
from scipy.sparse import csgraph

from .errors import ConfigError, InvalidState, NumericalDivergence, TopologyError

S_BASE = 10e3  # W, per-unit base for line susceptance

FIELDS = ("theta", "omega", "v", "p_meas", "q_meas", "delta_omega", "delta_v")


@dataclass(frozen=True)
class DroopParams:
    omega_nom: float = 50.0
    v_nom: float = 311.0
    d_p: float = 1e-4
    d_q: float = 1e-4
    delta_omega_max: float = 2.0
    delta_v_max: float = 1.0
    p_rated: float = 20e3
    q_rated: float = 10e3

    def __post_init__(self):
        if not (self.d_p > 0 and self.d_q > 0 and self.omega_nom > 0):
            raise ConfigError("droop gains and omega_nom must be positive")
        # small slack for float products such as 1e-4 * 2e4
        if self.d_p * self.p_rated > self.delta_omega_max * (1 + 1e-12):
            raise ConfigError(
                f"d_p * p_rated = {self.d_p * self.p_rated} exceeds "
                f"delta_omega_max = {self.delta_omega_max}")
        if self.d_q * self.q_rated > self.delta_v_max * (1 + 1e-12):
            raise ConfigError(
                f"d_q * q_rated = {self.d_q * self.q_rated} exceeds "
                f"delta_v_max = {self.delta_v_max}")


@dataclass(frozen=True)
class LineSpec:
    endpoints: tuple[int, int]
    susceptance: float = 0.5  # pu on S_BASE
    conductance: float = 1000.0  # var per volt of voltage difference

    def __post_init__(self):
        a, b = self.endpoints
        if a == b:
            raise ConfigError(f"self-loop line at DG {a}")
        if self.susceptance <= 0:
            raise ConfigError("line susceptance must be positive")
        if self.conductance < 0:
            raise ConfigError("line conductance must be non-negative")


def _incidence(n: int, lines: Sequence[LineSpec]) -> np.ndarray:
    inc = np.zeros((len(lines), n))
    for k, line in enumerate(lines):
        a, b = line.endpoints
        if not (0 <= a < n and 0 <= b < n):
            raise TopologyError(f"line {line.endpoints} references a DG outside 0..{n - 1}")
        inc[k, a] = 1.0
        inc[k, b] = -1.0
    return inc


def _check_connected(n: int, lines: Sequence[LineSpec]) -> None:
    if n == 1:
        return
    adj = np.zeros((n, n))
    for line in lines:
        a, b = line.endpoints
        adj[a, b] = adj[b, a] = 1.0
    ncomp, _ = csgraph.connected_components(adj, directed=False)
    if ncomp != 1:
        raise TopologyError(f"physical line graph has {ncomp} components")


@dataclass(frozen=True)
class GridConfig:
    n: int
    droop: tuple[DroopParams, ...]
    lines: tuple[LineSpec, ...]
    load_p: np.ndarray
    load_q: np.ndarray
    tau_p: float = 0.05
    dt: float = 1e-3
    t_total: float = 10.0
    s_base: float = S_BASE

    def __post_init__(self):
        object.__setattr__(self, "droop", tuple(self.droop))
        object.__setattr__(self, "lines", tuple(self.lines))
        object.__setattr__(self, "load_p", np.asarray(self.load_p, dtype=float))
        object.__setattr__(self, "load_q", np.asarray(self.load_q, dtype=float))
        if self.n < 2:
            raise ConfigError("a microgrid needs at least 2 DGs")
        if len(self.droop) != self.n:
            raise ConfigError(f"droop has {len(self.droop)} entries, n = {self.n}")
        if self.load_p.shape != (self.n,) or self.load_q.shape != (self.n,):
            raise ConfigError("loads must have one entry per DG")
        if len({d.omega_nom for d in self.droop}) != 1:
            raise ConfigError("all DGs must share omega_nom")
        if self.dt <= 0 or self.t_total < self.dt or self.tau_p <= 0:
            raise ConfigError("need dt > 0, t_total >= dt and tau_p > 0")
        _check_connected(self.n, self.lines)
        object.__setattr__(self, "_inc", _incidence(self.n, self.lines))
        object.__setattr__(self, "_b", np.array([l.susceptance for l in self.lines]))
        object.__setattr__(self, "_g", np.array([l.conductance for l in self.lines]))

    @classmethod
    def ring(cls, n, load_p=8e3, load_q=2e3, droop=None, susceptance=0.5,
             conductance=1000.0, **kw):
        """Ring-connected grid with identical droop settings on every DG."""
        droop = droop or DroopParams()
        lines = [LineSpec((i, (i + 1) % n), susceptance, conductance) for i in range(n)]
        if n == 2:
            lines = lines[:1]
        return cls(n=n, droop=(droop,) * n, lines=lines,
                   load_p=np.broadcast_to(load_p, (n,)).copy(),
                   load_q=np.broadcast_to(load_q, (n,)).copy(), **kw)

    def with_loads(self, load_p, load_q) -> "GridConfig":
        return replace(self, load_p=np.asarray(load_p, float), load_q=np.asarray(load_q, float))

    @property
    def omega_ref(self) -> float:
        return self.droop[0].omega_nom

    @property
    def omega_nom(self) -> np.ndarray:
        return np.array([d.omega_nom for d in self.droop])

    @property
    def v_nom(self) -> np.ndarray:
        return np.array([d.v_nom for d in self.droop])

    @property
    def d_p(self) -> np.ndarray:
        return np.array([d.d_p for d in self.droop])

    @property
    def d_q(self) -> np.ndarray:
        return np.array([d.d_q for d in self.droop])

    @property
    def n_steps(self) -> int:
        return int(round(self.t_total / self.dt))


@dataclass(frozen=True)
class GridState:
    theta: np.ndarray
    omega: np.ndarray
    v: np.ndarray
    p_meas: np.ndarray
    q_meas: np.ndarray
    delta_omega: np.ndarray
    delta_v: np.ndarray
    t: float = 0.0

    @property
    def n(self) -> int:
        return len(self.omega)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([getattr(self, f) for f in FIELDS])

    @classmethod
    def from_vector(cls, x: np.ndarray, t: float = 0.0) -> "GridState":
        n = len(x) // 7
        return cls(*(x[i * n:(i + 1) * n] for i in range(7)), t=t)

    def validate(self) -> None:
        x = self.to_vector()
        if len(x) != 7 * self.n:
            raise InvalidState("state arrays have unequal lengths")
        bad = np.flatnonzero(~np.isfinite(x))
        if bad.size:
            raise InvalidState(f"non-finite state entry at flat index {bad[0]}")

    @classmethod
    def flat_start(cls, config: GridConfig) -> "GridState":
        """Angles aligned, nominal frequency/voltage, filters at local load."""
        z = np.zeros(config.n)
        return cls(theta=z.copy(), omega=config.omega_nom, v=config.v_nom,
                   p_meas=config.load_p.copy(), q_meas=config.load_q.copy(),
                   delta_omega=z.copy(), delta_v=z.copy())


def primary_setpoint(droop: DroopParams, p, q, d_omega=0.0, d_v=0.0):
    """Droop set-points with secondary corrections applied."""
    vals = np.asarray([p, q, d_omega, d_v], dtype=float)
    if not np.all(np.isfinite(vals)):
        raise InvalidState("non-finite input to primary_setpoint")
    omega_star = droop.omega_nom - droop.d_p * p + d_omega
    v_star = droop.v_nom - droop.d_q * q + d_v
    return omega_star, v_star


def _exchange(inc, b, g, s_base, theta, v):
    dtheta = inc @ theta
    p_x = inc.T @ (b * np.sin(dtheta)) * s_base
    q_x = inc.T @ (g * (inc @ v))
    return p_x, q_x


def power_flow(theta, v, lines, load_p, load_q, s_base=S_BASE):
    """DG active/reactive outputs: local load plus net export over lines.

    Raises TopologyError when the line graph does not connect every DG.
    """
    theta = np.asarray(theta, float)
    n = len(theta)
    _check_connected(n, lines)
    inc = _incidence(n, lines)
    b = np.array([l.susceptance for l in lines])
    g = np.array([l.conductance for l in lines])
    p_x, q_x = _exchange(inc, b, g, s_base, theta, np.asarray(v, float))
    return np.asarray(load_p, float) + p_x, np.asarray(load_q, float) + q_x


def _deriv_vector(x, d_omega_dot, d_v_dot, config: GridConfig):
    n = config.n
    theta, omega, v, pm, qm, dw, dv = (x[i * n:(i + 1) * n] for i in range(7))
    p_x, q_x = _exchange(config._inc, config._b, config._g, config.s_base, theta, v)
    p = config.load_p + p_x
    q = config.load_q + q_x
    tau = config.tau_p
    out = np.empty_like(x)
    out[:n] = 2 * np.pi * (omega - config.omega_ref)
    out[n:2 * n] = (config.omega_nom - config.d_p * pm + dw - omega) / tau
    out[2 * n:3 * n] = (config.v_nom - config.d_q * qm + dv - v) / tau
    out[3 * n:4 * n] = (p - pm) / tau
    out[4 * n:5 * n] = (q - qm) / tau
    out[5 * n:6 * n] = d_omega_dot
    out[6 * n:] = d_v_dot
    return out


def derivatives(state: GridState, rates, config: GridConfig) -> GridState:
    """Time derivative of every continuous state (returned as a GridState).

    ``rates`` is a ``(d_omega_dot, d_v_dot)`` pair from the secondary layer.
    The ``t`` field of the result is the rate of time itself, 1.0.
    """
    state.validate()
    d_omega_dot, d_v_dot = rates
    dx = _deriv_vector(state.to_vector(), d_omega_dot, d_v_dot, config)
    return GridState.from_vector(dx, t=1.0)


def rk4_step(f: Callable, x: np.ndarray, t: float, dt: float) -> np.ndarray:
    """One classical Runge-Kutta step of ``x' = f(x, t)``."""
    k1 = f(x, t)
    k2 = f(x + 0.5 * dt * k1, t + 0.5 * dt)
    k3 = f(x + 0.5 * dt * k2, t + 0.5 * dt)
    k4 = f(x + dt * k3, t + dt)
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


RateProvider = Callable[[GridState], Sequence[np.ndarray]]


def zero_rates(state: GridState):
    z = np.zeros(state.n)
    return z, z


def step_rk4(state: GridState, config: GridConfig, rate_provider: RateProvider = zero_rates,
             t_next: float | None = None) -> GridState:
    """Advance ``state`` by ``config.dt``.

    ``rate_provider`` is called on the intermediate RK4 states, so secondary
    rates see consistent measurements at every stage.  ``t_next`` lets
    callers pin the new time to ``k * dt`` and avoid accumulated rounding.
    """
    dt = config.dt

    def f(x, t):
        rates = rate_provider(GridState.from_vector(x, t))
        return _deriv_vector(x, rates[0], rates[1], config)

    with np.errstate(invalid="ignore", over="ignore"):  # divergence is reported below
        x = rk4_step(f, state.to_vector(), state.t, dt)
    t = state.t + dt if t_next is None else t_next
    bad = np.flatnonzero(~np.isfinite(x))
    if bad.size:
        raise NumericalDivergence(
            f"non-finite state at flat index {bad[0]} (t = {t:.6f} s)", index=int(bad[0]), t=t)
    return GridState.from_vector(x, t)


@dataclass
class Trajectory:
    """Uniformly sampled run; arrays are (samples, n) except ``t``."""

    t: np.ndarray
    theta: np.ndarray
    omega: np.ndarray
    v: np.ndarray
    p_meas: np.ndarray
    q_meas: np.ndarray
    delta_omega: np.ndarray
    delta_v: np.ndarray
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.t)

    def __getitem__(self, k) -> GridState:
        return GridState(*(getattr(self, f)[k] for f in FIELDS), t=float(self.t[k]))

    @property
    def n(self) -> int:
        return self.omega.shape[1]

    @property
    def final(self) -> GridState:
        return self[-1]

    @classmethod
    def from_states(cls, states: Sequence[GridState], **extra) -> "Trajectory":
        t = np.array([s.t for s in states])
        if len(t) > 1 and np.any(np.diff(t) <= 0):
            raise InvalidState("trajectory times must be strictly increasing")
        arrays = {f: np.array([getattr(s, f) for s in states]) for f in FIELDS}
        return cls(t=t, **arrays, extra={k: np.asarray(v) for k, v in extra.items()})

    def csv_header(self) -> list[str]:
        cols = ["t"]
        for name, f in (("omega", "omega"), ("v", "v"), ("p", "p_meas"), ("q", "q_meas"),
                        ("delta_omega", "delta_omega"), ("delta_v", "delta_v")):
            cols += [f"{name}_{i + 1}" for i in range(self.n)]
        return cols + list(self.extra)

    def to_csv(self, path) -> None:
        body = np.column_stack(
            [self.t] + [getattr(self, f) for f in FIELDS[1:]] + list(self.extra.values()))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.csv_header())
            for row in body:
                w.writerow([repr(float(x)) for x in row])


def simulate(config: GridConfig, rate_provider: RateProvider = zero_rates,
             state0: GridState | None = None, record_every: int = 1) -> Trajectory:
    """Integrate from ``state0`` (flat start by default) to ``t_total``."""
    state = state0 if state0 is not None else GridState.flat_start(config)
    state.validate()
    t0 = state.t
    states = [state]
    for k in range(1, config.n_steps + 1):
        state = step_rk4(state, config, rate_provider, t_next=t0 + k * config.dt)
        if k % record_every == 0:
            states.append(state)
    return Trajectory.from_states(states)


def steady_state(config: GridConfig, root: int = 0) -> GridState:
    """Synchronized equilibrium with the secondary objectives met.

    Frequencies sit at nominal and droop-weighted powers are equal.  The
    voltage level is pinned by ``root``, whose voltage correction stays at
    zero because it has no in-neighbours in any arborescence.
    """
    n = config.n
    w_p = 1.0 / config.d_p
    w_q = 1.0 / config.d_q
    p = config.load_p.sum() * w_p / w_p.sum()
    q = config.load_q.sum() * w_q / w_q.sum()
    inc, b, g = config._inc, config._b, config._g

    def resid(th_rest):
        th = np.concatenate([[0.0], th_rest])
        return (inc.T @ (b * np.sin(inc @ th)) * config.s_base - (p - config.load_p))[1:]

    # judged by the residual: at this tolerance scipy may flag an exact root as stalled
    sol = optimize.root(resid, np.zeros(n - 1), method="hybr", tol=1e-14)
    if np.max(np.abs(resid(sol.x))) > 1e-6:
        raise TopologyError("no synchronized operating point: line capacity exceeded")
    theta = np.concatenate([[0.0], sol.x])

    # voltages: G-weighted Laplacian @ v = q - load_q, anchored at the root
    lap = inc.T @ (g[:, None] * inc)
    v_root = config.v_nom[root] - config.d_q[root] * q[root]
    keep = np.arange(n) != root
    rhs = (q - config.load_q)[keep] - lap[np.ix_(keep, [root])].ravel() * v_root
    v = np.empty(n)
    v[root] = v_root
    v[keep] = np.linalg.solve(lap[np.ix_(keep, keep)], rhs)

    omega = np.full(n, config.omega_ref)
    return GridState(theta=theta, omega=omega, v=v, p_meas=p, q_meas=q,
                     delta_omega=omega - config.omega_nom + config.d_p * p,
                     delta_v=v - config.v_nom + config.d_q * q)
