"""Communication layer: capability graph, attacks, routing and arborescences.

Nodes are 0-based in the Python API.  Every undirected link carries one
repeater and yields two directed edges; the secondary controller only
consumes the in-edges of the active arborescence.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import CapExceeded, ConfigError, TopologyError

DEFAULT_CAP = 100_000


def _link(a: int, b: int) -> tuple[int, int]:
    return (a, b) if a < b else (b, a)


@dataclass(frozen=True)
class CommGraph:
    n: int
    links: frozenset
    leader_candidates: tuple = None
    require_connected: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        links = frozenset(_link(*l) for l in self.links)
        for a, b in links:
            if a == b or not (0 <= a < self.n and 0 <= b < self.n):
                raise ConfigError(f"invalid communication link ({a}, {b}) for n = {self.n}")
        object.__setattr__(self, "links", links)
        cands = tuple(range(self.n)) if self.leader_candidates is None else tuple(
            sorted(set(self.leader_candidates)))
        if any(not 0 <= c < self.n for c in cands) or not cands:
            raise ConfigError(f"invalid leader candidates {cands}")
        object.__setattr__(self, "leader_candidates", cands)
        if self.require_connected and not self.is_connected():
            raise TopologyError("communication graph is not connected")

    @classmethod
    def complete(cls, n, **kw):
        return cls(n, frozenset((a, b) for a in range(n) for b in range(a + 1, n)), **kw)

    @classmethod
    def ring(cls, n, **kw):
        if n == 2:
            return cls(2, frozenset({(0, 1)}), **kw)
        return cls(n, frozenset(_link(i, (i + 1) % n) for i in range(n)), **kw)

    def neighbors(self, v: int) -> list[int]:
        return sorted([b for a, b in self.links if a == v] + [a for a, b in self.links if b == v])

    def has_link(self, a: int, b: int) -> bool:
        return _link(a, b) in self.links

    def is_connected(self) -> bool:
        if self.n <= 1:
            return True
        seen = {0}
        todo = deque([0])
        while todo:
            v = todo.popleft()
            for u in self.neighbors(v):
                if u not in seen:
                    seen.add(u)
                    todo.append(u)
        return len(seen) == self.n


@dataclass(frozen=True)
class DeviceHealth:
    compromised_transmitters: frozenset = frozenset()
    compromised_repeaters: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "compromised_transmitters",
                           frozenset(self.compromised_transmitters))
        object.__setattr__(self, "compromised_repeaters",
                           frozenset(_link(*l) for l in self.compromised_repeaters))

    @classmethod
    def from_attacks(cls, attacks: Iterable["AttackSpec"]) -> "DeviceHealth":
        tx, rep = set(), set()
        for a in attacks:
            (tx if a.kind == "FDI" else rep).add(a.target)
        return cls(frozenset(tx), frozenset(rep))

    def check(self, graph: CommGraph) -> None:
        for v in self.compromised_transmitters:
            if not 0 <= v < graph.n:
                raise ConfigError(f"no transmitter at node {v}")
        for l in self.compromised_repeaters:
            if l not in graph.links:
                raise ConfigError(f"no repeater on link {l}")

    def usable(self, n: int) -> np.ndarray:
        """Boolean matrix ``U[l, m]``: edge m -> l avoids compromised devices."""
        u = np.ones((n, n), dtype=bool)
        for m in self.compromised_transmitters:
            u[:, m] = False
        for a, b in self.compromised_repeaters:
            u[a, b] = u[b, a] = False
        return u


@dataclass(frozen=True)
class Arborescence:
    """Directed spanning tree; ``edges`` holds (sender, receiver) pairs."""

    root: int
    edges: frozenset

    def __post_init__(self):
        object.__setattr__(self, "edges", frozenset(tuple(e) for e in self.edges))

    @property
    def n(self) -> int:
        return len(self.edges) + 1

    @property
    def parents(self) -> np.ndarray:
        """Parent of every node, -1 at the root."""
        par = np.full(self.n, -1, dtype=int)
        for m, l in self.edges:
            par[l] = m
        return par

    @property
    def sorted_edges(self) -> tuple:
        return tuple(sorted(self.edges))

    def adjacency(self) -> np.ndarray:
        """``A[l, m] = 1`` when m sends to l."""
        a = np.zeros((self.n, self.n))
        for m, l in self.edges:
            a[l, m] = 1.0
        return a

    def validate(self, graph: CommGraph | None = None) -> None:
        n = self.n if graph is None else graph.n
        if len(self.edges) != n - 1:
            raise TopologyError(f"arborescence needs {n - 1} edges, has {len(self.edges)}")
        indeg = np.zeros(n, dtype=int)
        for m, l in self.edges:
            if not (0 <= m < n and 0 <= l < n) or m == l:
                raise TopologyError(f"bad edge ({m}, {l})")
            indeg[l] += 1
            if graph is not None and not graph.has_link(m, l):
                raise TopologyError(f"edge ({m}, {l}) not in communication graph")
        if indeg[self.root] != 0 or np.any(np.delete(indeg, self.root) != 1):
            raise TopologyError("every non-root node needs in-degree exactly 1")
        children = {}
        for m, l in self.edges:
            children.setdefault(m, []).append(l)
        seen, todo = {self.root}, [self.root]
        while todo:
            for c in children.get(todo.pop(), []):
                if c not in seen:
                    seen.add(c)
                    todo.append(c)
        if len(seen) != n:
            raise TopologyError("not every node is reachable from the root")

    @property
    def depth(self) -> int:
        """Longest root-to-leaf hop count."""
        par = self.parents
        best = 0
        for v in range(self.n):
            d = 0
            while par[v] >= 0:
                v = par[v]
                d += 1
            best = max(best, d)
        return best

    def uses_link(self, a: int, b: int) -> bool:
        return (a, b) in self.edges or (b, a) in self.edges

    def to_dict(self, one_based=True) -> dict:
        o = 1 if one_based else 0
        return {"root": self.root + o, "edges": [[m + o, l + o] for m, l in self.sorted_edges]}

    @classmethod
    def from_parents(cls, parents: Sequence[int]) -> "Arborescence":
        root = [i for i, p in enumerate(parents) if p < 0]
        if len(root) != 1:
            raise TopologyError("parent array needs exactly one root")
        return cls(root[0], frozenset((int(p), i) for i, p in enumerate(parents) if p >= 0))

    @classmethod
    def chain(cls, order: Sequence[int]) -> "Arborescence":
        return cls(order[0], frozenset(zip(order[:-1], order[1:])))

    @classmethod
    def star(cls, root: int, n: int) -> "Arborescence":
        return cls(root, frozenset((root, l) for l in range(n) if l != root))


class TreeSet(Sequence):
    """Ordered, duplicate-free candidate arborescences; index 0 is the default."""

    def __init__(self, trees: Iterable[Arborescence]):
        self._trees = list(trees)
        if len(set(self._trees)) != len(self._trees):
            raise TopologyError("duplicate arborescence in tree set")
        self._parents = None

    def __getitem__(self, i):
        return self._trees[i]

    def __len__(self):
        return len(self._trees)

    def index(self, tree, *args):
        return self._trees.index(tree, *args)

    @property
    def parents(self) -> np.ndarray:
        """(T, n) parent arrays for vectorized routing."""
        if self._parents is None:
            self._parents = np.array([t.parents for t in self._trees], dtype=int).reshape(
                len(self._trees), -1)
        return self._parents

    def to_json(self, one_based=True) -> str:
        return json.dumps({"count": len(self), "trees": [t.to_dict(one_based) for t in self]},
                          indent=1)


@dataclass(frozen=True)
class AttackSpec:
    """Scheduled manipulation of communicated (omega, P, Q) values.

    ``waveform`` is ``"bias"`` (constant offset ``magnitude``) or ``"ramp"``
    (offset growing at ``magnitude`` per second after ``t_a``).
    """

    kind: str
    target: object
    t_a: float = 5.0
    magnitude: tuple = (0.0, 0.0, 0.0)
    waveform: str = "bias"

    def __post_init__(self):
        kind = self.kind.upper()
        object.__setattr__(self, "kind", kind)
        if kind not in ("FDI", "MITM"):
            raise ConfigError(f"unknown attack kind {self.kind!r}")
        if kind == "MITM":
            object.__setattr__(self, "target", _link(*self.target))
        else:
            object.__setattr__(self, "target", int(self.target))
        object.__setattr__(self, "magnitude", tuple(float(x) for x in self.magnitude))
        if len(self.magnitude) != 3:
            raise ConfigError("attack magnitude needs (omega, P, Q) components")
        if self.t_a < 0:
            raise ConfigError("attack start time must be non-negative")
        if self.waveform not in ("bias", "ramp"):
            raise ConfigError(f"unknown waveform {self.waveform!r}")

    def value(self, t: float) -> np.ndarray:
        if t < self.t_a - 1e-12:
            return np.zeros(3)
        m = np.asarray(self.magnitude)
        return m if self.waveform == "bias" else m * (t - self.t_a)

    def check(self, graph: CommGraph) -> None:
        if self.kind == "FDI" and not 0 <= self.target < graph.n:
            raise ConfigError(f"FDI target {self.target} has no transmitter")
        if self.kind == "MITM" and self.target not in graph.links:
            raise ConfigError(f"MITM target {self.target} is not a communication link")


@dataclass(frozen=True)
class ReceivedMatrix:
    """Per-receiver view: ``omega[l, m]`` is DG m's frequency as seen by DG l."""

    omega: np.ndarray
    p: np.ndarray
    q: np.ndarray
    leader_ref: float

    @property
    def n(self) -> int:
        return self.omega.shape[0]


def corruption(attacks: Sequence[AttackSpec], n: int, t: float) -> np.ndarray:
    """Additive offsets (3, n, n) applied to every possible edge m -> l at time t."""
    c = np.zeros((3, n, n))
    for a in attacks:
        x = a.value(t)
        if not x.any():
            continue
        if a.kind == "FDI":
            if not 0 <= a.target < n:
                raise ConfigError(f"FDI target {a.target} has no transmitter")
            c[:, :, a.target] += x[:, None]
        else:
            i, j = a.target
            if not (0 <= i < n and 0 <= j < n):
                raise ConfigError(f"MITM target {a.target} outside the network")
            c[:, i, j] += x
            c[:, j, i] += x
    idx = np.arange(n)
    c[:, idx, idx] = 0.0  # local sensing is trusted
    return c


def route_batch(measurements, parents: np.ndarray, attacks: Sequence[AttackSpec], t: float,
                leader_ref: float):
    """Route under many trees at once.

    Returns ``(R, leader_refs)`` with ``R`` shaped (T, 3, n, n) in channel
    order (omega, P, Q).
    """
    vals = np.asarray(measurements, dtype=float).reshape(3, -1)
    n = vals.shape[1]
    parents = np.atleast_2d(parents)
    T = parents.shape[0]
    c = corruption(attacks, n, t)
    sent = vals[:, None, :] + c  # (3, l, m)
    rows = np.arange(n)
    r = np.zeros((T, 3, n, n))
    has = parents >= 0
    tt, ll = np.nonzero(has)
    mm = parents[tt, ll]
    r[tt, :, ll, mm] = sent[:, ll, mm].T
    r[:, :, rows, rows] = vals[None]
    return r, np.full(T, float(leader_ref))


def route(measurements, tree: Arborescence, attacks: Sequence[AttackSpec], t: float,
          leader_ref: float = 50.0, graph: CommGraph | None = None) -> ReceivedMatrix:
    """Deliver (omega, P, Q) along the tree's edges, corrupted by active attacks."""
    if graph is not None:
        for a in attacks:
            a.check(graph)
    r, refs = route_batch(measurements, tree.parents[None], attacks, t, leader_ref)
    return ReceivedMatrix(r[0, 0], r[0, 1], r[0, 2], float(refs[0]))


def enumerate_arborescences(graph: CommGraph, root: int, cap: int = DEFAULT_CAP) -> TreeSet:
    """All root-rooted arborescences of the bidirected graph, lexicographic order."""
    if not graph.is_connected():
        raise TopologyError("communication graph is not connected")
    n = graph.n
    nbrs = [graph.neighbors(v) for v in range(n)]
    order = [v for v in range(n) if v != root]
    parent = [-1] * n
    found = []

    def closes_cycle(v):
        w = parent[v]
        while w != root and w != -1:
            if w == v:
                return True
            w = parent[w]
        return False

    def grow(i):
        if i == len(order):
            found.append(frozenset((parent[v], v) for v in order))
            if len(found) > cap:
                raise CapExceeded(cap)
            return
        v = order[i]
        for u in nbrs[v]:
            parent[v] = u
            if not closes_cycle(v):
                grow(i + 1)
        parent[v] = -1

    grow(0)
    found.sort(key=sorted)
    return TreeSet(Arborescence(root, e) for e in found)


def _bareiss_det(m: list[list[int]]) -> int:
    """Exact integer determinant by fraction-free elimination."""
    a = [row[:] for row in m]
    k = len(a)
    if k == 0:
        return 1
    sign, prev = 1, 1
    for i in range(k - 1):
        if a[i][i] == 0:
            swap = next((r for r in range(i + 1, k) if a[r][i] != 0), None)
            if swap is None:
                return 0
            a[i], a[swap] = a[swap], a[i]
            sign = -sign
        for r in range(i + 1, k):
            for c in range(i + 1, k):
                a[r][c] = (a[r][c] * a[i][i] - a[r][i] * a[i][c]) // prev
        prev = a[i][i]
    return sign * a[k - 1][k - 1]


def count_arborescences(graph: CommGraph, root: int) -> int:
    """Directed matrix-tree count on the bidirected graph (exact integers)."""
    n = graph.n
    lap = [[0] * n for _ in range(n)]
    for a, b in graph.links:
        for m, l in ((a, b), (b, a)):
            lap[l][l] += 1  # in-degree of receiver
            lap[m][l] -= 1
    minor = [[lap[i][j] for j in range(n) if j != root] for i in range(n) if i != root]
    return _bareiss_det(minor)


def build_tree_set(graph: CommGraph, default: Arborescence | None = None,
                   roots: Sequence[int] | None = None, cap: int = DEFAULT_CAP,
                   max_depth: int | None = None) -> TreeSet:
    """Default tree first, then every candidate-root arborescence by (root, edges).

    ``max_depth`` drops trees deeper than the given hop count; long relay
    chains do not give a stable secondary loop on larger grids.
    """
    roots = graph.leader_candidates if roots is None else roots
    trees = []
    for r in roots:
        trees.extend(t for t in enumerate_arborescences(graph, r, cap=cap)
                     if max_depth is None or t.depth <= max_depth)
        if len(trees) > cap:
            raise CapExceeded(cap)
    if default is not None:
        default.validate(graph)
        trees = [default] + [t for t in trees if t != default]
    return TreeSet(trees)


def admissible_mask(trees: TreeSet, health: DeviceHealth) -> np.ndarray:
    par = trees.parents
    if par.shape[1] == 0:
        return np.ones(len(trees), dtype=bool)
    usable = health.usable(par.shape[1])
    nodes = np.broadcast_to(np.arange(par.shape[1]), par.shape)
    ok = np.where(par >= 0, usable[nodes, np.maximum(par, 0)], True)
    return ok.all(axis=1)


def admissible_trees(trees: TreeSet, health: DeviceHealth) -> TreeSet:
    """Trees whose edges avoid compromised transmitters and repeaters."""
    mask = admissible_mask(trees, health)
    return TreeSet(t for t, ok in zip(trees, mask) if ok)


def resilience_exists(graph: CommGraph, health: DeviceHealth) -> bool:
    """Whether some allowed root reaches every node over trustworthy edges."""
    usable = health.usable(graph.n)
    for r in graph.leader_candidates:
        seen, todo = {r}, [r]
        while todo:
            m = todo.pop()
            for l in graph.neighbors(m):
                if l not in seen and usable[l, m]:
                    seen.add(l)
                    todo.append(l)
        if len(seen) == graph.n:
            return True
    return False
