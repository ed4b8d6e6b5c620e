"""Scenario files: YAML documents describing grid, network, attacks and runs.

DG numbers in scenario files start at 1, as on a one-line diagram; they are
converted to 0-based indices on load.  A scenario may ``extends:`` another
one (by shipped name or relative path); mappings are merged recursively.

Top-level sections::

    name, seed, extends
    grid:       n, tau_p, dt, droop, load_p, load_q, lines, line_defaults
    comm:       n, links, leader_candidates, default_tree
    trees:      source (enumerated|explicit), cap, max_depth, list
    control:    k1, k2
    engine:     cadence, hold, arm_time, recovery_band
    schedule:   t_a, t_total
    attacks:    list of {kind, target|targets, t_a, waveform, magnitude}
    noise:      snr_db, seed
    dataset:    size, attack_prob, load_spread, omega_range, p_range, q_range,
                jitter_prob, omega_jitter, power_jitter
    estimator:  layers, width, learning_rate, max_epochs, patience, batch_size
    model:      shipped model name or path used by ANN-mode case runs
    assertions: {mitigated: {...}, unmitigated: {...}}
"""
from __future__ import annotations

import copy
import hashlib
import json
import zlib
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .comm import Arborescence, AttackSpec, CommGraph, TreeSet, build_tree_set
from .engine import EngineSettings
from .errors import ConfigError, GridSwitchError
from .estimator import MLPConfig, NoiseSpec, ScenarioSampler
from .grid import DroopParams, GridConfig, LineSpec
from .secondary import ControllerGains

SCENARIO_DIR = "scenarios"

# sections a child scenario replaces rather than merges
REPLACED_SECTIONS = {"assertions", "attacks"}

ASSERTION_KEYS = {
    "max_detection_latency", "max_recovery_after_trigger", "final_tree_admissible",
    "max_final_freq_err", "max_final_p_share_err", "max_final_q_share_err",
    "min_final_freq_err", "max_freq_dev_after_attack", "no_triggers",
}


def shipped_scenarios() -> list[str]:
    root = resources.files("gridswitch") / SCENARIO_DIR
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def shipped_path(name: str) -> Path:
    return Path(str(resources.files("gridswitch") / SCENARIO_DIR / f"{name}.yaml"))


def sub_seed(seed: int, name: str) -> int:
    """Independent, named child seed (sim, attack, noise, init, split, ...)."""
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k in REPLACED_SECTIONS:
            out[k] = copy.deepcopy(v)
        elif isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _read(path: Path, seen=()) -> dict:
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read scenario {path}: {exc}") from exc
    try:
        doc = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" line {mark.line + 1}" if mark else ""
        raise ConfigError(f"{path}:{where} YAML parse error: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    parent = doc.pop("extends", None)
    if parent:
        ppath = (path.parent / parent) if str(parent).endswith(".yaml") else shipped_path(parent)
        if not ppath.exists():
            ppath = shipped_path(parent)
        if ppath in seen:
            raise ConfigError(f"{path}: circular 'extends'")
        doc = _merge(_read(ppath, seen + (ppath,)), doc)
    return doc


@dataclass
class Scenario:
    name: str
    seed: int
    grid: GridConfig
    comm: CommGraph
    default_tree: Arborescence
    tree_source: str
    tree_cap: int
    tree_max_depth: int | None
    explicit_trees: list | None
    gains: ControllerGains
    engine: EngineSettings
    attacks: list
    noise: NoiseSpec
    t_a: float
    dataset: dict
    assertions: dict
    estimator: MLPConfig = MLPConfig()
    model: str | None = None
    raw: dict = field(repr=False, default_factory=dict)

    @property
    def n(self) -> int:
        return self.grid.n

    @cached_property
    def trees(self) -> TreeSet:
        if self.tree_source == "explicit":
            trees = [self.default_tree] + [t for t in self.explicit_trees if t != self.default_tree]
            for t in trees:
                t.validate(self.comm)
            return TreeSet(trees)
        return build_tree_set(self.comm, self.default_tree, cap=self.tree_cap,
                              max_depth=self.tree_max_depth)

    def digest(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def sampler(self) -> ScenarioSampler:
        d = self.dataset
        return ScenarioSampler(
            self.grid, self.trees, sorted(self.comm.links), self.gains,
            attack_prob=d.get("attack_prob", 0.5), load_spread=d.get("load_spread", 0.3),
            omega_range=tuple(d.get("omega_range", (0.2, 1.5))),
            p_range=tuple(d.get("p_range", (500.0, 3000.0))),
            q_range=tuple(d.get("q_range", (200.0, 1000.0))),
            jitter_prob=d.get("jitter_prob", 0.5), omega_jitter=d.get("omega_jitter", 0.01),
            power_jitter=d.get("power_jitter", 0.005))

    def seed_for(self, name: str) -> int:
        return sub_seed(self.seed, name)

    def explicit(self) -> dict:
        """Fully resolved settings, defaults included, in file units (DGs from 1)."""
        g = self.grid
        return {
            "name": self.name, "seed": self.seed,
            "grid": {"n": g.n, "tau_p": g.tau_p, "dt": g.dt, "t_total": g.t_total,
                     "s_base": g.s_base,
                     "droop": [vars(d) for d in g.droop],
                     "load_p": g.load_p.tolist(), "load_q": g.load_q.tolist(),
                     "lines": [{"endpoints": [a + 1, b + 1], "susceptance": l.susceptance,
                                "conductance": l.conductance}
                               for l in g.lines for a, b in [l.endpoints]]},
            "comm": {"n": self.comm.n,
                     "links": [[a + 1, b + 1] for a, b in sorted(self.comm.links)],
                     "leader_candidates": [c + 1 for c in self.comm.leader_candidates],
                     "default_tree": self.default_tree.to_dict()},
            "trees": {"source": self.tree_source, "cap": self.tree_cap,
                      "max_depth": self.tree_max_depth},
            "control": {"k1": self.gains.k1, "k2": self.gains.k2},
            "engine": vars(self.engine),
            "schedule": {"t_a": self.t_a, "t_total": g.t_total},
            "attacks": [_attack_doc(a) for a in self.attacks],
            "noise": {"snr_db": self.noise.snr_db, "seed": self.noise.seed},
            "dataset": self.dataset,
            "estimator": vars(self.estimator),
            "model": self.model,
            "assertions": self.assertions,
        }


def _attack_doc(a: AttackSpec) -> dict:
    target = a.target + 1 if a.kind == "FDI" else [a.target[0] + 1, a.target[1] + 1]
    return {"kind": a.kind, "target": target, "t_a": a.t_a, "waveform": a.waveform,
            "magnitude": dict(zip(("omega", "p", "q"), a.magnitude))}


def _dg(x, n, where) -> int:
    try:
        i = int(x)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: DG number expected, got {x!r}") from None
    if not 1 <= i <= n:
        raise ConfigError(f"{where}: DG {i} outside 1..{n}")
    return i - 1


def _links(spec, n, where):
    if spec == "ring":
        return [(i, (i + 1) % n) for i in range(n)] if n > 2 else [(0, 1)]
    if spec == "complete":
        return [(a, b) for a in range(n) for b in range(a + 1, n)]
    if isinstance(spec, dict):
        out = []
        for part in ("base", "extra"):
            if part in spec:
                out += _links(spec[part], n, f"{where}.{part}")
        return out
    if not isinstance(spec, list):
        raise ConfigError(f"{where}: expected 'ring', 'complete' or a list of pairs")
    out = []
    for k, pair in enumerate(spec):
        if isinstance(pair, dict):
            pair = pair.get("endpoints")
        if not isinstance(pair, (list, tuple)) or len(pair) != 2:
            raise ConfigError(f"{where}[{k}]: expected a pair of DG numbers")
        out.append((_dg(pair[0], n, f"{where}[{k}]"), _dg(pair[1], n, f"{where}[{k}]")))
    return out


def _tree(doc, n, where) -> Arborescence:
    if "chain" in doc:
        return Arborescence.chain([_dg(x, n, f"{where}.chain") for x in doc["chain"]])
    if "branches" in doc:
        root = _dg(doc["root"], n, f"{where}.root")
        edges = set()
        for br in doc["branches"]:
            path = [root] + [_dg(x, n, f"{where}.branches") for x in br]
            edges |= set(zip(path[:-1], path[1:]))
        return Arborescence(root, frozenset(edges))
    if "star" in doc:
        return Arborescence.star(_dg(doc["star"], n, f"{where}.star"), n)
    if "edges" in doc:
        root = _dg(doc["root"], n, f"{where}.root")
        return Arborescence(root, frozenset(
            (_dg(a, n, where), _dg(b, n, where)) for a, b in doc["edges"]))
    raise ConfigError(f"{where}: tree needs 'chain', 'branches', 'star' or 'root'+'edges'")


def _magnitude(m, where):
    if isinstance(m, dict):
        unknown = set(m) - {"omega", "p", "q"}
        if unknown:
            raise ConfigError(f"{where}: unknown channels {sorted(unknown)}")
        return (float(m.get("omega", 0.0)), float(m.get("p", 0.0)), float(m.get("q", 0.0)))
    if isinstance(m, (list, tuple)) and len(m) == 3:
        return tuple(float(x) for x in m)
    raise ConfigError(f"{where}: magnitude needs omega/p/q")


def _attacks(docs, n, t_a_default, where):
    out = []
    for k, d in enumerate(docs or []):
        w = f"{where}[{k}]"
        kind = str(d.get("kind", "")).upper()
        if kind not in ("FDI", "MITM"):
            raise ConfigError(f"{w}.kind: expected FDI or MITM, got {d.get('kind')!r}")
        targets = d.get("targets", [d["target"]] if "target" in d else None)
        if not targets:
            raise ConfigError(f"{w}: needs 'target' or 'targets'")
        t_a = float(d.get("t_a", t_a_default))
        mag = _magnitude(d.get("magnitude", {}), f"{w}.magnitude")
        for tg in targets:
            if kind == "FDI":
                target = _dg(tg, n, f"{w}.target")
            else:
                if not isinstance(tg, (list, tuple)) or len(tg) != 2:
                    raise ConfigError(f"{w}.target: MITM target must be a DG pair")
                target = (_dg(tg[0], n, f"{w}.target"), _dg(tg[1], n, f"{w}.target"))
            out.append(AttackSpec(kind, target, t_a, mag, d.get("waveform", "bias")))
    return out


def parse_scenario(doc: dict, name: str = "scenario") -> Scenario:
    raw = copy.deepcopy(doc)
    try:
        return _parse(doc, name, raw)
    except GridSwitchError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: invalid scenario ({exc})") from exc


def _parse(doc, name, raw):
    g = doc.get("grid", {})
    c = doc.get("comm", {})
    sched = doc.get("schedule", {})
    if "n" not in g:
        raise ConfigError("grid.n is required")
    n = int(g["n"])
    if "n" in c and int(c["n"]) != n:
        raise ConfigError(f"grid.n = {n} disagrees with comm.n = {c['n']}")
    t_total = float(sched.get("t_total", g.get("t_total", 10.0)))
    if "t_total" in g and float(g["t_total"]) != t_total:
        raise ConfigError(f"grid.t_total = {g['t_total']} disagrees with "
                          f"schedule.t_total = {t_total}")
    t_a = float(sched.get("t_a", 5.0))
    if not t_a < t_total:
        raise ConfigError(f"schedule.t_a = {t_a} must be before schedule.t_total = {t_total}")

    droop_doc = g.get("droop", {})
    droops = [DroopParams(**d) for d in droop_doc] if isinstance(droop_doc, list) else \
        [DroopParams(**droop_doc)] * n
    line_def = g.get("line_defaults", {})
    line_docs = g.get("lines", "ring")
    lines = []
    for k, (a, b) in enumerate(_links(line_docs, n, "grid.lines")):
        extra = line_docs[k] if isinstance(line_docs, list) and isinstance(line_docs[k], dict) \
            else {}
        lines.append(LineSpec((a, b), float(extra.get("susceptance", line_def.get(
            "susceptance", 0.5))), float(extra.get("conductance", line_def.get(
                "conductance", 1000.0)))))

    def per_dg(key, default):
        v = g.get(key, default)
        arr = np.broadcast_to(np.asarray(v, float), (n,)) if np.ndim(v) == 0 else np.asarray(
            v, float)
        if arr.shape != (n,):
            raise ConfigError(f"grid.{key} needs {n} entries, got {len(arr)}")
        return arr.copy()

    grid = GridConfig(n=n, droop=droops, lines=lines, load_p=per_dg("load_p", 8e3),
                      load_q=per_dg("load_q", 2e3), tau_p=float(g.get("tau_p", 0.05)),
                      dt=float(g.get("dt", 1e-3)), t_total=t_total)

    cands = c.get("leader_candidates", "all")
    cands = None if cands == "all" else [_dg(x, n, "comm.leader_candidates") for x in cands]
    comm = CommGraph(n, frozenset(_links(c.get("links", "complete"), n, "comm.links")), cands)
    default_tree = _tree(c.get("default_tree", {"chain": list(range(1, n + 1))}), n,
                         "comm.default_tree")
    default_tree.validate(comm)

    t = doc.get("trees", {})
    source = t.get("source", "enumerated")
    if source not in ("enumerated", "explicit"):
        raise ConfigError(f"trees.source must be 'enumerated' or 'explicit', got {source!r}")
    explicit = [_tree(d, n, f"trees.list[{k}]") for k, d in enumerate(t.get("list", []))] \
        if source == "explicit" else None

    ctl = doc.get("control", {})
    gains = ControllerGains(float(ctl.get("k1", 40.0)), float(ctl.get("k2", 20.0)))
    eng = EngineSettings(**{k: float(v) for k, v in doc.get("engine", {}).items()})
    attacks = _attacks(doc.get("attacks"), n, t_a, "attacks")
    for a in attacks:
        a.check(comm)
    nz = doc.get("noise", {})
    seed = int(doc.get("seed", 0))
    noise = NoiseSpec(float(nz.get("snr_db", float("inf"))), int(nz.get("seed", sub_seed(
        seed, "noise"))))
    md = t.get("max_depth")
    assertions = dict(doc.get("assertions", {}))
    for mode, checks in assertions.items():
        if mode not in ("mitigated", "unmitigated"):
            raise ConfigError(f"assertions.{mode}: expected 'mitigated' or 'unmitigated'")
        unknown = set(checks or {}) - ASSERTION_KEYS
        if unknown:
            raise ConfigError(f"assertions.{mode}: unknown checks {sorted(unknown)}")
    est = doc.get("estimator", {})
    unknown = set(est) - set(MLPConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"estimator: unknown fields {sorted(unknown)}")
    return Scenario(
        name=doc.get("name", name), seed=seed, grid=grid, comm=comm,
        default_tree=default_tree, tree_source=source, tree_cap=int(t.get("cap", 100_000)),
        tree_max_depth=None if md is None else int(md), explicit_trees=explicit,
        gains=gains, engine=eng, attacks=attacks, noise=noise, t_a=t_a,
        dataset=dict(doc.get("dataset", {})), assertions=assertions,
        estimator=MLPConfig(**est), model=doc.get("model"), raw=raw)


def load_scenario(path) -> Scenario:
    """Load a scenario file, or a shipped scenario by bare name."""
    p = Path(path)
    if not p.exists() and not str(path).endswith(".yaml"):
        p = shipped_path(str(path))
    if not p.exists():
        raise ConfigError(f"no scenario file or shipped scenario named {path!r}")
    return parse_scenario(_read(p), p.stem)
