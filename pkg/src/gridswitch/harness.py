"""Experiment pipelines and case-study runs behind the command line.

Every function here takes a loaded :class:`~gridswitch.scenario.Scenario`
and writes plain CSV/JSON artifacts.  DG numbers in written files start
at 1.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .comm import (CommGraph, admissible_mask, build_tree_set, count_arborescences,
                   enumerate_arborescences)
from .engine import (AnalyticDetector, ANNDetector, ClosedLoopResult, ThresholdPolicy,
                     calibrate_sigma, run_closed_loop, true_health)
from .errors import ConfigError, DivergenceError
from .estimator import (Dataset, MLPParams, NoiseSpec, add_noise, evaluate, generate_dataset,
                        load_model, save_model, split, train)
from .scenario import Scenario, load_scenario
from .secondary import objectives_residual

log = logging.getLogger(__name__)

MODEL_DIR = "models"
SPLITS = ("train", "validation", "test")
TABLE_COLUMNS = (["size", "snr_db"] + [f"{s}_{m}" for s in SPLITS for m in ("mae", "mse", "rmse")]
                 + ["normalized_test_mae", "epochs", "status"])


def shipped_model_path(name: str) -> Path:
    return Path(str(resources.files("gridswitch") / MODEL_DIR / f"{name}.json"))


def resolve_model(ref: str | None) -> Path | None:
    if ref is None:
        return None
    p = Path(ref)
    if p.exists():
        return p
    p = shipped_model_path(str(ref))
    if p.exists():
        return p
    raise ConfigError(f"no model file or shipped model named {ref!r}")


def _jsonable(x):
    if isinstance(x, float) and not math.isfinite(x):
        return "inf" if x > 0 else ("-inf" if x < 0 else "nan")
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return _jsonable(x.item())
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    return x


def write_json(path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(doc), fh, indent=1, sort_keys=False)
        fh.write("\n")


# ---------------------------------------------------------------------------
# detectors


def build_detector(sc: Scenario, analytic: bool = False, model: str | None = None,
                   sigma: float | None = None):
    """Detector and threshold for a case run.

    The analytic detector borrows the model's calibrated threshold so that
    both modes are judged against the same sigma; ``sigma`` overrides it.
    """
    path = resolve_model(model if model is not None else sc.model)
    params, info = (None, {})
    if path is not None:
        params, info = load_model(path)
        if int(info.get("n", sc.n)) != sc.n:
            raise ConfigError(f"model {path} was trained for n = {info['n']}, scenario has "
                              f"n = {sc.n}")
    if sigma is None:
        sigma = info.get("sigma")
    if sigma is None:
        raise ConfigError("no detection threshold: give a model with a calibrated sigma or "
                          "pass --sigma")
    policy = ThresholdPolicy(float(sigma))
    if analytic:
        return AnalyticDetector(sc.grid, sc.gains), policy
    if params is None:
        raise ConfigError("ANN mode needs a model (scenario 'model' or --model)")
    return ANNDetector(params), policy


# ---------------------------------------------------------------------------
# case studies


@dataclass
class CaseReport:
    scenario: str
    digest: str
    detector: str
    mitigation: bool
    sigma: float
    residuals: dict
    triggers: list
    decisions: list
    detection_latency: float | None
    recovery_time: float | None
    recovery_after_trigger: float | None
    max_freq_dev_after_attack: float | None
    compromised: bool
    final_tree: dict
    trajectory_csv: str | None
    assertions: dict = field(default_factory=dict)
    passed: bool = True
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))


def _check(name, actual, bound) -> dict:
    if name == "final_tree_admissible" or name == "no_triggers":
        ok = bool(actual) == bool(bound)
    elif name.startswith("min_"):
        ok = actual is not None and actual > bound
    else:
        ok = actual is not None and actual <= bound
    return {"expected": bound, "actual": actual, "passed": bool(ok)}


def case_metrics(res: ClosedLoopResult, sc: Scenario) -> dict:
    traj = res.trajectory
    freq = res.freq_error(sc.grid.omega_ref)
    t_a = res.attack_start
    rec = res.recovery_time(sc.engine.recovery_band, sc.grid.omega_ref)
    trig = res.first_trigger
    after_trig = None
    if rec is not None and trig is not None:
        after_trig = max(0.0, rec - trig.time)
    elif rec is not None and t_a is not None and rec <= t_a:
        after_trig = 0.0
    mask = admissible_mask(res.trees, true_health(res.attacks))
    final_idx = int(traj.extra["active_tree_index"][-1])
    return {
        "detection_latency": res.detection_latency,
        "recovery_time": rec,
        "recovery_after_trigger": after_trig,
        "max_freq_dev_after_attack": None if t_a is None else float(freq[traj.t >= t_a].max()),
        "final_freq_err": res.residuals["freq_err"],
        "final_p_share_err": res.residuals["p_share_err"],
        "final_q_share_err": res.residuals["q_share_err"],
        "final_tree_admissible": bool(mask[final_idx]),
        "no_triggers": not res.triggers,
    }


def check_assertions(res: ClosedLoopResult, sc: Scenario, mitigation: bool) -> dict:
    checks = sc.assertions.get("mitigated" if mitigation else "unmitigated") or {}
    m = case_metrics(res, sc)
    out = {}
    for name, bound in checks.items():
        key = name if name in m else name[4:]
        out[name] = _check(name, m.get(key), bound)
    return out


def run_case(sc: Scenario, analytic: bool = False, model: str | None = None,
             sigma: float | None = None, mitigation: bool = True,
             out_dir: str | Path | None = None) -> tuple[CaseReport, ClosedLoopResult]:
    """Closed-loop case study; writes ``<name>[_unmitigated]_{trajectory.csv,report.json}``."""
    t0 = time.perf_counter()
    detector, policy = build_detector(sc, analytic, model, sigma)
    res = run_closed_loop(sc.grid, sc.comm, sc.trees, sc.attacks, detector, policy, sc.gains,
                          sc.engine, mitigation=mitigation)
    checks = check_assertions(res, sc, mitigation)
    m = case_metrics(res, sc)
    stem = sc.name + ("" if mitigation else "_unmitigated")
    csv_path = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / f"{stem}_trajectory.csv"
        res.trajectory.to_csv(csv_path)
    report = CaseReport(
        scenario=sc.name, digest=sc.digest(), detector="analytic" if analytic else "ann",
        mitigation=mitigation, sigma=policy.sigma, residuals=res.residuals,
        triggers=[{"time": tr.time, "estimate": tr.estimate, "tree_index": tr.tree_index}
                  for tr in res.triggers],
        decisions=[{"time": d.time, "index": d.index, "tree": sc.trees[d.index].to_dict(),
                    "n_conforming": int(np.sum(np.abs(d.estimates) <= policy.sigma)),
                    "search_time": d.search_time} for d in res.decisions],
        detection_latency=m["detection_latency"], recovery_time=m["recovery_time"],
        recovery_after_trigger=m["recovery_after_trigger"],
        max_freq_dev_after_attack=m["max_freq_dev_after_attack"],
        compromised=res.compromised, final_tree=res.final_tree.to_dict(),
        trajectory_csv=None if csv_path is None else str(csv_path), assertions=checks,
        passed=all(c["passed"] for c in checks.values()),
        wall_time=time.perf_counter() - t0)
    if out_dir is not None:
        write_json(Path(out_dir) / f"{stem}_report.json", report.to_dict())
    return report, res


def run_simulation(sc: Scenario, out_dir=None):
    """Open-loop run on the default tree (attacks applied, no detector)."""
    res = run_closed_loop(sc.grid, sc.comm, sc.trees, sc.attacks,
                          gains=sc.gains, settings=sc.engine)
    traj = res.trajectory
    summary = {"scenario": sc.name, "digest": sc.digest(), "samples": len(traj),
               "residuals": objectives_residual(traj, sc.grid.droop)._asdict()}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        traj.to_csv(out / f"{sc.name}_simulation.csv")
        write_json(out / f"{sc.name}_simulation.json", summary)
    return traj, summary


# ---------------------------------------------------------------------------
# enumeration


def graph_from_spec(spec: str) -> tuple[CommGraph, Scenario | None]:
    """``complete:N``, ``ring:N`` or a scenario name/path."""
    if ":" in spec and spec.split(":", 1)[0] in ("complete", "ring"):
        kind, n = spec.split(":", 1)
        try:
            n = int(n)
        except ValueError:
            raise ConfigError(f"bad graph size in {spec!r}") from None
        if n < 1:
            raise ConfigError("graph needs at least one node")
        if n == 1:
            return CommGraph(1, frozenset()), None
        return getattr(CommGraph, kind)(n), None
    sc = load_scenario(spec)
    return sc.comm, sc


def enumerate_graph(spec: str, root: int | None = None, cap: int = 100_000,
                    dump: str | Path | None = None) -> dict:
    """Count rooted spanning arborescences and check against the matrix-tree count.

    ``root`` is 1-based; by default every leader candidate is counted.
    """
    graph, sc = graph_from_spec(spec)
    roots = graph.leader_candidates if root is None else (root - 1,)
    for r in roots:
        if not 0 <= r < graph.n:
            raise ConfigError(f"root {r + 1} outside 1..{graph.n}")
    per_root, trees = {}, []
    for r in roots:
        ts = enumerate_arborescences(graph, r, cap)
        oracle = count_arborescences(graph, r)
        if len(ts) != oracle:
            raise AssertionError(f"enumerated {len(ts)} trees for root {r + 1}, "
                                 f"matrix-tree count is {oracle}")
        per_root[r + 1] = len(ts)
        trees.extend(ts)
    doc = {"graph": spec, "n": graph.n, "count": sum(per_root.values()), "per_root": per_root,
           "verified": True}
    tree_set = None
    if sc is not None:
        tree_set = sc.trees
        doc["candidate_count"] = len(tree_set)
        doc["max_depth"] = sc.tree_max_depth
    if dump is not None:
        if tree_set is None:
            tree_set = build_tree_set(graph, roots=roots, cap=cap)
        Path(dump).write_text(tree_set.to_json())
    return doc


# ---------------------------------------------------------------------------
# data, training, evaluation


def gen_data(sc: Scenario, size: int | None = None, snr_db: float | None = None,
             out: str | Path | None = None) -> Dataset:
    size = int(size or sc.dataset.get("size", 100_000))
    data = generate_dataset(sc.sampler(), size, sc.seed_for("data"))
    snr = sc.noise.snr_db if snr_db is None else snr_db
    data = add_noise(data, NoiseSpec(snr, sc.seed_for("noise")))
    if out is not None:
        data.to_csv(out)
    return data


def train_model(sc: Scenario, data: Dataset, out: str | Path | None = None):
    """Train on a 64/16/20 split and calibrate sigma on the clean validation rows."""
    splits = split(data, sc.seed_for("split"))
    config = replace(sc.estimator, seed=sc.seed_for("init"))
    params, report = train(splits, config)
    val = splits.validation
    policy = calibrate_sigma(params.predict(val.x[~val.attacked]))
    info = {"n": sc.n, "k1": sc.gains.k1, "k2": sc.gains.k2, "sigma": policy.sigma,
            "sigma_quantile": policy.quantile, "sigma_safety_factor": policy.safety_factor,
            "scenario": sc.name, "seed": sc.seed, "report": _jsonable(report.to_dict())}
    if out is not None:
        save_model(out, params, **info)
    return params, report, info


def evaluate_model(params: MLPParams, data: Dataset, sigma: float | None = None) -> dict:
    m = evaluate(params, data)
    doc = {"rows": len(data), **m._asdict(),
           "normalized_mae": m.mae / (float(np.std(data.y)) or 1.0)}
    pred = params.predict(data.x)
    clean, att = np.abs(pred[~data.attacked]), np.abs(pred[data.attacked])
    if clean.size and att.size:
        doc["separation"] = float(np.mean(att) / max(np.mean(clean), 1e-12))
    if sigma is not None:
        if clean.size:
            doc["false_trigger_rate"] = float(np.mean(clean > sigma))
        if att.size:
            doc["detection_rate"] = float(np.mean(att > sigma))
    return doc


def pipeline(sc: Scenario, sizes=None, snr_list=(math.inf,), out_dir=None) -> list[dict]:
    """Dataset, split, train and evaluate for every (size, SNR) pair.

    One clean dataset is drawn per size; each SNR row adds its own noise
    with the same noise seed.  A diverged row is recorded and skipped.
    """
    sizes = list(sizes or [int(sc.dataset.get("size", 100_000))])
    rows = []
    for size in sizes:
        clean = generate_dataset(sc.sampler(), int(size), sc.seed_for("data"))
        for snr in snr_list:
            data = add_noise(clean, NoiseSpec(float(snr), sc.seed_for("noise")))
            row = {"size": int(size), "snr_db": float(snr)}
            try:
                splits = split(data, sc.seed_for("split"))
                _, rep = train(splits, replace(sc.estimator, seed=sc.seed_for("init")))
            except DivergenceError as exc:
                log.warning("size %d, SNR %s dB diverged: %s", size, snr, exc)
                row.update({c: math.nan for c in TABLE_COLUMNS[2:-2]})
                row.update(epochs=exc.epoch, status="diverged")
            else:
                for s in SPLITS:
                    for k, v in getattr(rep, s)._asdict().items():
                        row[f"{s}_{k}"] = v
                row.update(normalized_test_mae=rep.normalized_mae("test"),
                           epochs=rep.epochs_run, status="ok")
            rows.append(row)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_table_csv(out / f"{sc.name}_table.csv", rows)
        write_json(out / f"{sc.name}_table.json", {"scenario": sc.name, "digest": sc.digest(),
                                                   "seed": sc.seed, "columns": TABLE_COLUMNS,
                                                   "rows": rows})
    return rows


def _cell(v):
    if isinstance(v, float):
        return "inf" if v == math.inf else repr(v)
    return str(v)


def write_table_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE_COLUMNS)
        for r in rows:
            w.writerow([_cell(r[c]) for c in TABLE_COLUMNS])
