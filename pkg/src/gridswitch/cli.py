"""Command-line entry point: ``gridswitch <command> [options]``.

Exit codes: 0 success, 1 case assertions failed, 2 configuration or input
error, 3 numerical/engine failure.  Failures print a one-line JSON reason
on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from . import harness
from .errors import ConfigError, DataError, GridSwitchError, ShapeError
from .estimator import Dataset, load_model
from .scenario import load_scenario, shipped_scenarios

EXIT_OK, EXIT_ASSERT, EXIT_CONFIG, EXIT_ENGINE = 0, 1, 2, 3


def _scenario(args):
    sc = load_scenario(args.scenario)
    if args.seed is not None:
        sc.seed = args.seed
    return sc


def _out(args) -> Path:
    p = Path(args.out_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _print(doc) -> None:
    print(json.dumps(harness._jsonable(doc), indent=1))


def _snr(text: str) -> float:
    return math.inf if text.lower() in ("inf", "infinity", "none") else float(text)


def cmd_simulate(args) -> int:
    sc = _scenario(args)
    _, summary = harness.run_simulation(sc, _out(args))
    _print(summary)
    return EXIT_OK


def cmd_enumerate(args) -> int:
    doc = harness.enumerate_graph(args.graph, args.root, args.cap, args.dump)
    _print(doc)
    return EXIT_OK


def cmd_gen_data(args) -> int:
    sc = _scenario(args)
    out = Path(args.output or _out(args) / f"{sc.name}_data.csv")
    data = harness.gen_data(sc, args.size, args.snr, out)
    _print({"rows": len(data), "attacked": int(data.attacked.sum()), "path": str(out)})
    return EXIT_OK


def cmd_train(args) -> int:
    sc = _scenario(args)
    data = Dataset.from_csv(args.data) if args.data else harness.gen_data(sc, args.size, args.snr)
    out = Path(args.output or _out(args) / f"{sc.name}_model.json")
    _, report, info = harness.train_model(sc, data, out)
    _print({"model": str(out), "sigma": info["sigma"], **report.to_dict()})
    return EXIT_OK


def cmd_evaluate(args) -> int:
    params, info = load_model(harness.resolve_model(args.model))
    data = Dataset.from_csv(args.data)
    if data.x.shape[1] != params.sizes[0]:
        raise ShapeError(f"model expects {params.sizes[0]} features, data has "
                         f"{data.x.shape[1]}")
    _print(harness.evaluate_model(params, data, info.get("sigma")))
    return EXIT_OK


def cmd_run_case(args) -> int:
    sc = _scenario(args)
    report, _ = harness.run_case(sc, analytic=args.analytic, model=args.model, sigma=args.sigma,
                                 mitigation=not args.no_mitigation, out_dir=_out(args))
    _print(report.to_dict())
    return EXIT_OK if report.passed else EXIT_ASSERT


def cmd_pipeline(args) -> int:
    sc = _scenario(args)
    rows = harness.pipeline(sc, args.sizes, [_snr(s) for s in args.snr], _out(args))
    _print({"columns": harness.TABLE_COLUMNS, "rows": rows})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gridswitch", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def scenario_cmd(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("scenario", help=f"scenario file or shipped name ({', '.join(shipped_scenarios())})")
        p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
        p.add_argument("--out-dir", default="out")
        p.set_defaults(func=fn)
        return p

    scenario_cmd("simulate", cmd_simulate, "open-loop run on the default tree")

    p = sub.add_parser("enumerate", help="count (and optionally dump) spanning arborescences")
    p.add_argument("graph", help="complete:N, ring:N or a scenario")
    p.add_argument("--root", type=int, default=None, help="1-based root; default all candidates")
    p.add_argument("--cap", type=int, default=100_000)
    p.add_argument("--dump", default=None, help="write the tree set as JSON")
    p.set_defaults(func=cmd_enumerate)

    p = scenario_cmd("gen-data", cmd_gen_data, "generate a labelled dataset CSV")
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--snr", type=_snr, default=None, help="SNR in dB (default: scenario noise)")
    p.add_argument("-o", "--output", default=None)

    p = scenario_cmd("train", cmd_train, "train the estimator and calibrate sigma")
    p.add_argument("--data", default=None, help="dataset CSV (default: generate one)")
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--snr", type=_snr, default=None)
    p.add_argument("-o", "--output", default=None)

    p = sub.add_parser("evaluate", help="metrics of a model on a dataset CSV")
    p.add_argument("model", help="model JSON or shipped model name")
    p.add_argument("data")
    p.set_defaults(func=cmd_evaluate)

    p = scenario_cmd("run-case", cmd_run_case, "closed-loop case study with report")
    p.add_argument("--model", default=None, help="model JSON (default: scenario model)")
    p.add_argument("--analytic", action="store_true", help="exact abnormality, no ANN")
    p.add_argument("--no-mitigation", action="store_true", help="detect only, never switch")
    p.add_argument("--sigma", type=float, default=None, help="override the threshold")

    p = scenario_cmd("pipeline", cmd_pipeline, "dataset/train/evaluate table over SNR levels")
    p.add_argument("--sizes", type=int, nargs="+", default=None)
    p.add_argument("--snr", nargs="+", default=["inf", "75", "40"])
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataError, ShapeError, FileNotFoundError) as exc:
        return _fail(exc, EXIT_CONFIG)
    except GridSwitchError as exc:
        return _fail(exc, EXIT_ENGINE)


def _fail(exc: Exception, code: int) -> int:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}),
          file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
