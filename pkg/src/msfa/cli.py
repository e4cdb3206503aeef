"""Command line front end: ``msfa {simulate,fit,select,cv,compare}``.

Human-readable summaries go to standard output, artifacts to files in the
output directory (``--out``, else ``$MSFA_OUT``, else ``./msfa_out``).
Failures print one ``error[<category>]: <message>`` line on standard error
and exit with status 2.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .ecm import FitConfig, fit_msfa
from .evaluation import cv_mse, loading_correlations, rv_coefficient
from .exceptions import MsfaError, PreconditionError
from .model import FactorDims
from .selection import horn_parallel_analysis, select_k
from .simulation import (
    generate_true_params,
    run_scenario_study,
    scenario,
    simulate_dataset,
)


def _int_list(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip() != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _k_range(text: str) -> list:
    try:
        if ":" in text:
            lo, hi = text.split(":")
            return list(range(int(lo), int(hi) + 1))
        return _int_list(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO:HI or a list, got {text!r}")


def _add_common(p, data=True):
    p.add_argument("--out", help="output directory (default $MSFA_OUT or ./msfa_out)")
    p.add_argument("--seed", type=int, help="random seed (drawn and printed if omitted)")
    p.add_argument("--config", help="JSON project config; flags take precedence")
    p.add_argument("--threads", type=int,
                   help="worker cap for replicates (default: all CPUs)")
    if data:
        p.add_argument("--data", nargs="+", help="study CSV files")
        p.add_argument("--policy", choices=["intersect", "require-equal"])
        p.add_argument("--standardize", action="store_true", default=None)
        p.add_argument("--tol", type=float)
        p.add_argument("--max-iter", type=int)
        p.add_argument("--no-accelerate", action="store_true",
                       help="plain ECM steps instead of the accelerated cycle")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msfa", description="Multi-study factor analysis")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a scenario dataset")
    p.add_argument("--scenario", type=int)
    p.add_argument("--p", type=int, help="number of variables (default 100)")
    p.add_argument("--scale", type=float, help="loading scale (default 1)")
    p.add_argument("--replicates", type=int,
                   help="also run the selection study over this many replicates")
    p.add_argument("--k-range", type=_k_range, help="candidate K for replicates (default 0:5)")
    _add_common(p, data=False)

    p = sub.add_parser("fit", help="fit an MSFA model")
    p.add_argument("--k", type=int)
    p.add_argument("--j", type=_int_list)
    p.add_argument("--dims", help='JSON file {"K": k, "J": [...]}')
    _add_common(p)

    p = sub.add_parser("select", help="choose the number of common factors")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--t", type=_int_list, help="per-study total dimensions")
    g.add_argument("--auto-t", action="store_true", help="parallel analysis per study")
    p.add_argument("--k-range", type=_k_range)
    _add_common(p)

    p = sub.add_parser("cv", help="cross-validated reconstruction error")
    p.add_argument("--k", type=int)
    p.add_argument("--j", type=_int_list)
    p.add_argument("--dims")
    p.add_argument("--split", type=float, help="training fraction (default 0.8)")
    p.add_argument("--folds", type=int, help="number of random splits (default 1)")
    p.add_argument("--fa-merged-t", type=int, help="factors for the stacked FA baseline")
    _add_common(p)

    p = sub.add_parser("compare", help="RV coefficient and loading correlations of two fits")
    p.add_argument("fit_a")
    p.add_argument("fit_b")
    p.add_argument("--threshold", type=float, default=0.2)
    p.add_argument("--study-a", type=int, default=1)
    p.add_argument("--study-b", type=int, default=1)
    p.add_argument("--block", choices=["all", "common", "specific"], default="all")
    p.add_argument("--out")
    return parser


# ---------------------------------------------------------------------------


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    seed = int(np.random.SeedSequence().entropy % (2**32))
    print(f"seed: {seed}")
    return seed


def _project(args, seed) -> io.ProjectConfig:
    base = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            base = json.load(fh)
    if args.data:
        base["study_paths"] = list(args.data)
    if not base.get("study_paths"):
        raise PreconditionError("no study files given (use --data or --config)")
    if getattr(args, "policy", None):
        base["variable_policy"] = args.policy
    if getattr(args, "standardize", None):
        base["standardize"] = True
    fit = dict(base.get("fit", {}))
    fit["seed"] = seed
    if args.tol is not None:
        fit["tol"] = args.tol
    if args.max_iter is not None:
        fit["max_iter"] = args.max_iter
    if args.no_accelerate:
        fit["accelerate"] = False
    base["fit"] = fit
    for key in ("k", "j"):
        val = getattr(args, key, None)
        if val is not None:
            base[key.upper()] = val
    if getattr(args, "t", None):
        base["T"] = args.t
    if getattr(args, "auto_t", False):
        base["auto_t"] = True
    if getattr(args, "k_range", None) is not None:
        base["k_range"] = args.k_range
    if getattr(args, "split", None) is not None:
        base["split_fraction"] = args.split
    if getattr(args, "folds", None) is not None:
        base["n_folds"] = args.folds
    base["output_dir"] = str(args.out or base.get("output_dir") or io.output_dir())
    try:
        return io.ProjectConfig(**base)
    except TypeError as exc:
        raise PreconditionError(f"bad config: {exc}") from exc


def _dims(args, cfg: io.ProjectConfig) -> FactorDims:
    if getattr(args, "dims", None):
        with open(args.dims, encoding="utf-8") as fh:
            d = json.load(fh)
        return FactorDims(d["K"], tuple(d["J"]))
    if cfg.K is None or cfg.J is None:
        raise PreconditionError("give --k and --j (or --dims)")
    return FactorDims(cfg.K, tuple(cfg.J))


SIMULATE_DEFAULTS = {"scenario": None, "p": 100, "scale": 1.0, "replicates": 0,
                     "k_range": list(range(6)), "seed": None, "out": None}


def cmd_simulate(args) -> int:
    conf = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            conf = json.load(fh)
        unknown = set(conf) - set(SIMULATE_DEFAULTS)
        if unknown:
            raise PreconditionError(f"unknown simulate config keys: {sorted(unknown)}")
    for key, default in SIMULATE_DEFAULTS.items():
        if getattr(args, key) is None:
            setattr(args, key, conf.get(key, default))
    if args.scenario is None:
        raise PreconditionError("--scenario is required")
    if isinstance(args.k_range, str):
        args.k_range = _k_range(args.k_range)
    seed = _seed(args)
    spec = scenario(args.scenario, P=args.p, loading_scale=args.scale, seed=seed)
    out = io.output_dir(args.out)
    params = generate_true_params(spec)
    data, _ = simulate_dataset(params, spec.n, seed=seed + 1)
    paths = io.save_dataset(data, out)
    io._write_json({"format": "msfa-params", "format_version": io.FORMAT_VERSION,
                    "scenario": spec.to_dict(), **io.params_to_dict(params)},
                   out / "true_params.json")
    print(f"scenario {args.scenario}: K={spec.K}, T={list(spec.T)}, n={list(spec.n)}, P={spec.P}")
    print(f"wrote {len(paths)} study files and true_params.json to {out}")
    if args.replicates:
        workers = args.threads or os.cpu_count() or 1
        table = run_scenario_study(spec, args.replicates, args.k_range,
                                   FitConfig(seed=seed), workers=max(1, workers))
        io.save_scenario_table(table, out / io.SCENARIO_TABLE_FILE)
        print(table.to_csv(), end="")
        if table.n_failed:
            print(f"{table.n_failed} replicate(s) failed")
    return 0


def cmd_fit(args) -> int:
    seed = _seed(args)
    cfg = _project(args, seed)
    data = io.load_studies(cfg)
    dims = _dims(args, cfg)
    fit = fit_msfa(data, dims, cfg.fit)
    out = Path(cfg.output_dir)
    io.save_fit(fit, out / io.FIT_FILE, data.variable_names)
    print(f"K={dims.K} J={list(dims.J)} P={data.P} studies={data.S}")
    print(f"loglik {fit.final_loglik:.6f}  q {fit.n_free_params}  "
          f"AIC {fit.aic:.6f}  BIC {fit.bic:.6f}")
    print(f"iterations {fit.iterations}  converged {fit.converged}")
    return 0


def cmd_select(args) -> int:
    seed = _seed(args)
    cfg = _project(args, seed)
    data = io.load_studies(cfg)
    if cfg.auto_t:
        T = [horn_parallel_analysis(x, seed=seed + s, variable_names=data.variable_names)
             for s, x in enumerate(data.studies)]
        print(f"parallel analysis T = {T}")
    elif cfg.T:
        T = list(cfg.T)
    else:
        raise PreconditionError("give --t or --auto-t")
    ks = cfg.k_range if cfg.k_range is not None else list(range(min(T) + 1))
    report = select_k(data, T, ks, cfg.fit)
    io.save_selection(report, Path(cfg.output_dir) / io.SELECTION_FILE)
    print(report.summary())
    return 0


def cmd_cv(args) -> int:
    seed = _seed(args)
    cfg = _project(args, seed)
    data = io.load_studies(cfg)
    dims = _dims(args, cfg)
    report = cv_mse(data, dims, cfg.split_fraction, cfg.n_folds, cfg.fit,
                    fa_merged_T=args.fa_merged_t)
    io.save_cv_report(report, Path(cfg.output_dir) / io.CV_FILE)
    print(report.summary())
    return 0


def _block(fit, study, block):
    p = fit.params
    if not 1 <= study <= p.S:
        raise PreconditionError(f"study {study} out of range 1..{p.S}")
    s = study - 1
    if block == "common":
        return p.phi
    if block == "specific":
        return p.lambdas[s]
    return p.omega(s)


def cmd_compare(args) -> int:
    a = io.load_fit(args.fit_a)
    b = io.load_fit(args.fit_b)
    la = _block(a, args.study_a, args.block)
    lb = _block(b, args.study_b, args.block)
    if la.shape[1] == 0 or lb.shape[1] == 0:
        raise PreconditionError(f"{args.block} block is empty")
    rv = rv_coefficient(la, lb)
    _, edges = loading_correlations(la, lb, args.threshold)
    out = io.output_dir(args.out)
    io.save_edges(edges, out / io.EDGES_FILE)
    print(f"RV = {rv:.6f}")
    print(f"{len(edges)} loading pairs with |corr| >= {args.threshold}")
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "select": cmd_select,
    "cv": cmd_cv,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except MsfaError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        print(f"error[input]: {exc}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
