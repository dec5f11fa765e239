"""Command-line front end: ``edrel simulate | analyze | reproduce``.

Every run writes its artifacts into ``--out`` together with
``manifest.json`` (config echo, package version, seed, artifact list).  For
a fixed config and seed all artifacts are byte-identical across runs and
worker counts.  Errors print one line ``error: code=<code> message=<text>``
to stderr and exit with status 2 (usage and configuration) or 1 (anything
else).
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
from dataclasses import replace

from . import __version__
from . import simlab as S
from .analysis import (ANALYZE_ESTIMATORS, analyze_mean, analyze_two_group, format_report, read_table,
                       synthetic_lalonde, write_table)
from .config import RunConfig, load_config, parse_value
from .errors import ConfigError, EdrError
from .estimators import EstimatorOptions
from ._parallel import default_jobs

__all__ = ["main", "build_parser", "UsageError"]


class UsageError(ConfigError):
    code = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value config file")
    common.add_argument("--seed", type=str, metavar="U64", help="master seed")
    common.add_argument("--reps", type=str, metavar="N", help="Monte Carlo replicates per cell")
    common.add_argument("--jobs", type=str, metavar="N", help="worker processes (default: available cores)")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--estimators", metavar="LIST", help="comma-separated estimator tags")
    common.add_argument("--table", type=str, metavar="{1..6}", help="table preset")
    common.add_argument("--ci-level", type=str, metavar="F", help="Wald interval level")
    common.add_argument("--bootstrap-b", type=str, metavar="N", help="bootstrap replicates")
    p = _Parser(prog="edrel", description="Doubly robust empirical-likelihood estimation with missing responses.")
    p.add_argument("--version", action="version", version=f"edrel {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.add_parser("simulate", parents=[common], help="run Monte Carlo cells from a config or table preset")
    sub.add_parser("analyze", parents=[common], help="mean / two-group analysis of a CSV dataset")
    sub.add_parser("reproduce", parents=[common], help="run a table grid and compare with the reference numbers")
    return p


_FLAG_KEYS = {"seed": "run.seed", "reps": "run.reps", "jobs": "run.jobs", "out": "output.dir",
              "estimators": "run.estimators", "table": "design.table", "ci_level": "inference.ci_level",
              "bootstrap_b": "inference.bootstrap_b"}


def _config_path(target):
    """``preset:NAME`` names a bundled preset; anything else is a file path."""
    if target.startswith("preset:"):
        from importlib import resources

        name = target[len("preset:"):]
        res = resources.files("edrel").joinpath(f"presets/{name}.cfg")
        if not res.is_file():
            raise ConfigError(f"unknown preset {name!r}", field="--config")
        return str(res)
    return target


def _merge(args) -> RunConfig:
    cfg = load_config(_config_path(args.config)) if args.config else RunConfig()
    for attr, key in _FLAG_KEYS.items():
        val = getattr(args, attr)
        if val is not None:
            cfg.set(key, parse_value(key, str(val)))
    return cfg


def _version() -> str:
    """Package version with a git-describe style suffix when run from a checkout."""
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=here, capture_output=True,
                             text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _options(cfg: RunConfig) -> EstimatorOptions:
    return EstimatorOptions(weighting=cfg.get("estimator.weighting"), jacobian=cfg.get("estimator.jacobian"),
                            cca_divisor=cfg.get("estimator.cca_divisor"),
                            rank_policy=cfg.get("estimator.rank_policy"),
                            warm_start=cfg.get("estimator.warm_start"), tol=cfg.get("estimator.tol"),
                            max_iter=cfg.get("estimator.max_iter"),
                            propensity_floor=cfg.get("estimator.propensity_floor"))


def _check_positive(cfg, key, minimum=1):
    v = cfg.get(key)
    if v is not None and v < minimum:
        raise ConfigError(f"{key} must be >= {minimum}", line=cfg.lines.get(key), field=key)


def _jobs(cfg):
    _check_positive(cfg, "run.jobs")
    return cfg.get("run.jobs") or default_jobs()


def _level(cfg):
    lv = cfg.get("inference.ci_level")
    if not 0.0 < lv < 1.0:
        raise ConfigError("ci level must lie in (0, 1)", line=cfg.lines.get("inference.ci_level"),
                          field="inference.ci_level")
    return lv


def _outdir(cfg):
    out = cfg.get("output.dir")
    os.makedirs(out, exist_ok=True)
    return out


def _write(out, name, text, written):
    path = os.path.join(out, name)
    with open(path, "w", newline="") as fh:
        fh.write(text)
    written.append(name)
    return path


def _manifest(out, command, cfg: RunConfig, written, extra=None):
    doc = {"command": command, "version": _version(), "seed": cfg.get("run.seed"), "config": cfg.echo(),
           "artifacts": sorted(written)}
    if extra:
        doc.update(extra)
    _write(out, "manifest.json", json.dumps(doc, indent=2, sort_keys=True) + "\n", written)


def _designs(cfg: RunConfig, default_estimators):
    _check_positive(cfg, "run.reps")
    _check_positive(cfg, "design.n", 20)
    reps, seed, n = cfg.get("run.reps"), cfg.get("run.seed"), cfg.get("design.n")
    est = cfg.get("run.estimators") or default_estimators
    bad = [e for e in est if e not in S.IMPLEMENTED]
    if bad:
        raise ConfigError(f"unknown estimator tag(s): {', '.join(bad)}", field="run.estimators")
    opts = _options(cfg)
    table = cfg.get("design.table")
    if table is not None:
        if table not in range(1, 7):
            raise ConfigError(f"table must be 1..6, got {table}", field="design.table")
        ds = S.table_designs(table, reps=reps, n=n, seed=seed, estimators=cfg.get("run.estimators"))
        return [replace(d, options=opts) for d in ds]
    model = cfg.get("design.model")
    if model is None:
        raise ConfigError("either design.table or design.model is required", field="design.model")
    taus = cfg.get("design.tau")
    if taus is None:
        raise ConfigError("design.tau is required", field="design.tau")
    if model not in S.TAU_LEN:
        raise ConfigError(f"model must be 1, 2 or 3, got {model}", line=cfg.lines.get("design.model"),
                          field="design.model")
    for tau in taus:
        if len(tau) != S.TAU_LEN[model]:
            raise ConfigError(f"model {model} needs {S.TAU_LEN[model]} tau coefficients, got {len(tau)}",
                              line=cfg.lines.get("design.tau"), field="design.tau")
    ks = cfg.get("design.k")
    if model == 3:
        if ks:
            raise S.DesignMismatchError("Model 3 takes no exponent k", field="design.k")
        ks = (None,)
    elif not ks:
        raise ConfigError(f"design.k is required for model {model}", field="design.k")
    out = []
    for tau in taus:
        for k in ks:
            out.append(S.SimDesign(model, tau, k, n, reps, seed, tuple(est),
                                   working_propensity=cfg.get("design.working_propensity"),
                                   working_regression=cfg.get("design.working_regression"),
                                   level=_level(cfg), y_dist=cfg.get("design.y_dist"), options=opts))
    return out


def _run_cells(designs, jobs):
    return [S.run_monte_carlo(d, jobs=jobs) for d in designs]


def _cell_outputs(cells, out, written):
    rows = S.summarize(cells)
    _write(out, "cells.csv", S.cells_to_csv(rows), written)
    text = S.format_table(rows, "bias-rmse") + "\n" + S.format_table(rows, "ev-mv-cp")
    flagged = [(c.design.tau_str(), c.design.k, f) for c in cells for f in c.flagged]
    if flagged:
        text += "\nflagged (>2% failed replicates): " + "; ".join(f"tau={t} k={k} {e}" for t, k, e in flagged) + "\n"
    _write(out, "table.txt", text, written)
    return rows, text


def cmd_simulate(cfg: RunConfig) -> int:
    designs = _designs(cfg, ("ALL", "CCA", "HT", "RRZ", "EDR"))
    cells = _run_cells(designs, _jobs(cfg))
    out, written = _outdir(cfg), []
    _, text = _cell_outputs(cells, out, written)
    _manifest(out, "simulate", cfg, written, {"cells": len(cells)})
    sys.stdout.write(text)
    return 0


def cmd_reproduce(cfg: RunConfig) -> int:
    table = cfg.get("design.table")
    if table is None:
        raise ConfigError("reproduce needs --table (1..6)", field="design.table")
    designs = _designs(cfg, ())
    cells = _run_cells(designs, _jobs(cfg))
    out, written = _outdir(cfg), []
    _cell_outputs(cells, out, written)
    comp = S.compare_with_reference(cells, table)
    _write(out, f"comparison_table{table}.csv", S.comparison_to_csv(comp), written)
    text = S.format_comparison(comp)
    _write(out, f"comparison_table{table}.txt", text, written)
    n_fail = sum(r["status"] == "fail" for r in comp)
    _manifest(out, "reproduce", cfg, written, {"table": table, "cells": len(cells),
                                               "compared": len(comp), "failed": n_fail})
    sys.stdout.write(text)
    return 0


def cmd_analyze(cfg: RunConfig) -> int:
    path = cfg.get("data.path")
    if path is None:
        raise ConfigError("data.path is required (a CSV path or 'synthetic')", field="data.path")
    out, written = _outdir(cfg), []
    if path == "synthetic":
        table = synthetic_lalonde(cfg.get("data.synthetic_seed"))
        write_table(table, os.path.join(out, "synthetic_data.csv"))
        written.append("synthetic_data.csv")
        defaults = {"data.outcome": "re78", "data.group": "treat",
                    "data.covariates": ("age", "educ", "black", "hisp", "married", "nodegr", "re74", "re75"),
                    "model.propensity": ("hisp", "nodegr"), "model.regression.group1": ("educ",),
                    "model.regression.group0": ("black", "re74")}
        for k, v in defaults.items():
            if not cfg.has(k):
                cfg.set(k, v)
    else:
        if not os.path.exists(path):
            raise ConfigError(f"data file {path} does not exist", line=cfg.lines.get("data.path"), field="data.path")
        table = read_table(path, cfg.get("data.missing_token"))
    outcome = cfg.get("data.outcome")
    if outcome is None:
        raise ConfigError("data.outcome is required", field="data.outcome")
    covs = cfg.get("data.covariates") or ()
    for c in (outcome,) + tuple(covs) + ((cfg.get("data.group"),) if cfg.get("data.group") else ()):
        if c not in table.columns:
            raise ConfigError(f"column {c!r} not found in the data", field="data")
    est = cfg.get("run.estimators") or ANALYZE_ESTIMATORS
    bad = [e for e in est if e not in ANALYZE_ESTIMATORS]
    if bad:
        raise ConfigError(f"unknown estimator tag(s) for analyze: {', '.join(bad)}", field="run.estimators")
    prop = cfg.get("model.propensity") or ()
    B = cfg.get("inference.bootstrap_b")
    if B < 50:
        raise ConfigError("inference.bootstrap_b must be >= 50", field="inference.bootstrap_b")
    common = dict(estimators=tuple(est), B=B, seed=cfg.get("run.seed"), level=_level(cfg), jobs=_jobs(cfg),
                  options=_options(cfg))
    group = cfg.get("data.group")
    if group:
        reg = cfg.get("model.regression") or ()
        rep = analyze_two_group(table, outcome, group, covs, prop, cfg.get("model.regression.group1") or reg,
                                cfg.get("model.regression.group0") or reg, **common)
    else:
        rep = analyze_mean(table, outcome, covs, prop, cfg.get("model.regression") or (), **common)
    text = format_report(rep)
    _write(out, "report.json", json.dumps(rep.as_dict(), indent=2, sort_keys=True) + "\n", written)
    _write(out, "report.txt", text, written)
    _manifest(out, "analyze", cfg, written)
    sys.stdout.write(text)
    return 0


_COMMANDS = {"simulate": cmd_simulate, "analyze": cmd_analyze, "reproduce": cmd_reproduce}


def _fail(code, message, status):
    sys.stderr.write(f"error: code={code} message={' '.join(str(message).split())}\n")
    return status


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required: simulate, analyze or reproduce")
        return _COMMANDS[args.command](_merge(args))
    except ConfigError as exc:
        return _fail(exc.code, exc, 2)
    except EdrError as exc:
        return _fail(exc.code, exc, 1)
    except OSError as exc:
        return _fail("io-error", exc, 1)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
