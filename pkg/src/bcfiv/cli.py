"""Command-line interface: ``fit``, ``simulate`` and ``tables``.

Exit codes: 0 success, 1 user error (bad flags, schema or data problems),
2 internal error. Diagnostics go to stderr as one line; stdout carries only
the paths of the written artifacts.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from dataclasses import asdict
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import ColumnSchema, DataError, honest_split, load_csv
from .estimators import infer_tree
from .model import FitMode, discovery_targets, fit_surfaces
from .montecarlo import (
    METRICS,
    GridSpec,
    PipelineConfig,
    ReportError,
    aggregate,
    default_jobs,
    emit_tables,
    read_replicates,
    replicate_seeds,
    run_grid,
    write_manifest,
)
from .subgroups import discover

OUTPUT_ENV = "BCFIV_OUTPUT_DIR"
log = logging.getLogger("bcfiv")


class UsageError(Exception):
    """Bad command line; reported with exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit 2; user errors are 1 here
        raise UsageError(message)


def _positive_int(v: str) -> int:
    i = int(v)
    if i < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return i


def _ratio(v: str) -> float:
    f = float(v)
    if not 0 < f < 1:
        raise argparse.ArgumentTypeError(f"must lie in (0,1), got {v}")
    return f


def _nonneg(v: str) -> float:
    f = float(v)
    if not f >= 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return f


def _add_method_flags(p: argparse.ArgumentParser, defaults: bool) -> None:
    d = PipelineConfig()

    def dflt(v):
        return v if defaults else None

    p.add_argument("--depth", type=_positive_int, default=dflt(d.depth), help="maximum subgroup tree depth")
    p.add_argument("--min-leaf", type=_positive_int, default=dflt(d.min_leaf), help="minimum discovery rows per leaf")
    p.add_argument("--min-node", type=_positive_int, default=dflt(d.min_node), help="inference rows below which a node is discarded")
    p.add_argument("--weak-f-threshold", type=_nonneg, default=dflt(d.weak_f_threshold), help="first-stage F below which a node is discarded")
    p.add_argument("--split-ratio", type=_ratio, default=dflt(d.split_ratio), help="share of rows in the discovery sample")
    p.add_argument("--burn", type=_positive_int, default=dflt(d.n_burn), help="MCMC burn-in iterations")
    p.add_argument("--draws", type=_positive_int, default=dflt(d.n_draw), help="retained MCMC draws")
    p.add_argument("--trees-prognostic", type=_positive_int, default=dflt(d.trees_prognostic))
    p.add_argument("--trees-treatment", type=_positive_int, default=dflt(d.trees_treatment))
    p.add_argument("--trees-propensity", type=_positive_int, default=dflt(d.trees_propensity))
    p.add_argument("--trees-compliance", type=_positive_int, default=dflt(d.trees_compliance))
    p.add_argument("--out", type=Path, default=None, help=f"output directory (default ${OUTPUT_ENV} or ./bcfiv-out)")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="bcfiv", description="Heterogeneous complier effects with instrumental-variable causal forests.")
    ap.add_argument("--version", action="version", version=__version__)
    common = _Parser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="progress messages on stderr")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("fit", parents=[common], help="discover and estimate subgroups on a CSV file")
    f.add_argument("--data", type=Path, required=True, help="CSV file with a header row")
    f.add_argument("--outcome", required=True)
    f.add_argument("--treatment", required=True)
    f.add_argument("--instrument", required=True)
    f.add_argument("--covariates", required=True, help="comma-separated column names")
    f.add_argument("--outcome-kind", choices=("auto", "continuous", "binary"), default="auto")
    f.add_argument("--mode", choices=("bcf-iv", "bcf-itt"), default="bcf-iv")
    f.add_argument("--seed", type=int, default=0)
    _add_method_flags(f, defaults=True)

    s = sub.add_parser("simulate", parents=[common], help="run a Monte Carlo grid")
    s.add_argument("--scenario", required=True, help="bundled name (e.g. table1) or path to a key=value file")
    s.add_argument("--replicates", type=_positive_int, default=None, help="override the replicate count")
    s.add_argument("--seed", type=int, default=None, help="override the master seed")
    s.add_argument("--jobs", type=_positive_int, default=None, help="worker processes (default: available CPUs)")
    _add_method_flags(s, defaults=False)

    t = sub.add_parser("tables", parents=[common], help="merge run directories into comparison tables")
    t.add_argument("runs", nargs="*", type=Path, help="run directories written by simulate")
    t.add_argument("--external", action="append", default=[], metavar="CSV[:NAME]",
                   help="per-replicate CSV produced by another method")
    t.add_argument("--out", type=Path, default=None)
    return ap


def _outdir(arg: Path | None) -> Path:
    return arg if arg is not None else Path(os.environ.get(OUTPUT_ENV, "bcfiv-out"))


def _pipeline(args) -> dict:
    names = {
        "depth": "depth", "min_leaf": "min_leaf", "min_node": "min_node",
        "weak_f_threshold": "weak_f_threshold", "split_ratio": "split_ratio",
        "burn": "n_burn", "draws": "n_draw", "trees_prognostic": "trees_prognostic",
        "trees_treatment": "trees_treatment", "trees_propensity": "trees_propensity",
        "trees_compliance": "trees_compliance",
    }
    return {dst: getattr(args, src) for src, dst in names.items() if getattr(args, src) is not None}


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")
    return path


def _versions() -> dict:
    import platform

    import numba
    import scipy

    return {"package": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__}


def cmd_fit(args) -> list[Path]:
    covs = [c.strip() for c in args.covariates.split(",") if c.strip()]
    if not covs:
        raise UsageError("--covariates needs at least one column name")
    kind = None if args.outcome_kind == "auto" else args.outcome_kind
    schema = ColumnSchema(args.outcome, args.treatment, args.instrument, covs, kind)
    data = load_csv(args.data, schema)
    pipe = PipelineConfig(**_pipeline(args))
    mode = FitMode(args.mode, data.outcome_kind)
    seeds = replicate_seeds(args.seed, 0)
    t0 = time.perf_counter()
    sp = honest_split(data, pipe.split_ratio, seeds["split"])
    log.info("discovery %d rows, inference %d rows", sp.discovery.n, sp.inference.n)
    surf = fit_surfaces(sp.discovery, pipe.surfaces(seeds["mcmc"]))
    st = discover(sp.discovery.x, discovery_targets(surf, mode), pipe.cart(), data.covariate_names)
    at = infer_tree(st, sp.inference, pipe.min_node, pipe.weak_f_threshold)
    out = _outdir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = [_write_json(out / "tree.json", at.to_dict())]
    (out / "tree.txt").write_text(at.render() + "\n", encoding="utf-8")
    paths.append(out / "tree.txt")
    surf.to_csv(out / "surfaces.csv")
    paths.append(out / "surfaces.csv")
    manifest = {
        "kind": "fit",
        "data": str(args.data),
        "schema": {"outcome": args.outcome, "treatment": args.treatment, "instrument": args.instrument,
                   "covariates": covs, "outcome_kind": data.outcome_kind},
        "mode": mode.variant,
        "seed": args.seed,
        "derived_seeds": seeds,
        "pipeline": asdict(pipe),
        "rows": {"total": data.n, "discovery": sp.discovery.n, "inference": sp.inference.n},
        "floored_units": int(surf.floored.sum()),
        "acceptance": surf.acceptance,
        "versions": _versions(),
    }
    paths.append(_write_json(out / "manifest.json", manifest))
    (out / "timings.log").write_text(f"fit_seconds {time.perf_counter() - t0:.3f}\n", encoding="utf-8")
    return paths


def load_scenario(name: str) -> GridSpec:
    p = Path(name)
    if p.is_file():
        return GridSpec.parse(p.read_text(encoding="utf-8"), p.stem)
    res = resources.files("bcfiv").joinpath("scenarios", f"{name}.cfg")
    if res.is_file():
        return GridSpec.parse(res.read_text(encoding="utf-8"), name)
    raise UsageError(f"--scenario: no file or bundled scenario named {name!r}")


def bundled_scenarios() -> list[str]:
    d = resources.files("bcfiv").joinpath("scenarios")
    return sorted(p.name.removesuffix(".cfg") for p in d.iterdir() if p.name.endswith(".cfg"))


def cmd_simulate(args) -> list[Path]:
    spec = load_scenario(args.scenario).with_overrides(args.replicates, args.seed, **_pipeline(args))
    jobs = args.jobs or default_jobs()
    out = _outdir(args.out)

    def progress(done, total):
        log.info("task %d/%d", done, total)

    run = run_grid(spec, jobs=jobs, progress=progress)
    if run.n_failed:
        print(f"bcfiv: warning: {run.n_failed} of "
              f"{sum(len(rs) for pm in run.results.values() for rs in pm.values())} replicate fits failed",
              file=sys.stderr)
    paths = emit_tables(run, out)
    paths.append(write_manifest(run, out, {"scenario_source": args.scenario}))
    return paths


def _run_label(manifest: dict, path: Path) -> str:
    return manifest.get("grid", {}).get("name") or path.name


def cmd_tables(args) -> list[Path]:
    if not args.runs and not args.external:
        raise UsageError("tables needs at least one run directory or --external file")
    sources = []  # (label, {(point, mode): [results]}, cells-by-point)
    axes_ref = None
    for rd in args.runs:
        man_path = rd / "manifest.json"
        if not man_path.is_file():
            raise DataError(f"{rd}: missing manifest.json")
        man = json.loads(man_path.read_text(encoding="utf-8"))
        if man.get("kind") != "simulate":
            raise DataError(f"{rd}: manifest is not from a simulate run")
        grid = man["grid"]
        axes = sorted(grid["axes"])
        if axes_ref is None:
            axes_ref = (axes, rd)
        elif axes != axes_ref[0]:
            raise DataError(f"schema mismatch: {rd} varies {axes}, {axes_ref[1]} varies {axes_ref[0]}")
        reps = rd / f"{grid['name']}_replicates.csv"
        if not reps.is_file():
            raise DataError(f"{rd}: missing {reps.name}")
        sources.append((_run_label(man, rd), read_replicates(reps)))
    for ext in args.external:
        path, _, name = ext.partition(":")
        p = Path(path)
        if not p.is_file():
            raise DataError(f"--external: file not found: {p}")
        sources.append((name or p.stem, read_replicates(p)))

    rows = []
    for label, groups in sources:
        for (point, mode), results in groups.items():
            cells = sorted(results[0].discovered) if results else []
            rep = aggregate(results, cells)
            for cs in rep.cells:
                rows.append((point, label, mode, cs))
    modes_per_label = {}
    for point, label, mode, _ in rows:
        modes_per_label.setdefault(mode, set()).add(label)
    def column(label, mode):
        return mode if len(modes_per_label[mode]) == 1 else f"{label}:{mode}"

    out = _outdir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    long_path = out / "comparison.csv"
    with open(long_path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["point", "source", "mode", "cell", *METRICS, "replicates", "failed"])
        for point, label, mode, cs in rows:
            wr.writerow([point, label, mode, cs.cell, *(_f(getattr(cs, m)) for m in METRICS), cs.replicates, cs.failed])
    cols = list(dict.fromkeys(column(lb, md) for _, lb, md, _ in rows))
    table: dict[tuple[str, str], dict[str, object]] = {}
    for point, label, mode, cs in rows:
        table.setdefault((point, cs.cell), {})[column(label, mode)] = cs
    wide_path = out / "comparison_wide.csv"
    with open(wide_path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["point", "cell"] + [f"{m}_{c}" for c in cols for m in ("mse", "bias", "coverage", "discovery")])
        for (point, cell), byc in table.items():
            line = [point, cell]
            for c in cols:
                cs = byc.get(c)
                line += [_f(getattr(cs, m)) if cs else "" for m in ("mse", "bias", "coverage", "discovery")]
            wr.writerow(line)
    man = {"kind": "tables", "runs": [str(r) for r in args.runs], "external": list(args.external),
           "columns": cols, "versions": _versions()}
    return [long_path, wide_path, _write_json(out / "manifest.json", man)]


def _f(v) -> str:
    return "nan" if isinstance(v, float) and math.isnan(v) else f"{v:.6f}"


COMMANDS = {"fit": cmd_fit, "simulate": cmd_simulate, "tables": cmd_tables}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"bcfiv: error: usage: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="bcfiv: %(message)s", stream=sys.stderr)
    try:
        paths = COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"bcfiv: error: usage: {exc}", file=sys.stderr)
        return 1
    except (DataError, ReportError, ValueError, OSError) as exc:
        print(f"bcfiv: error: {type(exc).__name__}: {exc}".replace("\n", " "), file=sys.stderr)
        return 1
    except Exception as exc:  # anything else is a bug
        print(f"bcfiv: internal error: {type(exc).__name__}: {exc}".replace("\n", " "), file=sys.stderr)
        return 2
    for p in paths:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
