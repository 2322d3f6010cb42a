"""Replicate runner, metric aggregation and table emission for simulation grids.

One *task* is one replicate index at one grid point. Its data, honest split
and MCMC seeds derive from ``(master_seed, replicate)`` only, so every grid
point reuses the same random numbers for replicate ``r`` (common random
numbers) and any replicate can be rerun in isolation.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
import os
import platform
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .bart import BartConfig
from .dataset import honest_split
from .estimators import infer_tree
from .model import PROGNOSTIC, TREATMENT, FitMode, SurfaceConfig, discovery_targets, fit_surfaces
from .simgen import CELL_DEFINITIONS, CELLS, SimScenario, generate, parse_key_values
from .subgroups import discover, match_truth
from .tree import CartConfig

METRICS = ("mse", "bias", "coverage", "mse_within_cell", "discovery")
COVERAGE_POLICIES = ("conservative", "estimated")


@dataclass(frozen=True)
class PipelineConfig:
    """Method settings shared by every replicate of a run."""

    n_burn: int = 500
    n_draw: int = 1000
    trees_prognostic: int = 200
    trees_treatment: int = 50
    trees_propensity: int = 200
    trees_compliance: int = 200
    depth: int = 2
    min_leaf: int = 25
    cp: float = 0.01
    min_node: int = 50
    weak_f_threshold: float = 10.0
    split_ratio: float = 0.5
    floor: float = 0.05
    match_rule: str = "exact"
    coverage_policy: str = "conservative"
    # leaf-prior scale overrides (None keeps the BartConfig calibration)
    sigma0_prognostic: float | None = None
    sigma0_treatment: float | None = None

    def __post_init__(self):
        if self.match_rule not in ("exact", "contains"):
            raise ValueError(f"match_rule must be exact or contains, got {self.match_rule!r}")
        if self.coverage_policy not in COVERAGE_POLICIES:
            raise ValueError(f"coverage_policy must be one of {COVERAGE_POLICIES}, got {self.coverage_policy!r}")
        if not 0 < self.split_ratio < 1:
            raise ValueError("split_ratio must lie in (0,1)")
        if min(self.n_burn, self.n_draw, self.trees_prognostic, self.trees_treatment,
               self.trees_propensity, self.trees_compliance, self.depth, self.min_leaf, self.min_node) < 1:
            raise ValueError("counts must be >= 1")
        if self.weak_f_threshold < 0 or self.cp < 0:
            raise ValueError("weak_f_threshold and cp must be >= 0")
        for v in (self.sigma0_prognostic, self.sigma0_treatment):
            if v is not None and not v > 0:
                raise ValueError("leaf-prior scales must be positive")

    def surfaces(self, seed: int, constant_propensity: float | None = None) -> SurfaceConfig:
        return SurfaceConfig(
            prognostic=replace(PROGNOSTIC, q=self.trees_prognostic, sigma0=self.sigma0_prognostic),
            treatment=replace(TREATMENT, q=self.trees_treatment, sigma0=self.sigma0_treatment),
            propensity=BartConfig(q=self.trees_propensity),
            compliance=BartConfig(q=self.trees_compliance),
            n_burn=self.n_burn, n_draw=self.n_draw, seed=seed, floor=self.floor,
            constant_propensity=constant_propensity,
        )

    def cart(self) -> CartConfig:
        return CartConfig(max_depth=self.depth, min_leaf=self.min_leaf, cp=self.cp)


def replicate_seeds(master_seed: int, replicate: int) -> dict[str, int]:
    """Seeds for the data, the honest split and the MCMC of one replicate."""
    st = np.random.SeedSequence(master_seed, spawn_key=(replicate,)).generate_state(3)
    return {"data": int(st[0]), "split": int(st[1]), "mcmc": int(st[2])}


@dataclass(eq=False)
class ReplicateResult:
    """Outcome of one replicate under one method.

    Per-unit arrays cover the inference sample; ``tau_hat`` is NaN for units
    whose every enclosing node was discarded.
    """

    replicate: int
    mode: str
    discovered: dict[str, bool] = field(default_factory=dict)
    cell: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=str), repr=False)
    true_tau: np.ndarray = field(default_factory=lambda: np.empty(0), repr=False)
    tau_hat: np.ndarray = field(default_factory=lambda: np.empty(0), repr=False)
    ci_lo: np.ndarray = field(default_factory=lambda: np.empty(0), repr=False)
    ci_hi: np.ndarray = field(default_factory=lambda: np.empty(0), repr=False)
    runtime: float = 0.0
    error: str | None = None
    tree_text: str = ""
    seeds: dict = field(default_factory=dict)
    precomputed: dict[str, dict[str, float]] | None = field(default=None, repr=False)

    @property
    def ok(self) -> bool:
        return self.error is None

    def cell_metrics(self, cells: Sequence[str], coverage_policy: str = "conservative") -> dict[str, dict[str, float]]:
        """Per-cell Bias, MSE, coverage and discovery of this replicate.

        Bias and MSE sum (truth - estimate) over the cell's units with an
        estimate and divide by the inference-sample size; ``mse_within_cell``
        divides the same sum by the number of estimated units in the cell.
        Coverage is the fraction of the cell's units whose interval covers the
        truth. Under the ``conservative`` policy units without an estimate
        count as not covered; under ``estimated`` they are left out.
        """
        if coverage_policy not in COVERAGE_POLICIES:
            raise ValueError(f"unknown coverage policy {coverage_policy!r}")
        if self.precomputed is not None:
            return {c: dict(self.precomputed[c]) for c in cells}
        n_inf = self.true_tau.shape[0]
        out = {}
        for c in cells:
            in_cell = self.cell == c
            est = in_cell & ~np.isnan(self.tau_hat)
            err = self.true_tau[est] - self.tau_hat[est]
            covered = est & (self.ci_lo <= self.true_tau) & (self.true_tau <= self.ci_hi)
            pool = in_cell if coverage_policy == "conservative" else est
            out[c] = {
                "bias": math.fsum(err) / n_inf if n_inf else math.nan,
                "mse": math.fsum(err * err) / n_inf if n_inf else math.nan,
                "mse_within_cell": math.fsum(err * err) / est.sum() if est.any() else math.nan,
                "coverage": covered.sum() / pool.sum() if pool.any() else math.nan,
                "discovery": float(self.discovered.get(c, False)),
            }
        return out


def run_replicates(
    s: SimScenario,
    modes: Sequence[str],
    replicate: int,
    master_seed: int,
    pipeline: PipelineConfig = PipelineConfig(),
) -> list[ReplicateResult]:
    """One replicate under several methods sharing the same data and surfaces.

    generate -> honest split -> surfaces -> (per mode) discover -> infer -> match.
    Any exception is caught and returned as a failed result per mode.
    """
    seeds = replicate_seeds(master_seed, replicate)
    t0 = time.perf_counter()
    try:
        sd = generate(replace(s, seed=seeds["data"]))
        sp = honest_split(sd.data, pipeline.split_ratio, seeds["split"])
        const = 0.5 if s.robustness == "misspecified_propensity" else None
        surf = fit_surfaces(sp.discovery, pipeline.surfaces(seeds["mcmc"], const))
        t_shared = time.perf_counter() - t0
        truth = {c: CELL_DEFINITIONS[c] for c in s.heterogeneous_cells()}
        inf_cell = sd.cell[sp.inference_index]
        inf_tau = sd.true_tau[sp.inference_index]
        out = []
        for mode in modes:
            t1 = time.perf_counter()
            st = discover(sp.discovery.x, discovery_targets(surf, mode), pipeline.cart(), sp.discovery.covariate_names)
            at = infer_tree(st, sp.inference, pipeline.min_node, pipeline.weak_f_threshold)
            tau, lo, hi, _ = at.unit_estimates(sp.inference.x)
            out.append(ReplicateResult(
                replicate=replicate, mode=FitMode(mode).variant,
                discovered=match_truth(st, truth, pipeline.match_rule),
                cell=inf_cell, true_tau=inf_tau, tau_hat=tau, ci_lo=lo, ci_hi=hi,
                runtime=t_shared + time.perf_counter() - t1, tree_text=at.render(), seeds=seeds,
            ))
        return out
    except Exception as exc:  # recorded, never silently dropped
        msg = f"{type(exc).__name__}: {exc}"
        tb = traceback.format_exc(limit=3)
        return [
            ReplicateResult(replicate=replicate, mode=FitMode(m).variant, error=msg, tree_text=tb,
                            runtime=time.perf_counter() - t0, seeds=seeds)
            for m in modes
        ]


def run_replicate(s: SimScenario, mode: str, replicate: int, master_seed: int,
                  pipeline: PipelineConfig = PipelineConfig()) -> ReplicateResult:
    return run_replicates(s, [mode], replicate, master_seed, pipeline)[0]


@dataclass(frozen=True)
class CellSummary:
    cell: str
    mse: float
    bias: float
    coverage: float
    mse_within_cell: float
    discovery: float
    replicates: int
    failed: int


@dataclass(frozen=True)
class MonteCarloReport:
    """Metrics averaged over replicates for one grid point and method."""

    mode: str
    cells: tuple[CellSummary, ...]
    m: int
    failed: int
    config: dict = field(default_factory=dict)

    def cell(self, name: str) -> CellSummary:
        for c in self.cells:
            if c.cell == name:
                return c
        raise KeyError(name)


class ReportError(RuntimeError):
    pass


def aggregate(results: Iterable[ReplicateResult], cells: Sequence[str] | None = None,
              config: dict | None = None, coverage_policy: str = "conservative") -> MonteCarloReport:
    """Average per-replicate cell metrics over the successful replicates.

    Results are folded in replicate order, whatever order they arrive in.
    """
    results = sorted(results, key=lambda r: r.replicate)
    good = [r for r in results if r.ok]
    if not good:
        raise ReportError("no successful replicates to aggregate")
    modes = {r.mode for r in results}
    if len(modes) != 1:
        raise ReportError(f"cannot aggregate across modes {sorted(modes)}")
    if cells is None:
        cells = sorted(set().union(*(r.discovered for r in good))) or list(CELLS)
    per = [r.cell_metrics(cells, coverage_policy) for r in good]
    summaries = []
    for c in cells:
        vals = {m: [p[c][m] for p in per] for m in METRICS}
        summaries.append(CellSummary(
            cell=c, replicates=len(good), failed=len(results) - len(good),
            **{m: _nanmean(v) for m, v in vals.items()},
        ))
    return MonteCarloReport(mode=good[0].mode, cells=tuple(summaries), m=len(good),
                            failed=len(results) - len(good), config=dict(config or {}))


def _nanmean(v: Sequence[float]) -> float:
    a = [x for x in v if not math.isnan(x)]
    return math.fsum(a) / len(a) if a else math.nan


# -- grid runs -------------------------------------------------------------

SCENARIO_KEYS = {f.name for f in fields(SimScenario)} - {"compliance", "seed"} | {
    "compliance", "compliance_default", "compliance_l1", "compliance_l2", "compliance_gap",
}
PIPELINE_KEYS = {f.name for f in fields(PipelineConfig)}


@dataclass(frozen=True)
class GridSpec:
    """A simulation grid read from a ``key = value`` file.

    Scenario keys may hold comma-separated lists; the grid is their Cartesian
    product in file order. ``table`` names the layout (``effect`` for
    effect-size rows, ``compliance`` for compliance-gap rows).
    """

    name: str
    table: str
    axes: tuple[tuple[str, tuple[str, ...]], ...]
    fixed: tuple[tuple[str, str], ...]
    modes: tuple[str, ...]
    replicates: int
    seed: int
    pipeline: PipelineConfig

    @classmethod
    def parse(cls, text: str, default_name: str = "grid") -> "GridSpec":
        kv = parse_key_values(text)
        name = kv.pop("name", default_name)
        table = kv.pop("table", "effect")
        if table not in ("effect", "compliance"):
            raise ValueError(f"table must be effect or compliance, got {table!r}")
        modes = tuple(FitMode(m.strip()).variant for m in kv.pop("modes", "bcf_iv").split(","))
        replicates = int(kv.pop("replicates", "50"))
        seed = int(kv.pop("seed", "0"))
        pipe = {}
        axes, fixed = [], []
        for k, v in kv.items():
            if k in PIPELINE_KEYS:
                default = getattr(PipelineConfig(), k)
                pipe[k] = float(v) if default is None else type(default)(v)
            elif k in SCENARIO_KEYS:
                vals = tuple(s.strip() for s in v.split(","))
                if len(vals) > 1:
                    axes.append((k, vals))
                else:
                    fixed.append((k, vals[0]))
            else:
                raise ValueError(f"unknown key {k!r}")
        if replicates < 1:
            raise ValueError("replicates must be >= 1")
        spec = cls(name, table, tuple(axes), tuple(fixed), modes, replicates, seed, PipelineConfig(**pipe))
        spec.points()  # validate every scenario eagerly
        return spec

    def points(self) -> list[tuple[dict[str, str], SimScenario]]:
        names = [a for a, _ in self.axes]
        out = []
        for combo in itertools.product(*(v for _, v in self.axes)):
            key = dict(zip(names, combo))
            out.append((key, SimScenario.from_mapping({**dict(self.fixed), **key})))
        return out

    def with_overrides(self, replicates: int | None = None, seed: int | None = None, **pipeline) -> "GridSpec":
        kw = {}
        if replicates is not None:
            kw["replicates"] = replicates
        if seed is not None:
            kw["seed"] = seed
        pipe = {k: v for k, v in pipeline.items() if v is not None}
        if pipe:
            kw["pipeline"] = replace(self.pipeline, **pipe)
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return {
            "name": self.name, "table": self.table,
            "axes": {k: list(v) for k, v in self.axes}, "fixed": dict(self.fixed),
            "modes": list(self.modes), "replicates": self.replicates, "seed": self.seed,
            "pipeline": asdict(self.pipeline),
        }


def _task(args):
    point, s, modes, r, seed, pipeline = args
    return point, r, run_replicates(s, modes, r, seed, pipeline)


@dataclass
class GridRun:
    spec: GridSpec
    results: dict[int, dict[str, list[ReplicateResult]]]  # point -> mode -> replicates
    wall_seconds: float

    @property
    def n_failed(self) -> int:
        return sum(not r.ok for pm in self.results.values() for rs in pm.values() for r in rs)

    def reports(self) -> list[tuple[dict[str, str], SimScenario, MonteCarloReport]]:
        out = []
        for i, (key, s) in enumerate(self.spec.points()):
            for mode in self.spec.modes:
                rs = self.results[i][mode]
                try:
                    rep = aggregate(rs, s.heterogeneous_cells(), {"point": key}, self.spec.pipeline.coverage_policy)
                except ReportError:
                    rep = MonteCarloReport(mode, tuple(
                        CellSummary(c, *(math.nan,) * 5, 0, len(rs)) for c in s.heterogeneous_cells()
                    ), 0, len(rs), {"point": key})
                out.append((key, s, rep))
        return out


def run_grid(spec: GridSpec, jobs: int = 1, progress=None) -> GridRun:
    """Run every (grid point, replicate) task, in parallel when ``jobs > 1``."""
    pts = spec.points()
    tasks = [(i, s, spec.modes, r, spec.seed, spec.pipeline)
             for r in range(spec.replicates) for i, (_, s) in enumerate(pts)]
    results: dict[int, dict[str, list[ReplicateResult]]] = {
        i: {m: [] for m in spec.modes} for i in range(len(pts))
    }
    t0 = time.perf_counter()
    if jobs <= 1:
        it = map(_task, tasks)
        pool = None
    else:
        pool = ProcessPoolExecutor(max_workers=jobs)
        it = pool.map(_task, tasks)
    try:
        for done, (i, r, rs) in enumerate(it, start=1):
            for res in rs:
                results[i][res.mode].append(res)
            if progress:
                progress(done, len(tasks))
    finally:
        if pool is not None:
            pool.shutdown()
    for pm in results.values():
        for rs in pm.values():
            rs.sort(key=lambda r: r.replicate)
    return GridRun(spec, results, time.perf_counter() - t0)


# -- output ----------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else f"{float(v):.6f}"
    return str(v)


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(header)
            for row in rows:
                wr.writerow([_fmt(v) for v in row])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc
    return path


def _point_columns(spec: GridSpec, s: SimScenario, key: dict[str, str]) -> list[tuple[str, object]]:
    cols: list[tuple[str, object]] = [(k, v) for k, v in key.items()]
    if spec.table == "compliance":
        cols += [("pi_l1", s.compliance.rate("l1")), ("pi_l2", s.compliance.rate("l2"))]
    return cols


def emit_tables(run: GridRun, outdir: str | Path) -> list[Path]:
    """Write the table-layout, long-format, discovery-curve and replicate CSVs.

    Raises :class:`ReportError` (and writes nothing) when no grid point has a
    successful replicate.
    """
    outdir = Path(outdir)
    reports = run.reports()
    if not reports or all(rep.m == 0 for _, _, rep in reports):
        raise ReportError("empty report: no successful replicates")
    outdir.mkdir(parents=True, exist_ok=True)
    spec = run.spec
    written = []

    cells = list(dict.fromkeys(c.cell for _, _, rep in reports for c in rep.cells))
    first_key, first_s, _ = reports[0]
    pcols = [c for c, _ in _point_columns(spec, first_s, first_key)]

    header = [*pcols, "mode"] + [f"{m}_{c}" for c in cells for m in ("mse", "bias", "coverage")] + ["replicates", "failed"]
    rows = []
    for key, s, rep in reports:
        row = [v for _, v in _point_columns(spec, s, key)] + [rep.mode]
        for c in cells:
            cs = rep.cell(c)
            row += [cs.mse, cs.bias, cs.coverage]
        rows.append(row + [rep.m, rep.failed])
    written.append(_write_csv(outdir / f"{spec.name}_table.csv", header, rows))

    header = [*pcols, "mode", "cell", *METRICS, "replicates", "failed"]
    rows = []
    for key, s, rep in reports:
        for cs in rep.cells:
            rows.append([v for _, v in _point_columns(spec, s, key)] + [rep.mode, cs.cell]
                        + [getattr(cs, m) for m in METRICS] + [cs.replicates, cs.failed])
    written.append(_write_csv(outdir / f"{spec.name}_metrics.csv", header, rows))

    header = [*pcols, "mode"] + [f"discovery_{c}" for c in cells]
    rows = [[v for _, v in _point_columns(spec, s, key)] + [rep.mode] + [rep.cell(c).discovery for c in cells]
            for key, s, rep in reports]
    written.append(_write_csv(outdir / f"{spec.name}_discovery.csv", header, rows))

    written.append(write_replicates(run, outdir / f"{spec.name}_replicates.csv"))
    return written


REPLICATE_COLUMNS = ("point", "mode", "replicate", "cell", "bias", "mse", "mse_within_cell", "coverage", "discovered", "error")


def write_replicates(run: GridRun, path: Path) -> Path:
    """Per-replicate, per-cell metrics: the exchange format for external methods."""
    rows = []
    for i, (key, s) in enumerate(run.spec.points()):
        label = ";".join(f"{k}={v}" for k, v in key.items()) or "all"
        cells = s.heterogeneous_cells()
        for mode in run.spec.modes:
            for r in run.results[i][mode]:
                if not r.ok:
                    rows.extend([label, mode, r.replicate, c, *(math.nan,) * 4, 0, r.error] for c in cells)
                    continue
                cm = r.cell_metrics(cells, run.spec.pipeline.coverage_policy)
                rows.extend(
                    [label, mode, r.replicate, c, cm[c]["bias"], cm[c]["mse"], cm[c]["mse_within_cell"],
                     cm[c]["coverage"], int(r.discovered.get(c, False)), ""]
                    for c in cells
                )
    return _write_csv(path, REPLICATE_COLUMNS, rows)


def read_replicates(path: str | Path) -> dict[tuple[str, str], list[ReplicateResult]]:
    """Load a per-replicate CSV (ours or an external method's) as results.

    Returns ``{(point, mode): [ReplicateResult, ...]}`` with precomputed
    cell metrics, ready for :func:`aggregate`.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.DictReader(fh)
        missing = [c for c in REPLICATE_COLUMNS if c not in (rd.fieldnames or [])]
        if "error" in missing:
            missing.remove("error")
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        grouped: dict[tuple[str, str, int], dict] = {}
        for row in rd:
            k = (row["point"], row["mode"], int(row["replicate"]))
            g = grouped.setdefault(k, {"cells": {}, "error": None})
            if row.get("error"):
                g["error"] = row["error"]
            g["cells"][row["cell"]] = {
                "bias": float(row["bias"]), "mse": float(row["mse"]),
                "mse_within_cell": float(row["mse_within_cell"]) if row["mse_within_cell"] else math.nan,
                "coverage": float(row["coverage"]), "discovery": float(row["discovered"]),
            }
    out: dict[tuple[str, str], list[ReplicateResult]] = {}
    for (point, mode, r), g in sorted(grouped.items()):
        res = ReplicateResult(
            replicate=r, mode=mode, error=g["error"],
            discovered={c: bool(v["discovery"]) for c, v in g["cells"].items()},
            precomputed=g["cells"],
        )
        out.setdefault((point, mode), []).append(res)
    return out


def write_manifest(run: GridRun, outdir: str | Path, extra: dict | None = None) -> Path:
    """Deterministic JSON description of the run (no wall-clock content).

    Timings go to a separate ``timings.log`` so that repeated runs produce
    byte-identical manifests.
    """
    import numba
    import scipy

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    seeds = {r: replicate_seeds(run.spec.seed, r) for r in range(run.spec.replicates)}
    man = {
        "kind": "simulate",
        "grid": run.spec.to_dict(),
        "points": [{"key": key, "scenario": _scenario_dict(s)} for key, s in run.spec.points()],
        "replicate_seeds": {str(r): v for r, v in seeds.items()},
        "failed_replicates": run.n_failed,
        "versions": {
            "package": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__, "numba": numba.__version__,
        },
        **(extra or {}),
    }
    path = outdir / "manifest.json"
    path.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    lines = [f"total_wall_seconds {run.wall_seconds:.3f}"]
    for i, (key, _) in enumerate(run.spec.points()):
        for mode in run.spec.modes:
            for r in run.results[i][mode]:
                lines.append(f"point={i} mode={mode} replicate={r.replicate} seconds={r.runtime:.3f}"
                             + ("" if r.ok else f" error={r.error}"))
    (outdir / "timings.log").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _scenario_dict(s: SimScenario) -> dict:
    d = asdict(s)
    d.pop("seed")
    return d


def default_jobs() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)
