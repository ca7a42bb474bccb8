"""Monte Carlo driver: replicates, per-cell performance measures, CSV output."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from psconfound import dgp
from psconfound.dgp import ScenarioSpec
from psconfound.estimators import METHODS, Method, MethodEstimate, estimate_ps, run_method
from psconfound.solvers import SEPARATION_RULES, CovType

log = logging.getLogger(__name__)

Z_TWO_SIDED = 1.959963984540054
Z_ONE_SIDED_05 = 1.6448536269514722
MIN_CONVERGENCE_PCT = 25.0

CSV_HEADER = (
    "n",
    "exposure_probability",
    "ps_overlap_scenario",
    "method",
    "convergence_pct",
    "bias",
    "se_bias",
    "abs_error",
    "se_abs_error",
    "power_pct",
    "se_power",
    "coverage_pct",
    "se_coverage",
    "dgp_link",
    "unmeasured_confounder",
    "reps",
    "seed",
)
METRIC_FIELDS = CSV_HEADER[4:13]


@dataclass(frozen=True)
class AnalysisOptions:
    """Switches that change how methods are evaluated.

    ``power_rule`` is ``"two_sided_95"`` (reject when the lower 95% Wald
    bound exceeds 0) or ``"one_sided_05"`` (reject when estimate/SE > 1.645).
    ``matched_cov`` is the covariance used after matching and
    ``separation_rule`` the solver's separation bound (see
    :func:`psconfound.solvers.fit_logistic`).
    """

    power_rule: str = "two_sided_95"
    matched_cov: str = CovType.MODEL.value
    methods: tuple[str, ...] = tuple(m.value for m in METHODS)
    separation_rule: str = "standardised"

    def __post_init__(self):
        if self.power_rule not in ("two_sided_95", "one_sided_05"):
            raise ValueError(f"unknown power rule {self.power_rule!r}")
        CovType(self.matched_cov)
        if self.separation_rule not in SEPARATION_RULES:
            raise ValueError(f"unknown separation rule {self.separation_rule!r}")
        for m in self.methods:
            Method(m)

    @property
    def power_z(self) -> float:
        return Z_TWO_SIDED if self.power_rule == "two_sided_95" else Z_ONE_SIDED_05

    @property
    def method_list(self) -> list[Method]:
        chosen = {Method(m) for m in self.methods}
        return [m for m in METHODS if m in chosen]


@dataclass(frozen=True)
class CellSpec:
    n: int
    exposure_prevalence: float
    overlap_scenario: int
    link: str = "logit"
    unmeasured_confounder: bool = False
    reps: int = 1000
    base_seed: int = 0

    def __post_init__(self):
        self.replicate(0)  # validates the scenario fields
        if self.reps < 1:
            raise ValueError("reps must be >= 1")

    def replicate(self, index: int) -> ScenarioSpec:
        return ScenarioSpec(
            n=self.n,
            exposure_prevalence=self.exposure_prevalence,
            overlap_scenario=self.overlap_scenario,
            link=self.link,
            unmeasured_confounder=self.unmeasured_confounder,
            replicate_index=index,
            base_seed=self.base_seed,
        )

    @property
    def dgp_label(self) -> str:
        return self.link + ("_unmeasured" if self.unmeasured_confounder else "")

    @property
    def key(self) -> str:
        return (
            f"{self.dgp_label}_n{self.n}_p{self.exposure_prevalence:g}_s{self.overlap_scenario}"
            f"_r{self.reps}_seed{self.base_seed}"
        )


@dataclass
class ReplicateResult:
    true_log_mor: float
    estimates: dict[Method, MethodEstimate]


@dataclass
class MethodMetrics:
    convergence_pct: float
    n_converged: int = 0
    bias: Optional[float] = None
    se_bias: Optional[float] = None
    abs_error: Optional[float] = None
    se_abs_error: Optional[float] = None
    power_pct: Optional[float] = None
    se_power: Optional[float] = None
    coverage_pct: Optional[float] = None
    se_coverage: Optional[float] = None

    @property
    def missing(self) -> bool:
        return self.bias is None

    @property
    def coverage_power_mean(self) -> Optional[float]:
        if self.coverage_pct is None or self.power_pct is None:
            return None
        return (self.coverage_pct + self.power_pct) / 2.0


@dataclass
class CellMetrics:
    cell: CellSpec
    methods: dict[Method, MethodMetrics] = field(default_factory=dict)


def run_replicate(spec: ScenarioSpec, options: AnalysisOptions = AnalysisOptions()) -> ReplicateResult:
    """Simulate one dataset and apply every selected method.

    Numerical failures anywhere become ``converged=False`` for the
    affected methods; nothing is raised.
    """
    methods = options.method_list
    try:
        data = dgp.simulate(spec)
    except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        log.debug("replicate %s failed in data generation: %s", spec, exc)
        return ReplicateResult(np.nan, {m: MethodEstimate.failed(m, "dgp failure") for m in methods})

    ps = None
    estimates = {}
    for method in methods:
        try:
            if method.uses_ps and ps is None:
                ps = estimate_ps(data, options.separation_rule)
            rng = spec.rng(dgp.STREAM_CALIPER) if method is Method.CALIPER_MATCH else None
            estimates[method] = run_method(
                method,
                data,
                ps,
                caliper_rng=rng,
                matched_cov=options.matched_cov,
                separation_rule=options.separation_rule,
            )
        except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
            log.debug("method %s failed on %s: %s", method.value, spec, exc)
            estimates[method] = MethodEstimate.failed(method, f"error: {exc}")
    return ReplicateResult(data.true_log_mor, estimates)


def aggregate_cell(
    estimates: Sequence[MethodEstimate],
    truths: Sequence[float],
    power_z: float = Z_TWO_SIDED,
) -> MethodMetrics:
    """Performance measures for one method over a cell's replicates.

    Metrics use converged replicates only. Bias is ``mean(truth - estimate)``.
    If fewer than 25% of replicates converged every metric is left missing.
    """
    if len(estimates) != len(truths):
        raise ValueError("estimates and truths differ in length")
    total = len(estimates)
    if total == 0:
        raise ValueError("need at least one replicate")
    ok = [i for i, est in enumerate(estimates) if est.converged]
    conv_pct = 100.0 * len(ok) / total
    metrics = MethodMetrics(convergence_pct=conv_pct, n_converged=len(ok))
    if conv_pct < MIN_CONVERGENCE_PCT or not ok:
        return metrics

    z = np.array([truths[i] for i in ok], dtype=float)
    zhat = np.array([estimates[i].log_or for i in ok], dtype=float)
    se = np.array([estimates[i].se for i in ok], dtype=float)
    r = len(ok)
    err = z - zhat
    abs_err = np.abs(err)
    covered = np.abs(err) <= Z_TWO_SIDED * se
    rejected = zhat - power_z * se > 0.0

    def sem(v):
        return float(np.std(v, ddof=1) / math.sqrt(r)) if r > 1 else 0.0

    def prop_se(p):
        return float(math.sqrt(p * (1.0 - p) / r) * 100.0)

    metrics.bias = float(err.mean())
    metrics.se_bias = sem(err)
    metrics.abs_error = float(abs_err.mean())
    metrics.se_abs_error = sem(abs_err)
    metrics.coverage_pct = float(100.0 * covered.mean())
    metrics.se_coverage = prop_se(covered.mean())
    metrics.power_pct = float(100.0 * rejected.mean())
    metrics.se_power = prop_se(rejected.mean())
    return metrics


def _run_one(args: tuple[CellSpec, int, AnalysisOptions]) -> ReplicateResult:
    cell, index, options = args
    return run_replicate(cell.replicate(index), options)


def run_replicates(
    cell: CellSpec,
    options: AnalysisOptions = AnalysisOptions(),
    workers: int = 1,
) -> list[ReplicateResult]:
    """All replicates of a cell, in replicate order regardless of ``workers``."""
    jobs = [(cell, i, options) for i in range(cell.reps)]
    if workers <= 1:
        return [_run_one(j) for j in jobs]
    chunk = max(1, cell.reps // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one, jobs, chunksize=chunk))


def summarise(cell: CellSpec, results: Sequence[ReplicateResult], options: AnalysisOptions) -> CellMetrics:
    truths = [r.true_log_mor for r in results]
    out = CellMetrics(cell)
    for method in options.method_list:
        out.methods[method] = aggregate_cell([r.estimates[method] for r in results], truths, options.power_z)
    return out


def _results_to_json(results: Sequence[ReplicateResult]) -> dict:
    methods = list(results[0].estimates) if results else []
    return {
        "truth": [r.true_log_mor for r in results],
        "estimates": {
            m.value: [[r.estimates[m].log_or, r.estimates[m].se, r.estimates[m].converged] for r in results]
            for m in methods
        },
    }


def _results_from_json(blob: dict) -> list[ReplicateResult]:
    truths = blob["truth"]
    out = [ReplicateResult(t, {}) for t in truths]
    for name, rows in blob["estimates"].items():
        method = Method(name)
        for res, (log_or, se, conv) in zip(out, rows):
            res.estimates[method] = MethodEstimate(method, log_or, se, conv)
    return out


def run_cell(
    cell: CellSpec,
    options: AnalysisOptions = AnalysisOptions(),
    workers: int = 1,
    checkpoint_dir: Optional[str | Path] = None,
) -> CellMetrics:
    """Run (or resume) one cell and aggregate it.

    With ``checkpoint_dir`` the raw replicate results are stored as
    ``<cell key>.json``; an existing file with the same methods and
    analysis options is reused instead of re-running the cell.
    """
    path = None
    tag = {
        "matched_cov": options.matched_cov,
        "methods": sorted(options.methods),
        "separation_rule": options.separation_rule,
    }
    if checkpoint_dir is not None:
        path = Path(checkpoint_dir) / f"{cell.key}.json"
        if path.exists():
            blob = json.loads(path.read_text())
            if blob.get("options") == tag and blob.get("cell") == asdict(cell):
                return summarise(cell, _results_from_json(blob["results"]), options)
    results = run_replicates(cell, options, workers)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps({"cell": asdict(cell), "options": tag, "results": _results_to_json(results)}))
        tmp.replace(path)
    return summarise(cell, results, options)


def run_grid(
    cells: Iterable[CellSpec],
    workers: int = 1,
    base_seed: Optional[int] = None,
    options: AnalysisOptions = AnalysisOptions(),
    checkpoint_dir: Optional[str | Path] = None,
    progress: Optional[Callable[[int, int, CellSpec], None]] = None,
) -> list[CellMetrics]:
    """Run a list of cells; ``base_seed`` (if given) overrides each cell's seed."""
    cells = [replace(c, base_seed=base_seed) if base_seed is not None else c for c in cells]
    table = []
    for i, cell in enumerate(cells):
        if progress is not None:
            progress(i, len(cells), cell)
        table.append(run_cell(cell, options, workers, checkpoint_dir))
    return table


def full_grid(
    sizes: Sequence[int] = dgp.GRID_SIZES,
    prevalences: Sequence[float] = dgp.GRID_PREVALENCES,
    scenarios: Sequence[int] = tuple(dgp.OVERLAP_PARAMS),
    dgps: Sequence[tuple[str, bool]] = (("logit", False),),
    reps: int = 1000,
    base_seed: int = 0,
) -> list[CellSpec]:
    return [
        CellSpec(n, p, s, link, u6, reps, base_seed)
        for link, u6 in dgps
        for n in sizes
        for p in prevalences
        for s in scenarios
    ]


def _fmt(value) -> str:
    if value is None:
        return "NA"
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _row_order(row: CellMetrics):
    c = row.cell
    return (c.link, c.unmeasured_confounder, -c.n, c.exposure_prevalence, c.overlap_scenario)


def emit_csv(table: Iterable[CellMetrics], path: str | Path) -> Path:
    """Write the results table.

    Rows are ordered by DGP, then n descending, prevalence ascending,
    scenario ascending and the fixed method order. Missing metrics are
    written as ``NA``. ``bias`` is truth minus estimate.
    """
    path = Path(path)
    rows = sorted(table, key=_row_order)
    try:
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            for cm in rows:
                c = cm.cell
                for method in METHODS:
                    if method not in cm.methods:
                        continue
                    m = cm.methods[method]
                    writer.writerow(
                        [_fmt(c.n), _fmt(float(c.exposure_prevalence)), _fmt(c.overlap_scenario), method.value]
                        + [_fmt(getattr(m, f)) for f in METRIC_FIELDS]
                        + [c.link, _fmt(c.unmeasured_confounder), _fmt(c.reps), _fmt(c.base_seed)]
                    )
    except OSError as exc:
        raise OSError(f"cannot write results CSV {path}: {exc}") from exc
    return path


class CSVFormatError(ValueError):
    pass


def read_csv(path: str | Path) -> list[CellMetrics]:
    """Parse a CSV written by :func:`emit_csv` back into cell metrics."""
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise OSError(f"cannot read results CSV {path}: {exc}") from exc
    cells: dict[CellSpec, CellMetrics] = {}
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_HEADER:
            raise CSVFormatError(f"{path}: row 1: unexpected header {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(CSV_HEADER):
                raise CSVFormatError(f"{path}: row {lineno}: expected {len(CSV_HEADER)} fields, got {len(row)}")
            rec = dict(zip(CSV_HEADER, row))
            try:
                cell = CellSpec(
                    n=int(rec["n"]),
                    exposure_prevalence=float(rec["exposure_probability"]),
                    overlap_scenario=int(rec["ps_overlap_scenario"]),
                    link=rec["dgp_link"],
                    unmeasured_confounder=bool(int(rec["unmeasured_confounder"])),
                    reps=int(rec["reps"]),
                    base_seed=int(rec["seed"]),
                )
                method = Method(rec["method"])
                values = {f: None if rec[f] == "NA" else float(rec[f]) for f in METRIC_FIELDS}
            except ValueError as exc:
                raise CSVFormatError(f"{path}: row {lineno}: {exc}") from exc
            if values["convergence_pct"] is None:
                raise CSVFormatError(f"{path}: row {lineno}: convergence_pct cannot be NA")
            cm = cells.setdefault(cell, CellMetrics(cell))
            cm.methods[method] = MethodMetrics(**values)
    if not cells:
        raise CSVFormatError(f"{path}: no data rows")
    return list(cells.values())
