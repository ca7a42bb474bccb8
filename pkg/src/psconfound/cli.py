"""Command line entry point: ``psconfound run | verify | plot``.

Exit codes: 0 success, 1 invalid configuration, 2 verification failure,
3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

from psconfound import dgp
from psconfound.estimators import METHODS
from psconfound.harness import AnalysisOptions, CSVFormatError, emit_csv, full_grid, read_csv, run_grid
from psconfound.solvers import SEPARATION_RULES

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_IO = 0, 1, 2, 3

DGP_VARIANTS = {
    "logit": ("logit", False),
    "cloglog": ("cloglog", False),
    "logit_unmeasured": ("logit", True),
    "cloglog_unmeasured": ("cloglog", True),
}

log = logging.getLogger("psconfound")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    sizes: list[int] = field(default_factory=lambda: list(dgp.GRID_SIZES))
    prevalences: list[float] = field(default_factory=lambda: list(dgp.GRID_PREVALENCES))
    scenarios: list[int] = field(default_factory=lambda: list(dgp.OVERLAP_PARAMS))
    dgps: list[str] = field(default_factory=lambda: ["logit"])
    reps: int = 1000
    base_seed: int = 0
    threads: int = 1
    output_dir: str = "results"
    power_rule: str = "two_sided_95"
    matched_cov: str = "model"
    separation_rule: str = "standardised"
    methods: list[str] = field(default_factory=lambda: [m.value for m in METHODS])

    def validate(self) -> "RunConfig":
        if not (self.sizes and self.prevalences and self.scenarios and self.dgps and self.methods):
            raise ConfigError("grid selection must be non-empty")
        if self.reps < 1:
            raise ConfigError("reps must be >= 1")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        for d in self.dgps:
            if d not in DGP_VARIANTS:
                raise ConfigError(f"unknown dgp {d!r}; choose from {sorted(DGP_VARIANTS)}")
        try:
            self.cells()
            self.options()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def cells(self):
        return full_grid(
            self.sizes,
            self.prevalences,
            self.scenarios,
            [DGP_VARIANTS[d] for d in self.dgps],
            self.reps,
            self.base_seed,
        )

    def options(self) -> AnalysisOptions:
        return AnalysisOptions(self.power_rule, self.matched_cov, tuple(self.methods), self.separation_rule)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)


_FLAG_TO_FIELD = {
    "n": "sizes",
    "prevalence": "prevalences",
    "scenario": "scenarios",
    "dgp": "dgps",
    "reps": "reps",
    "seed": "base_seed",
    "threads": "threads",
    "out": "output_dir",
    "power_rule": "power_rule",
    "matched_cov": "matched_cov",
    "separation_rule": "separation_rule",
    "methods": "methods",
}


def build_config(args: argparse.Namespace) -> RunConfig:
    """Config file (if any) with command-line flags layered on top."""
    if args.config:
        path = Path(args.config)
        try:
            config = RunConfig.from_json(path.read_text())
        except OSError as exc:
            raise OSError(f"cannot read config {path}: {exc}") from exc
    else:
        config = RunConfig()
    for flag, name in _FLAG_TO_FIELD.items():
        value = getattr(args, flag, None)
        if value is not None:
            setattr(config, name, value)
    return config.validate()


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="psconfound", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate a grid of cells and write results.csv")
    run.add_argument("--config", help="JSON run config; flags override its values")
    run.add_argument("--n", type=int, nargs="+", help="sample sizes")
    run.add_argument("--prevalence", type=float, nargs="+", help="exposure prevalences")
    run.add_argument("--scenario", type=int, nargs="+", choices=sorted(dgp.OVERLAP_PARAMS),
                     help="PS overlap scenarios")
    run.add_argument("--dgp", nargs="+", choices=sorted(DGP_VARIANTS))
    run.add_argument("--reps", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--threads", type=int, help="worker processes")
    run.add_argument("--out", help="output directory (results.csv, cells/ checkpoints)")
    run.add_argument("--power-rule", choices=["two_sided_95", "one_sided_05"])
    run.add_argument("--matched-cov", choices=["model", "sandwich"])
    run.add_argument("--separation-rule", choices=list(SEPARATION_RULES))
    run.add_argument("--methods", nargs="+", choices=[m.value for m in METHODS])
    run.add_argument("--figures", action="store_true", help="also write SVG panels")
    run.add_argument("--write-config", metavar="PATH", help="save the effective config as JSON")
    run.add_argument("--dump-dataset", metavar="PATH",
                     help="write replicate 0 of the first cell as CSV and exit")

    ver = sub.add_parser("verify", help="re-run the verification cells against the bundled tables")
    ver.add_argument("--reps", type=int, default=1000)
    ver.add_argument("--seed", type=int, default=0)
    ver.add_argument("--threads", type=int, default=1)
    ver.add_argument("--quick", action="store_true", help="criterion 1 cell at 200 reps with a widened coverage band")
    ver.add_argument("--tolerance", type=float, help="override every tolerance")
    ver.add_argument("--reference", help="alternative reference table CSV")
    ver.add_argument("--checkpoint-dir", help="reuse/store per-cell results here")
    ver.add_argument("--report", help="write the report as CSV")

    plot = sub.add_parser("plot", help="draw SVG panels from a results CSV")
    plot.add_argument("csv_path")
    plot.add_argument("out_dir")
    return parser


def _progress(i: int, total: int, cell) -> None:
    print(f"[{i + 1}/{total}] {cell.key}", file=sys.stderr, flush=True)


def cmd_run(args: argparse.Namespace) -> int:
    config = build_config(args)
    if args.write_config:
        Path(args.write_config).write_text(config.to_json())
    cells = config.cells()
    if args.dump_dataset:
        data = dgp.simulate(cells[0].replicate(0))
        dgp.write_dataset_csv(data, args.dump_dataset)
        print(args.dump_dataset)
        return EXIT_OK
    out = Path(config.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    table = run_grid(cells, workers=config.threads, options=config.options(),
                     checkpoint_dir=out / "cells", progress=_progress)
    path = emit_csv(table, out / "results.csv")
    print(path)
    if args.figures:
        from psconfound.figures import emit_figures

        for p in emit_figures(table, out / "figures"):
            print(p)
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    from psconfound.reference import verify

    if args.reps < 1 or args.threads < 1:
        raise ConfigError("reps and threads must be >= 1")
    report = verify(
        reps=args.reps,
        base_seed=args.seed,
        workers=args.threads,
        quick=args.quick,
        tolerance=args.tolerance,
        reference_path=args.reference,
        checkpoint_dir=args.checkpoint_dir,
        progress=lambda cell, variant: print(f"running {cell.key} ({variant})", file=sys.stderr, flush=True),
    )
    print(report.to_text())
    if args.report:
        report.write_csv(args.report)
    return EXIT_OK if report.passed else EXIT_VERIFY


def cmd_plot(args: argparse.Namespace) -> int:
    from psconfound.figures import emit_figures

    table = read_csv(args.csv_path)
    for p in emit_figures(table, args.out_dir):
        print(p)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    handler = {"run": cmd_run, "verify": cmd_verify, "plot": cmd_plot}[args.command]
    try:
        return handler(args)
    except (ConfigError, CSVFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
