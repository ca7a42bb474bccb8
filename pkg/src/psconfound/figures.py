"""Small-multiple SVG panels of the performance measures."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from psconfound.estimators import METHODS  # noqa: E402
from psconfound.harness import CellMetrics, MethodMetrics  # noqa: E402

FIGURE_METRICS = {
    "convergence": ("Convergence (%)", lambda m: m.convergence_pct),
    "bias": ("Bias", lambda m: m.bias),
    "abs_error": ("Absolute error", lambda m: m.abs_error),
    "power": ("Power (%)", lambda m: m.power_pct),
    "coverage": ("Coverage (%)", lambda m: m.coverage_pct),
    "coverage_power_mean": ("Mean of coverage and power (%)", lambda m: m.coverage_power_mean),
}

_STYLE = {
    "ps_covariate": ("tab:blue", "o"),
    "nn_match": ("tab:orange", "s"),
    "caliper_match": ("tab:green", "^"),
    "iptw": ("tab:red", "v"),
    "regression_standardised": ("black", "D"),
}


def _value(metrics: MethodMetrics | None, getter) -> float:
    if metrics is None:
        return np.nan
    v = getter(metrics)
    return np.nan if v is None else float(v)


def emit_figures(table: Iterable[CellMetrics], out_dir: str | Path) -> list[Path]:
    """One figure per (metric, DGP): rows are prevalences, columns sample sizes.

    Each panel plots the metric against overlap scenario with one line per
    method. Missing metrics show up as gaps.
    """
    table = list(table)
    if not table:
        raise ValueError("no results to plot")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create figure directory {out_dir}: {exc}") from exc

    by_dgp: dict[str, list[CellMetrics]] = {}
    for cm in table:
        by_dgp.setdefault(cm.cell.dgp_label, []).append(cm)

    written = []
    for dgp_label, cells in sorted(by_dgp.items()):
        sizes = sorted({c.cell.n for c in cells}, reverse=True)
        prevalences = sorted({c.cell.exposure_prevalence for c in cells}, reverse=True)
        scenarios = sorted({c.cell.overlap_scenario for c in cells})
        index = {(c.cell.n, c.cell.exposure_prevalence, c.cell.overlap_scenario): c for c in cells}
        for name, (title, getter) in FIGURE_METRICS.items():
            fig, axes = plt.subplots(
                len(prevalences),
                len(sizes),
                figsize=(2.6 * len(sizes) + 1.0, 2.2 * len(prevalences) + 0.8),
                sharex=True,
                sharey=True,
                squeeze=False,
            )
            for i, prev in enumerate(prevalences):
                for j, n in enumerate(sizes):
                    ax = axes[i, j]
                    for method in METHODS:
                        ys = [
                            _value(index[(n, prev, s)].methods.get(method) if (n, prev, s) in index else None, getter)
                            for s in scenarios
                        ]
                        if np.all(np.isnan(ys)):
                            continue
                        color, marker = _STYLE[method.value]
                        ax.plot(scenarios, ys, color=color, marker=marker, ms=3, lw=1, label=method.label)
                    if i == 0:
                        ax.set_title(f"n = {n:,}", fontsize=9)
                    if j == 0:
                        ax.set_ylabel(f"Pr(E=1) = {prev:g}", fontsize=9)
                    if i == len(prevalences) - 1:
                        ax.set_xlabel("PS overlap scenario", fontsize=8)
                    ax.set_xticks(scenarios)
                    ax.tick_params(labelsize=7)
                    ax.grid(alpha=0.3)
            handles, labels = [], []
            for ax in axes.flat:
                for h, lab in zip(*ax.get_legend_handles_labels()):
                    if lab not in labels:
                        handles.append(h)
                        labels.append(lab)
            if handles:
                fig.legend(handles, labels, loc="lower center", ncol=len(labels), fontsize=8, frameon=False)
            fig.suptitle(f"{title} [{dgp_label}]", fontsize=10)
            fig.tight_layout(rect=(0, 0.06, 1, 0.95))
            path = out_dir / f"fig_{name}_{dgp_label}.svg"
            try:
                fig.savefig(path, format="svg", metadata={"Date": None})
            except OSError as exc:
                raise OSError(f"cannot write figure {path}: {exc}") from exc
            finally:
                plt.close(fig)
            written.append(path)
    return written
