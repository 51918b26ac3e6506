"""Comparison tables, relative-gain data and a gains bar chart for finished runs."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FULL_MODEL = "proposed"
ABLATIONS = ("st_only", "lt_only", "nots", "dot")
VARIANT_ORDER = ("proposed", "centric", "tempfusion", "popularity", "mf", "st_only", "lt_only", "nots", "dot")


class ReportError(FileNotFoundError):
    pass


@dataclass
class Report:
    metrics: dict[str, dict[str, float]]
    gains: dict[str, dict[str, float]] = field(default_factory=dict)
    baseline_gains: dict[str, dict[str, float]] = field(default_factory=dict)
    pvalues: dict[str, dict[str, float]] = field(default_factory=dict)
    baseline: str | None = None
    seeds: list[int] | None = None

    @property
    def metric_names(self) -> list[str]:
        first = next(iter(self.metrics.values()))
        return sorted(first, key=_metric_key)

    def table(self) -> str:
        names = self.metric_names
        width = max(len(v) for v in self.metrics) + 2
        lines = []
        if self.seeds and len(self.seeds) > 1:
            lines.append(f"mean over seeds {', '.join(map(str, self.seeds))}")
        lines.append("variant".ljust(width) + "".join(m.rjust(11) for m in names))
        for v, vals in self.metrics.items():
            lines.append(v.ljust(width) + "".join(f"{vals[m]:11.4f}" for m in names))
        if self.baseline_gains:
            lines += ["", f"relative gain vs {self.baseline} (paired p-value)"]
            for v, g in self.baseline_gains.items():
                cells = "".join(f"  {m} {g[m]:+.1%} (p={self.pvalues[v][m]:.3g})" for m in names)
                lines.append(v.ljust(width) + cells)
        if self.gains:
            lines += ["", f"gain of {FULL_MODEL} over each variant: (full - variant) / variant"]
            for v, g in self.gains.items():
                lines.append(v.ljust(width) + "".join(f"{g[m]:+11.1%}" for m in names))
        return "\n".join(lines) + "\n"


def _metric_key(name: str) -> tuple:
    kind, _, k = name.partition("@")
    return (int(k) if k.isdigit() else 0, kind != "recall", kind)


def _ordered(table: dict[str, dict]) -> dict[str, dict]:
    rank = {v: n for n, v in enumerate(VARIANT_ORDER)}
    return {v: table[v] for v in sorted(table, key=lambda v: (rank.get(v, len(rank)), v))}


def full_model_gains(metrics: dict[str, dict[str, float]], full: str = FULL_MODEL) -> dict[str, dict[str, float]]:
    if full not in metrics:
        return {}
    base = metrics[full]
    out = {}
    for v, vals in metrics.items():
        if v == full:
            continue
        out[v] = {m: (base[m] - vals[m]) / vals[m] if vals[m] else float("nan") for m in base}
    return out


def load_report(run_dir: str | Path) -> Report:
    """Read a matrix directory (``matrix.json``) or a single-variant one (``metrics.json``)."""
    run = Path(run_dir)
    matrix, single = run / "matrix.json", run / "metrics.json"
    if matrix.exists():
        data = json.loads(matrix.read_text(encoding="utf-8"))
        missing = [p for paths in data.get("runs", {}).values() for p in paths if not (run / p).exists()]
        if missing:
            raise ReportError(f"missing artifacts in {run}: {', '.join(missing)}")
        metrics = _ordered(data["aggregate"])
        return Report(
            metrics,
            _ordered(full_model_gains(metrics)),
            _ordered(data.get("gain_vs_baseline", {})),
            data.get("pvalue_vs_baseline", {}),
            data.get("baseline"),
            data.get("seeds"),
        )
    if single.exists():
        data = json.loads(single.read_text(encoding="utf-8"))
        return Report({data["system"]: data["aggregate"]})
    raise ReportError(f"missing artifacts in {run}: matrix.json or metrics.json")


def plot_gains(gains: dict[str, dict[str, float]], path: str | Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    variants = [v for v in ABLATIONS if v in gains] or list(gains)
    metrics = sorted(gains[variants[0]], key=_metric_key)
    x = np.arange(len(metrics))
    width = 0.8 / len(variants)
    fig, ax = plt.subplots(figsize=(1.6 + 1.4 * len(metrics), 3.6))
    for n, v in enumerate(variants):
        ax.bar(x + (n - (len(variants) - 1) / 2) * width, [100 * gains[v][m] for m in metrics], width, label=v)
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_xticks(x, metrics)
    ax.set_ylabel(f"gain of {FULL_MODEL} (%)")
    ax.legend(frameon=False, fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_report(run_dir: str | Path, out_dir: str | Path | None = None, plot: bool = True) -> dict[str, Path]:
    """Write ``report.txt``, ``report.csv`` and, when gains exist, ``gains.csv`` plus ``gains.png``."""
    rep = load_report(run_dir)
    out = Path(out_dir) if out_dir else Path(run_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"text": out / "report.txt", "table": out / "report.csv"}
    paths["text"].write_text(rep.table(), encoding="utf-8")
    with open(paths["table"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "metric", "value"])
        for v, vals in rep.metrics.items():
            for m in rep.metric_names:
                x = vals[m]
                w.writerow([v, m, f"{x:.6f}"])
    if rep.gains:
        paths["gains"] = out / "gains.csv"
        with open(paths["gains"], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["variant", "metric", "relative_gain"])
            for v, g in rep.gains.items():
                for m in rep.metric_names:
                    x = g[m]
                    w.writerow([v, m, f"{x:.6f}"])
        if plot:
            paths["plot"] = out / "gains.png"
            plot_gains(rep.gains, paths["plot"])
    return paths
