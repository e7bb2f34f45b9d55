"""Cross-run reporting: tidy CSV plus learning-curve figures.

Consumes the ``metrics.csv`` written by training runs and produces a
long-format table (one row per run, round, metric) next to one PNG per
metric with every run overlaid.
"""

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .core import DataError

__all__ = [
    "METRIC_COLUMNS",
    "load_metrics_csv",
    "write_long_csv",
    "render_curves",
    "build_report",
]

METRIC_COLUMNS = (
    "avg_acc_attr",
    "disparity_attr",
    "robustness_attr",
    "avg_acc_client",
    "disparity_client",
    "robustness_client",
    "max_group_loss",
)


def load_metrics_csv(path):
    """Rows of a per-round metrics table as (rounds, {metric: values})."""
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or "round" not in reader.fieldnames:
                raise DataError(f"{path}: missing 'round' column")
            cols = [c for c in METRIC_COLUMNS if c in reader.fieldnames]
            rounds = []
            series = {c: [] for c in cols}
            for row in reader:
                rounds.append(int(row["round"]))
                for c in cols:
                    series[c].append(float(row[c]))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except ValueError as exc:
        raise DataError(f"{path}: malformed metrics row: {exc}") from exc
    return rounds, series


def _run_label(run_dir: Path) -> str:
    summary = run_dir / "summary.json"
    if summary.exists():
        try:
            doc = json.loads(summary.read_text())
            alg = doc.get("config", {}).get("algorithm")
            if alg:
                return str(alg)
        except (json.JSONDecodeError, OSError):
            pass
    return run_dir.name


def write_long_csv(out_path, runs) -> int:
    """runs: list of (name, rounds, series). Returns the row count."""
    out_path = Path(out_path)
    count = 0
    with out_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "round", "metric", "value"])
        for name, rounds, series in runs:
            for metric, values in series.items():
                for rnd, value in zip(rounds, values):
                    writer.writerow([name, rnd, metric, "%.17g" % value])
                    count += 1
    return count


def render_curves(out_dir, runs) -> list:
    """One PNG per metric present in any run; returns written paths."""
    out_dir = Path(out_dir)
    metrics = []
    for _, _, series in runs:
        for c in series:
            if c not in metrics:
                metrics.append(c)
    metrics.sort(key=METRIC_COLUMNS.index)
    written = []
    for metric in metrics:
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        for name, rounds, series in runs:
            if metric not in series:
                continue
            ax.plot(rounds, series[metric], label=name, linewidth=1.4)
        ax.set_xlabel("round")
        ax.set_ylabel(metric)
        ax.set_title(metric.replace("_", " "))
        ax.grid(True, alpha=0.3)
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = out_dir / f"curve_{metric}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written


def build_report(run_dirs, out_dir) -> dict:
    """Collect metrics.csv from each run dir, then emit the tidy table and
    the figures into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs = []
    seen = {}
    for raw in run_dirs:
        run_dir = Path(raw)
        metrics_path = run_dir / "metrics.csv"
        if not metrics_path.exists():
            raise DataError(f"{run_dir}: no metrics.csv found")
        rounds, series = load_metrics_csv(metrics_path)
        if not rounds:
            raise DataError(f"{metrics_path}: no metric rows (was the run scored?)")
        label = _run_label(run_dir)
        seen[label] = seen.get(label, 0) + 1
        if seen[label] > 1:
            label = f"{label}#{seen[label]}"
        runs.append((label, rounds, series))
    table = out_dir / "report.csv"
    row_count = write_long_csv(table, runs)
    figures = render_curves(out_dir, runs)
    return {
        "table": str(table),
        "rows": row_count,
        "figures": [str(p) for p in figures],
        "runs": [name for name, _, _ in runs],
    }
