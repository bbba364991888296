"""Loss curves and metric bar charts rendered from run directories."""

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import TABLE_COLUMNS  # noqa: E402


def read_log(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def epoch_curves(records):
    """{(phase, key): (epochs, means)} for every numeric loss key."""
    acc = {}
    for r in records:
        for k, v in r.items():
            if k in ("phase", "epoch", "step") or not isinstance(v, (int, float)):
                continue
            acc.setdefault((r["phase"], k), {}).setdefault(r["epoch"], []).append(v)
    return {key: (sorted(d), [float(np.mean(d[e])) for e in sorted(d)]) for key, d in acc.items()}


def plot_log(log_path, out_path):
    curves = epoch_curves(read_log(log_path))
    phases = sorted({p for p, _ in curves})
    fig, axes = plt.subplots(1, len(phases), figsize=(5 * len(phases), 3.5), squeeze=False)
    for ax, phase in zip(axes[0], phases):
        for (p, k), (ep, mean) in sorted(curves.items()):
            if p == phase:
                ax.plot(ep, mean, label=k)
        ax.set_title(f"phase {phase}")
        ax.set_xlabel("epoch")
        ax.set_yscale("symlog", linthresh=1e-2)
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return out_path


def plot_reports(reports, out_path):
    """One bar panel per Table-1 column, one bar per run."""
    names = list(reports)
    fig, axes = plt.subplots(1, len(TABLE_COLUMNS), figsize=(2.6 * len(TABLE_COLUMNS), 3.2))
    for ax, col in zip(axes, TABLE_COLUMNS):
        vals = [reports[n].get(col) for n in names]
        ax.bar(range(len(names)), [np.nan if v is None else v for v in vals])
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=60, ha="right", fontsize=7)
        ax.set_title(col)
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return out_path


def render_report(runs_dir, out_dir=None):
    """Plot every training log and a bar chart of every report under
    ``runs_dir``. Returns the written file paths."""
    runs_dir = Path(runs_dir)
    out_dir = Path(out_dir) if out_dir else runs_dir / "plots"
    written = []
    logs = sorted(runs_dir.rglob("train_log.jsonl"))
    reports = {}
    for p in sorted(runs_dir.rglob("report.json")):
        with open(p) as fh:
            reports[str(p.parent.relative_to(runs_dir)) or "."] = json.load(fh)["aggregates"]
    if not logs and not reports:
        return written
    out_dir.mkdir(parents=True, exist_ok=True)
    for log in logs:
        name = str(log.parent.relative_to(runs_dir)).replace("/", "_").replace("+", "p") or "run"
        written.append(plot_log(log, out_dir / f"loss_{name}.png"))
    if reports:
        written.append(plot_reports(reports, out_dir / "metrics.png"))
        lines = ["run," + ",".join(TABLE_COLUMNS)]
        for n, agg in reports.items():
            lines.append(n + "," + ",".join("" if agg[c] is None else f"{agg[c]:.6g}"
                                            for c in TABLE_COLUMNS))
        table = out_dir / "metrics.csv"
        table.write_text("\n".join(lines) + "\n")
        written.append(table)
    return written
