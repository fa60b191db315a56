"""Report rendering: delimited CSV, aligned text tables, and figures.

Every evaluation report is written three ways next to each other: a CSV with
full-precision values (17 significant digits, re-parseable bit-exactly), an
aligned text table rounded to 2 decimals for reading, and a PNG bar chart.
The `report` command merges several eval CSVs into one table across configs.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .train import EvalReport

SETTING_ORDER = ("AV", "A", "V", "NA", "NV")
MEAN_ORDER = ("M", "M_noise")


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def report_rows(report: EvalReport) -> list[tuple[str, str, str, float]]:
    """Flatten a report to (label, setting, metric, value) rows."""
    rows = []
    for setting in SETTING_ORDER:
        if setting in report.values:
            for metric in report.metric_names:
                rows.append((report.label, setting, metric, report.values[setting][metric]))
    for mean_name in MEAN_ORDER:
        if mean_name in report.means:
            for metric in report.metric_names:
                rows.append((report.label, mean_name, metric, report.means[mean_name][metric]))
    return rows


def write_report_csv(report: EvalReport, path):
    lines = ["label,setting,metric,value"]
    for label, setting, metric, value in report_rows(report):
        lines.append(f"{label},{setting},{metric},{_fmt(value)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_report_csv(path) -> list[tuple[str, str, str, float]]:
    rows = []
    lines = Path(path).read_text().strip().splitlines()
    for line in lines[1:]:
        label, setting, metric, value = line.split(",")
        rows.append((label, setting, metric, float(value)))
    return rows


def _pivot(rows) -> tuple[list[str], list[tuple]]:
    """Rows (label, setting, metric, value) -> one table row per (label, metric)."""
    columns_present = [c for c in SETTING_ORDER + MEAN_ORDER
                       if any(r[1] == c for r in rows)]
    keys = []
    for label, _, metric, _ in rows:
        if (label, metric) not in keys:
            keys.append((label, metric))
    table = []
    for label, metric in keys:
        cells = {setting: value for (lb, setting, mt, value) in rows
                 if lb == label and mt == metric}
        table.append((label, metric, [cells.get(c) for c in columns_present]))
    return columns_present, table


def format_table(rows) -> str:
    """Aligned text table, values rounded to 2 decimals for display."""
    columns, table = _pivot(rows)
    header = ["config", "metric"] + columns
    body = [[label, metric] + ["" if v is None else f"{v:.2f}" for v in cells]
            for label, metric, cells in table]
    widths = [max(len(str(row[i])) for row in [header] + body) for i in range(len(header))]
    lines = ["  ".join(str(cell).ljust(w) for cell, w in zip(row, widths)).rstrip()
             for row in [header] + body]
    return "\n".join(lines) + "\n"


def write_table_csv(rows, path):
    columns, table = _pivot(rows)
    lines = ["config,metric," + ",".join(columns)]
    for label, metric, cells in table:
        lines.append(f"{label},{metric}," + ",".join("" if v is None else _fmt(v) for v in cells))
    Path(path).write_text("\n".join(lines) + "\n")


def render_report_figure(rows, path, title: str = "evaluation"):
    """Grouped bar chart: one group per corruption setting/mean, bars per config."""
    columns, table = _pivot(rows)
    metric_names = []
    for _, metric, _ in table:
        if metric not in metric_names:
            metric_names.append(metric)
    fig, axes = plt.subplots(1, len(metric_names), figsize=(2.5 + 2.2 * len(columns), 3.6),
                             squeeze=False)
    for ax, metric in zip(axes[0], metric_names):
        entries = [(label, cells) for label, mt, cells in table if mt == metric]
        n = len(entries)
        width = 0.8 / max(n, 1)
        xs = range(len(columns))
        for i, (label, cells) in enumerate(entries):
            offs = [x + (i - (n - 1) / 2) * width for x in xs]
            vals = [0.0 if v is None else v for v in cells]
            ax.bar(offs, vals, width=width, label=label)
        ax.set_xticks(list(xs))
        ax.set_xticklabels(columns)
        ax.set_ylabel(metric)
        ax.set_title(f"{title} ({metric})")
        if len(entries) > 1:
            ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_history_figure(history, path):
    """Training loss and validation metric per epoch, with the lr trace."""
    epochs = [row[0] for row in history]
    fig, ax1 = plt.subplots(figsize=(6.4, 3.6))
    ax1.plot(epochs, [row[1] for row in history], color="tab:blue", label="train loss")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(epochs, [row[2] for row in history], color="tab:orange", label="val metric")
    ax2.set_ylabel("val metric", color="tab:orange")
    ax1.plot(epochs, [row[3] for row in history], color="tab:gray", linestyle=":",
             label="lr")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
