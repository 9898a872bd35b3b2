"""
Writes experiment reports to disk.

Output files, all byte-for-byte reproducible for identical reports:

    metrics.csv         one row per epoch, four columns per trained network
    table.csv           the experiment's accuracy table
    table.txt           the same table, column-aligned
    confusion.csv       held-out confusion matrix of the primary network
    curve_accuracy.svg  train/validation accuracy per epoch
    curve_loss.svg      train/validation loss per epoch
    manifest.json       options, dataset provenance, results and file list
"""

import csv
import json
import os
from typing import Dict, List, Sequence

import matplotlib
from matplotlib.figure import Figure

from shrinknet.experiments import ExperimentReport, Table
from shrinknet.training import Metrics
from shrinknet.util import debug

SVG_SETTINGS = {"svg.hashsalt": "shrinknet", "svg.fonttype": "none"}
SERIES = ("train_loss", "train_accuracy", "val_loss", "val_accuracy")


def _write_rows(path: str, rows: Sequence[Sequence[str]]) -> str:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerows(rows)
    return path


def metrics_rows(curves: Dict[str, Metrics]) -> List[List[str]]:
    header = ["epoch"]
    for name in curves:
        header.extend(f"{name}_{suffix}" for suffix in SERIES)
    epochs = max((m.epochs for m in curves.values()), default=0)
    rows = [header]
    for epoch in range(epochs):
        row = [str(epoch + 1)]
        for metrics in curves.values():
            for attr in SERIES:
                values = getattr(metrics, attr)
                row.append(f"{values[epoch]:.6f}" if epoch < len(values) else "")
        rows.append(row)
    return rows


def format_table(table: Table) -> str:
    """Right-aligned columns separated by two spaces."""
    rows = [table.header] + table.rows
    widths = [max(len(row[i]) for row in rows) for i in range(len(table.header))]
    return "".join(
        "  ".join(cell.rjust(w) for cell, w in zip(row, widths)).rstrip() + "\n"
        for row in rows
    )


def confusion_rows(metrics: Metrics) -> List[List[str]]:
    assert metrics.confusion is not None
    size = metrics.confusion.shape[0]
    rows = [["true\\predicted"] + [str(i) for i in range(size)]]
    for label in range(size):
        rows.append([str(label)] + [str(int(v)) for v in metrics.confusion[label]])
    return rows


def plot_curves(path: str, curves: Dict[str, Metrics], quantity: str) -> str:
    """
    One line per (network, train/validation) series, saved as standalone SVG.

    Each line carries the SVG id ``<network>_<train|val>_<quantity>``.
    """
    with matplotlib.rc_context(SVG_SETTINGS):
        fig = Figure(figsize=(6.4, 4.0))
        ax = fig.add_subplot(1, 1, 1)
        for name, metrics in curves.items():
            for phase, style in (("train", "-"), ("val", "--")):
                values = getattr(metrics, f"{phase}_{quantity}")
                (line,) = ax.plot(
                    range(1, len(values) + 1),
                    values,
                    style,
                    label=f"{name} {'train' if phase == 'train' else 'validation'}",
                )
                line.set_gid(f"{name}_{phase}_{quantity}")
        ax.set_xlabel("epoch")
        ax.set_ylabel(quantity)
        if curves:
            ax.legend(loc="best")
        fig.savefig(path, format="svg", metadata={"Date": None})
    return path


def emit_report(report: ExperimentReport, out_dir: str) -> List[str]:
    """Write every report file under ``out_dir`` and return their paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = [
        _write_rows(os.path.join(out_dir, "metrics.csv"), metrics_rows(report.curves)),
        _write_rows(
            os.path.join(out_dir, "table.csv"), [report.table.header] + report.table.rows
        ),
    ]
    table_txt = os.path.join(out_dir, "table.txt")
    with open(table_txt, "w") as fh:
        fh.write(format_table(report.table))
    paths.append(table_txt)
    primary = report.curves.get(report.primary or "")
    if primary is not None and primary.confusion is not None:
        paths.append(
            _write_rows(os.path.join(out_dir, "confusion.csv"), confusion_rows(primary))
        )
    for quantity in ("accuracy", "loss"):
        paths.append(
            plot_curves(os.path.join(out_dir, f"curve_{quantity}.svg"), report.curves, quantity)
        )
    manifest = os.path.join(out_dir, "manifest.json")
    paths.append(manifest)
    report.files = paths
    with open(manifest, "w") as fh:
        json.dump(report.record(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    debug("wrote", len(paths), "report files to", out_dir)
    return paths
