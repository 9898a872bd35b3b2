import csv
import json
import os

import numpy as np
import pytest

from shrinknet.experiments import ExperimentReport, Table, run_table1
from shrinknet.report import emit_report, format_table, metrics_rows
from shrinknet.test_util import tiny_options
from shrinknet.training import Evaluation, Metrics


def _metrics(epochs: int) -> Metrics:
    metrics = Metrics(3)
    for e in range(epochs):
        metrics.record_epoch(
            1.0 / (e + 1), 0.5, Evaluation(1.5 / (e + 1), np.diag([e + 1, 1, 1]))
        )
    return metrics


def _report(**curves) -> ExperimentReport:
    return ExperimentReport(
        "table2",
        tiny_options(),
        "synthetic",
        {"source": "synthetic"},
        Table(["epochs", "test_accuracy"], [["3", "0.6000"], ["12", "0.7500"]]),
        curves=curves,
        primary=next(iter(curves), None),
    )


def _read(path: str) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def test_metrics_csv_has_one_row_per_epoch(tmp_path) -> None:
    emit_report(_report(drsn=_metrics(5)), str(tmp_path))
    with open(tmp_path / "metrics.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 5 + 1
    assert rows[0] == [
        "epoch",
        "drsn_train_loss",
        "drsn_train_accuracy",
        "drsn_val_loss",
        "drsn_val_accuracy",
    ]
    assert rows[2][0] == "2"


def test_shorter_curves_leave_blank_cells() -> None:
    rows = metrics_rows({"a": _metrics(1), "b": _metrics(3)})
    assert len(rows) == 4
    assert rows[3][1:5] == ["", "", "", ""]


def test_svg_has_one_series_per_phase(tmp_path) -> None:
    emit_report(_report(cnn=_metrics(2), drsn=_metrics(2)), str(tmp_path))
    svg = _read(str(tmp_path / "curve_accuracy.svg")).decode("utf-8")
    for name in ("cnn", "drsn"):
        for phase in ("train", "val"):
            assert svg.count(f'id="{name}_{phase}_accuracy"') == 1
    assert 'id="drsn_val_loss"' in _read(str(tmp_path / "curve_loss.svg")).decode("utf-8")


def test_text_table_is_aligned() -> None:
    text = format_table(Table(["epochs", "test_accuracy"], [["3", "0.6"], ["12", "0.75"]]))
    lines = text.splitlines()
    assert lines[0] == "epochs  test_accuracy"
    assert lines[1] == "     3            0.6"
    assert len({len(line) for line in lines}) == 1


def test_confusion_and_manifest(tmp_path) -> None:
    paths = emit_report(_report(drsn=_metrics(2)), str(tmp_path))
    assert sorted(os.path.basename(p) for p in paths) == [
        "confusion.csv",
        "curve_accuracy.svg",
        "curve_loss.svg",
        "manifest.json",
        "metrics.csv",
        "table.csv",
        "table.txt",
    ]
    with open(tmp_path / "confusion.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["true\\predicted", "0", "1", "2"]
    assert rows[1] == ["0", "2", "0", "0"]
    with open(tmp_path / "manifest.json") as fh:
        manifest = json.load(fh)
    assert manifest["experiment"] == "table2"
    assert manifest["options"]["synthetic"] is True
    assert "confusion.csv" in manifest["files"]


def test_unwritable_destination(tmp_path) -> None:
    blocker = tmp_path / "occupied"
    blocker.write_text("a file, not a directory")
    with pytest.raises(OSError):
        emit_report(_report(drsn=_metrics(1)), str(blocker))


@pytest.mark.smoke
def test_table1_outputs_are_byte_identical_across_runs(tmp_path) -> None:
    options = tiny_options(seed=2)
    first = emit_report(run_table1(None, options), str(tmp_path / "first"))
    second = emit_report(run_table1(None, options), str(tmp_path / "second"))
    for a, b in zip(first, second):
        assert os.path.basename(a) == os.path.basename(b)
        assert _read(a) == _read(b), a
