import csv
import io
from unittest.mock import patch

import numpy as np
import pytest

from gmmcalib.evaluation import MetricsTable, RangeFit
from gmmcalib.report import SUMMARY_COLUMNS, display_summary, summary_csv, summary_table, summary_text, write_summary
from gmmcalib.se3 import EulerPose


@pytest.fixture
def tables():
    gmm = MetricsTable(
        "gmm",
        [0, 1],
        [EulerPose(0.001, -0.002, 0.003, 0.01, -0.02, 0.0), EulerPose(-0.001, 0.0, 0.001, -0.01, 0.0, 0.02)],
        np.array([[0.01, -0.02, 0.0], [0.0, 0.2, 0.0]]),
        global_fit=RangeFit(0.001, 0.02, 0.005),
        validation_error=0.03,
    )
    icp = MetricsTable("plane_icp", [0], [EulerPose()], np.zeros((1, 3)), failures=1)
    return [gmm, icp]


def test_summary_csv_has_one_row_per_algorithm(tables):
    rows = list(csv.reader(io.StringIO(summary_csv(tables))))
    assert tuple(rows[0]) == SUMMARY_COLUMNS
    assert [r[0] for r in rows[1:]] == ["gmm", "plane_icp"]
    gmm = dict(zip(SUMMARY_COLUMNS, rows[1], strict=True))
    assert float(gmm["d_roll"]) == pytest.approx(0.001)
    assert float(gmm["dist_y"]) == pytest.approx(0.11)
    assert gmm["miscalibrations"] == "1"
    assert float(gmm["fit_slope"]) == pytest.approx(0.001)
    icp = dict(zip(SUMMARY_COLUMNS, rows[2], strict=True))
    assert icp["failures"] == "1"
    assert icp["fit_slope"] == ""


def test_summary_text(tables):
    text = summary_text(tables)
    assert text.startswith("Calibration Error Summary")
    assert "[gmm] 1 of 2 pairs miscalibrated (> 0.1 m), 0 failed" in text
    assert "[plane_icp] 0 of 1 pairs miscalibrated" in text


def test_summary_text_without_tables():
    assert "algorithm" in summary_text([])


def test_write_summary(tmp_path, tables):
    csv_path, text_path = write_summary(tables, tmp_path)
    assert csv_path.name == "summary.csv"
    assert text_path.read_text() == summary_text(tables)


def test_summary_table_rows(tables):
    assert summary_table(tables).row_count == 2


@patch("gmmcalib.report.console")
def test_display_summary(mock_console, tables):
    display_summary(tables)
    mock_console.print.assert_called_once()


@patch("gmmcalib.report.console")
def test_display_empty_summary(mock_console):
    display_summary([])
    assert "No metrics" in mock_console.print.call_args[0][0]
