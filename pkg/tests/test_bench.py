"""Replication-study helpers: tidy rows, slopes, summary rates."""

import pytest

from cgdro.bench import (
    _row,
    coverage_rate,
    fit_loglog_slope,
    mean_width,
    write_rows,
)


def test_fit_loglog_slope_recovers_power_law():
    rows = []
    for n in (100, 200, 400, 800):
        for rep in range(3):
            rows.append(_row("S1", n, rep, "cgdro", "est_error",
                             2.0 * n ** -0.5))
    assert fit_loglog_slope(rows) == pytest.approx(-0.5, abs=1e-12)


def test_fit_loglog_slope_ignores_other_metrics():
    rows = [_row("S1", n, 0, "cgdro", "est_error", 1.0 / n)
            for n in (10, 100)]
    rows.append(_row("S1", 10, 0, "cgdro", "ci_width", 99.0))
    assert fit_loglog_slope(rows) == pytest.approx(-1.0, abs=1e-12)


def test_coverage_rate_and_width_split_by_method():
    rows = [
        _row("S3", 2.0, 0, "cgdro", "covered", 1.0),
        _row("S3", 2.0, 1, "cgdro", "covered", 0.0),
        _row("S3", 2.0, 0, "normality", "covered", 0.0),
        _row("S3", 2.0, 0, "cgdro", "ci_width", 0.4),
        _row("S3", 2.0, 1, "cgdro", "ci_width", 0.6),
    ]
    assert coverage_rate(rows, "cgdro") == 0.5
    assert coverage_rate(rows, "normality") == 0.0
    assert mean_width(rows, "cgdro") == 0.5


def test_write_rows_tidy_csv(tmp_path):
    rows = [_row("FIG2", 0.5, 0, "erm", "worst_case_loss", 0.7)]
    path = tmp_path / "rows.csv"
    write_rows(rows, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "setting,param,rep,method,metric,value"
    assert lines[1] == "FIG2,0.5,0,erm,worst_case_loss,0.7"
