import math

import numpy as np
import pytest

from nublado_lyapunov.reports import (
    CheckReport,
    ReportGroup,
    config_hash,
    format_cell,
    read_csv,
    state_hash,
    write_csv,
    write_summary,
)


def sample_report(passed=True):
    report = CheckReport(title="sample", samples=10)
    report.add("max value", 0.5, 1.0, passed)
    report.add("count", 3, math.inf)
    return report


class TestFormatCell:
    @pytest.mark.parametrize(
        "value, text",
        [
            (0.1, "0.1"),
            (1e300, "1e+300"),
            (np.float64(2.5), "2.5"),
            (np.int64(7), "7"),
            (True, "true"),
            (np.bool_(False), "false"),
            (None, ""),
            ("ok", "ok"),
            (math.inf, "inf"),
        ],
    )
    def test_format(self, value, text):
        assert format_cell(value) == text

    def test_round_trip_precision(self):
        value = 1.0 / 3.0
        assert float(format_cell(value)) == value


class TestHashes:
    def test_config_hash_depends_on_seed(self):
        assert config_hash(b"x", 1) != config_hash(b"x", 2)
        assert config_hash(b"x", 1) == config_hash(b"x", 1)
        assert len(config_hash(b"x", 1)) == 64

    def test_state_hash(self):
        first = state_hash(np.array([1.0, 2.0]), np.array([0.0, 0.5]))
        assert len(first) == 16
        assert first == state_hash([1.0, 2.0], [0.0, 0.5])
        assert first != state_hash([1.0, 2.0], [0.0, 0.50000001])


class TestCheckReport:
    def test_passed(self):
        assert sample_report().passed
        assert not sample_report(passed=False).passed
        assert not CheckReport(title="empty").passed

    def test_check_lookup(self):
        report = sample_report()
        assert report.check("count").value == 3.0
        with pytest.raises(KeyError):
            report.check("missing")

    def test_summary(self):
        report = sample_report(passed=False)
        report.note("sampled")
        lines = report.summary().splitlines()
        assert lines[0] == "sample on 10 samples: FAIL"
        assert "FAILED" in lines[1]
        assert lines[-1] == "  note: sampled"


class TestReportGroup:
    def test_rows_concatenate(self):
        group = ReportGroup("validate", [sample_report(), sample_report()])
        assert group.columns == CheckReport.columns
        assert len(list(group.rows())) == 4
        assert group.passed

    def test_one_failure_fails_group(self):
        group = ReportGroup("validate", [sample_report(), sample_report(passed=False)])
        assert not group.passed
        assert group.summary().startswith("validate: FAIL")

    def test_empty_group(self):
        group = ReportGroup("validate", [])
        assert group.columns == ()
        assert not group.passed


class TestCsv:
    def test_write_and_read(self, tmp_path):
        path = write_csv(tmp_path / "report.csv", sample_report(), name="verify", digest="abc", timestamp="2024-01-01T00:00:00+00:00")
        comment, header, rows = read_csv(path)
        assert comment == "# verify config=abc generated=2024-01-01T00:00:00+00:00"
        assert header == ("check", "value", "bound", "passed")
        assert rows == [("max value", "0.5", "1.0", "true"), ("count", "3.0", "inf", "true")]

    def test_timestamp_defaults_to_now(self, tmp_path):
        path = write_csv(tmp_path / "report.csv", sample_report(), name="verify", digest="abc")
        comment, _, _ = read_csv(path)
        assert comment.startswith("# verify config=abc generated=")
        assert comment.endswith("+00:00")

    def test_summary_file(self, tmp_path):
        path = write_summary(tmp_path / "report.txt", sample_report())
        assert path.read_text().startswith("sample on 10 samples: PASS")
