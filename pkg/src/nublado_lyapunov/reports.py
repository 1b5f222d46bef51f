"""
Report plumbing shared by the commands.

Every report exposes `passed`, a `columns` tuple, `rows()` and `summary()`.
The CSV form starts with a single comment line carrying the command name,
the config hash and a UTC timestamp, followed by a header row.
"""
import csv
import hashlib
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

COMMENT_PREFIX = "# "


@dataclass(frozen=True)
class Check:
    name: str
    value: float
    bound: float
    passed: bool


@dataclass
class CheckReport:
    """
    A named list of value/bound checks; passes when every check passes.
    """

    title: str
    samples: int = 0
    checks: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    columns = ("check", "value", "bound", "passed")

    @property
    def passed(self):
        return bool(self.checks) and all(check.passed for check in self.checks)

    def check(self, name):
        for item in self.checks:
            if item.name == name:
                return item
        raise KeyError(name)

    def add(self, name, value, bound, passed=True):
        self.checks.append(Check(name=name, value=float(value), bound=float(bound), passed=bool(passed)))

    def note(self, text):
        self.notes.append(text)

    def rows(self):
        for check in self.checks:
            yield (check.name, check.value, check.bound, check.passed)

    def headline(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{self.title} on {self.samples} samples: {status}"

    def summary(self):
        lines = [self.headline()]
        for check in self.checks:
            mark = "ok" if check.passed else "FAILED"
            lines.append(f"  {check.name}: {check.value!r} (bound {check.bound!r}) {mark}")
        lines.extend(f"  note: {text}" for text in self.notes)
        return "\n".join(lines)


class ReportGroup:
    """
    Reports sharing one column layout, written as a single table.
    """

    def __init__(self, title, reports):
        self.title = title
        self.reports = list(reports)

    @property
    def columns(self):
        return self.reports[0].columns if self.reports else ()

    @property
    def passed(self):
        return bool(self.reports) and all(report.passed for report in self.reports)

    def rows(self):
        for report in self.reports:
            yield from report.rows()

    def summary(self):
        status = "PASS" if self.passed else "FAIL"
        return "\n".join([f"{self.title}: {status}"] + [report.summary() for report in self.reports])


def config_hash(config_bytes, seed=None):
    """
    sha256 of the raw config bytes followed by the seed.
    """
    digest = hashlib.sha256(config_bytes or b"")
    digest.update(repr(seed).encode())
    return digest.hexdigest()


def state_hash(p, q):
    """
    Short stable identifier of a single state's exact float values.
    """
    data = np.ascontiguousarray(np.concatenate([np.ravel(q), np.ravel(p)]), dtype=float)
    return hashlib.sha256(data.tobytes()).hexdigest()[:16]


def format_cell(value):
    """
    Floats in round-trip repr form; booleans, ints and text as is.
    """
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def utc_timestamp():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_csv(path, report, *, name, digest, timestamp=None):
    path = Path(path)
    timestamp = timestamp or utc_timestamp()
    with path.open("w", newline="", encoding="utf-8") as handle:
        handle.write(f"{COMMENT_PREFIX}{name} config={digest} generated={timestamp}\n")
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(report.columns)
        for row in report.rows():
            writer.writerow([format_cell(value) for value in row])
    logger.debug("Wrote %s", path)
    return path


def write_summary(path, report):
    path = Path(path)
    path.write_text(report.summary() + "\n", encoding="utf-8")
    return path


def read_csv(path):
    """
    (comment, header, rows) of a report file, cells as strings.
    """
    with Path(path).open(newline="", encoding="utf-8") as handle:
        comment = handle.readline().rstrip("\n")
        reader = csv.reader(handle)
        header = tuple(next(reader))
        rows = [tuple(row) for row in reader]
    return comment, header, rows
