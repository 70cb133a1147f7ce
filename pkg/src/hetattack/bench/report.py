"""Report rows, CSV and markdown emission.

Wall-clock timings are kept out of the result CSV so that two runs with the
same config and seed produce byte-identical files; they go to a separate
timings file instead.
"""
from __future__ import annotations

import csv
import io
from dataclasses import astuple, dataclass, field, fields
from pathlib import Path

from ..errors import ParseError

NOTE = "metrics are computed over the {n} attacked test victims, each attacked independently from the clean graph"


@dataclass(frozen=True)
class ReportRow:
    dataset: str
    seed: int
    budget: int
    method: str
    accuracy: float
    micro_f1: float
    macro_f1: float
    mean_queries: float


@dataclass(frozen=True)
class SweepRow:
    dataset: str
    seed: int
    k_ratio: float
    budget: int
    success_rate: float


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


@dataclass
class AttackReport:
    rows: list
    n_victims: int = 0
    timings: dict = field(default_factory=dict)

    @property
    def note(self) -> str:
        return NOTE.format(n=self.n_victims)

    def columns(self) -> list[str]:
        return [f.name for f in fields(ReportRow)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# {self.note}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns())
        for r in self.rows:
            w.writerow([_fmt(v) for v in astuple(r)])
        return buf.getvalue()

    def to_markdown(self) -> str:
        return f"_{self.note}._\n\n" + markdown_table(self.columns(), [[_fmt(v) for v in astuple(r)] for r in self.rows])

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv())

    def timings_csv(self) -> str:
        lines = ["stage,seconds"] + [f"{k},{v:.3f}" for k, v in self.timings.items()]
        return "\n".join(lines) + "\n"

    def row(self, budget: int, method: str) -> ReportRow:
        for r in self.rows:
            if r.budget == budget and r.method == method:
                return r
        raise KeyError((budget, method))


def markdown_table(header, rows) -> str:
    cells = [list(map(str, header))] + [list(map(str, r)) for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    right = [i for i in range(len(header)) if all(_numeric(row[i]) for row in cells[1:])] if rows else []

    def line(row):
        return "| " + " | ".join(c.rjust(w) if i in right else c.ljust(w)
                                 for i, (c, w) in enumerate(zip(row, widths))) + " |"
    rule = "|" + "|".join(("-" * (w + 1) + ":") if i in right else ("-" * (w + 2))
                          for i, w in enumerate(widths)) + "|"
    return "\n".join([line(cells[0]), rule] + [line(r) for r in cells[1:]]) + "\n"


def _numeric(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f.name for f in fields(SweepRow)])
    for r in rows:
        w.writerow([r.dataset, r.seed, f"{r.k_ratio:g}", r.budget, _fmt(r.success_rate)])
    return buf.getvalue()


def read_report(path) -> AttackReport:
    """Parse a CSV written by :meth:`AttackReport.to_csv`."""
    path = Path(path)
    text = path.read_text()
    lines = text.splitlines()
    n = 0
    body = []
    for lineno, line in enumerate(lines, 1):
        if line.startswith("#"):
            words = line.split()
            n = next((int(w) for w in words if w.isdigit()), n)
            continue
        body.append((lineno, line))
    if not body:
        raise ParseError(path, 1, "empty report")
    header = next(csv.reader([body[0][1]]))
    want = [f.name for f in fields(ReportRow)]
    if header != want:
        raise ParseError(path, body[0][0], f"expected header {want}")
    rows = []
    for lineno, line in body[1:]:
        vals = next(csv.reader([line]))
        if len(vals) != len(want):
            raise ParseError(path, lineno, f"expected {len(want)} fields")
        try:
            rows.append(ReportRow(vals[0], int(vals[1]), int(vals[2]), vals[3], float(vals[4]), float(vals[5]),
                                  float(vals[6]), float(vals[7])))
        except ValueError:
            raise ParseError(path, lineno, "malformed numeric field") from None
    return AttackReport(rows, n)
