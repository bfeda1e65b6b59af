"""Accuracy-matrix bookkeeping with average accuracy and forgetting."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ProtocolError, UndefinedMetric


class AccuracyMatrix:
    """Lower-triangular ``a[k][j]``: accuracy on task ``j`` after training task ``k``.

    Rows and columns are 1-based.  Row ``k`` must be written exactly once,
    after rows ``1..k-1``.
    """

    def __init__(self):
        self.rows: list[list[float]] = []

    @property
    def k(self) -> int:
        return len(self.rows)

    def record_row(self, k: int, accs) -> "AccuracyMatrix":
        accs = [float(a) for a in accs]
        if k <= self.k:
            raise ProtocolError(f"row {k} already written")
        if k != self.k + 1:
            raise ProtocolError(f"row {k} written before row {self.k + 1}")
        if len(accs) != k:
            raise ProtocolError(f"row {k} needs {k} entries, got {len(accs)}")
        if any(not (0.0 <= a <= 1.0) for a in accs):
            raise ProtocolError(f"row {k} has entries outside [0, 1]: {accs}")
        self.rows.append(accs)
        return self

    def row(self, k: int) -> list[float]:
        if not 1 <= k <= self.k:
            raise ProtocolError(f"row {k} has not been written")
        return self.rows[k - 1]

    def __getitem__(self, kj):
        k, j = kj
        row = self.row(k)
        if not 1 <= j <= k:
            raise ProtocolError(f"a[{k}][{j}] is outside the lower triangle")
        return row[j - 1]

    def to_array(self) -> np.ndarray:
        """Dense ``(k, k)`` array with NaN above the diagonal."""
        out = np.full((self.k, self.k), np.nan)
        for i, r in enumerate(self.rows):
            out[i, : i + 1] = r
        return out

    @classmethod
    def from_rows(cls, rows) -> "AccuracyMatrix":
        m = cls()
        for k, r in enumerate(rows, start=1):
            m.record_row(k, r)
        return m


def record_row(m: AccuracyMatrix, k: int, accs) -> AccuracyMatrix:
    return m.record_row(k, accs)


def avg_accuracy(m: AccuracyMatrix, k: int) -> float:
    row = m.row(k)
    return math.fsum(row) / k


def _forgetting(m: AccuracyMatrix, k: int, reduce) -> tuple[float, list[float]]:
    if k < 2:
        raise UndefinedMetric("forgetting needs at least two tasks")
    cur = m.row(k)
    per_task = [reduce([m.row(l)[j] for l in range(j + 1, k)]) - cur[j] for j in range(k - 1)]
    return math.fsum(per_task) / (k - 1), per_task


def forgetting(m: AccuracyMatrix, k: int) -> tuple[float, list[float]]:
    """``(F_k, [f_1^k, ..., f_{k-1}^k])`` with the best past accuracy as reference."""
    return _forgetting(m, k, max)


def forgetting_expected(m: AccuracyMatrix, k: int) -> tuple[float, list[float]]:
    """Variant with the mean past accuracy as reference; logged for comparison."""
    return _forgetting(m, k, lambda xs: math.fsum(xs) / len(xs))


REPORT_COLUMNS = ("k", "A", "F", "F_expected")


@dataclass
class MetricsReport:
    matrix: AccuracyMatrix
    meta: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    @property
    def tau(self) -> int:
        return self.matrix.k

    def per_k(self) -> list[dict]:
        out = []
        for k in range(1, self.tau + 1):
            rec = {"k": k, "A": avg_accuracy(self.matrix, k), "F": None, "F_expected": None}
            if k >= 2:
                rec["F"] = forgetting(self.matrix, k)[0]
                rec["F_expected"] = forgetting_expected(self.matrix, k)[0]
            out.append(rec)
        return out

    @property
    def final(self) -> dict:
        return self.per_k()[-1] if self.tau else {"k": 0, "A": None, "F": None, "F_expected": None}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for rec in self.per_k():
            w.writerow([_fmt(rec[c]) for c in REPORT_COLUMNS])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "meta": self.meta,
            "flags": list(self.flags),
            "matrix": [list(r) for r in self.matrix.rows],
            "per_k": self.per_k(),
            "final": self.final,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(AccuracyMatrix.from_rows(d["matrix"]), dict(d["meta"]), list(d["flags"]))


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)
