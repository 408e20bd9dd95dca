"""Continual-learning metrics over an accuracy matrix, plus CKA and a paired t-test.

Tasks are 1-based here: ``A[t][j]`` is the accuracy on task ``j`` after
training task ``t``.  Two optional extras feed forward transfer: the
pre-training accuracy ``A[i-1][i]`` (task ``i`` evaluated right before it is
trained) and a baseline ``b[i]`` from a freshly initialized model.

Metrics that are undefined for a given matrix (forgetting with ``T=1``,
SPR with zero new-task accuracy, ...) come back as ``None``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

REGIMES = ("CI", "TI")
NA = "n/a"
METRIC_NAMES = ("AA", "AIA", "F", "BWT", "FWT", "SPR")


class MatrixFormatError(ValueError):
    pass


@dataclass
class AccuracyMatrix:
    T: int
    entries: dict[tuple[int, int], float] = field(default_factory=dict)
    pre: dict[int, float] = field(default_factory=dict)
    baseline: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]]) -> "AccuracyMatrix":
        """Build from ragged rows ``rows[t-1] = [A[t][1], ..., A[t][t]]``."""
        A = cls(len(rows))
        for t, row in enumerate(rows, start=1):
            for j, acc in enumerate(row, start=1):
                A.set(t, j, acc)
        return A

    def set(self, t: int, j: int, acc: float) -> None:
        if not (1 <= j <= t <= self.T):
            raise IndexError(f"cell ({t}, {j}) outside the lower triangle of a {self.T}-task matrix")
        if not 0.0 <= acc <= 1.0:
            raise ValueError(f"accuracy {acc} outside [0, 1]")
        self.entries[(t, j)] = float(acc)

    def __getitem__(self, key: tuple[int, int]) -> float:
        if key not in self.entries:
            raise KeyError(f"missing cell A[{key[0]}][{key[1]}]")
        return self.entries[key]

    def row(self, t: int) -> list[float]:
        return [self[(t, j)] for j in range(1, t + 1)]

    def is_complete(self) -> bool:
        return all((t, j) in self.entries for t in range(1, self.T + 1) for j in range(1, t + 1))

    def dense(self) -> np.ndarray:
        out = np.full((self.T, self.T), np.nan)
        for (t, j), v in self.entries.items():
            out[t - 1, j - 1] = v
        return out


# -- metrics ----------------------------------------------------------------------------


def average_accuracy(A: AccuracyMatrix) -> float:
    return float(np.mean(A.row(A.T)))


def average_incremental_accuracy(A: AccuracyMatrix) -> float:
    return float(np.mean([np.mean(A.row(t)) for t in range(1, A.T + 1)]))


def forgetting(A: AccuracyMatrix) -> float | None:
    """Mean over old tasks of (best accuracy so far) - (final accuracy).

    The scan runs over ``A[t][t] .. A[T][t]``, so a task that only improved
    contributes zero rather than a negative drop.
    """
    if A.T < 2:
        return None
    drops = [max(A[(k, t)] for k in range(t, A.T + 1)) - A[(A.T, t)] for t in range(1, A.T)]
    return float(np.mean(drops))


def backward_transfer(A: AccuracyMatrix) -> float | None:
    if A.T < 2:
        return None
    return float(np.mean([A[(A.T, i)] - A[(i, i)] for i in range(1, A.T)]))


def forward_transfer(A: AccuracyMatrix, baseline: Mapping[int, float] | None = None) -> float | None:
    """Mean over tasks ``i >= 2`` of ``A[i-1][i] - b[i]``."""
    b = A.baseline if baseline is None else baseline
    if A.T < 2:
        return None
    needed = range(2, A.T + 1)
    if any(i not in A.pre or i not in b for i in needed):
        return None
    return float(np.mean([A.pre[i] - b[i] for i in needed]))


def spr(forgetting_old: float | None, acc_new: float) -> float | None:
    """Stability-plasticity ratio ``100 * forgetting / new-task accuracy``."""
    if forgetting_old is None or acc_new <= 0:
        return None
    return float(forgetting_old / acc_new * 100.0)


def linear_cka(X, Y) -> float | None:
    """Linear CKA between two representations of the same ``n`` inputs."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise ValueError(f"need (n, d) matrices with equal n, got {X.shape} and {Y.shape}")
    if X.shape[0] < 2:
        raise ValueError("CKA needs at least two samples")
    Xc = X - X.mean(axis=0)
    Yc = Y - Y.mean(axis=0)
    nx = np.linalg.norm(Xc.T @ Xc)
    ny = np.linalg.norm(Yc.T @ Yc)
    if nx == 0 or ny == 0:
        return None
    return float(np.linalg.norm(Xc.T @ Yc) ** 2 / (nx * ny))


@dataclass(frozen=True)
class TTest:
    t: float | None
    p: float | None
    n: int
    degenerate: bool = False


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> TTest:
    """Two-sided paired t-test of ``mean(a - b) == 0``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D and of equal length")
    n = len(a)
    if n < 2:
        raise ValueError("paired t-test needs at least two pairs")
    d = a - b
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        return TTest(None, None, n, degenerate=True)
    t = float(np.mean(d) / (sd / math.sqrt(n)))
    p = float(2.0 * stats.t.sf(abs(t), df=n - 1))
    return TTest(t, p, n)


# -- reports -----------------------------------------------------------------------


@dataclass
class MetricReport:
    regime: str
    AA: float
    AIA: float
    F: float | None
    BWT: float | None
    FWT: float | None
    SPR: float | None

    def values(self) -> dict[str, float | None]:
        return {k: getattr(self, k) for k in METRIC_NAMES}


def report(A: AccuracyMatrix, regime: str = "CI") -> MetricReport:
    F = forgetting(A)
    return MetricReport(
        regime,
        average_accuracy(A),
        average_incremental_accuracy(A),
        F,
        backward_transfer(A),
        forward_transfer(A),
        spr(F, A[(A.T, A.T)]),
    )


def format_value(v: float | None) -> str:
    return NA if v is None else repr(float(v))


def parse_value(s: str) -> float | None:
    s = s.strip()
    return None if s == NA else float(s)


# -- matrix CSV ------------------------------------------------------------------------
#
# Line 1 is ``T,<n>``; then ``t,j,acc,regime`` rows.  Pre-training rows use
# ``j = t + 1`` and baseline rows use ``t = 0``.


def write_matrix_csv(path, matrices: Mapping[str, AccuracyMatrix]) -> None:
    Path(path).write_text(matrix_csv_text(matrices))


def matrix_csv_text(matrices: Mapping[str, AccuracyMatrix]) -> str:
    Ts = {A.T for A in matrices.values()}
    if len(Ts) != 1:
        raise ValueError("all regimes must share T")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["T", Ts.pop()])
    w.writerow(["t", "j", "acc", "regime"])
    for regime in sorted(matrices):
        A = matrices[regime]
        for j in sorted(A.baseline):
            w.writerow([0, j, repr(A.baseline[j]), regime])
        for t in range(1, A.T + 1):
            for j in range(1, t + 1):
                if (t, j) in A.entries:
                    w.writerow([t, j, repr(A.entries[(t, j)]), regime])
            if t + 1 in A.pre:
                w.writerow([t, t + 1, repr(A.pre[t + 1]), regime])
    return buf.getvalue()


def read_matrix_csv(path) -> dict[str, AccuracyMatrix]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise MatrixFormatError(f"{path}: empty file")
    head = lines[0].split(",")
    if len(head) != 2 or head[0].strip() != "T":
        raise MatrixFormatError(f"{path}:1: expected 'T,<count>'")
    try:
        T = int(head[1])
    except ValueError:
        raise MatrixFormatError(f"{path}:1: task count {head[1]!r} is not an integer") from None
    if T < 1:
        raise MatrixFormatError(f"{path}:1: task count must be >= 1")
    if len(lines) < 2 or [c.strip() for c in lines[1].split(",")] != ["t", "j", "acc", "regime"]:
        raise MatrixFormatError(f"{path}:2: expected header 't,j,acc,regime'")
    out: dict[str, AccuracyMatrix] = {}
    for lineno, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != 4:
            raise MatrixFormatError(f"{path}:{lineno}: expected 4 fields, got {len(fields)}")
        try:
            t, j, acc = int(fields[0]), int(fields[1]), float(fields[2])
        except ValueError:
            raise MatrixFormatError(f"{path}:{lineno}: malformed number") from None
        regime = fields[3].strip()
        if regime not in REGIMES:
            raise MatrixFormatError(f"{path}:{lineno}: unknown regime {regime!r}")
        if not 0.0 <= acc <= 1.0:
            raise MatrixFormatError(f"{path}:{lineno}: accuracy {acc} outside [0, 1]")
        A = out.setdefault(regime, AccuracyMatrix(T))
        if t == 0 and 1 <= j <= T:
            A.baseline[j] = acc
        elif j == t + 1 and 2 <= j <= T:
            A.pre[j] = acc
        elif 1 <= j <= t <= T:
            A.set(t, j, acc)
        else:
            raise MatrixFormatError(f"{path}:{lineno}: cell ({t}, {j}) outside a {T}-task matrix")
    if not out:
        raise MatrixFormatError(f"{path}: no matrix rows")
    for regime, A in out.items():
        if not A.is_complete():
            raise MatrixFormatError(f"{path}: {regime} matrix is missing cells")
    return out
