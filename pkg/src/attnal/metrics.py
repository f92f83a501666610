"""Per-slice and per-volume overlap metrics and rank-correlation analysis.

The same two formulas serve as "real" and "pseudo" metrics depending on the
operands: (prediction, ground truth) gives R-DSC / R-accuracy, and
(prediction from logits, prediction from attention) gives P-DSC /
P-accuracy. Counts are integers and division happens last, so results are
exact up to one rounding.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy import stats

R_DSC = "r_dsc"
P_DSC = "p_dsc"
R_ACC = "r_accuracy"
P_ACC = "p_accuracy"
ENTROPY = "entropy"
METRICS = (R_DSC, P_DSC, R_ACC, P_ACC, ENTROPY)


def _labels(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x))


def _check_pair(a, b, num_classes: int | None):
    a, b = _labels(a), _labels(b)
    if a.shape != b.shape or a.ndim != 3:
        raise ValueError(f"label volumes must share a 3D shape, got {a.shape} and {b.shape}")
    if num_classes is not None:
        if max(int(a.max()), int(b.max())) >= num_classes:
            raise ValueError("label volume contains UNLABELED or out-of-range ids")
    return a, b


def _num_classes(a, b, num_classes):
    if num_classes is not None:
        return num_classes
    for x in (a, b):
        c = getattr(x, "num_classes", None)
        if c is not None:
            return c
    raise ValueError("num_classes is required for raw arrays")


def slice_dsc(a, b, num_classes: int | None = None) -> np.ndarray:
    """Dice of every axial slice; multi-class slices average over present classes.

    A class counts as present on a slice if either operand contains it there.
    Slices with no foreground class in either operand score 1.0.
    """
    c = _num_classes(a, b, num_classes)
    a, b = _check_pair(a, b, c)
    d = a.shape[0]
    fa, fb = a.reshape(d, -1), b.reshape(d, -1)
    total = np.zeros(d)
    present = np.zeros(d, dtype=np.int64)
    for k in range(1, c):
        ak, bk = fa == k, fb == k
        inter = np.count_nonzero(ak & bk, axis=1)
        denom = np.count_nonzero(ak, axis=1) + np.count_nonzero(bk, axis=1)
        has = denom > 0
        total[has] += 2 * inter[has] / denom[has]
        present += has
    out = np.ones(d)
    nz = present > 0
    out[nz] = total[nz] / present[nz]
    return out


def slice_accuracy(a, b, num_classes: int | None = None) -> np.ndarray:
    """Non-background agreement ``2|a = b != 0| / (|a != 0| + |b != 0|)`` per slice.

    Slices where both operands are all background score 1.0.
    """
    c = _num_classes(a, b, num_classes)
    a, b = _check_pair(a, b, c)
    d = a.shape[0]
    fa, fb = a.reshape(d, -1), b.reshape(d, -1)
    agree = np.count_nonzero((fa == fb) & (fa != 0), axis=1)
    denom = np.count_nonzero(fa, axis=1) + np.count_nonzero(fb, axis=1)
    out = np.ones(d)
    nz = denom > 0
    out[nz] = 2 * agree[nz] / denom[nz]
    return out


def _slice_index(a, i: int) -> int:
    d = _labels(a).shape[0]
    if not 0 <= i < d:
        raise IndexError(f"slice {i} out of range for {d} slices")
    return i


def dsc_per_slice(a, b, i: int, num_classes: int | None = None) -> float:
    i = _slice_index(a, i)
    c = _num_classes(a, b, num_classes)
    a, b = _labels(a), _labels(b)
    return float(slice_dsc(a[i : i + 1], b[i : i + 1], c)[0])


def accuracy_per_slice(a, b, i: int, num_classes: int | None = None) -> float:
    i = _slice_index(a, i)
    c = _num_classes(a, b, num_classes)
    a, b = _labels(a), _labels(b)
    return float(slice_accuracy(a[i : i + 1], b[i : i + 1], c)[0])


def volume_f1(pred, gt, num_classes: int | None = None) -> float:
    """Whole-volume Dice averaged over classes ``1..C-1`` (absent in both -> 1.0)."""
    c = _num_classes(pred, gt, num_classes)
    a, b = _check_pair(pred, gt, c)
    scores = []
    for k in range(1, c):
        ak, bk = a == k, b == k
        denom = np.count_nonzero(ak) + np.count_nonzero(bk)
        scores.append(1.0 if denom == 0 else 2 * np.count_nonzero(ak & bk) / denom)
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# Score tables
# ---------------------------------------------------------------------------


@dataclass
class ScoreTable:
    """One value per axial slice for one metric; lower = more informative."""

    metric: str
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.metric not in METRICS and not self.metric.startswith("query:"):
            raise ValueError(f"unknown metric {self.metric!r}")

    def __len__(self) -> int:
        return len(self.values)

    def ordering(self) -> np.ndarray:
        """Slice indices by ascending value, ties by ascending index."""
        return np.argsort(self.values, kind="stable")

    def mean(self) -> float:
        return float(self.values.mean())


def write_scores_csv(fh, rows) -> None:
    """Rows of ``(volume_id, slice, metric, value)``."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["volume_id", "slice", "metric", "value"])
    for vid, i, metric, value in rows:
        w.writerow([vid, i, metric, repr(float(value))])


def score_rows(volume_id, table: ScoreTable):
    return [(volume_id, i, table.metric, v) for i, v in enumerate(table.values)]


def scores_to_csv(rows) -> str:
    buf = io.StringIO()
    write_scores_csv(buf, rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Rank correlation
# ---------------------------------------------------------------------------


@dataclass
class RankCorrelation:
    spearman: float
    slope: float
    pearson_r: float
    n: int
    defined: bool = True
    rank_real: np.ndarray | None = None
    rank_est: np.ndarray | None = None


def rank_correlation(est, real) -> RankCorrelation:
    """Spearman rho plus a least-squares fit of rank(est) on rank(real).

    Ties get average ranks. Rho equals the Pearson r of the rank scatter, so
    ``pearson_r`` and ``spearman`` agree; both are kept because reports cite
    either. A constant input has no defined correlation and is returned with
    ``defined=False`` and NaN statistics.
    """
    est = np.asarray(est, dtype=np.float64)
    real = np.asarray(real, dtype=np.float64)
    if est.shape != real.shape or est.ndim != 1:
        raise ValueError("est and real must be 1-D of equal length")
    n = len(est)
    if n < 3:
        raise ValueError(f"need at least 3 values, got {n}")
    rx = stats.rankdata(real)
    ry = stats.rankdata(est)
    if np.ptp(rx) == 0 or np.ptp(ry) == 0:
        return RankCorrelation(np.nan, np.nan, np.nan, n, False, rx, ry)
    fit = stats.linregress(rx, ry)
    return RankCorrelation(float(fit.rvalue), float(fit.slope), float(fit.rvalue), n,
                           True, rx, ry)
