"""Continual-learning and conformal evaluation metrics."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from pagecl.errors import ConfigError, ShapeError

log = logging.getLogger(__name__)


class AccuracyMatrix:
    """``acc[n, q]``: test accuracy on domain ``n`` after learning ``q`` domains (0-based).

    Undefined entries (``q < n`` or not yet measured) are NaN.
    """

    def __init__(self, n_domains: int):
        self.values = np.full((n_domains, n_domains), np.nan)

    @classmethod
    def from_rows(cls, rows) -> "AccuracyMatrix":
        arr = np.array(rows, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ShapeError("accuracy matrix must be square")
        m = cls(arr.shape[0])
        m.values = arr
        return m

    @property
    def n_domains(self) -> int:
        return self.values.shape[0]

    def record(self, domain: int, learned: int, accuracy: float) -> None:
        if learned < domain:
            raise ConfigError(f"a[{domain}][{learned}] is undefined before domain {domain} is learned")
        if not 0.0 <= accuracy <= 1.0:
            raise ConfigError("accuracy must lie in [0, 1]")
        self.values[domain, learned] = accuracy

    def learned(self) -> int:
        """Number of domains learned so far (columns with any entry)."""
        filled = ~np.isnan(self.values).all(axis=0)
        return int(filled.nonzero()[0].max() + 1) if filled.any() else 0

    def final(self) -> np.ndarray:
        """Accuracy on every learned domain after the last one."""
        q = self.learned()
        return self.values[:q, q - 1]

    def tolist(self):
        return [[None if np.isnan(v) else float(v) for v in row] for row in self.values]


def bwt(matrix: AccuracyMatrix) -> float:
    """Mean of ``a_n^q - a_n^n`` over the ``q-1`` earlier domains."""
    q = matrix.learned()
    if q < 2:
        raise ConfigError("backward transfer needs at least two learned domains")
    a = matrix.values
    diffs = [a[n, q - 1] - a[n, n] for n in range(q - 1)]
    if np.isnan(diffs).any():
        raise ConfigError("accuracy matrix is missing entries needed for BWT")
    return float(np.mean(diffs))


def average(per_domain) -> float:
    """Unweighted mean over domains."""
    return float(np.mean(np.asarray(per_domain, dtype=np.float64)))


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ShapeError("predictions and labels differ in length")
    return float(np.mean(predictions == labels)) if labels.size else 0.0


def f1_binary(predictions, labels, healthy_class: int = 0) -> float:
    """F1 with every non-healthy class collapsed into the positive class."""
    pred = np.asarray(predictions) != healthy_class
    true = np.asarray(labels) != healthy_class
    if pred.shape != true.shape:
        raise ShapeError("predictions and labels differ in length")
    tp = int(np.sum(pred & true))
    fp = int(np.sum(pred & ~true))
    fn = int(np.sum(~pred & true))
    if tp + fp + fn == 0:
        log.info("F1 undefined (no positives predicted or present); reporting 1.0")
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


@dataclass
class CpConfusion:
    certain_correct: int = 0
    certain_incorrect: int = 0
    uncertain_correct: int = 0
    uncertain_incorrect: int = 0

    @property
    def total(self) -> int:
        return (self.certain_correct + self.certain_incorrect
                + self.uncertain_correct + self.uncertain_incorrect)

    @property
    def correctness(self) -> float:
        return self.certain_correct / self.total if self.total else 0.0

    @property
    def error_rate(self) -> float:
        return self.certain_incorrect / self.total if self.total else 0.0

    def __add__(self, other: "CpConfusion") -> "CpConfusion":
        return CpConfusion(*(a + b for a, b in zip(asdict(self).values(), asdict(other).values())))

    def to_dict(self) -> dict:
        out = asdict(self)
        out.update(total=self.total, correctness=self.correctness, error_rate=self.error_rate)
        return out


def cp_confusion(outputs, labels) -> CpConfusion:
    labels = np.asarray(labels)
    if len(outputs) != labels.size:
        raise ShapeError("one conformal output per label required")
    m = CpConfusion()
    for out, y in zip(outputs, labels):
        correct = out.predicted_label == int(y)
        if out.certain:
            if correct:
                m.certain_correct += 1
            else:
                m.certain_incorrect += 1
        elif correct:
            m.uncertain_correct += 1
        else:
            m.uncertain_incorrect += 1
    return m


def render_cp_table(icp: dict, eicp: dict) -> str:
    """Side-by-side ICP / EICP confusion tables, one block per domain."""
    head = (f"{'':<10}|{'ICP':<11}|{'Correct':>8}|{'Incorrect':>10}|{'Correctness':>12}|"
            f"{'Error Rate':>11}||{'EICP':<11}|{'Correct':>8}|{'Incorrect':>10}|"
            f"{'Correctness':>12}|{'Error Rate':>11}")
    lines = [head, "-" * len(head)]
    for name in icp:
        a, b = icp[name], eicp[name]
        lines.append(f"{name:<10}|{'Certain':<11}|{a.certain_correct:>8}|{a.certain_incorrect:>10}|"
                     f"{a.correctness:>12.3f}|{a.error_rate:>11.3f}||{'Certain':<11}|"
                     f"{b.certain_correct:>8}|{b.certain_incorrect:>10}|"
                     f"{b.correctness:>12.3f}|{b.error_rate:>11.3f}")
        lines.append(f"{'':<10}|{'Uncertain':<11}|{a.uncertain_correct:>8}|{a.uncertain_incorrect:>10}|"
                     f"{'':>12}|{'':>11}||{'Uncertain':<11}|{b.uncertain_correct:>8}|"
                     f"{b.uncertain_incorrect:>10}|{'':>12}|{'':>11}")
        lines.append("-" * len(head))
    return "\n".join(lines)
