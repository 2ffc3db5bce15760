"""Inductive conformal prediction with an extended calibration set.

Plain ICP calibrates on validation data only.  The extended variant adds
training instances whose average training loss sits between two per-class
percentiles, which gives the calibration set a heavier share of
hard-but-learned examples.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from pagecl.errors import CheckpointError, ConfigError, DataError, ShapeError
from pagecl.nn import MlpModel, forward

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
PROVENANCE = ("real-valid", "synth-valid", "selected-train")


@dataclass
class DsConfig:
    p_lower: float = 70.0
    p_upper: float = 90.0

    def __post_init__(self):
        if not (0.0 <= self.p_lower < self.p_upper <= 100.0):
            raise ConfigError(f"need 0 <= p_lower < p_upper <= 100, got {self}")


@dataclass
class CertaintyThresholds:
    min_confidence: float = 0.90
    min_credibility: float = 0.70

    def __post_init__(self):
        for v in (self.min_confidence, self.min_credibility):
            if not 0.0 <= v <= 1.0:
                raise ConfigError("certainty thresholds must lie in [0, 1]")


@dataclass(frozen=True)
class CalibrationSet:
    scores: np.ndarray
    labels: np.ndarray
    provenance: tuple[str, ...]

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if scores.size == 0:
            raise DataError("calibration set is empty")
        if labels.size != scores.size or len(self.provenance) != scores.size:
            raise ShapeError("scores, labels and provenance must align")
        if not (np.isfinite(scores).all() and (scores > 0).all()):
            raise DataError("calibration scores must be finite and positive")
        bad = set(self.provenance) - set(PROVENANCE)
        if bad:
            raise DataError(f"unknown provenance tags {sorted(bad)}")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "provenance", tuple(self.provenance))
        object.__setattr__(self, "_sorted", np.sort(scores))

    def __len__(self) -> int:
        return self.scores.size

    def count(self, tag: str) -> int:
        return sum(1 for p in self.provenance if p == tag)


@dataclass
class ConformalOutput:
    predicted_label: int
    p_values: np.ndarray
    confidence: float
    credibility: float
    certain: bool


# -- data selection ----------------------------------------------------------


def select_data(avg_losses, labels, cfg: DsConfig | None = None) -> np.ndarray:
    """Indices whose average loss lies within the class's [p_lower, p_upper] percentiles.

    Percentiles use linear interpolation and both bounds are inclusive.
    Classes with fewer than two instances contribute nothing.
    """
    cfg = cfg or DsConfig()
    losses = np.asarray(avg_losses, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if losses.size != labels.size:
        raise ShapeError("loss ledger and labels are not aligned")
    picked = []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if idx.size < 2:
            log.warning("class %d has %d instance(s); skipped by data selection", cls, idx.size)
            continue
        lo, hi = np.percentile(losses[idx], [cfg.p_lower, cfg.p_upper], method="linear")
        keep = (losses[idx] >= lo) & (losses[idx] <= hi)
        picked.append(idx[keep])
    if not picked:
        return np.zeros(0, dtype=np.int64)
    return np.sort(np.concatenate(picked))


# -- non-conformity ----------------------------------------------------------


def nonconformity_scores(probs, labels, gamma: float = 2.0) -> np.ndarray:
    """``max_{i != j} o_i / (o_j * gamma)`` for each row's label ``j``.

    Both the label probability and the competing maximum are floored at 1e-12
    so scores stay finite and strictly positive.
    """
    if gamma <= 0:
        raise ConfigError("gamma must be positive")
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, c = p.shape
    if c < 2:
        raise ConfigError("non-conformity is undefined for single-class problems")
    if labels.size != n:
        raise ShapeError("one label per probability row required")
    rows = np.arange(n)
    own = np.maximum(p[rows, labels], PROB_FLOOR)
    others = p.copy()
    others[rows, labels] = -np.inf
    rival = np.maximum(others.max(axis=1), PROB_FLOOR)
    return rival / (own * gamma)


def nonconformity(probs, label: int, gamma: float = 2.0) -> float:
    return float(nonconformity_scores(np.asarray(probs)[None, :], [label], gamma)[0])


def all_label_scores(probs, gamma: float = 2.0) -> np.ndarray:
    """Score of every provisional label, shape (n, c)."""
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    n, c = p.shape
    return np.column_stack([nonconformity_scores(p, np.full(n, j), gamma) for j in range(c)])


# -- calibration -------------------------------------------------------------


def build_calibration(model: MlpModel, real_valid, synth_valid=None, selected_train=None,
                      gamma: float = 2.0) -> CalibrationSet:
    """Score each calibration instance against its own (hardened) label.

    Every argument after ``model`` is ``None`` or a ``(features, labels)``
    pair; ``labels`` may be class indices or probability rows, the latter
    hardened by argmax.  Leaving ``selected_train`` out gives plain ICP.
    """
    scores, labels, prov = [], [], []
    for part, tag in ((real_valid, "real-valid"), (synth_valid, "synth-valid"),
                      (selected_train, "selected-train")):
        if part is None:
            continue
        x, y = part
        x = np.asarray(x, dtype=np.float64)
        if x.shape[0] == 0:
            continue
        y = np.asarray(y)
        if y.ndim == 2:
            y = y.argmax(axis=1)
        s = nonconformity_scores(forward(model, x), y, gamma)
        scores.append(s)
        labels.append(y.astype(np.int64))
        prov.extend([tag] * s.size)
    if not scores:
        raise DataError("calibration set would be empty")
    return CalibrationSet(np.concatenate(scores), np.concatenate(labels), tuple(prov))


def p_values(calib: CalibrationSet, new_scores) -> np.ndarray:
    """``(#{i : a_new <= a_i} + 1) / (q + 1)`` elementwise.

    The ``+1`` is the test instance counting itself.
    """
    s = np.asarray(new_scores, dtype=np.float64)
    q = len(calib)
    at_least = q - np.searchsorted(calib._sorted, s, side="left")
    return (at_least + 1) / (q + 1)


def summarize(pvals, thresholds: CertaintyThresholds | None = None) -> ConformalOutput:
    thresholds = thresholds or CertaintyThresholds()
    p = np.asarray(pvals, dtype=np.float64)
    label = int(np.argmax(p))
    ranked = np.sort(p)[::-1]
    credibility = float(ranked[0])
    confidence = float(1.0 - ranked[1]) if ranked.size > 1 else 1.0
    certain = confidence >= thresholds.min_confidence and credibility >= thresholds.min_credibility
    return ConformalOutput(label, p, confidence, credibility, bool(certain))


def predict_many(model: MlpModel, features, calib: CalibrationSet, gamma: float = 2.0,
                 thresholds: CertaintyThresholds | None = None) -> list[ConformalOutput]:
    x = np.asarray(features, dtype=np.float64)
    if x.shape[0] == 0:
        return []
    pv = p_values(calib, all_label_scores(forward(model, x), gamma))
    return [summarize(row, thresholds) for row in pv]


def predict(model: MlpModel, x_new, calib: CalibrationSet, gamma: float = 2.0,
            thresholds: CertaintyThresholds | None = None) -> ConformalOutput:
    x = np.asarray(x_new, dtype=np.float64).reshape(1, -1)
    return predict_many(model, x, calib, gamma, thresholds)[0]


# -- CSV export --------------------------------------------------------------


def write_calibration(calib: CalibrationSet, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha", "label", "provenance"])
        for a, y, p in zip(calib.scores, calib.labels, calib.provenance):
            w.writerow([repr(float(a)), int(y), p])


def read_calibration(path) -> CalibrationSet:
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not rows or rows[0] != ["alpha", "label", "provenance"]:
        raise CheckpointError(f"{path}: not a calibration export")
    body = [r for r in rows[1:] if r]
    try:
        scores = [float(r[0]) for r in body]
        labels = [int(r[1]) for r in body]
        prov = tuple(r[2] for r in body)
    except (ValueError, IndexError) as exc:
        raise CheckpointError(f"{path}: malformed calibration row ({exc})") from exc
    return CalibrationSet(np.array(scores), np.array(labels), prov)
