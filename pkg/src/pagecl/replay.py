"""Balanced real/synthetic replay training with a per-instance loss ledger.

Every mini-batch holds exactly ``B/2`` real and ``B/2`` synthetic rows.  An
epoch ends as soon as either shuffled pool runs out (the remainder is
dropped), so the ledger averages each instance's loss over the epochs it
actually took part in.  Dropped instances are served first in the next
epoch, which keeps participation counts within a pool at most one apart.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from pagecl._seeding import rng_for
from pagecl.datapipe import LabeledTable
from pagecl.errors import ConfigError, ShapeError
from pagecl.nn import (MlpModel, SgdConfig, Velocity, cross_entropy, forward, one_hot,
                       sgd_step)
from pagecl.sdg import SyntheticSet

log = logging.getLogger(__name__)

SELECT_BY = ("accuracy", "loss")


@dataclass
class LossLedger:
    """Loss sums and participation counts, real instances first then synthetic."""

    sums: np.ndarray
    counts: np.ndarray
    n_real: int

    @classmethod
    def zeros(cls, n_real: int, n_synth: int) -> "LossLedger":
        n = n_real + n_synth
        return cls(np.zeros(n), np.zeros(n, dtype=np.int64), n_real)

    def add(self, idx, losses) -> None:
        np.add.at(self.sums, idx, losses)
        np.add.at(self.counts, idx, 1)

    @property
    def averages(self) -> np.ndarray:
        return np.divide(self.sums, self.counts, out=np.zeros_like(self.sums),
                         where=self.counts > 0)

    def __len__(self) -> int:
        return self.sums.size


@dataclass
class TrainReport:
    best_epoch: int
    metric_trace: list[float]
    select_by: str = "accuracy"
    batches_per_epoch: int = 0
    half_batch: int = 0
    warnings: list[str] = field(default_factory=list)

    @property
    def best_metric(self) -> float:
        return self.metric_trace[self.best_epoch]


def targets_of(table: LabeledTable, n_classes: int) -> np.ndarray:
    return one_hot(table.labels, n_classes)


def validation_metric(model: MlpModel, features, targets, select_by: str = "accuracy") -> float:
    """Accuracy against argmax-hardened targets (``'loss'``: negative mean CE).

    ``targets`` may be a class-index vector or a matrix of probability rows.
    """
    x = np.asarray(features, dtype=np.float64)
    t = np.asarray(targets)
    if x.shape[0] == 0:
        raise ShapeError("validation set is empty")
    probs = forward(model, x)
    if t.ndim == 1:
        t = one_hot(t, model.n_classes)
    if select_by == "loss":
        return -float(cross_entropy(t, probs).mean())
    return float(np.mean(probs.argmax(axis=1) == t.argmax(axis=1)))


def _warn(report_warnings, msg):
    log.warning(msg)
    report_warnings.append(msg)


def _fair_order(counts: np.ndarray, used: int, rng: np.random.Generator) -> np.ndarray:
    """Shuffled indices of the ``used`` least-trained instances of one pool.

    Instances dropped in one epoch go first in the next, so participation
    counts within a pool never differ by more than one.
    """
    pick = np.lexsort((rng.random(counts.size), counts))[:used]
    return pick[rng.permutation(used)]


def update(model: MlpModel, real_train: LabeledTable, real_valid: LabeledTable,
           synth_train: SyntheticSet | None, synth_valid: SyntheticSet | None,
           cfg: SgdConfig, select_by: str = "accuracy",
           warn_on_empty: bool = True) -> tuple[MlpModel, LossLedger, TrainReport]:
    """Train a copy of ``model`` for ``cfg.epochs`` epochs and keep the best epoch.

    The input model is left untouched.  With no synthetic pool the loop falls
    back to plain fine-tuning on real batches of size ``B`` (the naive
    baseline and first-domain training both use this path).
    """
    if select_by not in SELECT_BY:
        raise ConfigError(f"select_by must be one of {SELECT_BY}")
    n_classes = model.n_classes
    synth_train = synth_train if synth_train is not None else SyntheticSet.empty(model.n_inputs, n_classes)
    synth_valid = synth_valid if synth_valid is not None else SyntheticSet.empty(model.n_inputs, n_classes)
    for name, x in (("real_train", real_train.features), ("real_valid", real_valid.features),
                    ("synth_train", synth_train.features), ("synth_valid", synth_valid.features)):
        if x.shape[0] and x.shape[1] != model.n_inputs:
            raise ShapeError(f"{name} dim {x.shape[1]} != model input dim {model.n_inputs}")
    n_real, n_syn = len(real_train), len(synth_train)
    if n_real == 0:
        raise ShapeError("no real training data")

    x_all = np.vstack([real_train.features, synth_train.features])
    t_all = np.vstack([targets_of(real_train, n_classes), synth_train.pseudo_labels])
    x_valid = np.vstack([real_valid.features, synth_valid.features])
    t_valid = np.vstack([targets_of(real_valid, n_classes), synth_valid.pseudo_labels])

    report = TrainReport(best_epoch=0, metric_trace=[], select_by=select_by)
    if n_syn == 0:
        if warn_on_empty:
            _warn(report.warnings, "empty synthetic pool: plain fine-tuning without replay")
        half = 0
    else:
        half = cfg.batch_size // 2
        if half > min(n_real, n_syn):
            half = min(n_real, n_syn)
            _warn(report.warnings, f"batch shrunk to {2 * half} (pools of {n_real} and {n_syn})")
    report.half_batch = half

    work = model.copy()
    velocity = Velocity.zeros(work)
    ledger = LossLedger.zeros(n_real, n_syn)
    rng = rng_for(cfg.seed, "replay-shuffle")
    best_model, best_metric = None, -np.inf
    batch_index = 0
    for epoch in range(cfg.epochs):
        if half:
            n_batches = min(n_real // half, n_syn // half)
            used = n_batches * half
            real_order = _fair_order(ledger.counts[:n_real], used, rng)
            syn_order = _fair_order(ledger.counts[n_real:], used, rng) + n_real
            batches = [np.concatenate([real_order[b * half:(b + 1) * half],
                                       syn_order[b * half:(b + 1) * half]])
                       for b in range(n_batches)]
        else:
            order = rng.permutation(n_real)
            batches = [order[s:s + cfg.batch_size] for s in range(0, n_real, cfg.batch_size)]
        report.batches_per_epoch = len(batches)
        for idx in batches:
            losses = sgd_step(work, x_all[idx], t_all[idx], cfg, velocity, batch_index)
            ledger.add(idx, losses)
            batch_index += 1
        if x_valid.shape[0]:
            metric = validation_metric(work, x_valid, t_valid, select_by)
        else:
            metric = 0.0
        report.metric_trace.append(metric)
        if metric > best_metric:
            best_metric, best_model = metric, work.copy()
            report.best_epoch = epoch
    return best_model, ledger, report


def train(model: MlpModel, train_table: LabeledTable, valid_table: LabeledTable,
          cfg: SgdConfig, select_by: str = "accuracy") -> tuple[MlpModel, LossLedger, TrainReport]:
    """Plain supervised training (first domain, joint training)."""
    return update(model, train_table, valid_table, None, None, cfg, select_by,
                  warn_on_empty=False)
