"""The multi-domain experiment protocol and its JSON record.

``run_experiment`` trains on the first domain from scratch and then, for each
later domain, applies one strategy:

* ``page``           synthetic data generation, balanced replay update, then
                     ICP and extended ICP calibration;
* ``naive-finetune`` the same update with an empty synthetic pool;
* ``joint-train``    a fresh model trained on all domains seen so far.

Every number in the record is a pure function of the config, the master
seed and the input files; wall-clock timings live under ``timings`` only.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from pagecl import conformal, metrics, nn, replay, sdg
from pagecl._seeding import derive_seed
from pagecl.bench import BenchmarkSpec, generate_benchmark
from pagecl.conformal import CertaintyThresholds, DsConfig
from pagecl.datapipe import (FeatureTransform, LabeledTable, Partition, prepare_partition,
                             read_table, temporal_split)
from pagecl.errors import ConfigError, DataError
from pagecl.gmm import EmConfig

log = logging.getLogger(__name__)

STRATEGIES = ("page", "naive-finetune", "joint-train")


@dataclass
class ExperimentConfig:
    """All knobs of one run.  ``seed`` is the master seed: the ``seed`` fields
    of the nested SGD / SDG configs are ignored and re-derived from it."""

    domain_files: list[str] = field(default_factory=list)
    bench: BenchmarkSpec | None = None
    hidden: tuple[int, ...] = (256, 128, 128)
    sgd: nn.SgdConfig = field(default_factory=nn.SgdConfig)
    sdg: sdg.SdgConfig = field(default_factory=sdg.SdgConfig)
    ds: DsConfig = field(default_factory=DsConfig)
    gamma: float = 2.0
    thresholds: CertaintyThresholds = field(default_factory=CertaintyThresholds)
    strategy: str = "page"
    seed: int = 0
    pca_k: int | None = None
    smote_k: int | None = 5
    temporal: tuple[float, float, float] = (0.7, 0.1, 0.2)
    healthy_class: int = 0
    select_by: str = "accuracy"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.gamma <= 0:
            raise ConfigError("gamma must be positive")
        if self.select_by not in replay.SELECT_BY:
            raise ConfigError(f"select_by must be one of {replay.SELECT_BY}")
        if not self.domain_files and self.bench is None:
            raise ConfigError("need domain_files or a benchmark spec")
        if self.seed < 0:
            raise ConfigError("seed must be unsigned")

    def to_dict(self) -> dict:
        return asdict(self)

    def sgd_for(self, domain: int) -> nn.SgdConfig:
        s = self.sgd
        return nn.SgdConfig(s.learning_rate, s.momentum, s.batch_size, s.epochs,
                            derive_seed(self.seed, "sgd", domain))

    def sdg_for(self, domain: int) -> sdg.SdgConfig:
        s = self.sdg
        return sdg.SdgConfig(s.c_max, s.synth_fraction, derive_seed(self.seed, "sdg", domain),
                             EmConfig(s.em.max_iter, s.em.tol, s.em.cov_reg, 0))


@dataclass
class DomainStep:
    """What one learning step leaves behind for calibration and reporting."""

    model: nn.MlpModel
    ledger: replay.LossLedger
    report: replay.TrainReport
    train: LabeledTable
    valid: LabeledTable
    synth_train: sdg.SyntheticSet | None = None
    synth_valid: sdg.SyntheticSet | None = None


def load_domains(cfg: ExperimentConfig) -> list[LabeledTable]:
    if cfg.domain_files:
        return [read_table(p) for p in cfg.domain_files]
    return generate_benchmark(cfg.bench)


def split_domain(table: LabeledTable, cfg: ExperimentConfig) -> Partition:
    if table.subject_ids is None:
        raise DataError("domain data needs a subject_id column for the temporal split")
    return temporal_split(table, cfg.temporal)


def fit_transform(raw: Partition, cfg: ExperimentConfig) -> FeatureTransform:
    return FeatureTransform.fit(raw.train, cfg.pca_k)


def prepare(raw: Partition, transform: FeatureTransform, cfg: ExperimentConfig,
            domain: int) -> Partition:
    return prepare_partition(raw, transform, cfg.smote_k, derive_seed(cfg.seed, "smote", domain))


def n_classes_of(*tables: LabeledTable) -> int:
    return int(max(t.labels.max() for t in tables if len(t))) + 1


def learn_first_domain(part: Partition, cfg: ExperimentConfig, n_classes: int) -> DomainStep:
    dims = [part.train.dim, *cfg.hidden, n_classes]
    model0 = nn.init_mlp(dims, derive_seed(cfg.seed, "init"))
    model, ledger, report = replay.train(model0, part.train, part.valid, cfg.sgd_for(0), cfg.select_by)
    return DomainStep(model, ledger, report, part.train, part.valid)


def adapt(model: nn.MlpModel, part: Partition, cfg: ExperimentConfig, domain: int,
          strategy: str | None = None) -> DomainStep:
    """One past-agnostic adaptation step; touches only ``model`` and ``part``."""
    strategy = strategy or cfg.strategy
    sgd_cfg = cfg.sgd_for(domain)
    if strategy == "page":
        synth_train, synth_valid = sdg.generate_pair(model, part.train.features,
                                                     part.valid.features, cfg.sdg_for(domain))
        new, ledger, report = replay.update(model, part.train, part.valid, synth_train,
                                            synth_valid, sgd_cfg, cfg.select_by)
        return DomainStep(new, ledger, report, part.train, part.valid, synth_train, synth_valid)
    if strategy == "naive-finetune":
        new, ledger, report = replay.update(model, part.train, part.valid, None, None,
                                            sgd_cfg, cfg.select_by)
        return DomainStep(new, ledger, report, part.train, part.valid)
    raise ConfigError(f"strategy {strategy!r} is not a sequential adaptation strategy")


def calibrate(step: DomainStep, cfg: ExperimentConfig):
    """(ICP, extended ICP) calibration sets for the model of ``step``."""
    synth_valid = None
    if step.synth_valid is not None and len(step.synth_valid):
        synth_valid = (step.synth_valid.features, step.synth_valid.pseudo_labels)
    real_valid = (step.valid.features, step.valid.labels)
    icp = conformal.build_calibration(step.model, real_valid, synth_valid, None, cfg.gamma)

    x_all, y_all = step.train.features, step.train.labels
    if step.synth_train is not None and len(step.synth_train):
        x_all = np.vstack([x_all, step.synth_train.features])
        y_all = np.concatenate([y_all, step.synth_train.hard_labels])
    picked = conformal.select_data(step.ledger.averages, y_all, cfg.ds)
    eicp = conformal.build_calibration(step.model, real_valid, synth_valid,
                                       (x_all[picked], y_all[picked]), cfg.gamma)
    return icp, eicp


def _domain_name(i: int) -> str:
    return f"domain{i + 1}"


def step_trace(step: DomainStep) -> dict:
    out = {
        "best_epoch": step.report.best_epoch,
        "metric_trace": step.report.metric_trace,
        "batches_per_epoch": step.report.batches_per_epoch,
        "half_batch": step.report.half_batch,
        "warnings": step.report.warnings,
        "ledger": {"n_real": step.ledger.n_real,
                   "averages": step.ledger.averages.tolist(),
                   "counts": step.ledger.counts.tolist()},
    }
    for name in ("synth_train", "synth_valid"):
        s = getattr(step, name)
        if s is not None:
            out[name] = {"size": len(s), "chosen_C": s.chosen_C, "bic_trace": s.bic_trace}
    return out


def buffer_bytes(strategy: str, past_training: list[LabeledTable]) -> int:
    """Bytes of past-domain data a strategy must keep besides the model."""
    if strategy != "joint-train":
        return 0
    return int(sum(t.features.nbytes + t.labels.nbytes for t in past_training))


def domain_metrics(model: nn.MlpModel, tests: list[LabeledTable], calibrations: dict,
                   cfg: ExperimentConfig) -> dict:
    """Per-domain F1 and, for each named calibration set, conformal confusion counts."""
    f1 = []
    cp = {key: {} for key in calibrations}
    for n, test in enumerate(tests):
        probs = nn.forward(model, test.features)
        f1.append(metrics.f1_binary(probs.argmax(axis=1), test.labels, cfg.healthy_class))
        for key, cal in calibrations.items():
            outs = conformal.predict_many(model, test.features, cal, cfg.gamma, cfg.thresholds)
            cp[key][_domain_name(n)] = metrics.cp_confusion(outs, test.labels).to_dict()
    sizes = {key: len(cal) for key, cal in calibrations.items()}
    if "eicp" in calibrations:
        sizes["selected_train"] = calibrations["eicp"].count("selected-train")
    cp["calibration_size"] = sizes
    return {"f1": f1, "average_f1": metrics.average(f1), "conformal": cp}


def run_experiment(cfg: ExperimentConfig, tables: list[LabeledTable] | None = None) -> dict:
    timings = {}
    t0 = time.perf_counter()
    tables = tables if tables is not None else load_domains(cfg)
    if len(tables) < 2:
        raise ConfigError("the protocol needs at least two domains")
    raw = [split_domain(t, cfg) for t in tables]
    transform = fit_transform(raw[0], cfg)
    parts = [prepare(r, transform, cfg, i) for i, r in enumerate(raw)]
    n_classes = n_classes_of(*tables)
    timings["prepare_s"] = time.perf_counter() - t0

    acc = metrics.AccuracyMatrix(len(parts))
    traces = {}

    def evaluate(model, upto):
        for n in range(upto + 1):
            pred = nn.forward(model, parts[n].test.features).argmax(axis=1)
            acc.record(n, upto, metrics.accuracy(pred, parts[n].test.labels))

    t = time.perf_counter()
    step = learn_first_domain(parts[0], cfg, n_classes)
    traces[_domain_name(0)] = step_trace(step)
    evaluate(step.model, 0)
    timings[_domain_name(0) + "_s"] = time.perf_counter() - t

    for d in range(1, len(parts)):
        t = time.perf_counter()
        if cfg.strategy == "joint-train":
            pooled = Partition(LabeledTable.concat([p.train for p in parts[:d + 1]]),
                               LabeledTable.concat([p.valid for p in parts[:d + 1]]),
                               parts[d].test)
            step = learn_first_domain(pooled, cfg, n_classes)
        else:
            step = adapt(step.model, parts[d], cfg, d)
        traces[_domain_name(d)] = step_trace(step)
        evaluate(step.model, d)
        timings[_domain_name(d) + "_s"] = time.perf_counter() - t

    t = time.perf_counter()
    icp_cal, eicp_cal = calibrate(step, cfg)
    summary = domain_metrics(step.model, [p.test for p in parts],
                             {"icp": icp_cal, "eicp": eicp_cal}, cfg)
    timings["conformal_s"] = time.perf_counter() - t

    final = acc.final()
    record = {
        "config": cfg.to_dict(),
        "strategy": cfg.strategy,
        "n_classes": n_classes,
        "accuracy_matrix": acc.tolist(),
        "final_accuracy": final.tolist(),
        "average_accuracy": metrics.average(final),
        "f1": summary["f1"],
        "average_f1": summary["average_f1"],
        "bwt": metrics.bwt(acc),
        "buffer_bytes": buffer_bytes(cfg.strategy, [p.train for p in parts[:-1]]),
        "conformal": summary["conformal"],
        "traces": traces,
    }
    timings["total_s"] = time.perf_counter() - t0
    record["timings"] = timings
    return record


def without_timings(record: dict) -> dict:
    return {k: v for k, v in record.items() if k != "timings"}
