"""Synthetic data generation for past-agnostic replay.

A GMM is fit on the new domain's (unlabelled) features, its component count
is chosen by BIC on held-out features, and the sampled rows are labelled with
the current model's softmax outputs.  Nothing from earlier domains is read:
the only inputs are the current model and current-domain features.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from pagecl import gmm
from pagecl._seeding import derive_seed
from pagecl.errors import ConfigError, InsufficientDataError, ShapeError
from pagecl.nn import MlpModel, forward

log = logging.getLogger(__name__)


@dataclass
class SdgConfig:
    c_max: int = 10
    synth_fraction: float = 0.9
    seed: int = 0
    em: gmm.EmConfig = field(default_factory=gmm.EmConfig)

    def __post_init__(self):
        if self.c_max < 1:
            raise ConfigError("c_max must be at least 1")
        if not 0.0 < self.synth_fraction <= 2.0:
            raise ConfigError("synth_fraction must lie in (0, 2]")


@dataclass
class SyntheticSet:
    features: np.ndarray
    pseudo_labels: np.ndarray
    chosen_C: int = 0
    bic_trace: list[float] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def hard_labels(self) -> np.ndarray:
        # argmax returns the first maximum, i.e. ties go to the lowest class index
        return self.pseudo_labels.argmax(axis=1)

    @classmethod
    def empty(cls, dim: int, n_classes: int) -> "SyntheticSet":
        return cls(np.zeros((0, dim)), np.zeros((0, n_classes)))


def synthetic_count(n_real: int, fraction: float) -> int:
    # round away float noise first so 0.9 * 1000 gives 900, not 901
    return max(1, math.ceil(round(fraction * n_real, 9)))


def select_components(train_gmm: np.ndarray, valid_gmm: np.ndarray, c_max: int,
                      em_cfg: gmm.EmConfig, seed: int) -> tuple[int, list[float]]:
    """BIC sweep over C = 1..c_max; returns (argmin C, trace), ties to the smallest C."""
    trace = []
    for c in range(1, c_max + 1):
        cfg = gmm.EmConfig(em_cfg.max_iter, em_cfg.tol, em_cfg.cov_reg, derive_seed(seed, "sweep", c))
        trace.append(gmm.bic(gmm.em_fit(train_gmm, c, cfg), valid_gmm))
    return int(np.argmin(trace)) + 1, trace


def generate(model: MlpModel, train_gmm, valid_gmm, cfg: SdgConfig | None = None) -> SyntheticSet:
    cfg = cfg or SdgConfig()
    x_train = np.asarray(train_gmm, dtype=np.float64)
    x_valid = np.asarray(valid_gmm, dtype=np.float64)
    if x_train.ndim != 2 or x_train.shape[0] == 0:
        raise InsufficientDataError("SDG needs a non-empty feature matrix to fit the GMM")
    if x_train.shape[1] != model.n_inputs:
        raise ShapeError(f"feature dim {x_train.shape[1]} != model input dim {model.n_inputs}")
    notes = []
    c_max = cfg.c_max
    if x_train.shape[0] < c_max:
        c_max = x_train.shape[0]
        notes.append(f"c_max clamped to {c_max} (only {x_train.shape[0]} rows)")
    if x_valid.size == 0:
        x_valid = x_train
        notes.append("empty GMM validation set; BIC evaluated on the GMM training set")
    for msg in notes:
        log.warning(msg)

    chosen, trace = select_components(x_train, x_valid, c_max, cfg.em, cfg.seed)
    final_cfg = gmm.EmConfig(cfg.em.max_iter, cfg.em.tol, cfg.em.cov_reg,
                             derive_seed(cfg.seed, "final", chosen))
    best = gmm.em_fit(x_train, chosen, final_cfg)
    count = synthetic_count(x_train.shape[0], cfg.synth_fraction)
    features = gmm.sample(best, count, derive_seed(cfg.seed, "sample"))
    return SyntheticSet(features, forward(model, features), chosen, trace, notes)


def generate_pair(model: MlpModel, x_train, x_valid,
                  cfg: SdgConfig | None = None) -> tuple[SyntheticSet, SyntheticSet]:
    """Synthetic training and validation sets.

    The training set fits on ``x_train`` and scores BIC on ``x_valid``; the
    validation set swaps the two roles.
    """
    cfg = cfg or SdgConfig()
    if len(x_train) == 0 or len(x_valid) == 0:
        raise InsufficientDataError("both real training and validation features are required")
    sub = []
    for role in ("train", "valid"):
        sub.append(SdgConfig(cfg.c_max, cfg.synth_fraction, derive_seed(cfg.seed, role), cfg.em))
    return (generate(model, x_train, x_valid, sub[0]),
            generate(model, x_valid, x_train, sub[1]))
