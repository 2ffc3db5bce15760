"""Tabular preprocessing: windowing, min-max scaling, PCA, SMOTE and splits.

Fit-type operations only ever see training partitions; the fitted objects
(:class:`MinMaxScaler`, :class:`PcaProjection`) are frozen and re-applied
to everything else.
"""

from __future__ import annotations

import csv
import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from pagecl._seeding import derive_seed, rng_for
from pagecl.errors import ConfigError, DataError, InsufficientDataError, ShapeError

log = logging.getLogger(__name__)

LABEL_COLUMN = "label"
SUBJECT_COLUMN = "subject_id"
TIME_COLUMN = "timestamp"


@dataclass
class LabeledTable:
    features: np.ndarray
    labels: np.ndarray
    subject_ids: np.ndarray | None = None
    timestamps: np.ndarray | None = None
    feature_names: list[str] | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features.reshape(-1, 1) if self.features.size else self.features.reshape(0, 0)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        n = self.features.shape[0]
        if self.labels.shape[0] != n:
            raise ShapeError(f"{self.labels.shape[0]} labels for {n} rows")
        if self.labels.size and self.labels.min() < 0:
            raise DataError("class indices must be non-negative")
        if not np.isfinite(self.features).all():
            raise DataError("features contain non-finite values")
        for name in ("subject_ids", "timestamps"):
            col = getattr(self, name)
            if col is not None:
                col = np.asarray(col)
                if col.shape != (n,):
                    raise ShapeError(f"{name} must have one entry per row")
                setattr(self, name, col)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def take(self, idx) -> "LabeledTable":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledTable(
            self.features[idx],
            self.labels[idx],
            None if self.subject_ids is None else self.subject_ids[idx],
            None if self.timestamps is None else self.timestamps[idx],
            self.feature_names,
        )

    def with_features(self, features) -> "LabeledTable":
        return LabeledTable(features, self.labels, self.subject_ids, self.timestamps)

    @staticmethod
    def concat(tables) -> "LabeledTable":
        tables = list(tables)
        keep_ids = all(t.subject_ids is not None for t in tables)
        keep_ts = all(t.timestamps is not None for t in tables)
        return LabeledTable(
            np.vstack([t.features for t in tables]),
            np.concatenate([t.labels for t in tables]),
            np.concatenate([t.subject_ids for t in tables]) if keep_ids else None,
            np.concatenate([t.timestamps for t in tables]) if keep_ts else None,
            tables[0].feature_names,
        )


@dataclass
class Partition:
    train: LabeledTable
    valid: LabeledTable
    test: LabeledTable


@dataclass
class DomainSplit:
    domains: list[Partition]


# -- CSV ---------------------------------------------------------------------


def _read_csv(path) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise DataError(f"{path}: empty file (missing header)") from None
            rows = [r for r in reader if r]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    try:
        arr = np.array([[float(v) for v in r] for r in rows], dtype=np.float64)
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric cell ({exc})") from exc
    if arr.size == 0:
        arr = np.zeros((0, len(header)))
    if arr.ndim != 2 or arr.shape[1] != len(header):
        raise DataError(f"{path}: ragged rows")
    return header, arr


def _feature_columns(header: list[str]) -> list[int]:
    special = {LABEL_COLUMN, SUBJECT_COLUMN, TIME_COLUMN}
    return [i for i, h in enumerate(header) if h not in special]


def read_table(path) -> LabeledTable:
    """Load the CSV dataset format (features + ``label`` [+ subject_id, timestamp])."""
    header, arr = _read_csv(path)
    if LABEL_COLUMN not in header:
        raise DataError(f"{path}: no '{LABEL_COLUMN}' column")
    feat_cols = _feature_columns(header)
    labels = arr[:, header.index(LABEL_COLUMN)]
    if np.any(labels != np.round(labels)):
        raise DataError(f"{path}: labels must be integer class indices")
    sid = arr[:, header.index(SUBJECT_COLUMN)].astype(np.int64) if SUBJECT_COLUMN in header else None
    ts = arr[:, header.index(TIME_COLUMN)] if TIME_COLUMN in header else None
    return LabeledTable(arr[:, feat_cols], labels.astype(np.int64), sid, ts,
                        [header[i] for i in feat_cols])


def read_features(path) -> tuple[np.ndarray, list[str]]:
    """Feature columns of a CSV in the dataset format; ``label`` is optional here."""
    header, arr = _read_csv(path)
    feat_cols = _feature_columns(header)
    if not np.isfinite(arr[:, feat_cols]).all():
        raise DataError(f"{path}: non-finite feature values")
    return arr[:, feat_cols], [header[i] for i in feat_cols]


def write_table(table: LabeledTable, path) -> None:
    names = table.feature_names or [f"f{i}" for i in range(table.dim)]
    header = list(names) + [LABEL_COLUMN]
    if table.subject_ids is not None:
        header.append(SUBJECT_COLUMN)
    if table.timestamps is not None:
        header.append(TIME_COLUMN)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(len(table)):
            row = [repr(float(v)) for v in table.features[i]] + [int(table.labels[i])]
            if table.subject_ids is not None:
                row.append(int(table.subject_ids[i]))
            if table.timestamps is not None:
                row.append(repr(float(table.timestamps[i])))
            w.writerow(row)


# -- windowing ---------------------------------------------------------------


@dataclass
class SubjectStream:
    """Synchronised sensor streams of one subject.

    ``sensors`` holds one ``(n_samples, channels)`` array per sensor, all
    sampled at ``rate_hz``.
    """

    subject_id: int
    label: int
    rate_hz: float
    sensors: list[np.ndarray]
    start_time: float = 0.0


def window(streams, window_s: float = 15.0, shift_s: float = 15.0) -> LabeledTable:
    """Cut each stream into windows, one flattened row per window.

    Trailing partial windows are dropped; streams shorter than one window are
    skipped with a warning.
    """
    if window_s <= 0 or shift_s <= 0:
        raise ConfigError("window and shift must be positive")
    rows, labels, sids, times = [], [], [], []
    width = None
    for s in streams:
        if s.rate_hz <= 0:
            raise DataError(f"subject {s.subject_id}: missing sampling rate")
        win = int(round(window_s * s.rate_hz))
        step = int(round(shift_s * s.rate_hz))
        n = min(len(x) for x in s.sensors)
        if n < win:
            log.warning("subject %s: stream shorter than one window, skipped", s.subject_id)
            continue
        for start in range(0, n - win + 1, step):
            row = np.concatenate([np.asarray(x[start:start + win], dtype=np.float64).reshape(-1)
                                  for x in s.sensors])
            if width is not None and row.size != width:
                raise ShapeError("sensor layouts differ between subjects")
            width = row.size
            rows.append(row)
            labels.append(s.label)
            sids.append(s.subject_id)
            times.append(s.start_time + start / s.rate_hz)
    feats = np.vstack(rows) if rows else np.zeros((0, 0))
    return LabeledTable(feats, np.array(labels, dtype=np.int64),
                        np.array(sids, dtype=np.int64), np.array(times, dtype=np.float64))


# -- min-max -----------------------------------------------------------------


@dataclass
class MinMaxScaler:
    mins: np.ndarray
    maxs: np.ndarray

    @classmethod
    def fit(cls, table: LabeledTable) -> "MinMaxScaler":
        if len(table) == 0:
            raise InsufficientDataError("cannot fit min-max bounds on an empty table")
        return cls(table.features.min(axis=0), table.features.max(axis=0))

    def transform(self, features) -> np.ndarray:
        x = np.asarray(features, dtype=np.float64)
        if x.shape[-1] != self.mins.size:
            raise ShapeError(f"expected {self.mins.size} features, got {x.shape[-1]}")
        span = self.maxs - self.mins
        safe = np.where(span > 0, span, 1.0)
        return np.where(span > 0, (x - self.mins) / safe, 0.0)

    def apply(self, table: LabeledTable) -> LabeledTable:
        return table.with_features(self.transform(table.features))


def minmax_fit_apply(train: LabeledTable) -> tuple[LabeledTable, MinMaxScaler]:
    scaler = MinMaxScaler.fit(train)
    return scaler.apply(train), scaler


def minmax_apply(table: LabeledTable, scaler: MinMaxScaler) -> LabeledTable:
    return scaler.apply(table)


# -- PCA ---------------------------------------------------------------------

SIGMA_FLOOR = 1e-12


@dataclass
class PcaProjection:
    means: np.ndarray
    stds: np.ndarray
    components: np.ndarray  # (d, k), orthonormal columns
    eigenvalues: np.ndarray  # all d, descending

    @property
    def k(self) -> int:
        return self.components.shape[1]

    def transform(self, features) -> np.ndarray:
        x = np.asarray(features, dtype=np.float64)
        if x.shape[-1] != self.means.size:
            raise ShapeError(f"expected {self.means.size} features, got {x.shape[-1]}")
        return ((x - self.means) / self.stds) @ self.components

    def inverse_transform(self, reduced) -> np.ndarray:
        return (np.asarray(reduced) @ self.components.T) * self.stds + self.means


def pca_fit(train: LabeledTable, k: int) -> PcaProjection:
    """z-score with train statistics, eigendecompose the covariance, keep top ``k``."""
    x = train.features
    n, d = x.shape
    if not 1 <= k <= d:
        raise ConfigError(f"k={k} must lie in [1, {d}]")
    if n < 2:
        raise InsufficientDataError("PCA needs at least two rows")
    means = x.mean(axis=0)
    stds = np.maximum(x.std(axis=0, ddof=1), SIGMA_FLOOR)
    z = (x - means) / stds
    cov = z.T @ z / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    # deterministic sign: largest-magnitude loading of each axis positive
    flip = np.sign(evecs[np.abs(evecs).argmax(axis=0), np.arange(d)])
    evecs = evecs * np.where(flip == 0, 1.0, flip)
    return PcaProjection(means, stds, evecs[:, :k].copy(), evals)


def pca_apply(table: LabeledTable, proj: PcaProjection) -> LabeledTable:
    return table.with_features(proj.transform(table.features))


# -- frozen input transform --------------------------------------------------


@dataclass
class FeatureTransform:
    """Min-max scaling optionally followed by PCA, fit once on the first domain."""

    scaler: MinMaxScaler
    pca: PcaProjection | None = None

    @classmethod
    def fit(cls, train: LabeledTable, pca_k: int | None = None) -> "FeatureTransform":
        scaler = MinMaxScaler.fit(train)
        pca = pca_fit(scaler.apply(train), pca_k) if pca_k else None
        return cls(scaler, pca)

    @property
    def input_dim(self) -> int:
        return self.scaler.mins.size

    @property
    def output_dim(self) -> int:
        return self.pca.k if self.pca is not None else self.input_dim

    def transform(self, features) -> np.ndarray:
        x = self.scaler.transform(features)
        return self.pca.transform(x) if self.pca is not None else x

    def apply(self, table: LabeledTable) -> LabeledTable:
        return table.with_features(self.transform(table.features))

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {"minmax.mins": self.scaler.mins, "minmax.maxs": self.scaler.maxs}
        if self.pca is not None:
            out.update({"pca.means": self.pca.means, "pca.stds": self.pca.stds,
                        "pca.components": self.pca.components,
                        "pca.eigenvalues": self.pca.eigenvalues})
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "FeatureTransform | None":
        if "minmax.mins" not in arrays:
            return None
        pca = None
        if "pca.components" in arrays:
            pca = PcaProjection(arrays["pca.means"], arrays["pca.stds"],
                                arrays["pca.components"], arrays["pca.eigenvalues"])
        return cls(MinMaxScaler(arrays["minmax.mins"], arrays["minmax.maxs"]), pca)


# -- SMOTE -------------------------------------------------------------------


def _nearest_same_class(pts: np.ndarray, k: int) -> np.ndarray:
    _, nn = cKDTree(pts).query(pts, k=k + 1)
    nn = np.atleast_2d(nn)
    out = np.empty((pts.shape[0], k), dtype=np.int64)
    for i, row in enumerate(nn):
        others = row[row != i]
        out[i] = others[:k]
    return out


def smote_balance(train: LabeledTable, k_neighbors: int = 5, seed: int = 0) -> LabeledTable:
    """Upsample every class to the majority count by SMOTE interpolation.

    Each new row is ``A + lam*(B - A)`` for a random minority row ``A``, one of
    its ``k_neighbors`` nearest same-class rows ``B`` and ``lam ~ U[0, 1]``.
    Synthetic rows are appended after the originals and inherit ``A``'s
    subject id and timestamp.
    """
    counts = Counter(train.labels.tolist())
    if not counts:
        return train
    target = max(counts.values())
    rng = np.random.default_rng(seed)
    new_x, new_y, src = [], [], []
    for cls in sorted(counts):
        n_cls = counts[cls]
        if n_cls == target:
            continue
        if n_cls < 2:
            raise InsufficientDataError(f"class {cls} has {n_cls} instance(s); SMOTE needs >= 2")
        idx = np.flatnonzero(train.labels == cls)
        pts = train.features[idx]
        k = min(k_neighbors, n_cls - 1)
        neighbours = _nearest_same_class(pts, k)
        for _ in range(target - n_cls):
            a = rng.integers(n_cls)
            b = neighbours[a, rng.integers(k)]
            lam = rng.uniform()
            new_x.append(pts[a] + lam * (pts[b] - pts[a]))
            new_y.append(cls)
            src.append(idx[a])
    if not new_x:
        return train
    src = np.array(src)
    extra = LabeledTable(
        np.vstack(new_x), np.array(new_y),
        None if train.subject_ids is None else train.subject_ids[src],
        None if train.timestamps is None else train.timestamps[src],
    )
    return LabeledTable.concat([train, extra])


# -- splits ------------------------------------------------------------------


def _subject_labels(table: LabeledTable) -> dict:
    out = {}
    for sid in np.unique(table.subject_ids):
        labels = table.labels[table.subject_ids == sid]
        out[sid.item()] = Counter(labels.tolist()).most_common(1)[0][0]
    return out


def temporal_split(table: LabeledTable, fractions=(0.7, 0.1, 0.2)) -> Partition:
    """Per subject: first / next / last chunk of its time-ordered rows."""
    if table.subject_ids is None:
        raise DataError("temporal split needs subject ids")
    f_train, f_valid, f_test = fractions
    if min(fractions) < 0 or abs(f_train + f_valid + f_test - 1.0) > 1e-9:
        raise ConfigError(f"temporal fractions {fractions} must be non-negative and sum to 1")
    times = table.timestamps if table.timestamps is not None else np.arange(len(table), dtype=float)
    parts = ([], [], [])
    for sid in np.unique(table.subject_ids):
        rows = np.flatnonzero(table.subject_ids == sid)
        rows = rows[np.argsort(times[rows], kind="stable")]
        n = rows.size
        cut1 = int(round(f_train * n))
        cut2 = int(round((f_train + f_valid) * n))
        for part, chunk in zip(parts, (rows[:cut1], rows[cut1:cut2], rows[cut2:])):
            part.append(chunk)
    train, valid, test = (table.take(np.concatenate(p)) for p in parts)
    return Partition(train, valid, test)


def split_subjects(table: LabeledTable, domain_fraction: float = 0.8,
                   seed: int = 0) -> tuple[LabeledTable, LabeledTable]:
    """Stratified subject-level split into two subject-disjoint domains."""
    if table.subject_ids is None:
        raise DataError("domain split needs subject ids")
    if not 0.0 < domain_fraction < 1.0:
        raise ConfigError("domain_fraction must lie in (0, 1)")
    by_class: dict[int, list] = {}
    for sid, lab in _subject_labels(table).items():
        by_class.setdefault(lab, []).append(sid)
    short = sorted(c for c, s in by_class.items() if len(s) < 2)
    if short:
        raise InsufficientDataError(f"classes with fewer than 2 subjects: {short}")
    rng = rng_for(seed, "split_domains")
    first = []
    for lab in sorted(by_class):
        sids = np.array(sorted(by_class[lab]))
        rng.shuffle(sids)
        n1 = min(max(int(round(domain_fraction * sids.size)), 1), sids.size - 1)
        first.extend(sids[:n1].tolist())
    in_first = np.isin(table.subject_ids, first)
    return table.take(np.flatnonzero(in_first)), table.take(np.flatnonzero(~in_first))


def split_domains(table: LabeledTable, domain_fraction: float = 0.8,
                  temporal=(0.7, 0.1, 0.2), seed: int = 0) -> DomainSplit:
    """Stratified subject-level split into two domains, then a temporal split of each.

    The returned partitions are raw; see :func:`prepare_domains` for the
    scaling / PCA / SMOTE stage.
    """
    first, second = split_subjects(table, domain_fraction, seed)
    return DomainSplit([temporal_split(first, temporal), temporal_split(second, temporal)])


def prepare_partition(part: Partition, transform: FeatureTransform,
                      smote_k: int | None = 5, seed: int = 0) -> Partition:
    """Apply a frozen transform to all three splits and SMOTE the training split."""
    train = transform.apply(part.train)
    if smote_k:
        train = smote_balance(train, smote_k, seed)
    return Partition(train, transform.apply(part.valid), transform.apply(part.test))


def prepare_domains(split: DomainSplit, pca_k: int | None = None, smote_k: int | None = 5,
                    seed: int = 0) -> tuple[DomainSplit, FeatureTransform]:
    """Fit the transform on the first domain's training split only and apply it everywhere."""
    transform = FeatureTransform.fit(split.domains[0].train, pca_k)
    parts = [prepare_partition(p, transform, smote_k, derive_seed(seed, "smote", i))
             for i, p in enumerate(split.domains)]
    return DomainSplit(parts), transform
