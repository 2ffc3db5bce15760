"""Windowing, scaling, PCA, SMOTE, splits and CSV ingestion."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial import Delaunay

from pagecl import datapipe
from pagecl.datapipe import LabeledTable, SubjectStream
from pagecl.errors import ConfigError, DataError, InsufficientDataError, ShapeError


def table_of(x, y=None, sids=None, ts=None):
    x = np.asarray(x, dtype=float)
    y = np.zeros(len(x), dtype=int) if y is None else y
    return LabeledTable(x, y, sids, ts)


def subject_table(subjects_per_class=10, rows=20, n_classes=2, seed=0):
    rng = np.random.default_rng(seed)
    x, y, sid, ts = [], [], [], []
    s = 0
    for cls in range(n_classes):
        for _ in range(subjects_per_class):
            x.append(rng.normal(size=(rows, 3)) + cls)
            y.append(np.full(rows, cls))
            sid.append(np.full(rows, s))
            ts.append(rng.permutation(rows) * 15.0)
            s += 1
    return LabeledTable(np.vstack(x), np.concatenate(y), np.concatenate(sid), np.concatenate(ts))


class TestWindow:
    def stream(self, seconds, rate=4.0, sensors=((1,),), sid=0):
        n = int(seconds * rate)
        return SubjectStream(sid, 1, rate, [np.arange(n * c[0], dtype=float).reshape(n, c[0])
                                            for c in sensors])

    @pytest.mark.parametrize("seconds, expected", [(60, 4), (59, 3), (15, 1)])
    def test_window_count(self, seconds, expected):
        assert len(datapipe.window([self.stream(seconds)])) == expected

    def test_row_width_and_layout(self):
        rate = 2.0
        a = np.arange(60 * 2, dtype=float).reshape(60, 2)
        b = -np.arange(60 * 3, dtype=float).reshape(60, 3)
        t = datapipe.window([SubjectStream(7, 0, rate, [a, b], start_time=100.0)])
        assert t.dim == (2 + 3) * 15 * 2
        # hand-built first and second rows: sensor a flattened, then sensor b
        np.testing.assert_array_equal(t.features[0], np.concatenate([a[:30].ravel(), b[:30].ravel()]))
        np.testing.assert_array_equal(t.features[1], np.concatenate([a[30:].ravel(), b[30:].ravel()]))
        np.testing.assert_array_equal(t.timestamps, [100.0, 115.0])
        np.testing.assert_array_equal(t.subject_ids, [7, 7])

    def test_short_stream_skipped(self, caplog):
        t = datapipe.window([self.stream(10, sid=3), self.stream(30, sid=4)])
        assert len(t) == 2 and set(t.subject_ids) == {4}
        assert "shorter than one window" in caplog.text

    def test_missing_rate(self):
        with pytest.raises(DataError):
            datapipe.window([SubjectStream(0, 0, 0.0, [np.zeros((10, 1))])])


class TestMinMax:
    def test_column(self):
        out, _ = datapipe.minmax_fit_apply(table_of([[2.0], [4.0], [6.0]]))
        np.testing.assert_allclose(out.features[:, 0], [0.0, 0.5, 1.0])

    def test_constant_column(self):
        out, _ = datapipe.minmax_fit_apply(table_of([[3.0, 1.0], [3.0, 2.0]]))
        np.testing.assert_array_equal(out.features[:, 0], 0.0)

    def test_other_split_not_clipped(self):
        _, scaler = datapipe.minmax_fit_apply(table_of([[2.0], [6.0]]))
        out = datapipe.minmax_apply(table_of([[0.0], [10.0]]), scaler)
        np.testing.assert_allclose(out.features[:, 0], [-0.5, 2.0])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 1000), st.integers(2, 30), st.integers(1, 6))
    def test_train_maps_to_unit_interval(self, seed, n, d):
        x = np.random.default_rng(seed).normal(size=(n, d)) * 10
        out, _ = datapipe.minmax_fit_apply(table_of(x))
        assert out.features.min() >= 0.0 and out.features.max() <= 1.0

    def test_empty(self):
        with pytest.raises(InsufficientDataError):
            datapipe.minmax_fit_apply(table_of(np.zeros((0, 2))))


class TestPca:
    def test_round_trip_full_rank(self):
        x = np.random.default_rng(0).normal(size=(50, 10))
        proj = datapipe.pca_fit(table_of(x), 10)
        np.testing.assert_allclose(proj.inverse_transform(proj.transform(x)), x, atol=1e-8)

    def test_rank_one(self):
        t = np.random.default_rng(1).normal(size=40)
        proj = datapipe.pca_fit(table_of(np.column_stack([t, 2 * t + 1])), 1)
        assert proj.eigenvalues[0] / proj.eigenvalues.sum() > 0.999

    def test_identity_covariance(self):
        # whitened sample: every eigenvalue is 1, so any orthonormal basis is a valid answer
        rng = np.random.default_rng(2)
        z = rng.normal(size=(200, 3))
        z -= z.mean(axis=0)
        z = z @ np.linalg.inv(np.linalg.cholesky(np.cov(z.T))).T
        proj = datapipe.pca_fit(table_of(z), 3)
        np.testing.assert_allclose(proj.eigenvalues, 1.0, atol=1e-10)
        np.testing.assert_allclose(proj.inverse_transform(proj.transform(z)), z, atol=1e-10)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 1000), st.integers(2, 8), st.data())
    def test_orthonormal_and_sorted(self, seed, d, data):
        k = data.draw(st.integers(1, d))
        x = np.random.default_rng(seed).normal(size=(30, d)) @ np.random.default_rng(seed + 1).normal(size=(d, d))
        proj = datapipe.pca_fit(table_of(x), k)
        np.testing.assert_allclose(proj.components.T @ proj.components, np.eye(k), atol=1e-8)
        assert np.all(np.diff(proj.eigenvalues) <= 1e-12)

    def test_zero_variance_column(self):
        x = np.column_stack([np.random.default_rng(3).normal(size=20), np.full(20, 5.0)])
        proj = datapipe.pca_fit(table_of(x), 2)
        assert proj.stds[1] == datapipe.SIGMA_FLOOR
        assert np.isfinite(proj.transform(x)).all()

    @pytest.mark.parametrize("k", [0, 4])
    def test_bad_k(self, k):
        with pytest.raises(ConfigError):
            datapipe.pca_fit(table_of(np.zeros((5, 3))), k)


class TestSmote:
    def test_segment(self):
        t = table_of([[0.0, 0.0], [1.0, 1.0], [5, 5], [6, 6], [7, 7]], np.array([0, 0, 1, 1, 1]))
        out = datapipe.smote_balance(t, seed=1)
        new = out.features[5:]
        assert len(new) == 1
        assert new[0, 0] == new[0, 1] and 0.0 <= new[0, 0] <= 1.0

    def test_balanced_is_identity(self):
        t = table_of(np.arange(8.0).reshape(4, 2), np.array([0, 1, 0, 1]))
        out = datapipe.smote_balance(t)
        np.testing.assert_array_equal(out.features, t.features)

    def test_two_minority_rows(self):
        rng = np.random.default_rng(4)
        minority = np.array([[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]])
        x = np.vstack([rng.normal(size=(10, 3)) + 10, minority])
        t = table_of(x, np.array([0] * 10 + [1] * 2))
        out = datapipe.smote_balance(t, seed=3)
        np.testing.assert_array_equal(np.bincount(out.labels), [10, 10])
        new = out.features[12:]
        assert len(new) == 8
        # two points: the hull is the segment between them
        lam = new @ minority[1] / (minority[1] @ minority[1])
        np.testing.assert_allclose(np.outer(lam, minority[1]), new, atol=1e-12)
        assert np.all((lam >= 0) & (lam <= 1))

    def test_new_rows_inside_class_hull(self):
        rng = np.random.default_rng(5)
        x = np.vstack([rng.normal(size=(40, 2)), rng.normal(size=(7, 2)) + 5])
        t = table_of(x, np.array([0] * 40 + [1] * 7))
        out = datapipe.smote_balance(t, seed=0)
        hull = Delaunay(x[40:])
        assert np.all(hull.find_simplex(out.features[47:]) >= 0)

    @settings(max_examples=20, deadline=None)
    @given(st.lists(st.integers(2, 15), min_size=2, max_size=4), st.integers(0, 100))
    def test_histogram_uniform(self, counts, seed):
        rng = np.random.default_rng(seed)
        y = np.repeat(np.arange(len(counts)), counts)
        out = datapipe.smote_balance(table_of(rng.normal(size=(y.size, 2)), y), seed=seed)
        assert set(np.bincount(out.labels)) == {max(counts)}

    def test_singleton_class_named(self):
        t = table_of(np.zeros((4, 2)), np.array([0, 0, 0, 1]))
        with pytest.raises(InsufficientDataError, match="class 1"):
            datapipe.smote_balance(t)


class TestSplits:
    def test_eight_two_per_class(self):
        table = subject_table(10)
        first, second = datapipe.split_subjects(table, 0.8, seed=3)
        for tab, n in ((first, 8), (second, 2)):
            for cls in (0, 1):
                assert np.unique(tab.subject_ids[tab.labels == cls]).size == n
        assert not set(first.subject_ids) & set(second.subject_ids)

    def test_temporal_order(self):
        split = datapipe.split_domains(subject_table(10), seed=1)
        for part in split.domains:
            for sid in np.unique(part.train.subject_ids):
                tr = part.train.timestamps[part.train.subject_ids == sid]
                va = part.valid.timestamps[part.valid.subject_ids == sid]
                te = part.test.timestamps[part.test.subject_ids == sid]
                assert tr.max() < va.min() and va.max() < te.min()
                assert (tr.size, va.size, te.size) == (14, 2, 4)

    def test_unsatisfiable_stratification(self):
        table = subject_table(1)
        with pytest.raises(InsufficientDataError, match=r"\[0, 1\]"):
            datapipe.split_subjects(table)

    def test_needs_subject_ids(self):
        with pytest.raises(DataError):
            datapipe.split_domains(table_of(np.zeros((4, 2))))

    def test_bad_fractions(self):
        with pytest.raises(ConfigError):
            datapipe.temporal_split(subject_table(2), (0.5, 0.1, 0.1))

    def test_pipeline_deterministic_and_train_only(self):
        split = datapipe.split_domains(subject_table(10, n_classes=2), seed=2)
        # unbalance the training split so SMOTE has work to do
        d1 = split.domains[0]
        keep = np.flatnonzero((d1.train.labels == 0) | (np.arange(len(d1.train)) % 3 == 0))
        split.domains[0] = datapipe.Partition(d1.train.take(keep), d1.valid, d1.test)
        a, ta = datapipe.prepare_domains(split, pca_k=2, seed=5)
        b, tb = datapipe.prepare_domains(split, pca_k=2, seed=5)
        for pa, pb in zip(a.domains, b.domains):
            np.testing.assert_array_equal(pa.train.features, pb.train.features)
            np.testing.assert_array_equal(pa.test.features, pb.test.features)
        # bounds come from domain 1 training rows alone
        np.testing.assert_array_equal(ta.scaler.mins, split.domains[0].train.features.min(axis=0))
        assert len(a.domains[0].valid) == len(split.domains[0].valid)
        assert len(set(np.bincount(a.domains[0].train.labels))) == 1


class TestCsv:
    def test_round_trip(self, tmp_path):
        t = subject_table(2, rows=3)
        datapipe.write_table(t, tmp_path / "t.csv")
        back = datapipe.read_table(tmp_path / "t.csv")
        np.testing.assert_array_equal(back.features, t.features)
        np.testing.assert_array_equal(back.labels, t.labels)
        np.testing.assert_array_equal(back.subject_ids, t.subject_ids)
        np.testing.assert_array_equal(back.timestamps, t.timestamps)

    def test_features_without_label(self, tmp_path):
        (tmp_path / "x.csv").write_text("a,b\n1,2\n3,4\n")
        x, names = datapipe.read_features(tmp_path / "x.csv")
        np.testing.assert_array_equal(x, [[1, 2], [3, 4]])
        assert names == ["a", "b"]

    @pytest.mark.parametrize("text", ["", "a,label\n1,x\n", "a,label\n1,0.5\n", "a,b\n1,2\n",
                                      "a,label\n1\n"])
    def test_malformed(self, tmp_path, text):
        (tmp_path / "bad.csv").write_text(text)
        with pytest.raises(DataError):
            datapipe.read_table(tmp_path / "bad.csv")

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            datapipe.read_table(tmp_path / "nope.csv")

    def test_non_finite_rejected(self):
        with pytest.raises(DataError):
            table_of([[np.inf]])

    def test_label_count_checked(self):
        with pytest.raises(ShapeError):
            LabeledTable(np.zeros((3, 2)), [0, 1])
