"""Data selection, non-conformity, p-values and certainty decisions."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pagecl import conformal, nn
from pagecl.conformal import CalibrationSet, CertaintyThresholds, DsConfig
from pagecl.errors import CheckpointError, ConfigError, DataError, ShapeError

probability_rows = st.integers(2, 5).flatmap(
    lambda c: st.lists(st.lists(st.floats(0.01, 1.0), min_size=c, max_size=c),
                       min_size=1, max_size=8))


def normalise(rows):
    p = np.array(rows, dtype=np.float64)
    return p / p.sum(axis=1, keepdims=True)


def calib_of(scores):
    scores = np.asarray(scores, dtype=np.float64)
    return CalibrationSet(scores, np.zeros(scores.size, dtype=int), ("real-valid",) * scores.size)


def brute_p_value(scores, new):
    return (sum(1 for a in scores if new <= a) + 1) / (len(scores) + 1)


class TestDataSelection:
    def test_percentile_window(self):
        losses = np.arange(1.0, 11.0)
        lo, hi = np.percentile(losses, [70, 90])
        assert lo == pytest.approx(7.3) and hi == pytest.approx(9.1)
        idx = conformal.select_data(losses, np.zeros(10, dtype=int))
        np.testing.assert_array_equal(losses[idx], [8.0, 9.0])

    def test_per_class(self):
        losses = np.concatenate([np.arange(1.0, 11.0), np.arange(101.0, 111.0)])
        labels = np.repeat([0, 1], 10)
        idx = conformal.select_data(losses, labels)
        np.testing.assert_array_equal(losses[idx], [8.0, 9.0, 108.0, 109.0])

    def test_bounds_inclusive(self):
        # percentiles land exactly on data points here
        losses = np.arange(0.0, 11.0)
        idx = conformal.select_data(losses, np.zeros(11, dtype=int))
        np.testing.assert_array_equal(losses[idx], [7.0, 8.0, 9.0])

    def test_singleton_class_skipped(self):
        idx = conformal.select_data([1.0, 2.0, 3.0], [0, 0, 1])
        assert 2 not in idx

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(0.0, 50.0), min_size=2, max_size=60), st.integers(0, 1000))
    def test_selection_within_class_window(self, losses, seed):
        losses = np.array(losses)
        labels = np.random.default_rng(seed).integers(0, 3, losses.size)
        idx = conformal.select_data(losses, labels)
        assert np.all(np.diff(idx) > 0)
        for i in idx:
            own = losses[labels == labels[i]]
            lo, hi = np.percentile(own, [70, 90])
            assert lo <= losses[i] <= hi

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            DsConfig(90, 70)

    def test_misaligned(self):
        with pytest.raises(ShapeError):
            conformal.select_data([1.0, 2.0], [0])


class TestNonconformity:
    def test_worked_value(self):
        assert conformal.nonconformity([0.7, 0.3], 0) == pytest.approx(0.3 / 1.4)
        assert round(conformal.nonconformity([0.7, 0.3], 0), 4) == 0.2143

    def test_uniform_probabilities(self):
        assert conformal.nonconformity([0.25] * 4, 2, gamma=2.0) == pytest.approx(0.5)
        assert conformal.nonconformity([0.5, 0.5], 1, gamma=5.0) == pytest.approx(0.2)

    def test_matches_loop_oracle(self):
        p = normalise(np.random.default_rng(0).random((12, 4)) + 0.01)
        y = np.arange(12) % 4
        expected = [max(row[i] for i in range(4) if i != j) / (row[j] * 2.0)
                    for row, j in zip(p, y)]
        np.testing.assert_allclose(conformal.nonconformity_scores(p, y), expected, rtol=1e-14)

    def test_zero_probability_stays_finite(self):
        a = conformal.nonconformity([1.0, 0.0], 1)
        assert np.isfinite(a) and a == pytest.approx(1.0 / (2 * conformal.PROB_FLOOR))
        assert conformal.nonconformity([1.0, 0.0], 0) > 0

    @settings(max_examples=50, deadline=None)
    @given(probability_rows, st.floats(0.1, 10.0), st.floats(0.1, 10.0))
    def test_gamma_rescales_scores_uniformly(self, rows, g1, g2):
        p = normalise(rows)
        s1, s2 = conformal.all_label_scores(p, g1), conformal.all_label_scores(p, g2)
        np.testing.assert_allclose(s1 * g1, s2 * g2, rtol=1e-12)

    # powers of two rescale exactly, so ties survive and p-values match bit for bit
    @settings(max_examples=30, deadline=None)
    @given(probability_rows, st.sampled_from([0.25, 0.5, 1.0, 2.0, 8.0]),
           st.sampled_from([0.5, 2.0, 4.0, 16.0]), st.integers(0, 100))
    def test_gamma_does_not_change_p_values(self, rows, g1, g2, seed):
        p = normalise(rows)
        cal_p = normalise(np.random.default_rng(seed).random((15, p.shape[1])) + 0.01)
        cal_y = np.arange(15) % p.shape[1]
        out = []
        for g in (g1, g2):
            calib = CalibrationSet(conformal.nonconformity_scores(cal_p, cal_y, g), cal_y,
                                   ("real-valid",) * 15)
            out.append(conformal.p_values(calib, conformal.all_label_scores(p, g)))
        np.testing.assert_array_equal(out[0], out[1])

    def test_bad_gamma(self):
        with pytest.raises(ConfigError):
            conformal.nonconformity([0.5, 0.5], 0, gamma=0.0)

    def test_single_class_rejected(self):
        with pytest.raises(ConfigError):
            conformal.nonconformity_scores(np.ones((2, 1)), [0, 0])


class TestPValues:
    def test_worked_value(self):
        assert conformal.p_values(calib_of([0.1, 0.2, 0.3, 0.4]), 0.25) == pytest.approx(0.6)

    def test_ties_count_as_at_least(self):
        assert conformal.p_values(calib_of([0.1, 0.2, 0.3, 0.4]), 0.2) == pytest.approx(0.8)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(1e-6, 100.0), min_size=1, max_size=40),
           st.lists(st.floats(1e-6, 100.0), min_size=1, max_size=10))
    def test_matches_brute_force_and_range(self, scores, new):
        p = conformal.p_values(calib_of(scores), new)
        q = len(scores)
        np.testing.assert_allclose(p, [brute_p_value(scores, a) for a in new], rtol=1e-15)
        assert np.all(p >= 1 / (q + 1)) and np.all(p <= 1.0)

    def test_validity_under_exchangeability(self):
        rng = np.random.default_rng(0)
        calib = calib_of(rng.exponential(size=500))
        p = conformal.p_values(calib, rng.exponential(size=1000))
        for delta in (0.05, 0.1, 0.2):
            assert np.mean(p <= delta) <= delta + 3 / np.sqrt(1000)


class TestSummarize:
    def test_two_class_example(self):
        out = conformal.summarize([0.6, 0.2], CertaintyThresholds(0.90, 0.70))
        assert out.predicted_label == 0
        assert out.confidence == pytest.approx(0.8) and out.credibility == pytest.approx(0.6)
        assert not out.certain

    def test_certain_at_thresholds(self):
        out = conformal.summarize([0.75, 0.05], CertaintyThresholds(0.90, 0.70))
        assert out.confidence == pytest.approx(0.95) and out.certain

    def test_boundaries_inclusive(self):
        assert conformal.summarize([0.7, 0.1], CertaintyThresholds(0.9, 0.7)).certain

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=6))
    def test_confidence_and_credibility_bounds(self, p):
        out = conformal.summarize(p)
        s = sorted(p, reverse=True)
        assert out.credibility == s[0] and out.confidence == pytest.approx(1 - s[1])
        assert 0.0 <= out.confidence <= 1.0
        assert p[out.predicted_label] == s[0]

    def test_thresholds_validated(self):
        with pytest.raises(ConfigError):
            CertaintyThresholds(1.5, 0.7)


class TestCalibration:
    @pytest.fixture
    def model(self):
        return nn.init_mlp([3, 6, 2], seed=0)

    def test_provenance_and_soft_labels(self, model):
        rng = np.random.default_rng(1)
        soft = rng.dirichlet([1, 1], size=4)
        calib = conformal.build_calibration(model, (rng.normal(size=(5, 3)), np.zeros(5, int)),
                                            (rng.normal(size=(4, 3)), soft),
                                            (rng.normal(size=(3, 3)), np.ones(3, int)))
        assert len(calib) == 12
        assert (calib.count("real-valid"), calib.count("synth-valid"),
                calib.count("selected-train")) == (5, 4, 3)
        np.testing.assert_array_equal(calib.labels[5:9], soft.argmax(axis=1))

    def test_empty_selection_equals_plain(self, model):
        rng = np.random.default_rng(2)
        valid = (rng.normal(size=(20, 3)), rng.integers(0, 2, 20))
        icp = conformal.build_calibration(model, valid)
        eicp = conformal.build_calibration(model, valid, None, (np.zeros((0, 3)), np.zeros(0, int)))
        np.testing.assert_array_equal(icp.scores, eicp.scores)
        x = rng.normal(size=(10, 3))
        a = conformal.predict_many(model, x, icp)
        b = conformal.predict_many(model, x, eicp)
        for u, v in zip(a, b):
            np.testing.assert_array_equal(u.p_values, v.p_values)

    def test_predict_many_matches_single(self, model):
        rng = np.random.default_rng(3)
        calib = conformal.build_calibration(model, (rng.normal(size=(30, 3)), rng.integers(0, 2, 30)))
        x = rng.normal(size=(5, 3))
        many = conformal.predict_many(model, x, calib)
        for row, out in zip(x, many):
            single = conformal.predict(model, row, calib)
            np.testing.assert_array_equal(single.p_values, out.p_values)
        assert conformal.predict_many(model, np.zeros((0, 3)), calib) == []

    def test_empty_calibration_rejected(self, model):
        with pytest.raises(DataError):
            conformal.build_calibration(model, (np.zeros((0, 3)), np.zeros(0, int)))

    def test_unknown_provenance(self):
        with pytest.raises(DataError):
            CalibrationSet(np.ones(1), np.zeros(1), ("mystery",))

    def test_csv_round_trip(self, model, tmp_path):
        rng = np.random.default_rng(4)
        calib = conformal.build_calibration(model, (rng.normal(size=(7, 3)), rng.integers(0, 2, 7)),
                                            selected_train=(rng.normal(size=(2, 3)), [1, 0]))
        conformal.write_calibration(calib, tmp_path / "c.csv")
        back = conformal.read_calibration(tmp_path / "c.csv")
        np.testing.assert_array_equal(back.scores, calib.scores)
        np.testing.assert_array_equal(back.labels, calib.labels)
        assert back.provenance == calib.provenance

    def test_csv_bad_header(self, tmp_path):
        (tmp_path / "c.csv").write_text("a,b\n1,2\n")
        with pytest.raises(CheckpointError):
            conformal.read_calibration(tmp_path / "c.csv")
