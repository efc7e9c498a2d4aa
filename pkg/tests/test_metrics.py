import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import auac_grid_oracle
from girb.metrics import (
    MetricConfig, MetricError, MetricReport, above_average_accuracy, auac, brier,
    calibration_slope, ece, evaluate_scores, gece, primed, quantile_bins,
)


def ece_oracle(proxy, truth, n_bins):
    """Sort pairs, deal sizes by hand, accumulate weighted gaps in plain Python."""
    pairs = sorted(zip(proxy, truth))
    n = len(pairs)
    sizes = [n // n_bins + (1 if b < n % n_bins else 0) for b in range(n_bins)]
    total, i = 0.0, 0
    for s in sizes:
        chunk = pairs[i:i + s]
        i += s
        if chunk:
            total += s / n * abs(sum(t for _, t in chunk) / s - sum(p for p, _ in chunk) / s)
    return total


class TestECE:
    def test_perfect_bin_means(self):
        assert ece([0.2, 0.2, 0.8, 0.8], [0.0, 0.4, 0.6, 1.0], MetricConfig(2)) == pytest.approx(0.0, abs=1e-15)

    def test_hand_case(self):
        assert ece([0.1, 0.3, 0.7, 0.9], [0.0, 0.0, 1.0, 1.0], MetricConfig(2)) == pytest.approx(0.2)

    def test_remainder_goes_to_earliest_bins(self):
        sizes = [len(p) for p, _ in quantile_bins(np.arange(11.0), np.zeros(11), 3)]
        assert sizes == [4, 4, 3]

    def test_more_bins_than_points(self):
        assert len(quantile_bins([0.1, 0.2], [0, 1], 10)) == 2

    def test_calibrated_source_is_small(self, rng):
        p = rng.uniform(size=20000)
        y = (rng.uniform(size=20000) < p).astype(float)
        assert ece(p, y) < 0.02

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 10**6), n=st.integers(1, 50), bins=st.integers(1, 12))
    def test_matches_oracle_and_permutation_invariant(self, seed, n, bins):
        r = np.random.default_rng(seed)
        p = r.integers(0, 5, size=n) / 4.0
        t = r.uniform(size=n)
        val = ece(p, t, MetricConfig(bins))
        assert val == pytest.approx(ece_oracle(p.tolist(), t.tolist(), bins), abs=1e-12)
        perm = r.permutation(n)
        assert ece(p[perm], t[perm], MetricConfig(bins)) == pytest.approx(val, abs=1e-12)
        assert 0.0 <= val <= 1.0

    def test_validation(self):
        with pytest.raises(MetricError):
            ece([], [])
        with pytest.raises(MetricError):
            ece([0.1], [0.1, 0.2])
        with pytest.raises(ValueError):
            MetricConfig(0)


class TestGECE:
    def test_group_miscalibration_hidden_globally(self):
        p = [0.3, 0.3, 0.7, 0.7]
        t = [0.5, 0.5, 0.5, 0.5]
        g = [0, 0, 1, 1]
        assert ece(p, t, MetricConfig(1)) == pytest.approx(0.0)
        assert gece(p, t, g, MetricConfig(1)) == pytest.approx(0.2)

    def test_single_group_equals_ece(self, rng):
        p, t = rng.uniform(size=100), rng.uniform(size=100)
        assert gece(p, t, np.zeros(100)) == pytest.approx(ece(p, t))

    def test_small_group_uses_fewer_bins(self):
        # a 3-point group with 10 requested bins gets one bin per point
        assert gece([0.1, 0.5, 0.9], [0.0, 0.5, 1.0], [4, 4, 4]) == pytest.approx((0.1 + 0 + 0.1) / 3)

    def test_missing_groups(self):
        with pytest.raises(MetricError, match="group"):
            gece([0.1, 0.2], [0.1, 0.2], [0])


def test_brier():
    assert brier([0.5, 0.5], [0.0, 1.0]) == pytest.approx(0.25)
    assert brier([0.8], [1.0]) == pytest.approx(0.04)


class TestSlope:
    def test_identity(self):
        p = np.linspace(0.05, 0.95, 10)
        assert calibration_slope(p, p) == pytest.approx(1.0)

    def test_two_thirds(self):
        p = np.linspace(0.05, 0.95, 10)
        assert calibration_slope(p, p * 2 / 3) == pytest.approx(2 / 3)

    def test_constant_truth(self):
        p = np.linspace(0.05, 0.95, 10)
        assert calibration_slope(p, np.full(10, 0.4)) == pytest.approx(0.0)

    def test_undefined(self):
        with pytest.raises(MetricError, match="undefined"):
            calibration_slope(np.full(10, 0.3), np.linspace(0, 1, 10))


class TestAccuracy:
    def test_cases(self):
        assert above_average_accuracy([0.9, 0.1], [0.5, 0.5], [1.0, 0.0], [0.5, 0.5]) == pytest.approx(1.0)
        assert above_average_accuracy([0.9, 0.9], [0.5, 0.5], [1.0, 0.0], [0.5, 0.5]) == pytest.approx(0.5)

    def test_ties_are_not_above(self):
        assert above_average_accuracy([0.5], [0.5], [0.3], [0.4]) == pytest.approx(1.0)

    def test_per_dimension(self):
        acc = above_average_accuracy([[0.9, 0.1]], [[0.5, 0.5]], [[1.0, 1.0]], [[0.5, 0.5]])
        np.testing.assert_allclose(acc, [1.0, 0.0])

    def test_length_mismatch(self):
        with pytest.raises(MetricError):
            above_average_accuracy([0.1], [0.1, 0.2], [0.1], [0.1])


class TestAUAC:
    def test_hand_case(self):
        assert auac([0.1, 0.9], [0, 1]) == pytest.approx(0.95)
        assert auac([0.1, 0.9], [0, 1]) == pytest.approx(auac_grid_oracle([0.1, 0.9], [0, 1]), abs=1e-3)

    def test_all_correct(self):
        assert auac([0.2, 0.6, 0.7], [1, 1, 1]) == pytest.approx(1.0)

    def test_constant_confidence_is_accuracy(self):
        assert auac([0.5] * 4, [1, 0, 1, 0]) == pytest.approx(0.5)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10**6), n=st.integers(1, 30))
    def test_matches_grid_oracle(self, seed, n):
        r = np.random.default_rng(seed)
        c = r.integers(0, 21, size=n) / 20.0
        y = r.integers(0, 2, size=n).astype(float)
        assert auac(c, y) == pytest.approx(auac_grid_oracle(c, y), abs=1e-3)

    def test_validation(self):
        with pytest.raises(MetricError, match="binary"):
            auac([0.5], [0.5])
        with pytest.raises(MetricError, match="confidences"):
            auac([1.5], [1])


class TestPrimed:
    def test_values(self):
        assert primed("ece", 0.058) == pytest.approx(0.942)
        assert primed("brier", 0.25) == pytest.approx(0.75)
        assert primed("slope", 1.2) == pytest.approx(0.8)
        assert primed("slope", 0.8) == pytest.approx(0.8)
        assert primed("slope", None) is None

    def test_unknown(self):
        with pytest.raises(KeyError):
            primed("auac", 0.5)


class TestReport:
    def test_structure(self, rng):
        n = 200
        proxy = rng.uniform(size=(n, 4))
        truth = rng.uniform(size=(n, 4))
        rep = evaluate_scores(proxy, truth, rng.integers(0, 3, size=n), dim_names=["a", "b"])
        assert set(rep.values) == {"a", "b"}
        ind, avg = rep.values["a"]["Ind"], rep.values["a"]["Avg"]
        assert "accuracy" in ind and "accuracy" not in avg
        assert "auac" not in ind
        assert ind["ece'"] == pytest.approx(1 - ind["ece"])
        assert ind["ece"] == pytest.approx(ece(proxy[:, 0], truth[:, 0]))
        assert avg["brier"] == pytest.approx(brier(proxy[:, 2], truth[:, 2]))
        assert MetricReport.from_dict(rep.to_dict()).values == rep.values

    def test_binary_truth_adds_auac(self, rng):
        proxy = rng.uniform(size=(50, 2))
        truth = (rng.uniform(size=(50, 2)) < 0.5).astype(float)
        rep = evaluate_scores(proxy, truth)
        assert "auac" in rep.values["dim0"]["Ind"]
        assert rep.values["dim0"]["Ind"]["gece"] is None

    def test_undefined_slope_is_none(self):
        rep = evaluate_scores(np.full((20, 2), 0.5), np.linspace(0, 1, 40).reshape(20, 2))
        assert rep.values["dim0"]["Ind"]["slope"] is None
        assert rep.values["dim0"]["Ind"]["slope'"] is None

    def test_shape_check(self):
        with pytest.raises(MetricError):
            evaluate_scores(np.zeros((5, 3)), np.zeros((5, 3)))
