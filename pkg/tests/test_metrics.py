import math

import numpy as np
import pytest

from calibra.metrics import (
    BinningConfig,
    ece_from_reliability,
    ece_max,
    ece_p,
    nll,
    over_underconfidence,
    reliability,
    report,
    theorem1_check,
)
from calibra.predictions import PredictionSet

from conftest import binary_set, random_prediction_set


def brute_force_ece(preds, p, num_bins, weighting):
    """Direct-summation oracle: loop over bins, select samples by interval."""
    conf = preds.confidences
    correct = preds.correct.astype(float)
    n = len(conf)
    gaps, counts = [], []
    for b in range(num_bins):
        lo, hi = b / num_bins, (b + 1) / num_bins
        mask = (conf <= hi) if b == 0 else (conf > lo) & (conf <= hi)
        if mask.sum() == 0:
            continue
        gaps.append(abs(conf[mask].mean() - correct[mask].mean()))
        counts.append(mask.sum())
    gaps = np.array(gaps)
    counts = np.array(counts)
    if weighting == "frequency":
        return float(np.sum(counts / n * gaps**p) ** (1 / p))
    return float(np.sum(gaps**p) ** (1 / p) / len(gaps))


class TestEceP:
    def test_always_half_balanced_is_perfectly_calibrated(self):
        n = 100
        conf = np.full(n, 0.5)
        correct = np.arange(n) % 2 == 0
        preds = binary_set(conf, correct)
        assert ece_p(preds, 1.0, BinningConfig(100)) == pytest.approx(0.0, abs=1e-12)

    def test_single_bin_hand_value(self):
        preds = binary_set([0.95] * 4, [True, True, True, False])
        cfg = BinningConfig(1, "frequency")
        assert ece_p(preds, 1.0, cfg) == pytest.approx(0.2, abs=1e-12)

    def test_matches_brute_force_oracle(self, rng):
        for _ in range(40):
            preds = random_prediction_set(rng)
            bins = int(rng.choice([1, 7, 15, 100]))
            for weighting in ("frequency", "uniform"):
                cfg = BinningConfig(bins, weighting)
                expected = brute_force_ece(preds, 1.0, bins, weighting)
                assert ece_p(preds, 1.0, cfg) == pytest.approx(expected, abs=1e-12)

    def test_invalid_p_rejected(self):
        preds = binary_set([0.8], [True])
        cfg = BinningConfig(10)
        for bad in (0.5, 0.0, -1.0, math.inf, math.nan):
            with pytest.raises(ValueError):
                ece_p(preds, bad, cfg)

    def test_result_in_unit_interval(self, rng):
        for _ in range(25):
            preds = random_prediction_set(rng)
            for weighting in ("frequency", "uniform"):
                cfg = BinningConfig(15, weighting)
                for p in (1.0, 2.0, 4.0):
                    v = ece_p(preds, p, cfg)
                    assert 0.0 <= v <= 1.0


class TestEceMax:
    def test_perfectly_calibrated_single_bin(self):
        preds = binary_set([0.5, 0.5], [True, False])
        assert ece_max(preds, BinningConfig(1)) == pytest.approx(0.0, abs=1e-12)

    def test_single_bin_hand_value(self):
        preds = binary_set([0.95] * 4, [True, True, True, False])
        assert ece_max(preds, BinningConfig(1)) == pytest.approx(0.2, abs=1e-12)

    def test_dominates_frequency_ece(self, rng):
        for _ in range(100):
            preds = random_prediction_set(rng, n=int(rng.integers(10, 500)))
            cfg = BinningConfig(15, "frequency")
            assert ece_max(preds, cfg) >= ece_p(preds, 1.0, cfg) - 1e-12


class TestOverUnderconfidence:
    def test_all_correct_flags_overconfidence(self):
        preds = binary_set([1.0, 1.0, 1.0], [True, True, True])
        ou = over_underconfidence(preds)
        assert not ou.overconfidence_defined
        assert math.isnan(ou.overconfidence)
        assert ou.underconfidence_defined
        assert ou.underconfidence == pytest.approx(0.0, abs=1e-12)

    def test_single_element_means(self):
        preds = binary_set([0.9, 0.6], [False, True])
        ou = over_underconfidence(preds)
        assert ou.overconfidence == pytest.approx(0.9, abs=1e-12)
        assert ou.underconfidence == pytest.approx(0.4, abs=1e-12)

    def test_total_expectation_identity(self, rng):
        # o * (1 - acc) - u * acc == mean_confidence - accuracy
        for _ in range(200):
            preds = random_prediction_set(rng, n=int(rng.integers(10, 3000)))
            ou = over_underconfidence(preds)
            acc = preds.correct.mean()
            lhs = ou.overconfidence * (1 - acc) - ou.underconfidence * acc
            rhs = preds.confidences.mean() - acc
            assert lhs == pytest.approx(rhs, abs=1e-12)


class TestTheorem1Check:
    def test_always_half_balanced(self):
        conf = np.full(10, 0.5)
        correct = np.arange(10) % 2 == 0
        rec = theorem1_check(binary_set(conf, correct), BinningConfig(100))
        assert rec.lhs == pytest.approx(0.0, abs=1e-12)
        assert rec.ece1 == pytest.approx(0.0, abs=1e-12)
        assert rec.holds

    def test_holds_on_random_sweep(self, rng):
        for _ in range(200):
            preds = random_prediction_set(rng)
            rec = theorem1_check(preds, BinningConfig(int(rng.choice([1, 15, 100]))))
            assert rec.holds

    def test_degenerate_conditioning_set_errors(self):
        preds = binary_set([0.8, 0.8], [False, False])
        with pytest.raises(ValueError):
            theorem1_check(preds, BinningConfig(10))


class TestNll:
    def test_certain_correct_prediction(self):
        preds = PredictionSet([[1.0, 0.0]], [0], "simplex")
        assert nll(preds) == pytest.approx(0.0, abs=1e-12)

    def test_two_sample_closed_form(self):
        preds = PredictionSet([[0.5, 0.5], [0.25, 0.75]], [0, 0], "simplex")
        assert nll(preds) == pytest.approx((math.log(2) + math.log(4)) / 2, rel=1e-12)

    def test_uniform_ten_classes(self):
        scores = np.full((7, 10), 0.1)
        preds = PredictionSet(scores, np.arange(7) % 10, "simplex")
        assert nll(preds) == pytest.approx(math.log(10), rel=1e-12)


class TestReliability:
    def test_all_confident_correct(self):
        preds = binary_set([1.0] * 6, [True] * 6)
        rel = reliability(preds, BinningConfig(15))
        assert rel.counts[-1] == 6
        assert rel.counts[:-1].sum() == 0
        assert rel.mean_confidence[-1] == pytest.approx(1.0)
        assert rel.accuracy[-1] == pytest.approx(1.0)
        assert np.isnan(rel.mean_confidence[:-1]).all()

    def test_edge_confidence_goes_to_lower_bin(self):
        # 0.5 with B=2 lands in the first bin under the right-closed rule.
        preds = binary_set([0.5], [True])
        rel = reliability(preds, BinningConfig(2))
        assert rel.counts[0] == 1
        assert rel.counts[1] == 0

    def test_counts_partition_n(self, rng):
        for _ in range(30):
            preds = random_prediction_set(rng)
            rel = reliability(preds, BinningConfig(int(rng.integers(1, 40))))
            assert rel.total == preds.n_samples

    def test_reaggregation_is_bit_identical(self, rng):
        for _ in range(20):
            preds = random_prediction_set(rng)
            for weighting in ("frequency", "uniform"):
                cfg = BinningConfig(15, weighting)
                rel = reliability(preds, cfg)
                for p in (1.0, 2.0):
                    assert ece_from_reliability(rel, p, weighting) == ece_p(preds, p, cfg)

    def test_merge_equals_count_weighted_merge(self, rng):
        for _ in range(20):
            k = int(rng.choice([2, 4]))
            a = random_prediction_set(rng, k=k, kind="simplex")
            b = random_prediction_set(rng, k=k, kind="simplex")
            cfg = BinningConfig(15)
            ra, rb = reliability(a, cfg), reliability(b, cfg)
            merged = PredictionSet(
                np.vstack([a.scores, b.scores]),
                np.concatenate([a.labels, b.labels]),
                "simplex",
            )
            rm = reliability(merged, cfg)
            counts = ra.counts + rb.counts
            np.testing.assert_array_equal(rm.counts, counts)
            for field in ("mean_confidence", "accuracy"):
                va, vb = getattr(ra, field), getattr(rb, field)
                expected = (
                    np.where(ra.counts > 0, va, 0) * ra.counts
                    + np.where(rb.counts > 0, vb, 0) * rb.counts
                )
                with np.errstate(invalid="ignore"):
                    expected = np.where(counts > 0, expected / counts, np.nan)
                np.testing.assert_allclose(
                    getattr(rm, field), expected, atol=1e-12, equal_nan=True
                )


class TestInvariants:
    def test_frequency_ece_nondecreasing_in_p(self, rng):
        for _ in range(100):
            preds = random_prediction_set(rng)
            cfg = BinningConfig(15, "frequency")
            e1 = ece_p(preds, 1.0, cfg)
            e2 = ece_p(preds, 2.0, cfg)
            e4 = ece_p(preds, 4.0, cfg)
            em = ece_max(preds, cfg)
            assert e1 <= e2 + 1e-12
            assert e2 <= e4 + 1e-12
            assert e4 <= em + 1e-12

    def test_permutation_changes_no_metric(self, rng):
        preds = random_prediction_set(rng, n=500)
        perm = rng.permutation(preds.n_samples)
        shuffled = preds.subset(perm)
        cfg = BinningConfig(15)
        assert ece_p(shuffled, 2.0, cfg) == pytest.approx(
            ece_p(preds, 2.0, cfg), rel=1e-12, abs=1e-12
        )
        assert nll(shuffled) == pytest.approx(nll(preds), rel=1e-12)
        a, b = over_underconfidence(shuffled), over_underconfidence(preds)
        assert a.overconfidence == pytest.approx(b.overconfidence, rel=1e-12)
        assert a.underconfidence == pytest.approx(b.underconfidence, rel=1e-12)


class TestReport:
    def test_fields_in_natural_ranges(self, rng):
        for _ in range(10):
            preds = random_prediction_set(rng)
            rep = report(preds, BinningConfig(15))
            for v in (rep.ece_1, rep.ece_max, rep.accuracy, rep.mean_confidence,
                      rep.overconfidence, rep.underconfidence):
                assert 0.0 <= v <= 1.0
            assert rep.nll >= 0.0
