import numpy as np
import pytest
from scipy import integrate, optimize
from scipy.special import expit

from calibra.baselines import (
    BetaParams,
    OneVsAllModel,
    PlattParams,
    TemperatureParam,
    apply_bbq,
    apply_beta,
    apply_isotonic,
    apply_one_vs_all,
    apply_platt,
    apply_temperature,
    bin_log_marginal,
    fit_bbq,
    fit_beta,
    fit_isotonic,
    fit_one_vs_all,
    fit_platt,
    fit_temperature,
)
from calibra.predictions import PredictionSet, softargmax

from conftest import random_prediction_set


def logistic_nll(weights, features, correct):
    margins = features @ np.asarray(weights, dtype=float)
    return float(np.sum(np.logaddexp(0.0, np.where(correct, -margins, margins))))


def platt_nll(a, b, scores, correct):
    return logistic_nll((a, b), np.column_stack([scores, np.ones_like(scores)]), correct)


def categorical_rows(rng, probs):
    """One label per row, drawn from that row's distribution."""
    u = rng.random(probs.shape[0])
    return (probs.cumsum(axis=1) > u[:, None]).argmax(axis=1)


class TestPlatt:
    def test_separating_scores_give_increasing_map(self):
        scores = np.array([-2.0, -1.0, -0.5, 0.5, 1.0, 2.0])
        params = fit_platt(scores, scores > 0)
        assert params.a > 0

    def test_symmetric_data_has_zero_intercept(self, rng):
        half = rng.normal(size=40)
        hits = rng.random(40) < expit(1.3 * half)
        scores = np.concatenate([half, -half])
        correct = np.concatenate([hits, ~hits])
        params = fit_platt(scores, correct)
        assert abs(params.b) < 1e-6

    def test_never_worse_than_identity_start(self, rng):
        checked = 0
        while checked < 50:
            n = int(rng.integers(10, 300))
            scores = rng.normal(scale=rng.uniform(0.5, 2.0), size=n)
            correct = rng.random(n) < expit(
                rng.uniform(-1, 2) * scores + rng.uniform(-1, 1)
            )
            if correct.all() or not correct.any():
                continue
            params = fit_platt(scores, correct)
            fitted = platt_nll(params.a, params.b, scores, correct)
            assert fitted <= platt_nll(1.0, 0.0, scores, correct) + 1e-12
            checked += 1

    def test_matches_generic_minimizer(self, rng):
        for _ in range(5):
            n = int(rng.integers(50, 200))
            scores = rng.normal(size=n)
            correct = rng.random(n) < expit(1.5 * scores - 0.2)
            if correct.all() or not correct.any():
                continue
            params = fit_platt(scores, correct)
            reference = optimize.minimize(
                lambda th: platt_nll(th[0], th[1], scores, correct),
                x0=(1.0, 0.0),
                method="BFGS",
            )
            mine = platt_nll(params.a, params.b, scores, correct)
            assert mine <= reference.fun + 1e-8

    def test_single_class_raises(self):
        with pytest.raises(ValueError):
            fit_platt([0.1, 0.2, 0.3], [True, True, True])

    def test_output_range(self, rng):
        scores = rng.normal(size=30)
        correct = scores + rng.normal(scale=0.5, size=30) > 0
        if correct.all() or not correct.any():
            correct[0] = ~correct[0]
        params = fit_platt(scores, correct)
        out = apply_platt(params, np.linspace(-5, 5, 11))
        assert np.all((out > 0) & (out < 1))


def brute_force_isotonic_objective(scores, targets):
    """Minimum squared error over all monotone step assignments.

    Enumerates every partition of the sorted points into consecutive
    blocks, keeps those whose block means are nondecreasing, and scores
    each by the squared distance between targets and block means.
    """
    order = np.argsort(scores)
    t = np.asarray(targets, dtype=float)[order]
    n = t.size
    best = np.inf
    for mask in range(1 << (n - 1)):
        bounds = [0] + [i + 1 for i in range(n - 1) if (mask >> i) & 1] + [n]
        blocks = list(zip(bounds[:-1], bounds[1:]))
        means = [t[a:b].mean() for a, b in blocks]
        if any(hi < lo for lo, hi in zip(means, means[1:])):
            continue
        objective = sum(float(((t[a:b] - m) ** 2).sum()) for (a, b), m in zip(blocks, means))
        best = min(best, objective)
    return best


class TestIsotonic:
    def test_isotonic_targets_interpolated_exactly(self):
        scores = np.array([0.1, 0.3, 0.5, 0.9])
        correct = np.array([False, False, True, True])
        mapping = fit_isotonic(scores, correct)
        assert np.array_equal(mapping.breakpoints, scores)
        assert np.array_equal(mapping.values, correct.astype(float))
        assert np.array_equal(apply_isotonic(mapping, scores), correct.astype(float))

    def test_two_points_pooled_to_mean(self):
        mapping = fit_isotonic([0.2, 0.8], [True, False])
        assert np.allclose(mapping.values, [0.5, 0.5])
        assert apply_isotonic(mapping, 0.5) == 0.5

    def test_matches_brute_force_on_small_instances(self, rng):
        for _ in range(60):
            n = int(rng.integers(1, 9))
            scores = rng.random(n)
            while np.unique(scores).size < n:
                scores = rng.random(n)
            correct = rng.random(n) < 0.5
            mapping = fit_isotonic(scores, correct)
            fitted = apply_isotonic(mapping, scores)
            mine = float(np.sum((correct - fitted) ** 2))
            reference = brute_force_isotonic_objective(scores, correct)
            assert abs(mine - reference) < 1e-10

    def test_tied_scores_share_one_value(self):
        mapping = fit_isotonic([0.5, 0.5], [True, False])
        assert mapping.breakpoints.size == 1
        assert mapping.values[0] == 0.5

    def test_apply_is_monotone_and_clamped(self, rng):
        scores = rng.random(50)
        correct = rng.random(50) < scores
        mapping = fit_isotonic(scores, correct)
        grid = np.linspace(-0.5, 1.5, 201)
        out = apply_isotonic(mapping, grid)
        assert np.all(np.diff(out) >= 0)
        assert out[0] == mapping.values[0]
        assert out[-1] == mapping.values[-1]


class TestBeta:
    def test_identity_parameters_reproduce_input(self):
        params = BetaParams(1.0, 1.0, 0.0)
        assert apply_beta(params, 0.5) == 0.5
        grid = np.linspace(0.05, 0.95, 19)
        assert np.allclose(apply_beta(params, grid), grid, atol=1e-12)

    def test_recovers_generating_parameters(self):
        gen = np.random.default_rng(11)
        true = BetaParams(1.4, 0.7, -0.3)
        scores = gen.uniform(0.01, 0.99, 100_000)
        correct = gen.random(scores.size) < apply_beta(true, scores)
        fitted = fit_beta(scores, correct)
        assert abs(fitted.a - true.a) < 0.05
        assert abs(fitted.b - true.b) < 0.05
        assert abs(fitted.c - true.c) < 0.05

    def test_constant_scores_give_degenerate_flat_map(self):
        correct = np.tile([True, False, True, True], 10)
        params = fit_beta(np.full(40, 0.5), correct)
        assert params.degenerate
        assert params.a == 0 and params.b == 0
        out = apply_beta(params, np.array([0.1, 0.5, 0.9]))
        assert np.allclose(out, correct.mean())

    def test_slopes_never_negative(self, rng):
        for _ in range(20):
            n = int(rng.integers(30, 300))
            scores = rng.uniform(0.02, 0.98, n)
            correct = rng.random(n) < rng.uniform(0.2, 0.8)
            if correct.all() or not correct.any():
                continue
            params = fit_beta(scores, correct)
            assert params.a >= 0 and params.b >= 0

    def test_anticorrelated_targets_clipped(self):
        gen = np.random.default_rng(3)
        scores = gen.uniform(0.05, 0.95, 500)
        correct = gen.random(500) < (1.0 - scores)
        params = fit_beta(scores, correct)
        assert params.a >= 0 and params.b >= 0

    def test_single_class_raises(self):
        with pytest.raises(ValueError):
            fit_beta([0.2, 0.4, 0.6], [False, False, False])


class TestBbq:
    def test_single_model_grid_gets_unit_weight(self, rng):
        scores = rng.random(100)
        correct = rng.random(100) < scores
        model = fit_bbq(scores, correct, model_grid=[5])
        assert np.array_equal(model.weights, [1.0])

    def test_bin_marginal_matches_quadrature(self):
        mine = np.exp(bin_log_marginal(3, 4, 1.0, 1.0))
        reference, _ = integrate.quad(lambda t: t**3 * (1 - t), 0.0, 1.0)
        assert abs(mine - reference) < 1e-8

    def test_bin_marginal_matches_quadrature_informative_prior(self):
        from scipy.stats import beta as beta_dist

        alpha, beta = 1.6, 0.4
        mine = np.exp(bin_log_marginal(5, 8, alpha, beta))
        reference, _ = integrate.quad(
            lambda t: t**5 * (1 - t) ** 3 * beta_dist.pdf(t, alpha, beta), 0.0, 1.0
        )
        assert abs(mine - reference) < 1e-8

    def test_recovers_identity_on_calibrated_data(self):
        gen = np.random.default_rng(7)
        scores = gen.uniform(size=500_000)
        correct = gen.random(scores.size) < scores
        model = fit_bbq(scores, correct, model_grid=range(40, 121, 8))
        grid = np.linspace(0.05, 0.95, 19)
        assert np.max(np.abs(apply_bbq(model, grid) - grid)) < 0.02

    def test_weights_form_distribution(self, rng):
        scores = rng.random(500)
        correct = rng.random(500) < scores
        model = fit_bbq(scores, correct)
        assert np.all(model.weights >= 0)
        assert abs(model.weights.sum() - 1.0) < 1e-12
        for binning in model.binnings:
            assert np.all(binning.posterior_means >= 0)
            assert np.all(binning.posterior_means <= 1)

    def test_output_within_unit_interval(self, rng):
        scores = rng.random(300)
        correct = rng.random(300) < 0.7
        model = fit_bbq(scores, correct)
        out = apply_bbq(model, np.linspace(-0.2, 1.2, 57))
        assert np.all((out >= 0) & (out <= 1))

    def test_empty_grid_raises(self, rng):
        with pytest.raises(ValueError, match="empty"):
            fit_bbq(rng.random(50), rng.random(50) < 0.5, model_grid=[])

    def test_more_bins_than_samples_raises(self, rng):
        with pytest.raises(ValueError):
            fit_bbq(rng.random(5), rng.random(5) < 0.5, model_grid=[10])


class TestTemperature:
    def test_unit_temperature_is_exact_softargmax(self, rng):
        logits = rng.normal(size=(20, 4))
        out = apply_temperature(TemperatureParam(1.0), logits)
        assert np.array_equal(out, softargmax(logits))

    def test_recovers_doubled_scale(self):
        gen = np.random.default_rng(13)
        logits = gen.normal(scale=1.5, size=(200_000, 4))
        labels = categorical_rows(gen, softargmax(logits))
        preds = PredictionSet(2.0 * logits, labels, "logits")
        fitted = fit_temperature(preds)
        assert abs(fitted.temperature - 2.0) < 1e-2

    def test_never_worse_than_unscaled(self, rng):
        for _ in range(10):
            preds = random_prediction_set(rng, kind="logits")
            fitted = fit_temperature(preds)
            n = preds.n_samples
            rows = np.arange(n)

            def nll_at(temperature):
                scaled = preds.scores / temperature
                log_probs = scaled - np.log(
                    np.sum(np.exp(scaled - scaled.max(axis=1, keepdims=True)), axis=1, keepdims=True)
                ) - scaled.max(axis=1, keepdims=True)
                return -float(np.sum(log_probs[rows, preds.labels]))

            assert nll_at(fitted.temperature) <= nll_at(1.0) + 1e-9

    def test_argmax_preserved(self, rng):
        logits = rng.normal(scale=2.0, size=(200, 5))
        for temperature in (0.25, 1.7, 6.0):
            out = apply_temperature(TemperatureParam(temperature), logits)
            assert np.array_equal(out.argmax(axis=1), logits.argmax(axis=1))

    def test_permutation_invariant(self, rng):
        preds = random_prediction_set(rng, n=400, kind="logits")
        perm = rng.permutation(preds.n_samples)
        shuffled = PredictionSet(preds.scores[perm], preds.labels[perm], "logits")
        first = fit_temperature(preds).temperature
        second = fit_temperature(shuffled).temperature
        assert abs(first - second) < 1e-9 * max(1.0, first)

    def test_simplex_kind_rejected(self, rng):
        preds = random_prediction_set(rng, kind="simplex")
        with pytest.raises(ValueError, match="logits"):
            fit_temperature(preds)

    def test_rows_on_simplex(self, rng):
        logits = rng.normal(size=(50, 3))
        out = apply_temperature(TemperatureParam(2.5), logits)
        assert np.allclose(out.sum(axis=1), 1.0, atol=1e-9)


class TestOneVsAll:
    @pytest.mark.parametrize("method", ["platt", "isotonic"])
    def test_two_class_reduction_matches_direct_binary(self, rng, method):
        preds = random_prediction_set(rng, n=500, k=2, kind="simplex")
        model = fit_one_vs_all(method, preds)
        out = apply_one_vs_all(model, preds.scores)
        from calibra.baselines import _BINARY_METHODS

        fit, apply = _BINARY_METHODS[method]
        direct = apply(fit(preds.scores[:, 1], preds.labels == 1), preds.scores[:, 1])
        assert np.max(np.abs(out[:, 1] - direct)) < 1e-9
        assert np.max(np.abs(out[:, 0] - (1.0 - direct))) < 1e-9

    def test_identity_calibrators_pass_through(self, rng):
        model = OneVsAllModel("platt", (None, None, None), (True, True, True))
        rows = rng.dirichlet([1.0, 1.0, 1.0], size=20)
        assert np.array_equal(apply_one_vs_all(model, rows, renormalize=False), rows)
        assert np.allclose(apply_one_vs_all(model, rows), rows, atol=1e-12)

    def test_equal_scores_stay_uniform(self):
        model = OneVsAllModel("isotonic", (None, None, None, None), (True,) * 4)
        row = np.full((1, 4), 0.25)
        assert np.allclose(apply_one_vs_all(model, row), 0.25, atol=1e-15)

    @pytest.mark.parametrize("method", ["platt", "isotonic", "beta", "bbq"])
    def test_rows_renormalized_to_simplex(self, rng, method):
        preds = random_prediction_set(rng, n=400, k=4, kind="simplex")
        model = fit_one_vs_all(method, preds)
        out = apply_one_vs_all(model, preds.scores)
        assert np.allclose(out.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(out >= 0)
        raw = apply_one_vs_all(model, preds.scores, renormalize=False)
        assert raw.shape == out.shape

    def test_absent_class_flagged_and_passed_through(self, rng):
        scores = rng.dirichlet([1.0, 1.0, 1.0], size=100)
        labels = rng.integers(0, 2, size=100)  # class 2 never appears
        preds = PredictionSet(scores, labels, "simplex")
        model = fit_one_vs_all("platt", preds)
        assert model.degenerate[2]
        assert model.calibrators[2] is None
        raw = apply_one_vs_all(model, scores, renormalize=False)
        assert np.array_equal(raw[:, 2], scores[:, 2])

    def test_logits_input_rejected(self, rng):
        preds = random_prediction_set(rng, kind="logits")
        with pytest.raises(ValueError, match="simplex"):
            fit_one_vs_all("platt", preds)

    def test_unknown_method_rejected(self, rng):
        preds = random_prediction_set(rng, kind="simplex")
        with pytest.raises(ValueError, match="unknown"):
            fit_one_vs_all("spline", preds)
