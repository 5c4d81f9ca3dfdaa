"""Classical post-hoc calibration methods.

Implements the standard baselines against which the latent-function
calibrator is compared: Platt scaling, isotonic regression, beta
calibration, Bayesian binning into quantiles (BBQ), and temperature
scaling, plus the one-vs-all reduction that lifts the four binary
methods to K classes.

The binary calibrators consume a score vector together with a boolean
vector marking which predictions were correct, and return a small
immutable parameter object consumed by the matching ``apply_*``
function.  Temperature scaling is inherently multi-class and operates
on logit rows directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import betaln, expit, logit, logsumexp

from .predictions import KIND_LOGITS, KIND_SIMPLEX, PredictionSet, softargmax

#: Scores are clipped this far inside (0, 1) before any logarithm.
EPSILON = 1e-6

#: Total pseudo-count of the per-bin Beta prior used by BBQ.
BBQ_PRIOR_STRENGTH = 2.0

#: Search interval for log(T) during temperature fitting.
LOG_T_RANGE = (-5.0, 5.0)


@dataclass(frozen=True)
class PlattParams:
    """Logistic map ``sigmoid(a * score + b)``."""

    a: float
    b: float

    def __post_init__(self):
        if not (np.isfinite(self.a) and np.isfinite(self.b)):
            raise ValueError("Platt parameters must be finite")


@dataclass(frozen=True)
class IsotonicMap:
    """Nondecreasing map through the pooled correctness means.

    ``breakpoints`` holds the distinct calibration scores and ``values``
    the fitted means; between breakpoints the map interpolates linearly,
    outside their range it extends as a constant.
    """

    breakpoints: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        breakpoints = np.asarray(self.breakpoints, dtype=float).ravel()
        values = np.asarray(self.values, dtype=float).ravel()
        object.__setattr__(self, "breakpoints", breakpoints)
        object.__setattr__(self, "values", values)
        if breakpoints.size == 0 or breakpoints.size != values.size:
            raise ValueError("need equally many breakpoints and values, at least one")
        if np.any(np.diff(breakpoints) <= 0):
            raise ValueError("breakpoints must be strictly ascending")
        if np.any(np.diff(values) < 0):
            raise ValueError("values must be nondecreasing")
        if values[0] < -1e-12 or values[-1] > 1.0 + 1e-12:
            raise ValueError("values must lie in [0, 1]")


@dataclass(frozen=True)
class BetaParams:
    """Beta-calibration map ``sigmoid(a*ln(z) - b*ln(1-z) + c)``.

    The slopes ``a`` and ``b`` are constrained nonnegative so the map is
    monotone.  When the data admit no informative monotone fit the flat
    fallback ``a == b == 0`` is returned with ``degenerate`` set.
    """

    a: float
    b: float
    c: float
    degenerate: bool = False

    def __post_init__(self):
        if not (np.isfinite(self.a) and np.isfinite(self.b) and np.isfinite(self.c)):
            raise ValueError("beta parameters must be finite")
        if self.a < 0.0 or self.b < 0.0:
            raise ValueError("beta slopes must be nonnegative")


@dataclass(frozen=True)
class BbqBinning:
    """One equal-frequency binning model inside BBQ.

    ``edges`` are the ``B + 1`` bin boundaries, ``posterior_means`` the
    per-bin posterior correctness estimates, and ``log_marginal`` the
    log marginal likelihood of the calibration data under this binning.
    """

    edges: np.ndarray
    posterior_means: np.ndarray
    log_marginal: float

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=float).ravel()
        means = np.asarray(self.posterior_means, dtype=float).ravel()
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "posterior_means", means)
        if edges.size < 2 or means.size != edges.size - 1:
            raise ValueError("need B + 1 edges and B posterior means")
        if np.any(np.diff(edges) < 0):
            raise ValueError("edges must be ascending")
        if np.any(means < 0.0) or np.any(means > 1.0):
            raise ValueError("posterior means must lie in [0, 1]")


@dataclass(frozen=True)
class BbqModel:
    """Weighted ensemble of equal-frequency binning models."""

    binnings: tuple
    weights: np.ndarray

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=float).ravel()
        object.__setattr__(self, "binnings", tuple(self.binnings))
        object.__setattr__(self, "weights", weights)
        if len(self.binnings) == 0 or weights.size != len(self.binnings):
            raise ValueError("need one weight per binning model")
        if np.any(weights < 0.0) or abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be nonnegative and sum to one")


@dataclass(frozen=True)
class TemperatureParam:
    """Scaling factor applied to logits as ``z / temperature``."""

    temperature: float

    def __post_init__(self):
        if not (np.isfinite(self.temperature) and self.temperature > 0.0):
            raise ValueError("temperature must be positive and finite")


@dataclass(frozen=True)
class OneVsAllModel:
    """Per-class binary calibrators for a K-class problem.

    ``calibrators[k]`` is ``None`` where class ``k`` could not be fitted
    (for example it was absent from the calibration data); such columns
    pass through unchanged and are marked in ``degenerate``.
    """

    method: str
    calibrators: tuple
    degenerate: tuple

    def __post_init__(self):
        object.__setattr__(self, "calibrators", tuple(self.calibrators))
        object.__setattr__(self, "degenerate", tuple(bool(d) for d in self.degenerate))
        if self.method not in _BINARY_METHODS:
            raise ValueError(f"unknown binary method {self.method!r}")
        if len(self.calibrators) < 2:
            raise ValueError("one-vs-all needs at least two classes")
        if len(self.degenerate) != len(self.calibrators):
            raise ValueError("need one degeneracy flag per calibrator")


def _binary_arrays(scores, correct):
    scores = np.asarray(scores, dtype=float).ravel()
    correct = np.asarray(correct, dtype=bool).ravel()
    if scores.size == 0:
        raise ValueError("need at least one sample")
    if correct.shape != scores.shape:
        raise ValueError("scores and correctness must have equal length")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores contain non-finite values")
    return scores, correct


def _logistic_nll(features, targets, theta):
    margins = features @ theta
    return float(np.sum(np.logaddexp(0.0, np.where(targets, -margins, margins))))


def _fit_logistic(features, targets, start, max_iters=100):
    """Damped-Newton minimizer of the logistic negative log-likelihood.

    Halves the Newton step until the objective does not increase, so the
    iteration is monotone; deterministic for fixed inputs.
    """
    theta = np.asarray(start, dtype=float).copy()
    value = _logistic_nll(features, targets, theta)
    y = targets.astype(float)
    for _ in range(max_iters):
        p = expit(features @ theta)
        grad = features.T @ (p - y)
        hess = (features * (p * (1.0 - p))[:, None]).T @ features
        hess[np.diag_indices_from(hess)] += 1e-12
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            break
        for _ in range(60):
            candidate = theta - step
            new_value = _logistic_nll(features, targets, candidate)
            if new_value <= value:
                break
            step = 0.5 * step
        else:
            break
        theta, value = candidate, new_value
        if np.max(np.abs(step)) < 1e-11:
            break
    return theta


def fit_platt(scores, correct):
    """Fit ``sigmoid(a * score + b)`` to correctness by damped Newton.

    Parameters
    ----------
    scores : array_like, shape (N,)
        Real-valued confidence scores (any bounded range).
    correct : array_like of bool, shape (N,)
        Whether each prediction was correct.

    Returns
    -------
    PlattParams

    Raises
    ------
    ValueError
        If only one class is present.
    """
    scores, correct = _binary_arrays(scores, correct)
    if correct.all() or not correct.any():
        raise ValueError("Platt scaling needs both correct and incorrect samples")
    features = np.column_stack([scores, np.ones_like(scores)])
    a, b = _fit_logistic(features, correct, start=(1.0, 0.0))
    return PlattParams(float(a), float(b))


def apply_platt(params: PlattParams, scores):
    """Evaluate a fitted Platt map; output in (0, 1)."""
    return expit(params.a * np.asarray(scores, dtype=float) + params.b)


def _pava(targets, weights):
    """Weighted pool-adjacent-violators; one fitted value per input point."""
    values, block_weights, sizes = [], [], []
    for target, weight in zip(targets, weights):
        values.append(target)
        block_weights.append(weight)
        sizes.append(1)
        while len(values) > 1 and values[-2] > values[-1]:
            merged_weight = block_weights[-2] + block_weights[-1]
            merged_value = (
                block_weights[-2] * values[-2] + block_weights[-1] * values[-1]
            ) / merged_weight
            merged_size = sizes[-2] + sizes[-1]
            for stack in (values, block_weights, sizes):
                stack.pop()
                stack.pop()
            values.append(merged_value)
            block_weights.append(merged_weight)
            sizes.append(merged_size)
    return np.repeat(values, sizes)


def fit_isotonic(scores, correct):
    """Order-constrained least-squares fit of correctness on score.

    Ties in the scores are pooled first (their targets averaged) so the
    result is a well-defined function of the score; the pool-adjacent-
    violators pass then yields the exact solution of the monotone
    least-squares problem.
    """
    scores, correct = _binary_arrays(scores, correct)
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    sorted_targets = correct[order].astype(float)
    breakpoints, first, counts = np.unique(
        sorted_scores, return_index=True, return_counts=True
    )
    pooled = np.add.reduceat(sorted_targets, first) / counts
    fitted = _pava(pooled, counts.astype(float))
    return IsotonicMap(breakpoints, fitted)


def apply_isotonic(mapping: IsotonicMap, scores):
    """Evaluate an isotonic map, clamping outside the breakpoint range."""
    scores = np.asarray(scores, dtype=float)
    return np.interp(scores, mapping.breakpoints, mapping.values)


def _flat_beta(correct):
    return BetaParams(0.0, 0.0, float(logit(correct.mean())), degenerate=True)


def fit_beta(scores, correct):
    """Fit the beta-calibration map ``sigmoid(a*ln(z) - b*ln(1-z) + c)``.

    Logistic regression on features ``(ln z, -ln(1-z))`` with an
    intercept; a negative slope is clipped to zero and the remaining
    parameters refitted, which keeps the map monotone.

    Raises
    ------
    ValueError
        If only one class is present.
    """
    scores, correct = _binary_arrays(scores, correct)
    if correct.all() or not correct.any():
        raise ValueError("beta calibration needs both correct and incorrect samples")
    z = np.clip(scores, EPSILON, 1.0 - EPSILON)
    if np.ptp(z) == 0.0:
        return _flat_beta(correct)
    log_z = np.log(z)
    neg_log_1mz = -np.log1p(-z)
    ones = np.ones_like(z)
    features = np.column_stack([log_z, neg_log_1mz, ones])
    a, b, c = _fit_logistic(features, correct, start=(1.0, 1.0, 0.0))
    if a < 0.0 and b < 0.0:
        return _flat_beta(correct)
    if a < 0.0:
        b, c = _fit_logistic(
            np.column_stack([neg_log_1mz, ones]), correct, start=(1.0, 0.0)
        )
        return _flat_beta(correct) if b < 0.0 else BetaParams(0.0, float(b), float(c))
    if b < 0.0:
        a, c = _fit_logistic(np.column_stack([log_z, ones]), correct, start=(1.0, 0.0))
        return _flat_beta(correct) if a < 0.0 else BetaParams(float(a), 0.0, float(c))
    return BetaParams(float(a), float(b), float(c))


def apply_beta(params: BetaParams, scores):
    """Evaluate a beta-calibration map; input clipped into (0, 1)."""
    z = np.clip(np.asarray(scores, dtype=float), EPSILON, 1.0 - EPSILON)
    return expit(params.a * np.log(z) - params.b * np.log1p(-z) + params.c)


def bin_log_marginal(hits, total, alpha, beta):
    """Log marginal likelihood of one bin under a Beta(alpha, beta) prior.

    The Bernoulli likelihood of the particular correctness sequence
    (``hits`` successes out of ``total``) integrated against the prior:
    ``B(alpha + hits, beta + total - hits) / B(alpha, beta)`` in log form.
    """
    return float(betaln(alpha + hits, beta + total - hits) - betaln(alpha, beta))


def _bbq_binning(scores, correct, num_bins):
    edges = np.quantile(scores, np.linspace(0.0, 1.0, num_bins + 1))
    edges = np.unique(edges)
    if edges.size == 1:
        edges = np.repeat(edges, 2)
    assignment = np.searchsorted(edges[1:-1], scores, side="right")
    num = edges.size - 1
    totals = np.bincount(assignment, minlength=num).astype(float)
    hits = np.bincount(assignment, weights=correct.astype(float), minlength=num)
    mids = np.clip(0.5 * (edges[:-1] + edges[1:]), EPSILON, 1.0 - EPSILON)
    alpha = BBQ_PRIOR_STRENGTH * mids
    beta = BBQ_PRIOR_STRENGTH * (1.0 - mids)
    log_marginal = float(
        np.sum(betaln(alpha + hits, beta + totals - hits) - betaln(alpha, beta))
    )
    means = (hits + alpha) / (totals + BBQ_PRIOR_STRENGTH)
    return BbqBinning(edges, means, log_marginal)


def fit_bbq(scores, correct, model_grid=None):
    """Fit a BBQ ensemble over equal-frequency binning models.

    Each candidate bin count in ``model_grid`` produces one binning
    model scored by its Beta-Binomial marginal likelihood; the per-bin
    Beta prior is centered at the bin midpoint with total strength
    :data:`BBQ_PRIOR_STRENGTH`, and the model prior is uniform.  The
    default grid is ``ceil(N^(1/3) / 2) .. ceil(2 * N^(1/3))``.

    Raises
    ------
    ValueError
        If the model grid is empty, contains a non-positive bin count,
        or asks for more bins than there are samples.
    """
    scores, correct = _binary_arrays(scores, correct)
    if model_grid is None:
        root = scores.size ** (1.0 / 3.0)
        model_grid = range(int(np.ceil(0.5 * root)), int(np.ceil(2.0 * root)) + 1)
    grid = sorted({int(b) for b in model_grid})
    if not grid:
        raise ValueError("BBQ model grid is empty")
    if grid[0] < 1:
        raise ValueError("bin counts must be positive")
    if scores.size < grid[0]:
        raise ValueError(
            f"need at least {grid[0]} samples for the smallest binning model"
        )
    binnings = tuple(_bbq_binning(scores, correct, b) for b in grid)
    log_weights = np.array([binning.log_marginal for binning in binnings])
    weights = np.exp(log_weights - logsumexp(log_weights))
    weights /= weights.sum()
    return BbqModel(binnings, weights)


def apply_bbq(model: BbqModel, scores):
    """Weight-averaged per-bin posterior means at the given scores."""
    z = np.asarray(scores, dtype=float)
    out = np.zeros(z.shape, dtype=float)
    for binning, weight in zip(model.binnings, model.weights):
        idx = np.searchsorted(binning.edges[1:-1], z, side="right")
        out += weight * binning.posterior_means[idx]
    return out


def _temperature_nll(logits, labels, inverse_t):
    scaled = inverse_t * logits
    hit = scaled[np.arange(labels.size), labels]
    return float(np.sum(logsumexp(scaled, axis=1) - hit))


def _golden_section(func, lo, hi, iters=60):
    ratio = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - ratio * (b - a)
    d = a + ratio * (b - a)
    fc, fd = func(c), func(d)
    for _ in range(iters):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - ratio * (b - a)
            fc = func(c)
        else:
            a, c, fc = c, d, fd
            d = a + ratio * (b - a)
            fd = func(d)
    return 0.5 * (a + b)


def fit_temperature(preds: PredictionSet) -> TemperatureParam:
    """Fit the temperature that minimizes the NLL of scaled logits.

    Golden-section search over ``log T`` in :data:`LOG_T_RANGE`
    followed by a Newton polish on the inverse temperature, where the
    NLL is convex.  The result never has higher NLL than ``T = 1``.

    Raises
    ------
    ValueError
        If the prediction set does not hold logits.
    """
    if preds.kind != KIND_LOGITS:
        raise ValueError("temperature scaling is defined on logits")
    logits = preds.scores
    labels = preds.labels
    lo, hi = LOG_T_RANGE

    log_t = _golden_section(
        lambda u: _temperature_nll(logits, labels, np.exp(-u)), lo, hi
    )
    inv_t = np.exp(-log_t)
    inv_min, inv_max = np.exp(-hi), np.exp(-lo)
    hit = logits[np.arange(labels.size), labels]
    for _ in range(25):
        p = softargmax(inv_t * logits)
        mean = np.sum(p * logits, axis=1)
        grad = float(np.sum(mean - hit))
        curvature = float(np.sum(np.sum(p * logits**2, axis=1) - mean**2))
        if curvature <= 0.0:
            break
        new_inv = min(max(inv_t - grad / curvature, inv_min), inv_max)
        done = abs(new_inv - inv_t) <= 1e-14 * inv_t
        inv_t = new_inv
        if done:
            break
    if _temperature_nll(logits, labels, inv_t) > _temperature_nll(logits, labels, 1.0):
        inv_t = 1.0
    return TemperatureParam(1.0 / inv_t)


def apply_temperature(param: TemperatureParam, logits):
    """Softargmax of ``logits / T``; rows on the simplex.

    With ``T = 1`` this is exactly the softargmax of the input, so
    per-row argmax is preserved for every positive temperature.
    """
    return softargmax(np.asarray(logits, dtype=float) / param.temperature)


_BINARY_METHODS = {
    "platt": (fit_platt, apply_platt),
    "isotonic": (fit_isotonic, apply_isotonic),
    "beta": (fit_beta, apply_beta),
    "bbq": (fit_bbq, apply_bbq),
}


def fit_one_vs_all(method: str, preds: PredictionSet) -> OneVsAllModel:
    """Fit one binary calibrator per class on its own score column.

    Class ``k``'s calibrator is trained on ``(scores[:, k], labels == k)``.
    A class absent from the calibration data (or whose column cannot be
    fitted) is flagged degenerate and its column passes through
    unchanged at apply time.

    Raises
    ------
    ValueError
        For an unknown method or non-simplex inputs (convert logits
        first).
    """
    if method not in _BINARY_METHODS:
        raise ValueError(f"unknown binary method {method!r}")
    if preds.kind != KIND_SIMPLEX:
        raise ValueError("one-vs-all needs simplex scores; convert logits first")
    fit, _ = _BINARY_METHODS[method]
    calibrators, degenerate = [], []
    for k in range(preds.n_classes):
        targets = preds.labels == k
        if not targets.any():
            calibrators.append(None)
            degenerate.append(True)
            continue
        try:
            calibrators.append(fit(preds.scores[:, k], targets))
            degenerate.append(False)
        except ValueError:
            calibrators.append(None)
            degenerate.append(True)
    return OneVsAllModel(method, tuple(calibrators), tuple(degenerate))


def apply_one_vs_all(model: OneVsAllModel, scores, renormalize=True):
    """Apply per-class calibrators columnwise and renormalize the rows.

    With ``renormalize=False`` the raw calibrated columns are returned
    instead (their row sums need not be one).  Renormalized rows with a
    zero sum become uniform.
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=float))
    num_classes = len(model.calibrators)
    if scores.shape[1] != num_classes:
        raise ValueError(
            f"scores have {scores.shape[1]} columns, model expects {num_classes}"
        )
    _, apply = _BINARY_METHODS[model.method]
    columns = []
    for k, calibrator in enumerate(model.calibrators):
        column = scores[:, k]
        if calibrator is not None:
            column = apply(calibrator, column)
        columns.append(column)
    raw = np.column_stack(columns)
    if not renormalize:
        return raw
    sums = raw.sum(axis=1, keepdims=True)
    safe = np.where(sums > 0.0, sums, 1.0)
    return np.where(sums > 0.0, raw / safe, 1.0 / num_classes)
