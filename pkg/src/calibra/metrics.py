"""Calibration metrics: binned calibration error, confidence diagnostics.

The central estimator bins the per-sample confidence into ``B`` uniform
bins over [0, 1] and compares each bin's mean confidence against its
empirical accuracy. Two aggregations of the per-bin gaps are supported:

``frequency``
    ``(sum_b (N_b / N) |gap_b|^p)^(1/p)`` -- bins weighted by their
    sample counts. This is the default and the variant used by every
    ordering invariant (it is a weighted p-norm, hence nondecreasing
    in p).
``uniform``
    ``(sum_b |gap_b|^p)^(1/p) / B`` with ``B`` counting nonempty bins
    -- each nonempty bin contributes equally and the normalization sits
    outside the power, which breaks p-monotonicity. Retained because it
    is in common use.

Empty bins are always excluded from the sums.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .predictions import PROB_FLOOR, PredictionSet

WEIGHTING_FREQUENCY = "frequency"
WEIGHTING_UNIFORM = "uniform"

#: Default number of bins for metric estimation.
DEFAULT_NUM_BINS = 100

#: Slack used by the confidence-gap inequality check in theorem1_check.
THEOREM1_SLACK = 1e-12


@dataclass(frozen=True)
class BinningConfig:
    """Uniform binning of [0, 1] into ``num_bins`` equal-width bins.

    Bin ``b`` (1-indexed) covers ``((b-1)/B, b/B]``; the first bin also
    includes 0. ``weighting`` selects the gap aggregation, see module
    docstring.
    """

    num_bins: int = DEFAULT_NUM_BINS
    weighting: str = WEIGHTING_FREQUENCY

    def __post_init__(self):
        if self.num_bins < 1:
            raise ValueError(f"num_bins must be >= 1, got {self.num_bins}")
        if self.weighting not in (WEIGHTING_FREQUENCY, WEIGHTING_UNIFORM):
            raise ValueError(f"unknown weighting {self.weighting!r}")

    def bin_indices(self, confidences):
        """0-based bin index for each confidence (right-closed bins)."""
        conf = np.asarray(confidences, dtype=float)
        idx = np.ceil(conf * self.num_bins).astype(int) - 1
        return np.clip(idx, 0, self.num_bins - 1)


@dataclass(frozen=True)
class ReliabilityData:
    """Per-bin confidence/accuracy statistics.

    ``mean_confidence`` and ``accuracy`` are NaN for empty bins;
    ``counts`` sums to the number of samples.
    """

    mean_confidence: np.ndarray
    accuracy: np.ndarray
    counts: np.ndarray

    @property
    def num_bins(self):
        return len(self.counts)

    @property
    def total(self):
        return int(self.counts.sum())


@dataclass(frozen=True)
class OverUnderConfidence:
    """Mean confidence on errors and mean uncertainty on correct predictions.

    A component is NaN (and its ``*_defined`` flag False) when the
    corresponding conditioning set is empty; no exception is raised so
    batch sweeps need not guard degenerate draws.
    """

    overconfidence: float
    underconfidence: float
    overconfidence_defined: bool
    underconfidence_defined: bool


@dataclass(frozen=True)
class Theorem1Check:
    """Confidence-gap bound record: ``lhs <= ece1`` must always hold."""

    lhs: float
    ece1: float
    holds: bool


@dataclass(frozen=True)
class CalibrationReport:
    """Bundle of calibration metrics for one prediction set."""

    ece_1: float
    ece_max: float
    nll: float
    accuracy: float
    overconfidence: float
    underconfidence: float
    mean_confidence: float
    binning: BinningConfig


def reliability(preds: PredictionSet, binning: BinningConfig | None = None) -> ReliabilityData:
    """Bin confidences and compute per-bin mean confidence and accuracy.

    Parameters
    ----------
    preds : PredictionSet
        Predictions to bin (logits are converted to the simplex first).
    binning : BinningConfig
        Bin count; the weighting field is ignored here.
    """
    binning = binning or BinningConfig()
    conf = preds.confidences
    correct = preds.correct.astype(float)
    idx = binning.bin_indices(conf)
    b = binning.num_bins
    counts = np.bincount(idx, minlength=b)
    conf_sums = np.bincount(idx, weights=conf, minlength=b)
    correct_sums = np.bincount(idx, weights=correct, minlength=b)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_conf = np.where(counts > 0, conf_sums / counts, np.nan)
        acc = np.where(counts > 0, correct_sums / counts, np.nan)
    return ReliabilityData(mean_confidence=mean_conf, accuracy=acc, counts=counts)


def ece_from_reliability(rel: ReliabilityData, p: float, weighting: str) -> float:
    """Aggregate per-bin gaps of precomputed reliability data into an ECE."""
    _check_p(p)
    occupied = rel.counts > 0
    gaps = np.abs(rel.mean_confidence[occupied] - rel.accuracy[occupied])
    if weighting == WEIGHTING_FREQUENCY:
        weights = rel.counts[occupied] / rel.counts.sum()
        return float(np.sum(weights * gaps**p) ** (1.0 / p))
    if weighting == WEIGHTING_UNIFORM:
        return float(np.sum(gaps**p) ** (1.0 / p) / occupied.sum())
    raise ValueError(f"unknown weighting {weighting!r}")


def ece_p(preds: PredictionSet, p: float, binning: BinningConfig | None = None) -> float:
    """Binned expected calibration error of order ``p``.

    Parameters
    ----------
    preds : PredictionSet
    p : float
        Order of the gap norm, finite and >= 1.
    binning : BinningConfig
        Bin count and gap weighting.

    Returns
    -------
    float
        Value in [0, 1].
    """
    binning = binning or BinningConfig()
    rel = reliability(preds, binning)
    return ece_from_reliability(rel, p, binning.weighting)


def ece_max(preds: PredictionSet, binning: BinningConfig | None = None) -> float:
    """Maximum calibration error: worst per-bin confidence/accuracy gap."""
    binning = binning or BinningConfig()
    rel = reliability(preds, binning)
    occupied = rel.counts > 0
    gaps = np.abs(rel.mean_confidence[occupied] - rel.accuracy[occupied])
    return float(gaps.max())


def over_underconfidence(preds: PredictionSet) -> OverUnderConfidence:
    """Mean confidence over errors, mean (1 - confidence) over correct hits."""
    conf = preds.confidences
    correct = preds.correct
    wrong = ~correct
    o_defined = bool(wrong.any())
    u_defined = bool(correct.any())
    o = float(conf[wrong].mean()) if o_defined else math.nan
    u = float((1.0 - conf[correct]).mean()) if u_defined else math.nan
    return OverUnderConfidence(o, u, o_defined, u_defined)


def theorem1_check(preds: PredictionSet, binning: BinningConfig | None = None) -> Theorem1Check:
    """Check that the weighted over/underconfidence gap is bounded by ECE_1.

    ``lhs = |o * P(wrong) - u * P(correct)|`` equals
    ``|mean confidence - accuracy|``, and the frequency-weighted binned
    ECE_1 dominates it by the triangle inequality over bins, so
    ``holds`` is True for every valid input.

    Raises
    ------
    ValueError
        If all predictions are correct or all are wrong (either
        conditioning set empty).
    """
    ou = over_underconfidence(preds)
    if not (ou.overconfidence_defined and ou.underconfidence_defined):
        raise ValueError(
            "over/underconfidence undefined: need at least one correct and "
            "one incorrect prediction"
        )
    binning = binning or BinningConfig()
    acc = float(preds.correct.mean())
    lhs = abs(ou.overconfidence * (1.0 - acc) - ou.underconfidence * acc)
    freq = BinningConfig(binning.num_bins, WEIGHTING_FREQUENCY)
    ece1 = ece_p(preds, 1.0, freq)
    return Theorem1Check(lhs=lhs, ece1=ece1, holds=bool(lhs <= ece1 + THEOREM1_SLACK))


def nll(preds: PredictionSet) -> float:
    """Mean negative log-likelihood of the true labels.

    Probabilities are floored at 1e-12 before the logarithm; logits are
    converted to the simplex first.
    """
    probs = preds.probabilities
    p_true = probs[np.arange(preds.n_samples), preds.labels]
    return float(-np.mean(np.log(np.maximum(p_true, PROB_FLOOR))))


def accuracy(preds: PredictionSet) -> float:
    """Fraction of samples whose argmax prediction matches the label."""
    return float(preds.correct.mean())


def mean_confidence(preds: PredictionSet) -> float:
    """Mean of the per-sample confidence."""
    return float(preds.confidences.mean())


def report(preds: PredictionSet, binning: BinningConfig | None = None) -> CalibrationReport:
    """Compute the full metrics bundle for one prediction set."""
    binning = binning or BinningConfig()
    ou = over_underconfidence(preds)
    return CalibrationReport(
        ece_1=ece_p(preds, 1.0, binning),
        ece_max=ece_max(preds, binning),
        nll=nll(preds),
        accuracy=accuracy(preds),
        overconfidence=ou.overconfidence,
        underconfidence=ou.underconfidence,
        mean_confidence=mean_confidence(preds),
        binning=binning,
    )


def _check_p(p):
    if not math.isfinite(p) or p < 1.0:
        raise ValueError(f"p must be finite and >= 1, got {p!r}")
