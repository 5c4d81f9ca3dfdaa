"""Synthetic miscalibrated data with known ground truth.

Draws true posterior rows from a Dirichlet distribution, samples labels
from them, and emits scores distorted by the *inverse* of a chosen
calibration map.  Applying that map to the emitted scores recovers the
true posteriors exactly, so recovery experiments have a known target,
and the undistorted configuration is calibrated by construction.

Three distortion families are supported, mirroring the calibration
maps in this package: temperature scaling, binary beta maps, and a
tabulated monotone latent function combined through softargmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metrics import BinningConfig, ReliabilityData, ece_from_reliability
from .predictions import KIND_LOGITS, KIND_SIMPLEX, PredictionSet, softargmax

#: Bisection on monotone maps stops at this interval width.
BISECTION_TOL = 1e-12

#: Probabilities are kept at least this far above zero before logarithms.
TINY = 1e-300


@dataclass(frozen=True)
class TemperatureDistortion:
    """True map is temperature scaling with the given temperature."""

    temperature: float

    def __post_init__(self):
        if not (np.isfinite(self.temperature) and self.temperature > 0.0):
            raise ValueError("temperature must be positive and finite")


@dataclass(frozen=True)
class BetaDistortion:
    """True map is the binary beta map ``sigmoid(a*ln(z) - b*ln(1-z) + c)``.

    Only defined for two classes; both slopes must be strictly positive
    so the map is invertible.
    """

    a: float
    b: float
    c: float

    def __post_init__(self):
        if not all(np.isfinite(v) for v in (self.a, self.b, self.c)):
            raise ValueError("beta distortion parameters must be finite")
        if self.a <= 0.0 or self.b <= 0.0:
            raise ValueError("beta distortion slopes must be strictly positive")


@dataclass(frozen=True)
class LatentDistortion:
    """True map pushes each score through a tabulated latent function.

    The map is ``v(z) = softargmax(g(z_1), ..., g(z_K))`` where ``g``
    interpolates linearly between ``(inputs[i], outputs[i])`` nodes.
    Both tables must be strictly increasing, otherwise the map cannot
    be inverted.
    """

    inputs: np.ndarray
    outputs: np.ndarray

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=float).ravel()
        outputs = np.asarray(self.outputs, dtype=float).ravel()
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "outputs", outputs)
        if inputs.size < 2 or inputs.size != outputs.size:
            raise ValueError("need at least two tabulation nodes of equal length")
        if not (np.all(np.isfinite(inputs)) and np.all(np.isfinite(outputs))):
            raise ValueError("tabulation nodes must be finite")
        if np.any(np.diff(inputs) <= 0) or np.any(np.diff(outputs) <= 0):
            raise ValueError("tabulated distortion is not invertible: "
                             "nodes must be strictly increasing")


@dataclass(frozen=True)
class SynthConfig:
    """Recipe for one synthetic prediction set.

    ``concentration`` is the symmetric Dirichlet parameter of the true
    posterior rows; 1.0 draws them uniformly from the simplex.
    """

    num_samples: int
    num_classes: int
    distortion: object
    concentration: float = 1.0
    output_kind: str = KIND_SIMPLEX
    seed: int = 0

    def __post_init__(self):
        if self.num_samples < 1:
            raise ValueError("need at least one sample")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if not (np.isfinite(self.concentration) and self.concentration > 0.0):
            raise ValueError("concentration must be positive and finite")
        if self.output_kind not in (KIND_LOGITS, KIND_SIMPLEX):
            raise ValueError(f"unknown output kind {self.output_kind!r}")
        if not isinstance(
            self.distortion, (TemperatureDistortion, BetaDistortion, LatentDistortion)
        ):
            raise ValueError("unknown distortion type")
        if isinstance(self.distortion, BetaDistortion) and self.num_classes != 2:
            raise ValueError("beta distortion is only defined for two classes")


@dataclass(frozen=True)
class SynthTruth:
    """Ground truth attached to a generated set."""

    true_posteriors: np.ndarray
    distortion: object


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _beta_logit(distortion, w):
    """Logit of the beta map as a function of ``w = logit(z)``."""
    log_z = _log_sigmoid(w)
    log_1mz = _log_sigmoid(-w)
    return distortion.a * log_z - distortion.b * log_1mz + distortion.c


def _invert_beta(distortion, targets):
    """Solve ``beta_map(z) = target`` per element, in logit space."""
    targets = np.clip(targets, TINY, 1.0 - 1e-16)
    goal = np.log(targets) - np.log1p(-targets)
    lo = np.full(targets.shape, -700.0)
    hi = np.full(targets.shape, 700.0)
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        high = _beta_logit(distortion, mid) > goal
        hi = np.where(high, mid, hi)
        lo = np.where(high, lo, mid)
    w = 0.5 * (lo + hi)
    return 1.0 / (1.0 + np.exp(-w))


def _invert_latent_rows(distortion, log_posteriors, simplex):
    """Rows ``z`` with ``softargmax(g(z)) = p``, one bisection per row.

    The latent values must be ``log p + c`` for a per-row constant ``c``;
    for simplex output ``c`` is pinned by the row-sum-one constraint,
    for logits it is taken as zero.
    """
    inputs, outputs = distortion.inputs, distortion.outputs

    def inverse(values):
        return np.interp(values, outputs, inputs)

    if not simplex:
        if np.any(log_posteriors < outputs[0]) or np.any(log_posteriors > outputs[-1]):
            raise ValueError(
                "tabulated distortion cannot represent these posteriors: "
                "log-probabilities fall outside the tabulated output range"
            )
        return inverse(log_posteriors)

    # valid shifts keep every latent value inside the tabulated range
    lo = outputs[0] - log_posteriors.min(axis=1)
    hi = outputs[-1] - log_posteriors.max(axis=1)
    if np.any(lo > hi):
        raise ValueError(
            "tabulated distortion cannot represent these posteriors: "
            "its output range is narrower than the per-row probability spread"
        )
    sum_lo = inverse(log_posteriors + lo[:, None]).sum(axis=1)
    sum_hi = inverse(log_posteriors + hi[:, None]).sum(axis=1)
    if np.any(sum_lo > 1.0) or np.any(sum_hi < 1.0):
        raise ValueError(
            "tabulated distortion cannot produce simplex rows: "
            "no latent shift makes the inverted scores sum to one"
        )
    while np.any(hi - lo > BISECTION_TOL):
        mid = 0.5 * (lo + hi)
        high = inverse(log_posteriors + mid[:, None]).sum(axis=1) > 1.0
        hi = np.where(high, mid, hi)
        lo = np.where(high, lo, mid)
    shift = 0.5 * (lo + hi)
    rows = inverse(log_posteriors + shift[:, None])
    return rows / rows.sum(axis=1, keepdims=True)


def _distorted_scores(config: SynthConfig, posteriors):
    distortion = config.distortion
    simplex = config.output_kind == KIND_SIMPLEX
    log_p = np.log(np.clip(posteriors, TINY, None))
    if isinstance(distortion, TemperatureDistortion):
        if distortion.temperature == 1.0 and simplex:
            return posteriors
        scaled = distortion.temperature * log_p
        return softargmax(scaled) if simplex else scaled
    if isinstance(distortion, BetaDistortion):
        z1 = _invert_beta(distortion, posteriors[:, 1])
        rows = np.column_stack([1.0 - z1, z1])
        return rows if simplex else np.log(np.clip(rows, TINY, None))
    return _invert_latent_rows(distortion, log_p, simplex)


def apply_true_map(distortion, scores, kind) -> np.ndarray:
    """Recalibrate scores with the generating map; returns simplex rows.

    This is the map whose inverse :func:`generate` applied, so feeding
    back generated scores returns the true posteriors (up to inversion
    tolerance).
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=float))
    if kind not in (KIND_LOGITS, KIND_SIMPLEX):
        raise ValueError(f"unknown score kind {kind!r}")
    if isinstance(distortion, TemperatureDistortion):
        if kind == KIND_LOGITS:
            return softargmax(scores / distortion.temperature)
        log_z = np.log(np.clip(scores, TINY, None))
        return softargmax(log_z / distortion.temperature)
    if isinstance(distortion, BetaDistortion):
        rows = scores if kind == KIND_SIMPLEX else softargmax(scores)
        z1 = np.clip(rows[:, 1], TINY, 1.0 - 1e-16)
        w = np.log(z1) - np.log1p(-z1)
        v = 1.0 / (1.0 + np.exp(-_beta_logit(distortion, w)))
        return np.column_stack([1.0 - v, v])
    if isinstance(distortion, LatentDistortion):
        latent = np.interp(scores, distortion.inputs, distortion.outputs)
        return softargmax(latent)
    raise ValueError("unknown distortion type")


def generate(config: SynthConfig):
    """Draw one synthetic prediction set plus its ground truth.

    Returns
    -------
    (PredictionSet, SynthTruth)
        Scores of the configured kind, labels sampled from the true
        posteriors, and the truth record needed by :func:`oracle_ece`.

    Raises
    ------
    ValueError
        When the configured distortion cannot be inverted for the
        drawn posteriors (tabulated range too narrow).
    """
    rng = np.random.default_rng(config.seed)
    posteriors = rng.dirichlet(
        np.full(config.num_classes, config.concentration), size=config.num_samples
    )
    posteriors = np.clip(posteriors, TINY, None)
    u = rng.random(config.num_samples)
    labels = (posteriors.cumsum(axis=1) > u[:, None]).argmax(axis=1)
    scores = _distorted_scores(config, posteriors)
    preds = PredictionSet(scores, labels, config.output_kind)
    return preds, SynthTruth(true_posteriors=posteriors, distortion=config.distortion)


def oracle_ece(truth: SynthTruth, preds: PredictionSet, binning: BinningConfig | None = None) -> float:
    """Binned calibration error with bin accuracies replaced by the truth.

    Empirical bin accuracy is swapped for the mean true posterior of the
    predicted class, removing label-sampling noise from the estimate;
    with a single bin this reduces to |mean confidence - mean true
    probability of the predicted class|.
    """
    binning = binning or BinningConfig()
    conf = preds.confidences
    rows = np.arange(preds.n_samples)
    true_prob = truth.true_posteriors[rows, preds.predictions]
    idx = binning.bin_indices(conf)
    b = binning.num_bins
    counts = np.bincount(idx, minlength=b)
    conf_sums = np.bincount(idx, weights=conf, minlength=b)
    prob_sums = np.bincount(idx, weights=true_prob, minlength=b)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_conf = np.where(counts > 0, conf_sums / counts, np.nan)
        mean_prob = np.where(counts > 0, prob_sums / counts, np.nan)
    rel = ReliabilityData(mean_confidence=mean_conf, accuracy=mean_prob, counts=counts)
    return ece_from_reliability(rel, 1.0, binning.weighting)
