"""Container for classifier outputs plus true labels.

All calibration methods and metrics in this package consume a
:class:`PredictionSet`: an ``N x K`` score matrix together with the ``N``
true labels. Scores are either raw logits or rows on the probability
simplex; a ``kind`` flag records which, since several operations (prior
means, temperature scaling) are only defined for one of the two.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

#: Probabilities are floored at this value before any logarithm.
PROB_FLOOR = 1e-12

#: Tolerance for "rows sum to one" checks on simplex inputs.
SIMPLEX_ATOL = 1e-9

KIND_LOGITS = "logits"
KIND_SIMPLEX = "simplex"


def softargmax(scores):
    """Map rows of raw scores to the probability simplex.

    Numerically stable exponential normalization along the last axis.
    """
    scores = np.asarray(scores, dtype=float)
    shifted = scores - np.max(scores, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softargmax(scores):
    """Log of :func:`softargmax`, computed without underflow."""
    scores = np.asarray(scores, dtype=float)
    shifted = scores - np.max(scores, axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    return shifted - lse


@dataclass(frozen=True)
class PredictionSet:
    """Classifier outputs and ground-truth labels for N samples.

    Parameters
    ----------
    scores : ndarray, shape (N, K)
        Raw logits or probability rows, depending on ``kind``.
    labels : ndarray, shape (N,)
        True class indices in ``{0, ..., K-1}``.
    kind : str
        Either ``"logits"`` or ``"simplex"``.

    Notes
    -----
    Argmax ties are broken by the lowest class index, both for the
    prediction and everywhere downstream.
    """

    scores: np.ndarray
    labels: np.ndarray
    kind: str = KIND_SIMPLEX
    _probs: np.ndarray = field(init=False, repr=False, compare=False, default=None)

    def __post_init__(self):
        scores = np.atleast_2d(np.asarray(self.scores, dtype=float))
        labels = np.asarray(self.labels, dtype=int).ravel()
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels)
        self._validate()

    def _validate(self):
        if self.kind not in (KIND_LOGITS, KIND_SIMPLEX):
            raise ValueError(f"unknown score kind {self.kind!r}")
        n, k = self.scores.shape
        if n < 1 or k < 2:
            raise ValueError(f"need N >= 1 and K >= 2, got shape {(n, k)}")
        if self.labels.shape != (n,):
            raise ValueError(
                f"labels shape {self.labels.shape} does not match N = {n}"
            )
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores contain non-finite values")
        if np.any(self.labels < 0) or np.any(self.labels >= k):
            raise ValueError(f"labels must lie in [0, {k - 1}]")
        if self.kind == KIND_SIMPLEX:
            if np.any(self.scores < 0):
                raise ValueError("simplex scores must be nonnegative")
            row_sums = self.scores.sum(axis=1)
            if np.any(np.abs(row_sums - 1.0) > SIMPLEX_ATOL):
                worst = int(np.argmax(np.abs(row_sums - 1.0)))
                raise ValueError(
                    f"simplex row {worst} sums to {row_sums[worst]!r}, not 1"
                )

    @property
    def n_samples(self):
        return self.scores.shape[0]

    @property
    def n_classes(self):
        return self.scores.shape[1]

    @property
    def probabilities(self):
        """Scores converted to the simplex (softargmax applied to logits)."""
        if self._probs is None:
            if self.kind == KIND_SIMPLEX:
                p = self.scores
            else:
                p = softargmax(self.scores)
            object.__setattr__(self, "_probs", p)
        return self._probs

    @property
    def predictions(self):
        """Predicted class per sample (argmax, lowest index on ties)."""
        return np.argmax(self.scores, axis=1)

    @property
    def confidences(self):
        """Confidence per sample: max of the probability row."""
        return np.max(self.probabilities, axis=1)

    @property
    def correct(self):
        """Boolean mask of correctly classified samples."""
        return self.predictions == self.labels

    def to_simplex(self):
        """Return an equivalent simplex-kind prediction set."""
        if self.kind == KIND_SIMPLEX:
            return self
        return PredictionSet(self.probabilities, self.labels, KIND_SIMPLEX)

    def subset(self, index):
        """Row-indexed subset, preserving the kind."""
        index = np.asarray(index)
        return PredictionSet(self.scores[index], self.labels[index], self.kind)
