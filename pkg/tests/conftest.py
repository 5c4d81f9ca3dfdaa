import numpy as np
import pytest

from calibra.predictions import PredictionSet


def random_prediction_set(rng, n=None, k=None, kind=None, calibrated=False):
    """Random prediction set with at least one correct and one wrong sample.

    Labels are drawn from the score rows themselves when ``calibrated``,
    otherwise from a perturbed distribution so the set is miscalibrated.
    """
    if n is None:
        n = int(rng.integers(10, 2000))
    if k is None:
        k = int(rng.choice([2, 4, 10]))
    if kind is None:
        kind = rng.choice(["logits", "simplex"])
    for _ in range(100):
        if kind == "simplex":
            conc = rng.uniform(0.3, 3.0)
            scores = rng.dirichlet(np.full(k, conc), size=n)
            probs = scores
        else:
            scores = rng.normal(scale=rng.uniform(0.5, 3.0), size=(n, k))
            shifted = scores - scores.max(axis=1, keepdims=True)
            probs = np.exp(shifted)
            probs /= probs.sum(axis=1, keepdims=True)
        if calibrated:
            label_probs = probs
        else:
            sharpened = probs ** rng.uniform(0.3, 2.5)
            label_probs = sharpened / sharpened.sum(axis=1, keepdims=True)
        u = rng.random(n)
        labels = (label_probs.cumsum(axis=1) > u[:, None]).argmax(axis=1)
        preds = PredictionSet(scores, labels, kind)
        correct = preds.correct
        if correct.any() and (~correct).any():
            return preds
    raise RuntimeError("failed to draw a non-degenerate prediction set")


def binary_set(confidences, correct):
    """Binary prediction set with given confidences and correctness.

    The predicted class is always 0 (confidence placed in column 0, so
    ties at 0.5 are handled by the lowest-index rule); the label is then
    chosen to make the prediction right or wrong as requested.
    """
    confidences = np.asarray(confidences, dtype=float)
    correct = np.asarray(correct, dtype=bool)
    scores = np.column_stack([confidences, 1.0 - confidences])
    labels = np.where(correct, 0, 1)
    return PredictionSet(scores, labels, "simplex")


@pytest.fixture
def rng():
    return np.random.default_rng(20260824)
