"""One-dimensional RBF + white-noise sum kernel with log-parameter gradients.

The latent calibration map lives on scalar inputs (individual logit or
probability values), so only 1-D inputs are supported. Parameters are
held as logs of the variances / squared lengthscale, which keeps them
positive under unconstrained optimization. The white-noise term applies
to the diagonal of square self-grams only; cross-covariance blocks
(e.g. data against inducing inputs) never carry noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

#: Added to the diagonal before any Cholesky of a self-gram.
JITTER = 1e-8

#: Kernel defaults: signal std 1, lengthscale 10, noise std 0.01.
DEFAULT_SIGNAL_VARIANCE = 1.0
DEFAULT_LENGTHSCALE = 10.0
DEFAULT_NOISE_VARIANCE = 1e-4


@dataclass(frozen=True)
class KernelParams:
    """Sum-kernel parameters stored as logs.

    Attributes
    ----------
    log_sv : float
        ln(signal variance), the RBF amplitude.
    log_ls : float
        ln(lengthscale squared).
    log_nv : float
        ln(noise variance), the white-noise amplitude.
    """

    log_sv: float
    log_ls: float
    log_nv: float

    def __post_init__(self):
        for name in ("log_sv", "log_ls", "log_nv"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    @classmethod
    def default(cls):
        return cls.from_values(
            DEFAULT_SIGNAL_VARIANCE, DEFAULT_LENGTHSCALE, DEFAULT_NOISE_VARIANCE
        )

    @classmethod
    def from_values(cls, signal_variance, lengthscale, noise_variance):
        """Build from natural (positive) parameter values."""
        if signal_variance <= 0 or lengthscale <= 0 or noise_variance <= 0:
            raise ValueError("kernel parameters must be positive")
        return cls(
            log_sv=float(np.log(signal_variance)),
            log_ls=float(2.0 * np.log(lengthscale)),
            log_nv=float(np.log(noise_variance)),
        )

    @classmethod
    def from_theta(cls, theta):
        """Build from the packed log-parameter vector (log_sv, log_ls, log_nv)."""
        return cls(float(theta[0]), float(theta[1]), float(theta[2]))

    @property
    def theta(self):
        """Packed log-parameter vector used by the optimizer."""
        return np.array([self.log_sv, self.log_ls, self.log_nv])

    @property
    def signal_variance(self):
        return float(np.exp(self.log_sv))

    @property
    def lengthscale(self):
        return float(np.exp(0.5 * self.log_ls))

    @property
    def noise_variance(self):
        return float(np.exp(self.log_nv))


def gram(x, x2, params: KernelParams, include_noise=False):
    """Kernel matrix between two 1-D input vectors.

    Entry (i, j) is ``sv * exp(-(x_i - x2_j)^2 / (2 l^2))``; when
    ``include_noise`` the noise variance is added on the diagonal, which
    requires a square (self-) gram.
    """
    x = np.asarray(x, dtype=float).ravel()
    x2 = np.asarray(x2, dtype=float).ravel()
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(x2))):
        raise ValueError("kernel inputs must be finite")
    k = _rbf(x, x2, params)
    if include_noise:
        if len(x) != len(x2):
            raise ValueError("include_noise requires a square self-gram")
        k[np.diag_indices_from(k)] += params.noise_variance
    return k


def gram_diag(n, params: KernelParams, include_noise=False):
    """Diagonal of a self-gram: signal variance (+ noise) repeated n times."""
    v = params.signal_variance
    if include_noise:
        v += params.noise_variance
    return np.full(n, v)


def gram_grad(x, x2, params: KernelParams, include_noise=False):
    """Analytic derivatives of :func:`gram` per log parameter.

    Returns
    -------
    dict
        Keys ``log_sv``, ``log_ls``, ``log_nv``, each an (n, m) matrix.
    """
    x = np.asarray(x, dtype=float).ravel()
    x2 = np.asarray(x2, dtype=float).ravel()
    rbf = _rbf(x, x2, params)
    sq = (x[:, None] - x2[None, :]) ** 2
    l2 = np.exp(params.log_ls)
    d_nv = np.zeros_like(rbf)
    if include_noise:
        d_nv[np.diag_indices_from(d_nv)] = params.noise_variance
    return {
        "log_sv": rbf.copy(),
        "log_ls": rbf * sq / (2.0 * l2),
        "log_nv": d_nv,
    }


def _rbf(x, x2, params):
    sq = (x[:, None] - x2[None, :]) ** 2
    return params.signal_variance * np.exp(-sq / (2.0 * np.exp(params.log_ls)))
