"""Latent-GP calibration math, parameterized over the array namespace.

Every function takes the array module ``xp`` (numpy or jax.numpy) as its
first argument so the exact same formulas serve the plain numpy API and
the autodiff path used for fitting. Only operations present in both
namespaces are used.

Shapes: ``z`` is (N, K) scalar inputs, ``w``/``m`` are (M,), ``L`` is the
(M, M) lower-triangular factor of the variational covariance, ``theta``
is the packed log kernel parameter vector (log_sv, log_ls, log_nv).
"""

from __future__ import annotations

import numpy as np

from .predictions import PROB_FLOOR

PRIOR_LOG = "log"
PRIOR_IDENTITY = "identity"
PRIOR_AFFINE = "affine"


def fill_tril(xp, values, m):
    """Lower-triangular (m, m) matrix from row-major packed values."""
    rows, cols = np.tril_indices(m)
    out = xp.zeros((m, m), dtype=values.dtype)
    if hasattr(out, "at"):
        return out.at[rows, cols].set(values)
    out[rows, cols] = values
    return out


def tril_values(mat):
    """Row-major packed lower triangle of a square matrix (numpy only)."""
    return np.asarray(mat)[np.tril_indices(mat.shape[0])]


def prior_mean_values(xp, x, variant, a=1.0, b=0.0):
    """Prior mean function evaluated elementwise on scalar inputs."""
    if variant == PRIOR_LOG:
        return xp.log(xp.maximum(x, PROB_FLOOR))
    if variant == PRIOR_IDENTITY:
        return x
    if variant == PRIOR_AFFINE:
        return a * x + b
    raise ValueError(f"unknown prior mean variant {variant!r}")


def rbf_from_sqdist(xp, theta, sqdist):
    return xp.exp(theta[0]) * xp.exp(-sqdist / (2.0 * xp.exp(theta[1])))


def inducing_cov(xp, w, theta, jitter):
    """Sum-kernel self-gram of the inducing inputs, noise and jitter on the
    diagonal. This is the matrix factored/inverted everywhere."""
    sq = (w[:, None] - w[None, :]) ** 2
    return rbf_from_sqdist(xp, theta, sq) + (xp.exp(theta[2]) + jitter) * xp.eye(
        w.shape[0]
    )


def marginals(xp, m, L, w, theta, z, variant, a, b, diagonal, include_noise, jitter):
    """Per-sample K-dimensional marginals of the variational latent process.

    Returns the mean ``phi`` (N, K) and either the per-sample covariance
    diagonal (N, K) or full blocks (N, K, K). ``include_noise`` controls
    whether the white-noise variance enters the data-side covariance
    (training marginals include it; predictive marginals do not).
    """
    n, k = z.shape
    sigma_u = inducing_cov(xp, w, theta, jitter)
    kzu = rbf_from_sqdist(xp, theta, (z[:, :, None] - w[None, None, :]) ** 2)
    a_mat = (
        xp.linalg.solve(sigma_u, kzu.reshape(n * k, -1).T).T.reshape(n, k, -1)
        if n > 0
        else xp.zeros((0, k, w.shape[0]))
    )
    mu_w = prior_mean_values(xp, w, variant, a, b)
    mu_z = prior_mean_values(xp, z, variant, a, b)
    phi = mu_z + xp.einsum("nkm,m->nk", a_mat, m - mu_w)
    s_cov = L @ L.T
    d = s_cov - sigma_u
    ad = xp.einsum("nkm,ml->nkl", a_mat, d)
    marginal_var = xp.exp(theta[0]) + (xp.exp(theta[2]) if include_noise else 0.0)
    if diagonal:
        c = marginal_var + xp.einsum("nkl,nkl->nk", ad, a_mat)
        return phi, c
    sq_zz = (z[:, :, None] - z[:, None, :]) ** 2
    kzz = rbf_from_sqdist(xp, theta, sq_zz)
    if include_noise:
        kzz = kzz + xp.exp(theta[2]) * xp.eye(k)[None, :, :]
    c = kzz + xp.einsum("nkl,njl->nkj", ad, a_mat)
    return phi, c


def log_softargmax(xp, x):
    shifted = x - xp.max(x, axis=-1, keepdims=True)
    return shifted - xp.log(xp.sum(xp.exp(shifted), axis=-1, keepdims=True))


def taylor_expected_loglik(xp, phi, c, labels, diagonal):
    """Second-order correction of the categorical log-likelihood around phi.

    Per sample: ``ln s_y + (s^T C s - diag(C)^T s) / 2`` where
    ``s = softargmax(phi)``; with a diagonal covariance the correction
    collapses to ``sum_k c_k (s_k^2 - s_k) / 2``.
    """
    n = phi.shape[0]
    ls = log_softargmax(xp, phi)
    h = ls[xp.arange(n), labels]
    s = xp.exp(ls)
    if diagonal:
        corr = 0.5 * xp.sum(c * (s**2 - s), axis=-1)
    else:
        s_c_s = xp.einsum("nk,nkj,nj->n", s, c, s)
        diag_c = xp.diagonal(c, axis1=-2, axis2=-1)
        corr = 0.5 * (s_c_s - xp.sum(diag_c * s, axis=-1))
    return h + corr


def kl_divergence(xp, m, L, w, theta, variant, a, b, jitter):
    """KL from the variational N(m, LL^T) to the inducing prior."""
    n_inducing = w.shape[0]
    sigma_u = inducing_cov(xp, w, theta, jitter)
    chol_p = xp.linalg.cholesky(sigma_u)
    s_cov = L @ L.T
    trace = xp.trace(xp.linalg.solve(sigma_u, s_cov))
    r = m - prior_mean_values(xp, w, variant, a, b)
    quad = r @ xp.linalg.solve(sigma_u, r)
    logdet_p = 2.0 * xp.sum(xp.log(xp.diagonal(chol_p)))
    logdet_q = 2.0 * xp.sum(xp.log(xp.diagonal(L)))
    return 0.5 * (trace + quad - n_inducing + logdet_p - logdet_q)


def elbo_value(xp, m, L, w, theta, z, labels, variant, a, b, diagonal, jitter):
    """Evidence lower bound: summed Taylor expectations minus the KL term."""
    phi, c = marginals(
        xp, m, L, w, theta, z, variant, a, b, diagonal, include_noise=True,
        jitter=jitter,
    )
    terms = taylor_expected_loglik(xp, phi, c, labels, diagonal)
    return xp.sum(terms) - kl_divergence(xp, m, L, w, theta, variant, a, b, jitter)
