"""Autodiff backend for ELBO gradients, built on jax in float64 mode.

The packed parameter layout is ``[m (M), lower triangle of L_S row-major
(M(M+1)/2), w (M), theta (3)]``. The optimizer additionally reparameterizes
the diagonal of L_S through a softplus so it stays positive; the public
gradient is taken with respect to the direct entries.
"""

from __future__ import annotations

from functools import lru_cache

import jax
import numpy as np

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp  # noqa: E402  (needs the x64 flag set first)

from . import _elbo_core as core  # noqa: E402


def softplus(x):
    return np.logaddexp(0.0, x)


def inv_softplus(y):
    return y + np.log(-np.expm1(-y))


def packed_size(num_inducing):
    return 2 * num_inducing + num_inducing * (num_inducing + 1) // 2 + 3


def unpack(xp, vec, num_inducing, raw_diag):
    m_dim = num_inducing
    n_tril = m_dim * (m_dim + 1) // 2
    m = vec[:m_dim]
    tril = vec[m_dim : m_dim + n_tril]
    if raw_diag:
        rows, cols = np.tril_indices(m_dim)
        tril = xp.where(rows == cols, xp.logaddexp(0.0, tril), tril)
    mat_l = core.fill_tril(xp, tril, m_dim)
    w = vec[m_dim + n_tril : 2 * m_dim + n_tril]
    theta = vec[2 * m_dim + n_tril :]
    return m, mat_l, w, theta


@lru_cache(maxsize=None)
def _neg_elbo_value_and_grad(num_inducing, variant, a, b, diagonal, jitter, raw_diag):
    def neg_elbo(vec, z, labels):
        m, mat_l, w, theta = unpack(jnp, vec, num_inducing, raw_diag)
        return -core.elbo_value(
            jnp, m, mat_l, w, theta, z, labels, variant, a, b, diagonal, jitter
        )

    return jax.jit(jax.value_and_grad(neg_elbo))


def elbo_value_and_grad(vec, z, labels, num_inducing, variant, a, b, diagonal, jitter,
                        raw_diag=False):
    """ELBO and its gradient with respect to the packed parameter vector."""
    fun = _neg_elbo_value_and_grad(
        num_inducing, variant, float(a), float(b), bool(diagonal), float(jitter),
        bool(raw_diag),
    )
    value, grad = fun(
        jnp.asarray(vec, dtype=jnp.float64),
        jnp.asarray(z, dtype=jnp.float64),
        jnp.asarray(labels, dtype=jnp.int64),
    )
    return -float(value), -np.asarray(grad, dtype=np.float64)


def unwhiten(xp, v, v_scale, w, theta, variant, a, b, jitter):
    """Map whitened variational parameters to the direct ones.

    The whitened coordinates measure the variational distribution against
    the prior at the inducing points: m = mu(w) + L_p v and
    L_S = L_p V with L_p the prior Cholesky factor. At v = 0, V = I the
    variational distribution equals the prior, and the steep prior-mean
    term cancels out of m - mu(w), which keeps the optimization landscape
    well scaled even when inducing points sit near a cliff of mu.
    """
    chol_p = xp.linalg.cholesky(core.inducing_cov(xp, w, theta, jitter))
    m = core.prior_mean_values(xp, w, variant, a, b) + chol_p @ v
    return m, chol_p @ v_scale


@lru_cache(maxsize=None)
def _neg_elbo_whitened(num_inducing, variant, a, b, diagonal, jitter):
    """Optimizer objective: negative ELBO over whitened raw parameters,
    packed as [v, tril(V) with softplus diagonal, w, theta]."""

    def neg_elbo(vec, z, labels):
        v, v_scale, w, theta = unpack(jnp, vec, num_inducing, raw_diag=True)
        m, mat_l = unwhiten(jnp, v, v_scale, w, theta, variant, a, b, jitter)
        return -core.elbo_value(
            jnp, m, mat_l, w, theta, z, labels, variant, a, b, diagonal, jitter
        )

    return jax.jit(jax.value_and_grad(neg_elbo))
