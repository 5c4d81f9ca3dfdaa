"""Non-parametric calibration maps with a latent Gaussian process.

A shared scalar latent function g is applied to every score coordinate;
class probabilities come from the softargmax of the transformed scores.
The posterior over g is approximated variationally through M inducing
points, fitted by maximizing an evidence lower bound whose intractable
log-likelihood expectations are replaced by a second-order Taylor
expansion around the marginal means.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

from . import _autodiff, _elbo_core as core
from .kernel import JITTER, KernelParams
from .predictions import KIND_LOGITS, KIND_SIMPLEX, PredictionSet, softargmax

COV_DIAGONAL = "diagonal"
COV_BLOCK = "block"

DEFAULT_NUM_INDUCING = 10
DEFAULT_MC_SAMPLES = 100
DEFAULT_MAX_ITERS = 1000
DEFAULT_TOL = 1e-6

#: A fitted map must keep at least this fraction of the training argmax
#: decisions to be preferred during restart selection.
DECISION_AGREEMENT = 0.99

VARIANCE_FLOOR = 1e-12
_NAN_PENALTY = 1e15


@dataclass(frozen=True)
class PriorMean:
    """Prior mean function of the latent process.

    ``log`` maps a probability to its log (floored at the probability
    floor) and is only meaningful for simplex inputs; ``identity`` passes
    logits through unchanged; ``affine`` applies a * x + b.
    """

    variant: str = core.PRIOR_LOG
    a: float = 1.0
    b: float = 0.0

    def __post_init__(self):
        if self.variant not in (core.PRIOR_LOG, core.PRIOR_IDENTITY, core.PRIOR_AFFINE):
            raise ValueError(f"unknown prior mean variant {self.variant!r}")

    @classmethod
    def log(cls):
        return cls(core.PRIOR_LOG)

    @classmethod
    def identity(cls):
        return cls(core.PRIOR_IDENTITY)

    @classmethod
    def affine(cls, a, b):
        return cls(core.PRIOR_AFFINE, a=float(a), b=float(b))

    def __call__(self, x):
        return core.prior_mean_values(np, np.asarray(x, dtype=np.float64),
                                      self.variant, self.a, self.b)


@dataclass(frozen=True)
class FitDiagnostics:
    initial_elbo: float
    final_elbo: float
    iterations: int
    converged: bool
    degenerate_labels: bool = False


@dataclass(frozen=True)
class LatentPosterior:
    """Pointwise posterior of the latent function on a grid."""

    grid: np.ndarray
    mean: np.ndarray
    variance: np.ndarray


@dataclass(frozen=True, eq=False)
class GpCalibrationModel:
    """Fitted (or hand-constructed) latent-GP calibration map.

    ``variational_scale`` is the lower-triangular Cholesky factor of the
    variational covariance S = L L^T; its diagonal must be positive.
    """

    inducing_inputs: np.ndarray
    variational_mean: np.ndarray
    variational_scale: np.ndarray
    kernel: KernelParams
    prior_mean: PriorMean = field(default_factory=PriorMean.log)
    input_kind: str = KIND_SIMPLEX
    cov_structure: str = COV_BLOCK
    diagnostics: FitDiagnostics | None = None

    def __post_init__(self):
        w = np.ascontiguousarray(np.asarray(self.inducing_inputs, dtype=np.float64))
        m = np.ascontiguousarray(np.asarray(self.variational_mean, dtype=np.float64))
        scale = np.ascontiguousarray(
            np.asarray(self.variational_scale, dtype=np.float64)
        )
        if w.ndim != 1 or w.shape[0] < 1:
            raise ValueError("inducing inputs must be a non-empty 1-D array")
        num = w.shape[0]
        if m.shape != (num,):
            raise ValueError("variational mean shape does not match inducing inputs")
        if scale.shape != (num, num):
            raise ValueError("variational scale must be (M, M)")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(m))
                and np.all(np.isfinite(scale))):
            raise ValueError("model parameters must be finite")
        if np.any(np.triu(scale, k=1) != 0.0):
            raise ValueError("variational scale must be lower triangular")
        if np.any(np.diagonal(scale) <= 0.0):
            raise ValueError("variational scale needs a positive diagonal")
        if self.input_kind not in (KIND_LOGITS, KIND_SIMPLEX):
            raise ValueError(f"unknown input kind {self.input_kind!r}")
        if self.cov_structure not in (COV_DIAGONAL, COV_BLOCK):
            raise ValueError(f"unknown covariance structure {self.cov_structure!r}")
        if (self.prior_mean.variant == core.PRIOR_LOG
                and self.input_kind == KIND_LOGITS):
            raise ValueError("log prior mean requires simplex inputs")
        object.__setattr__(self, "inducing_inputs", w)
        object.__setattr__(self, "variational_mean", m)
        object.__setattr__(self, "variational_scale", scale)

    @property
    def num_inducing(self):
        return self.inducing_inputs.shape[0]

    def pack(self):
        """Parameters as one flat vector: [m, tril(L_S) row-major, w, theta]."""
        return np.concatenate([
            self.variational_mean,
            core.tril_values(self.variational_scale),
            self.inducing_inputs,
            self.kernel.theta,
        ])

    def with_packed(self, vec):
        """Copy of the model with parameters taken from a packed vector."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (_autodiff.packed_size(self.num_inducing),):
            raise ValueError("packed vector has the wrong length")
        m, scale, w, theta = _autodiff.unpack(np, vec, self.num_inducing,
                                              raw_diag=False)
        return dataclasses.replace(
            self,
            inducing_inputs=w,
            variational_mean=m,
            variational_scale=scale,
            kernel=KernelParams.from_theta(theta),
        )


@dataclass(frozen=True)
class GpFitConfig:
    """Fitting options.

    ``kernel=None`` (the default) lets ``fit`` start the optimizer from a
    small deterministic ladder of initial hyperparameters — the standard
    defaults plus data-scaled lengthscales — and pick the best restart;
    an explicit ``KernelParams`` forces a single start from those values.
    ``seed`` is reserved for stochastic optimizers; the current fit is
    deterministic regardless.
    """

    num_inducing: int = DEFAULT_NUM_INDUCING
    cov_structure: str = COV_BLOCK
    prior_mean: PriorMean | None = None  # default chosen from the input kind
    kernel: KernelParams | None = None
    max_iters: int = DEFAULT_MAX_ITERS
    tol: float = DEFAULT_TOL
    seed: int = 0

    def __post_init__(self):
        if self.num_inducing < 1:
            raise ValueError("need at least one inducing point")
        if self.cov_structure not in (COV_DIAGONAL, COV_BLOCK):
            raise ValueError(f"unknown covariance structure {self.cov_structure!r}")
        if self.max_iters < 0:
            raise ValueError("max_iters must be nonnegative")


def _default_prior(kind):
    return PriorMean.log() if kind == KIND_SIMPLEX else PriorMean.identity()


def _kernel_ladder(scores):
    """Deterministic initial-hyperparameter candidates: the documented
    defaults plus lengthscales scaled to the observed input spread."""
    spread = float(scores.max() - scores.min())
    if spread <= 0.0:
        spread = 1.0
    nv = 1e-4
    return [
        KernelParams.default(),
        KernelParams.from_values(1.0, 0.7 * spread, nv),
        KernelParams.from_values(2.0, 0.7 * spread, nv),
        KernelParams.from_values(0.5, 0.35 * spread, nv),
        KernelParams.from_values(1.0, 0.35 * spread, nv),
        KernelParams.from_values(1.0, 0.1 * spread, nv),
    ]


def _model_args(model):
    p = model.prior_mean
    return dict(variant=p.variant, a=p.a, b=p.b,
                diagonal=model.cov_structure == COV_DIAGONAL)


def marginal_q(model, z_row, include_noise=True):
    """Variational marginal of the latent values at one sample's scores.

    Returns ``(phi, cov)`` where ``cov`` is the (K,) diagonal for a
    diagonal model and the full (K, K) block otherwise. Training-side
    marginals include the white-noise variance; pass
    ``include_noise=False`` for the predictive (noise-free) marginal.
    """
    z_row = np.asarray(z_row, dtype=np.float64)
    if z_row.ndim != 1 or z_row.shape[0] < 1:
        raise ValueError("z_row must be a non-empty 1-D array")
    if not np.all(np.isfinite(z_row)):
        raise ValueError("z_row must be finite")
    args = _model_args(model)
    phi, cov = core.marginals(
        np, model.variational_mean, model.variational_scale,
        model.inducing_inputs, model.kernel.theta, z_row[None, :],
        args["variant"], args["a"], args["b"], args["diagonal"],
        include_noise, JITTER,
    )
    return phi[0], cov[0]


def expected_loglik_taylor(phi, cov, label):
    """Taylor-approximated expected categorical log-likelihood.

    ``phi`` is the (K,) marginal mean, ``cov`` the marginal covariance as
    either a (K,) diagonal or a full (K, K) matrix, ``label`` the observed
    class index.
    """
    phi = np.asarray(phi, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    if phi.ndim != 1:
        raise ValueError("phi must be 1-D")
    k = phi.shape[0]
    diagonal = cov.ndim == 1
    if cov.shape not in ((k,), (k, k)):
        raise ValueError("cov shape does not match phi")
    label = int(label)
    if not 0 <= label < k:
        raise ValueError("label out of range")
    terms = core.taylor_expected_loglik(
        np, phi[None, :], cov[None, ...], np.array([label]), diagonal
    )
    return float(terms[0])


def kl_to_prior(model):
    """KL divergence from the variational distribution to the GP prior at
    the inducing inputs."""
    args = _model_args(model)
    return float(core.kl_divergence(
        np, model.variational_mean, model.variational_scale,
        model.inducing_inputs, model.kernel.theta,
        args["variant"], args["a"], args["b"], JITTER,
    ))


def _data_arrays(model, data):
    if data is None:
        return np.zeros((0, 2)), np.zeros(0, dtype=np.int64)
    if data.kind != model.input_kind:
        raise ValueError(
            f"data kind {data.kind!r} does not match model {model.input_kind!r}"
        )
    return data.scores, data.labels


def elbo(model, data):
    """Evidence lower bound of the model on a prediction set (``None``
    counts as an empty set, giving minus the KL term)."""
    z, labels = _data_arrays(model, data)
    args = _model_args(model)
    return float(core.elbo_value(
        np, model.variational_mean, model.variational_scale,
        model.inducing_inputs, model.kernel.theta, z, labels,
        args["variant"], args["a"], args["b"], args["diagonal"], JITTER,
    ))


def elbo_grad(model, data):
    """Gradient of the ELBO with respect to the packed parameter vector
    (same layout as ``model.pack()``), computed by automatic
    differentiation in float64."""
    z, labels = _data_arrays(model, data)
    args = _model_args(model)
    _, grad = _autodiff.elbo_value_and_grad(
        model.pack(), z, labels, model.num_inducing,
        args["variant"], args["a"], args["b"], args["diagonal"], JITTER,
    )
    return grad


def _initial_model(data, config, kernel):
    prior = config.prior_mean or _default_prior(data.kind)
    num = config.num_inducing
    w = np.quantile(data.scores.ravel(), np.linspace(0.0, 1.0, num))
    theta = kernel.theta
    sigma_u = core.inducing_cov(np, w, theta, JITTER)
    scale = np.linalg.cholesky(sigma_u)
    return GpCalibrationModel(
        inducing_inputs=w,
        variational_mean=prior(w),
        variational_scale=scale,
        kernel=kernel,
        prior_mean=prior,
        input_kind=data.kind,
        cov_structure=config.cov_structure,
    )


def _whitened_start(w, theta):
    """Optimizer start vector [v, tril(V) raw, w, theta] at q = prior:
    v = 0 and V = I (identity diagonal softplus-inverted)."""
    num = w.shape[0]
    eye_tril = core.tril_values(np.eye(num))
    rows, cols = np.tril_indices(num)
    eye_tril[rows == cols] = _autodiff.inv_softplus(1.0)
    return np.concatenate([np.zeros(num), eye_tril, w, theta])


def _sorted_inducing(model):
    """Reorder inducing points ascending, permuting the variational
    distribution consistently (S -> P S P^T, then re-factor)."""
    w = model.inducing_inputs
    perm = np.argsort(w, kind="stable")
    if np.array_equal(perm, np.arange(w.shape[0])):
        return model
    s_cov = model.variational_scale @ model.variational_scale.T
    s_perm = s_cov[np.ix_(perm, perm)]
    try:
        scale = np.linalg.cholesky(s_perm)
    except np.linalg.LinAlgError:
        scale = np.linalg.cholesky(s_perm + JITTER * np.eye(w.shape[0]))
    return dataclasses.replace(
        model,
        inducing_inputs=w[perm],
        variational_mean=model.variational_mean[perm],
        variational_scale=scale,
    )


def _optimize_restart(start, data, config, degenerate, trace):
    """One L-BFGS-B run from a given initial model, in whitened raw
    coordinates, returning the re-sorted fitted model."""
    args = _model_args(start)
    fun = _autodiff._neg_elbo_whitened(
        config.num_inducing, args["variant"], float(args["a"]), float(args["b"]),
        args["diagonal"], float(JITTER),
    )
    z = np.asarray(data.scores)
    labels = np.asarray(data.labels)

    def objective(vec):
        value, grad = fun(vec, z, labels)
        value = float(value)
        grad = np.asarray(grad, dtype=np.float64)
        if not (np.isfinite(value) and np.all(np.isfinite(grad))):
            return _NAN_PENALTY, np.zeros_like(vec)
        return value, grad

    callback = None if trace is None else (lambda xk: trace(-objective(xk)[0]))
    raw0 = _whitened_start(start.inducing_inputs, start.kernel.theta)
    initial_elbo = -objective(raw0)[0]
    if config.max_iters == 0:
        return dataclasses.replace(
            start,
            diagnostics=FitDiagnostics(
                initial_elbo=float(initial_elbo),
                final_elbo=float(initial_elbo),
                iterations=0,
                converged=False,
                degenerate_labels=bool(degenerate),
            ),
        )
    result = scipy.optimize.minimize(
        objective, raw0, jac=True, method="L-BFGS-B", callback=callback,
        options={"maxiter": config.max_iters, "ftol": config.tol},
    )
    v, v_scale, w, theta = _autodiff.unpack(np, result.x, config.num_inducing,
                                            raw_diag=True)
    m, scale = _autodiff.unwhiten(np, v, v_scale, w, theta, args["variant"],
                                  args["a"], args["b"], JITTER)
    fitted = dataclasses.replace(
        start,
        inducing_inputs=w,
        variational_mean=m,
        variational_scale=scale,
        kernel=KernelParams.from_theta(theta),
        diagnostics=FitDiagnostics(
            initial_elbo=float(initial_elbo),
            final_elbo=float(-result.fun),
            iterations=int(result.nit),
            converged=bool(result.success),
            degenerate_labels=bool(degenerate),
        ),
    )
    return _sorted_inducing(fitted)


def _decision_agreement(model, data):
    """Fraction of training rows whose argmax the calibration map keeps."""
    calibrated = predict_mean(model, data)
    return float(np.mean(calibrated.argmax(axis=1) == data.predictions))


def fit(data, config=None, trace=None):
    """Fit the latent-GP calibration map by maximizing the ELBO.

    Each restart optimizes the variational parameters, inducing
    locations, and kernel hyperparameters jointly with L-BFGS-B (the
    variational scale diagonal runs through a softplus so it stays
    positive). With the default ``kernel=None`` config, several
    deterministic initial-hyperparameter candidates are tried; among
    restarts that keep at least 99% of the training argmax decisions the
    one with the best ELBO wins (a calibration map is meant to adjust
    confidence, not flip predictions), otherwise the most
    decision-preserving restart is returned. Requires at least as many
    samples as inducing points. ``trace``, if given, is called with the
    ELBO after every accepted optimizer iteration of every restart.
    """
    if not isinstance(data, PredictionSet):
        raise TypeError("data must be a PredictionSet")
    config = config or GpFitConfig()
    n = data.labels.shape[0]
    if n < config.num_inducing:
        raise ValueError(
            f"need at least num_inducing={config.num_inducing} samples, got {n}"
        )
    degenerate = np.unique(data.labels).shape[0] < 2

    if config.kernel is not None:
        kernels = [config.kernel]
    else:
        kernels = _kernel_ladder(data.scores)
    if config.max_iters == 0:
        start = _initial_model(data, config, kernels[0])
        return _optimize_restart(start, data, config, degenerate, trace)

    fitted = [
        _optimize_restart(_initial_model(data, config, kernel), data, config,
                          degenerate, trace)
        for kernel in kernels
    ]
    if len(fitted) == 1:
        return fitted[0]
    agreement = [_decision_agreement(model, data) for model in fitted]
    eligible = [i for i, a in enumerate(agreement) if a >= DECISION_AGREEMENT]
    if eligible:
        return max((fitted[i] for i in eligible),
                   key=lambda m: m.diagnostics.final_elbo)
    return fitted[int(np.argmax(agreement))]


def _predictive_marginals(model, scores):
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[1] < 1:
        raise ValueError("scores must be a (N, K) array")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    args = _model_args(model)
    return core.marginals(
        np, model.variational_mean, model.variational_scale,
        model.inducing_inputs, model.kernel.theta, scores,
        args["variant"], args["a"], args["b"], args["diagonal"],
        False, JITTER,
    )


def _as_scores(model, inputs):
    if isinstance(inputs, PredictionSet):
        if inputs.kind != model.input_kind:
            raise ValueError(
                f"input kind {inputs.kind!r} does not match model "
                f"{model.input_kind!r}"
            )
        return inputs.scores
    return np.asarray(inputs, dtype=np.float64)


def predict_mean(model, inputs):
    """Plug-in calibrated probabilities: softargmax of the predictive
    marginal means. Accepts a PredictionSet or a raw (N, K) score array."""
    phi, _ = _predictive_marginals(model, _as_scores(model, inputs))
    return softargmax(phi)


def predict_mc(model, inputs, num_samples=DEFAULT_MC_SAMPLES, seed=0):
    """Monte Carlo calibrated probabilities.

    Draws latent samples from each row's noise-free predictive marginal
    and averages their softargmax. Each row uses its own counter-based
    bit generator keyed by (seed, row index), so results do not depend on
    batch order or composition.
    """
    if num_samples < 1:
        raise ValueError("num_samples must be positive")
    scores = _as_scores(model, inputs)
    phi, cov = _predictive_marginals(model, scores)
    n, k = phi.shape
    diagonal = model.cov_structure == COV_DIAGONAL
    if diagonal:
        scale = np.sqrt(np.clip(cov, 0.0, None))
    else:
        scale = np.linalg.cholesky(cov + JITTER * np.eye(k)[None, :, :])
    out = np.empty((n, k))
    for i in range(n):
        rng = np.random.Generator(np.random.Philox(key=[int(seed), i]))
        noise = rng.standard_normal((num_samples, k))
        if diagonal:
            draws = phi[i] + noise * scale[i]
        else:
            draws = phi[i] + noise @ scale[i].T
        out[i] = softargmax(draws).mean(axis=0)
    return out


def latent_curve(model, grid):
    """Pointwise posterior mean and variance of the latent function on a
    1-D grid of score values (noise-free; variance floored at 1e-12)."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 1:
        raise ValueError("grid must be 1-D")
    if grid.shape[0] == 0:
        empty = np.zeros(0)
        return LatentPosterior(grid=grid, mean=empty.copy(), variance=empty.copy())
    if not np.all(np.isfinite(grid)):
        raise ValueError("grid must be finite")
    args = _model_args(model)
    phi, cov = core.marginals(
        np, model.variational_mean, model.variational_scale,
        model.inducing_inputs, model.kernel.theta, grid[:, None],
        args["variant"], args["a"], args["b"], True, False, JITTER,
    )
    return LatentPosterior(
        grid=grid,
        mean=phi[:, 0],
        variance=np.clip(cov[:, 0], VARIANCE_FLOOR, None),
    )
