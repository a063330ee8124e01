"""Reference posteriors for small problems with known hyperparameters.

With class means, class precisions and noise precisions fixed, p(f | z, g) is
Gaussian and p(z | g) is available up to a constant in closed form, so tiny
grids can be solved by enumerating every label configuration. A Gibbs
sampler over (z, f) provides a second, stochastic reference.
"""

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .model import Hyperparameters
from .potts import PAIR_MULTIPLICITY, PottsParams, checkerboard, like_neighbor_counts, log_prior_unnormalized

MAX_CONFIGURATIONS = 2**20
_CHUNK = 2048


class EnumerationTooLarge(ValueError):
    pass


@dataclass
class PinnedModel:
    op: object
    g: np.ndarray
    shape: tuple
    means: np.ndarray  # (K,)
    precisions: np.ndarray  # (K,)
    noise_precision: np.ndarray  # (M,)
    potts: PottsParams

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=float).ravel()
        self.shape = tuple(int(s) for s in self.shape)
        self.means = np.asarray(self.means, dtype=float).ravel()
        self.precisions = np.broadcast_to(np.asarray(self.precisions, dtype=float), self.means.shape).copy()
        self.noise_precision = np.broadcast_to(
            np.asarray(self.noise_precision, dtype=float), self.g.shape
        ).copy()
        if np.any(self.precisions <= 0) or np.any(self.noise_precision <= 0):
            raise ValueError("all precisions must be > 0")
        if self.means.size != self.potts.K:
            raise ValueError("one class mean per Potts class required")

    @property
    def N(self):
        return int(np.prod(self.shape))

    @property
    def K(self):
        return self.means.size


def pinned_hyperparameters(pm, shape_param=1e6, mean_variance=1e-8):
    """Hyperparameters whose priors concentrate on the pinned values.

    Gamma priors get shape ``shape_param`` and mean equal to the pinned
    precision; class-mean priors get variance ``mean_variance`` around the
    pinned means. Requires a homoscedastic noise precision.
    """
    noise = np.unique(pm.noise_precision)
    if noise.size != 1:
        raise ValueError("pinning needs one common noise precision")
    return Hyperparameters(
        alpha_zeta0=shape_param,
        beta_zeta0=shape_param / noise[0],
        alpha0=shape_param,
        beta0=shape_param / pm.precisions,
        m0=pm.means,
        v0=mean_variance,
        potts=pm.potts,
    )


@dataclass
class ExactPosterior:
    marginals: np.ndarray  # (N, K) P(z_j = k | g)
    mean: np.ndarray  # (N,) E[f_j | g]
    variance: np.ndarray  # (N,) Var[f_j | g]
    log_evidence: float  # ln p(g) up to -ln Z
    configurations: np.ndarray  # (K**N, N)
    probabilities: np.ndarray  # (K**N,)


def _gaussian_terms(pm, H, configs):
    """Log evidence ln p(g | z) and moments of f | z, g for a batch of configs."""
    w = pm.noise_precision
    HtWH = H.T @ (w[:, None] * H)
    HtWg = H.T @ (w * pm.g)
    gWg = float(pm.g @ (w * pm.g))
    lam = pm.precisions[configs]  # (C, N)
    mz = pm.means[configs]
    P = HtWH[None, :, :] + lam[:, :, None] * np.eye(pm.N)[None, :, :]
    b = lam * mz + HtWg[None, :]
    L = np.linalg.cholesky(P)
    mu = np.linalg.solve(P, b[..., None])[..., 0]
    cov_diag = np.diagonal(np.linalg.inv(P), axis1=1, axis2=2)
    logdet_P = 2.0 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1)
    # ln|S| = ln|V_zeta| + ln|V_z| + ln|P| for S = H V_z H^T + V_zeta
    logdet_S = -np.log(w).sum() - np.log(lam).sum(axis=1) + logdet_P
    quad = gWg + (lam * mz**2).sum(axis=1) - (b * mu).sum(axis=1)
    M = pm.g.size
    loglik = -0.5 * (M * np.log(2.0 * np.pi) + logdet_S + quad)
    return loglik, mu, cov_diag


def exact_posterior(pm):
    """Exact label marginals and posterior moments of f by full enumeration."""
    n_configs = pm.K**pm.N
    if n_configs > MAX_CONFIGURATIONS:
        raise EnumerationTooLarge(
            f"{pm.K}^{pm.N} configurations exceed {MAX_CONFIGURATIONS}; use gibbs_reference"
        )
    H = pm.op.to_dense()
    configs = np.array(list(itertools.product(range(pm.K), repeat=pm.N)), dtype=int)
    log_w = np.empty(n_configs)
    mus = np.empty((n_configs, pm.N))
    variances = np.empty((n_configs, pm.N))
    for start in range(0, n_configs, _CHUNK):
        chunk = configs[start : start + _CHUNK]
        loglik, mu, var = _gaussian_terms(pm, H, chunk)
        prior = np.array([log_prior_unnormalized(c.reshape(pm.shape), pm.potts) for c in chunk])
        log_w[start : start + _CHUNK] = prior + loglik
        mus[start : start + _CHUNK] = mu
        variances[start : start + _CHUNK] = var
    log_evidence = float(logsumexp(log_w))
    p = np.exp(log_w - log_evidence)
    marginals = np.stack([(p[:, None] * (configs == k)).sum(axis=0) for k in range(pm.K)], axis=1)
    mean = p @ mus
    second = p @ (variances + mus**2)
    return ExactPosterior(
        marginals=marginals,
        mean=mean,
        variance=second - mean**2,
        log_evidence=log_evidence,
        configurations=configs,
        probabilities=p,
    )


@dataclass
class GibbsEstimate:
    marginals: np.ndarray
    mean: np.ndarray
    marginals_se: np.ndarray
    mean_se: np.ndarray
    n_samples: int


def _batch_standard_error(samples, n_batches):
    usable = (samples.shape[0] // n_batches) * n_batches
    batches = samples[:usable].reshape((n_batches, -1) + samples.shape[1:]).mean(axis=1)
    return batches.std(axis=0, ddof=1) / np.sqrt(n_batches)


def gibbs_reference(pm, samples, burn_in, seed, n_batches=20):
    """Alternate exact f | z, g draws with checkerboard z | f site updates.

    Estimates are Rao-Blackwellized: label marginals average the site
    conditionals and the posterior mean averages E[f | z, g]. Standard errors
    come from ``n_batches`` batch means.
    """
    if samples < 1000:
        raise ValueError("need at least 1000 samples")
    rng = np.random.default_rng(seed)
    H = pm.op.to_dense()
    K, N = pm.K, pm.N
    w = pm.noise_precision
    HtWH = H.T @ (w[:, None] * H)
    HtWg = H.T @ (w * pm.g)
    coupling = PAIR_MULTIPLICITY * pm.potts.gamma0
    colours = checkerboard(pm.shape).ravel()
    log_norm = 0.5 * np.log(pm.precisions)

    z = rng.choice(K, size=N, p=np.exp(pm.potts.alpha))
    probs_out = np.empty((samples, N, K))
    means_out = np.empty((samples, N))
    for it in range(burn_in + samples):
        lam = pm.precisions[z]
        P = HtWH + np.diag(lam)
        L = np.linalg.cholesky(P)
        mu = np.linalg.solve(P, lam * pm.means[z] + HtWg)
        f = mu + np.linalg.solve(L.T, rng.standard_normal(N))
        cond = np.empty((N, K))
        for colour in (colours, ~colours):
            counts = like_neighbor_counts(z.reshape(pm.shape), K).reshape(N, K)
            logits = (
                pm.potts.alpha
                + coupling * counts
                + log_norm
                - 0.5 * pm.precisions * (f[:, None] - pm.means) ** 2
            )
            logits -= logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            cond[colour] = p[colour]
            u = rng.random(N)
            draw = (u[:, None] >= np.cumsum(p, axis=1)).sum(axis=1)
            z = np.where(colour, np.minimum(draw, K - 1), z)
        if it >= burn_in:
            probs_out[it - burn_in] = cond
            means_out[it - burn_in] = mu
    return GibbsEstimate(
        marginals=probs_out.mean(axis=0),
        mean=means_out.mean(axis=0),
        marginals_se=_batch_standard_error(probs_out, n_batches),
        mean_se=_batch_standard_error(means_out, n_batches),
        n_samples=samples,
    )


def conjugate_gaussian_posterior(op, g, prior_mean, prior_precision, noise_precision):
    """Posterior mean and marginal variances of f for a Gaussian prior (K = 1)."""
    H = op.to_dense()
    w = np.broadcast_to(np.asarray(noise_precision, dtype=float), (H.shape[0],))
    lam = np.broadcast_to(np.asarray(prior_precision, dtype=float), (H.shape[1],))
    m = np.broadcast_to(np.asarray(prior_mean, dtype=float), (H.shape[1],))
    P = H.T @ (w[:, None] * H) + np.diag(lam)
    mean = np.linalg.solve(P, lam * m + H.T @ (w * np.asarray(g, dtype=float)))
    return mean, np.diag(np.linalg.inv(P))


def pinned_vba(pm, shape_param=1e6, mean_variance=1e-8, tol=1e-10, max_iter=500):
    """Run the variational solver on ``pm`` with hyperpriors pinned tightly.

    Starts from H^T g rescaled to the data range, labelled by the nearest
    pinned class mean. Returns (state, trace, hyperparameters).
    """
    from .initseg import class_statistics, fallback_initial_volume, initialize_state
    from .vba import iterate

    hyper = pinned_hyperparameters(pm, shape_param, mean_variance)
    f0 = fallback_initial_volume(pm.op, pm.g)
    z0 = np.argmin(np.abs(f0[:, None] - pm.means[None, :]), axis=1)
    init = class_statistics(f0, z0, pm.K)
    state = initialize_state(f0, init, pm.op, hyper, pm.g, shape=pm.shape)
    state, trace = iterate(state, pm.op, pm.g, hyper, tol=tol, max_iter=max_iter)
    return state, trace, hyper


def synthetic_pinned_model(shape, op, means, class_variance, gamma0, snr_db, seed, sweeps=50):
    """Draw z from the Potts prior, f | z and g = H f + noise; pin the truth."""
    from .model import simulate_data
    from .potts import sample_potts

    means = np.asarray(means, dtype=float)
    K = means.size
    potts = PottsParams.uniform(K, gamma0)
    rng = np.random.default_rng(seed)
    z = sample_potts(shape, potts, sweeps, rng.integers(2**63)).ravel()
    f = means[z] + np.sqrt(class_variance) * rng.standard_normal(z.size)
    g, rho = simulate_data(op, f, snr_db, rng.integers(2**63))
    pm = PinnedModel(op, g, shape, means, np.full(K, 1.0 / class_variance), rho, potts)
    return pm, f, z
