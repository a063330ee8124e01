"""Initial segmentation of a first reconstruction and the starting posterior state."""

import logging
from dataclasses import dataclass

import numpy as np

from .vba import PosteriorState

log = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-8  # relative to the squared dynamic range


@dataclass
class InitialClasses:
    z0: np.ndarray  # 0-based labels, flat
    means: np.ndarray
    variances: np.ndarray
    counts: np.ndarray

    @property
    def K(self):
        return self.means.size


def class_statistics(f0, z0, K):
    """Per-class mean, variance (floored) and count of ``f0`` under ``z0``.

    Empty classes get the mid-range as mean and the squared range as variance.
    """
    f0 = np.asarray(f0, dtype=float).ravel()
    z0 = np.asarray(z0, dtype=int).ravel()
    lo, hi = float(f0.min()), float(f0.max())
    dynamic = hi - lo if hi > lo else 1.0
    floor = VARIANCE_FLOOR * dynamic**2
    counts = np.bincount(z0, minlength=K)
    means = np.full(K, 0.5 * (lo + hi))
    variances = np.full(K, dynamic**2)
    for k in range(K):
        if counts[k]:
            values = f0[z0 == k]
            means[k] = values.mean()
            variances[k] = values.var()
    if np.any(variances < floor):
        log.warning("class variances %s floored at %.3g", np.flatnonzero(variances < floor) + 1, floor)
        variances = np.maximum(variances, floor)
    return InitialClasses(z0=z0, means=means, variances=variances, counts=counts)


def kmeans_segment(f0, K, max_iter=100):
    """Scalar Lloyd k-means on intensities, started from evenly spaced quantiles.

    Ties go to the lower class index; an empty cluster is reseeded at the
    intensity farthest from its assigned centre.
    """
    f0 = np.asarray(f0, dtype=float).ravel()
    if K < 1:
        raise ValueError("K must be >= 1")
    if K > 1 and f0.min() == f0.max():
        raise ValueError("constant volume cannot be split into several classes")
    if K > np.unique(f0).size:
        raise ValueError(f"K={K} exceeds the number of distinct intensities")
    centers = np.quantile(f0, (np.arange(K) + 0.5) / K)
    z = None
    for _ in range(max_iter):
        dist = np.abs(f0[:, None] - centers[None, :])
        new_z = np.argmin(dist, axis=1)
        counts = np.bincount(new_z, minlength=K)
        for k in np.flatnonzero(counts == 0):
            far = int(np.argmax(np.abs(f0 - centers[new_z])))
            centers[k] = f0[far]
            new_z = np.argmin(np.abs(f0[:, None] - centers[None, :]), axis=1)
        if z is not None and np.array_equal(new_z, z):
            break
        z = new_z
        sums = np.bincount(z, weights=f0, minlength=K)
        counts = np.bincount(z, minlength=K)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty]
    return class_statistics(f0, z, K)


def otsu_threshold(f0, bins=256):
    """Threshold maximizing the between-class variance of a ``bins`` histogram.

    Class 0 is ``f0 < threshold`` (the lower histogram bins). Ties resolve to
    the lowest threshold.
    """
    f0 = np.asarray(f0, dtype=float).ravel()
    lo, hi = f0.min(), f0.max()
    if lo == hi:
        raise ValueError("constant volume has no threshold")
    hist, edges = np.histogram(f0, bins=bins, range=(lo, hi))
    p = hist / hist.sum()
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(p)[:-1]
    mu0_sum = np.cumsum(p * centers)[:-1]
    mu_t = (p * centers).sum()
    w1 = 1.0 - w0
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mu_t * w0 - mu0_sum) ** 2 / (w0 * w1)
    between[(w0 <= 0) | (w1 <= 0)] = -np.inf
    t = int(np.argmax(between))
    return edges[t + 1]


def otsu_segment(f0, bins=256):
    f0 = np.asarray(f0, dtype=float).ravel()
    z = (f0 >= otsu_threshold(f0, bins)).astype(int)
    return class_statistics(f0, z, 2)


def initialize_state(f0, init, op, hyper, g, shape=None):
    """Starting PosteriorState built from ``f0`` and its initial segmentation."""
    f0 = np.asarray(f0, dtype=float)
    shape = tuple(f0.shape) if shape is None else tuple(shape)
    f0 = f0.ravel()
    g = np.asarray(g, dtype=float).ravel()
    N, K = f0.size, init.K
    if init.z0.size != N or op.domain_size != N or op.range_size != g.size or hyper.K != K:
        raise ValueError("inconsistent sizes between volume, segmentation, operator, data and K")
    variances = np.asarray(init.variances, dtype=float)
    if np.any(variances <= 0):
        dynamic = float(np.ptp(f0)) or 1.0
        log.warning("nonpositive initial class variances floored")
        variances = np.maximum(variances, VARIANCE_FLOOR * dynamic**2)
    counts = np.asarray(init.counts, dtype=float)
    onehot = init.z0[:, None] == np.arange(K)[None, :]

    m = np.where(onehot, f0[:, None], init.means[None, :])
    qz = onehot.astype(float)
    gram = op.weighted_gram_diagonal(np.ones(op.range_size))
    noise_ratio = hyper.alpha_zeta0 / hyper.beta_zeta0
    v = 1.0 / (1.0 / variances[None, :] + noise_ratio * gram[:, None])
    residual = g - op.apply(f0)
    v0 = 1.0 / (1.0 / hyper.v0 + counts / variances)
    m0 = v0 * (hyper.m0 / hyper.v0 + counts * init.means / variances)
    return PosteriorState(
        shape=shape,
        m=m,
        v=v,
        qz=qz,
        alpha_zeta=np.full(g.size, hyper.alpha_zeta0 + 0.5),
        beta_zeta=hyper.beta_zeta0 + 0.5 * residual**2,
        m0=m0,
        v0=v0,
        alpha0=hyper.alpha0 + 0.5 * counts,
        beta0=hyper.beta0 + 0.5 * counts * variances,
    )


def fallback_initial_volume(op, g):
    """H^T g affinely rescaled onto the range of the data."""
    back = op.adjoint(g)
    lo, hi = back.min(), back.max()
    if hi == lo:
        return np.full(op.domain_size, float(np.mean(g)))
    return g.min() + (back - lo) * (g.max() - g.min()) / (hi - lo)


def least_squares_initial_volume(op, g, iterations=30, damping=0.0):
    """A few LSQR iterations on min ||g - H f||^2 + damping^2 ||f||^2.

    Early stopping regularizes; useful when H^T g has the wrong scale, as
    with ray-sum data.
    """
    from scipy.sparse.linalg import LinearOperator as ScipyOperator
    from scipy.sparse.linalg import lsqr

    wrapped = ScipyOperator(op.shape, matvec=op.apply, rmatvec=op.adjoint, dtype=float)
    return lsqr(wrapped, np.asarray(g, dtype=float), damp=damping, iter_lim=iterations)[0]
