"""Potts label-field prior on a 2-D or 3-D grid.

Labels are stored 0-based internally (``0..K-1``); files and reports use
``1..K``. Neighbourhoods are the axis-adjacent voxels without wrap-around.

The pair term of the energy is an ordered sum over (j, i in V(j)), so every
unordered neighbour pair enters twice. The Gibbs site conditional and the
mean-field label update therefore carry a factor ``PAIR_MULTIPLICITY * gamma0``.
"""

from dataclasses import dataclass

import numpy as np

PAIR_MULTIPLICITY = 2


@dataclass(frozen=True)
class PottsParams:
    """Class count, per-class external field ``alpha`` and granularity ``gamma0``."""

    alpha: np.ndarray
    gamma0: float = 1.0

    def __post_init__(self):
        alpha = np.array(self.alpha, dtype=float).ravel()
        alpha.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "gamma0", float(self.gamma0))
        if alpha.size < 1:
            raise ValueError("need at least one class")
        if self.gamma0 < 0:
            raise ValueError(f"gamma0 must be >= 0, got {self.gamma0}")
        total = np.exp(alpha).sum()
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"sum(exp(alpha)) must be 1, got {total!r}")

    @property
    def K(self):
        return self.alpha.size

    @classmethod
    def uniform(cls, K, gamma0=1.0):
        return cls(np.full(K, -np.log(K)), gamma0)

    @classmethod
    def from_proportions(cls, proportions, gamma0=1.0):
        p = np.asarray(proportions, dtype=float)
        return cls(np.log(p / p.sum()), gamma0)


def neighbors(shape, j):
    """Flat indices of the axis-adjacent neighbours of flat voxel ``j``."""
    shape = tuple(int(s) for s in shape)
    n = int(np.prod(shape))
    if not 0 <= j < n:
        raise IndexError(f"voxel {j} out of range for grid {shape}")
    coords = np.unravel_index(j, shape)
    out = []
    for axis, size in enumerate(shape):
        for step in (-1, 1):
            c = list(coords)
            c[axis] += step
            if 0 <= c[axis] < size:
                out.append(int(np.ravel_multi_index(c, shape)))
    return out


def neighbor_sum(field, ndim=None):
    """Sum of each site's axis neighbours (zero outside the grid).

    ``field`` may carry extra trailing axes (e.g. a class axis) when ``ndim``
    is given: only the first ``ndim`` axes are spatial.
    """
    field = np.asarray(field, dtype=float)
    ndim = field.ndim if ndim is None else ndim
    out = np.zeros_like(field)
    for axis in range(ndim):
        lead = (slice(None),) * axis
        out[lead + (slice(1, None),)] += field[lead + (slice(None, -1),)]
        out[lead + (slice(None, -1),)] += field[lead + (slice(1, None),)]
    return out


def _batched_neighbor_sum(field, ndim):
    # spatial axes are the last ``ndim`` axes, after a leading batch axis
    out = np.zeros_like(field)
    for axis in range(1, ndim + 1):
        lead = (slice(None),) * axis
        out[lead + (slice(1, None),)] += field[lead + (slice(None, -1),)]
        out[lead + (slice(None, -1),)] += field[lead + (slice(1, None),)]
    return out


def like_neighbor_counts(labels, K):
    """Array (..., K) holding, per site, how many neighbours carry each class."""
    labels = np.asarray(labels)
    onehot = (labels[..., None] == np.arange(K)).astype(float)
    return neighbor_sum(onehot, ndim=labels.ndim)


def checkerboard(shape):
    """Boolean mask of the even sites of a two-colouring of the grid."""
    idx = np.indices(shape).sum(axis=0)
    return idx % 2 == 0


def _gibbs_sweeps(labels, params, sweeps, rng):
    """In-place checkerboard Gibbs sweeps on a batch of fields ``(B, *shape)``."""
    K = params.K
    ndim = labels.ndim - 1
    colours = checkerboard(labels.shape[1:])
    coupling = PAIR_MULTIPLICITY * params.gamma0
    classes = np.arange(K)
    for _ in range(sweeps):
        for colour in (colours, ~colours):
            onehot = (labels[..., None] == classes).astype(float)
            counts = np.stack(
                [_batched_neighbor_sum(onehot[..., k], ndim) for k in range(K)], axis=-1
            )
            logits = params.alpha + coupling * counts[:, colour]
            logits -= logits.max(axis=-1, keepdims=True)
            prob = np.exp(logits)
            cdf = np.cumsum(prob, axis=-1)
            u = rng.random(cdf.shape[:-1]) * cdf[..., -1]
            draw = (u[..., None] >= cdf).sum(axis=-1)
            labels[:, colour] = np.minimum(draw, K - 1)
    return labels


def sample_potts(shape, params, sweeps, seed, n_chains=None, init=None):
    """Draw a label field from the Potts prior by checkerboard Gibbs sweeps.

    Starts from independent draws of exp(alpha) unless ``init`` is given.
    With ``n_chains`` set, runs that many independent chains at once and
    returns an array of shape ``(n_chains, *shape)``. Labels are 0-based.
    """
    if sweeps < 1:
        raise ValueError("need at least one sweep")
    shape = tuple(int(s) for s in shape)
    rng = np.random.default_rng(seed)
    batch = 1 if n_chains is None else int(n_chains)
    if init is None:
        labels = rng.choice(params.K, size=(batch,) + shape, p=np.exp(params.alpha))
    else:
        labels = np.broadcast_to(np.asarray(init, dtype=int), (batch,) + shape).copy()
    if params.K > 1:
        _gibbs_sweeps(labels, params, sweeps, rng)
    return labels[0] if n_chains is None else labels


def log_prior_unnormalized(z, params):
    """Potts log-prior without the partition function.

    sum_j [alpha_{z_j} + gamma0 * sum_{i in V(j)} delta(z_j - z_i)]
    """
    z = np.asarray(z)
    unary = params.alpha[z].sum()
    return float(unary + params.gamma0 * like_pair_count(z))


def like_pair_count(z):
    """Number of ordered like-labelled neighbour pairs (each pair counted twice)."""
    z = np.asarray(z)
    total = 0
    for axis in range(z.ndim):
        a = np.take(z, np.arange(1, z.shape[axis]), axis=axis)
        b = np.take(z, np.arange(0, z.shape[axis] - 1), axis=axis)
        total += int((a == b).sum())
    return 2 * total


def like_neighbor_fraction(z):
    """Fraction of neighbour pairs sharing a label; a compactness score."""
    z = np.asarray(z)
    pairs = sum((s - 1) * (z.size // s) for s in z.shape)
    if pairs == 0:
        return 1.0
    return like_pair_count(z) / (2.0 * pairs)
