"""Random instances shared by the solver tests."""

import numpy as np

from gmpvba import initseg, linops, model, potts
from gmpvba.vba import PosteriorState


def random_state(rng, shape, K, M, soft=True):
    N = int(np.prod(shape))
    qz = rng.dirichlet(np.ones(K), size=N) if soft else np.eye(K)[rng.integers(0, K, N)]
    return PosteriorState(
        shape=tuple(shape),
        m=rng.normal(1.0, 1.0, (N, K)),
        v=rng.uniform(0.05, 0.5, (N, K)),
        qz=qz,
        alpha_zeta=rng.uniform(0.5, 5.0, M),
        beta_zeta=rng.uniform(0.1, 2.0, M),
        m0=rng.normal(1.0, 1.0, K),
        v0=rng.uniform(0.01, 0.3, K),
        alpha0=rng.uniform(1.0, 10.0, K),
        beta0=rng.uniform(0.1, 2.0, K),
    )


def random_hyper(rng, K, gamma0=0.5):
    return model.Hyperparameters(
        alpha_zeta0=rng.uniform(0.01, 2.0),
        beta_zeta0=rng.uniform(0.01, 2.0),
        alpha0=rng.uniform(0.01, 2.0, K),
        beta0=rng.uniform(0.01, 2.0, K),
        m0=rng.normal(0.0, 1.0, K),
        v0=rng.uniform(0.5, 5.0),
        potts=potts.PottsParams.from_proportions(rng.uniform(0.2, 1.0, K), gamma0),
    )


def random_problem(rng, shape=(6, 6), K=2, gamma0=0.0, snr_db=15.0, kernel=3):
    """Small blurred Potts instance started from the usual initialization."""
    z = potts.sample_potts(shape, potts.PottsParams.uniform(K, 0.6), 20, rng.integers(2**32))
    means = np.arange(K, dtype=float)
    f = means[z].ravel() + 0.05 * rng.standard_normal(z.size)
    op = linops.ConvolutionOperator(linops.gaussian_kernel(kernel, 0.8), shape)
    g, _ = model.simulate_data(op, f, snr_db, rng.integers(2**32))
    f0 = initseg.fallback_initial_volume(op, g)
    init = initseg.kmeans_segment(f0, K)
    hyper = model.fix_hyperparameters(f0, init.z0, K, snr_db, gamma0)
    state = initseg.initialize_state(f0, init, op, hyper, g, shape=shape)
    return op, g, hyper, state
