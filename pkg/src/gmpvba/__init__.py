"""Variational Bayesian reconstruction and segmentation under a Gauss-Markov-Potts prior.

Typical use::

    from gmpvba import linops, model, initseg, vba

    op = linops.ConvolutionOperator(linops.box_kernel(5), (64, 64))
    f0 = initseg.fallback_initial_volume(op, g)
    init = initseg.kmeans_segment(f0, K=3)
    hyper = model.fix_hyperparameters(f0, init.z0, 3, snr_db=30)
    state = initseg.initialize_state(f0, init, op, hyper, g, shape=(64, 64))
    state, trace = vba.iterate(state, op, g, hyper)
    estimates = vba.extract_estimates(state)
"""

from .initseg import InitialClasses, initialize_state, kmeans_segment, otsu_segment
from .linops import ConvolutionOperator, DenseOperator, DiagonalOperator, LinearOperator, ParallelBeamProjector
from .model import Hyperparameters, PhantomSpec, fix_hyperparameters, generate_phantom, simulate_data
from .potts import PottsParams, sample_potts
from .vba import Estimates, FreeEnergyTrace, PosteriorState, extract_estimates, iterate

__version__ = "0.1.0"

__all__ = [
    "ConvolutionOperator",
    "DenseOperator",
    "DiagonalOperator",
    "Estimates",
    "FreeEnergyTrace",
    "Hyperparameters",
    "InitialClasses",
    "LinearOperator",
    "ParallelBeamProjector",
    "PhantomSpec",
    "PosteriorState",
    "PottsParams",
    "extract_estimates",
    "fix_hyperparameters",
    "generate_phantom",
    "initialize_state",
    "iterate",
    "kmeans_segment",
    "otsu_segment",
    "sample_potts",
    "simulate_data",
]
