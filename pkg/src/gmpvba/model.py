"""Model constants, their default fixing rule, phantoms and simulated data."""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .potts import PottsParams

log = logging.getLogger(__name__)

NEAR_ZERO = 1e-3


@dataclass(frozen=True)
class Hyperparameters:
    """Fixed constants of the Gauss-Markov-Potts model.

    Gamma laws use the shape/rate convention. ``m0``, ``alpha0`` and ``beta0``
    may be scalars shared by all classes or one value per class.
    """

    alpha_zeta0: float
    beta_zeta0: float
    alpha0: object
    beta0: object
    m0: object
    v0: float
    potts: PottsParams

    def __post_init__(self):
        for name in ("alpha_zeta0", "beta_zeta0", "v0"):
            value = float(getattr(self, name))
            if not value > 0:
                raise ValueError(f"{name} must be > 0, got {value}")
            object.__setattr__(self, name, value)
        for name in ("m0", "alpha0", "beta0"):
            arr = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (self.K,)).copy()
            if name != "m0" and not np.all(arr > 0):
                raise ValueError(f"{name} must be > 0, got {arr}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def K(self):
        return self.potts.K

    def satisfies_ratio_caps(self):
        """Both prior precision means at most 1 (the NaN-avoidance rule)."""
        return self.alpha_zeta0 / self.beta_zeta0 <= 1.0 and bool(np.all(self.alpha0 / self.beta0 <= 1.0))


def fix_hyperparameters(f0, z0, K, snr_db, gamma0=1.0):
    """Default constants from an initial volume ``f0`` and segmentation ``z0``.

    Near-zero Gamma constants keep the priors proper and close to Jeffreys'.
    The class-precision rate is raised so that the noise/class precision
    means differ by the requested SNR while both stay <= 1.
    """
    f0 = np.asarray(f0, dtype=float).ravel()
    z0 = np.asarray(z0).ravel()
    if snr_db < 0:
        raise ValueError("snr_db must be >= 0")
    lo, hi = float(f0.min()), float(f0.max())
    counts = np.bincount(z0, minlength=K).astype(float)
    if counts.size > K:
        raise ValueError(f"segmentation uses labels beyond K={K}")
    empty = counts == 0
    if empty.any():
        log.warning("classes %s are empty in the initial segmentation; using ln(1/N)",
                    list(np.flatnonzero(empty) + 1))
        counts[empty] = 1.0
    # renormalized so that sum(exp(alpha)) = 1 survives the patched classes
    potts = PottsParams(np.log(counts / counts.sum()), gamma0)
    dynamic = hi - lo
    return Hyperparameters(
        alpha_zeta0=NEAR_ZERO,
        beta_zeta0=NEAR_ZERO,
        alpha0=NEAR_ZERO,
        beta0=NEAR_ZERO * 10.0 ** (snr_db / 10.0),
        m0=0.5 * (lo + hi),
        v0=dynamic**2 if dynamic > 0 else 1.0,
        potts=potts,
    )


@dataclass
class Disk:
    center: tuple
    radius: float
    label: int


@dataclass
class Rectangle:
    lower: tuple
    upper: tuple
    label: int


@dataclass
class PhantomSpec:
    """Piecewise-homogeneous phantom: background class plus drawn regions.

    Shapes are drawn in order, later shapes overwriting earlier ones. Labels
    are 0-based. Coordinates are in pixel units, (row, col[, slice]).
    """

    shape: tuple
    means: list
    variances: list
    regions: list = field(default_factory=list)
    background: int = 0

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        if len(self.means) != len(self.variances):
            raise ValueError("need one variance per class mean")
        if len(set(self.means)) != len(self.means):
            raise ValueError("class means must be distinct")
        if any(v < 0 for v in self.variances):
            raise ValueError("class variances must be >= 0")

    @property
    def K(self):
        return len(self.means)


def rasterize(spec):
    """Label field of a phantom spec; warns about overlapping regions."""
    coords = np.indices(spec.shape).astype(float) + 0.5
    z = np.full(spec.shape, spec.background, dtype=int)
    drawn = np.zeros(spec.shape, dtype=bool)
    for region in spec.regions:
        if not 0 <= region.label < spec.K:
            raise ValueError(f"region label {region.label} outside 0..{spec.K - 1}")
        if isinstance(region, Disk):
            d2 = sum((c - x) ** 2 for c, x in zip(coords, region.center))
            mask = d2 <= region.radius**2
        elif isinstance(region, Rectangle):
            mask = np.ones(spec.shape, dtype=bool)
            for c, lo, hi in zip(coords, region.lower, region.upper):
                mask &= (c >= lo) & (c < hi)
        else:
            raise TypeError(f"unknown region {region!r}")
        if not mask.any():
            raise ValueError(f"region {region!r} does not intersect the grid")
        overlap = int((mask & drawn).sum())
        if overlap:
            log.warning("region %r overwrites %d already drawn voxels", region, overlap)
        z[mask] = region.label
        drawn |= mask
    return z


def generate_phantom(spec, seed):
    """Return (f_true, z_true) as arrays of ``spec.shape``; f_j ~ N(m_k, v_k)."""
    rng = np.random.default_rng(seed)
    z = rasterize(spec)
    means = np.asarray(spec.means, dtype=float)
    sds = np.sqrt(np.asarray(spec.variances, dtype=float))
    noise = rng.standard_normal(spec.shape)
    f = means[z] + sds[z] * noise
    return f, z


def default_phantom(shape=(64, 64), means=(1.0, 2.0, 3.0), variances=(1e-4, 1e-4, 1e-4)):
    """Background square with a rectangle and two disks, three classes."""
    ny, nx = shape
    regions = [
        Rectangle((0.15 * ny, 0.1 * nx), (0.55 * ny, 0.45 * nx), 1),
        Disk((0.65 * ny, 0.65 * nx), 0.22 * min(shape), 2),
        Disk((0.3 * ny, 0.72 * nx), 0.12 * min(shape), 1),
        Disk((0.7 * ny, 0.25 * nx), 0.1 * min(shape), 2),
    ]
    return PhantomSpec(shape, list(means), list(variances), regions)


def noise_precision_for_snr(signal, snr_db):
    """Uniform precision giving 10 log10(||Hf||^2 / E||noise||^2) = snr_db."""
    signal = np.asarray(signal, dtype=float)
    power = float(signal @ signal) / signal.size
    if power == 0:
        raise ValueError("H f is zero; the noise level cannot be scaled to an SNR")
    return 10.0 ** (snr_db / 10.0) / power


def simulate_data(op, f_true, snr_db, seed):
    """Return (g, rho_zeta_true). ``snr_db=None`` or ``inf`` gives noiseless data."""
    signal = op.apply(np.ravel(f_true))
    if snr_db is None or math.isinf(snr_db):
        return signal, np.full(signal.size, np.inf)
    rho = noise_precision_for_snr(signal, snr_db)
    rng = np.random.default_rng(seed)
    g = signal + rng.standard_normal(signal.size) / np.sqrt(rho)
    return g, np.full(signal.size, rho)


def segmentation_accuracy(z_hat, z_true, K):
    """Fraction of voxels labelled correctly after the best class relabelling.

    Returns (accuracy, mapping) where ``mapping[k]`` is the true class matched
    to estimated class ``k``.
    """
    from scipy.optimize import linear_sum_assignment

    z_hat = np.asarray(z_hat).ravel()
    z_true = np.asarray(z_true).ravel()
    confusion = np.zeros((K, K))
    np.add.at(confusion, (z_hat, z_true), 1.0)
    rows, cols = linear_sum_assignment(-confusion)
    mapping = np.empty(K, dtype=int)
    mapping[rows] = cols
    return float(confusion[rows, cols].sum() / z_hat.size), mapping
