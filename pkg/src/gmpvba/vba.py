"""Variational Bayes for linear inverse problems under a Gauss-Markov-Potts prior.

The approximate posterior keeps f_j coupled to its label z_j:

    q = prod_j q(f_j | z_j) q(z_j) * prod_i q(rho_zeta_i) * prod_k q(m_k) q(rho_k)

with Gaussian q(f_j | z_j = k), categorical q(z_j), Gamma noise precisions,
Gaussian class means and Gamma class precisions. ``iterate`` runs the
coordinate updates in a fixed order (volume, labels, noise precisions, class
means, class precisions) and tracks the free energy F = H(q) + E_q[ln p].

Arrays: per-voxel/per-class parameters have shape (N, K), per-measurement
ones (M,), per-class ones (K,). Labels are 0-based.
"""

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .potts import PAIR_MULTIPLICITY, neighbor_sum
from .special import digamma, ln_gamma

log = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))
PROB_FLOOR = 1e-300
DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 200


class NonFiniteFreeEnergy(FloatingPointError):
    """Raised when F stops being finite; ``diagnostics`` names the blocks."""

    def __init__(self, iteration, diagnostics):
        self.iteration = iteration
        self.diagnostics = diagnostics
        bad = [k for k, v in diagnostics.items() if not np.isfinite(v)]
        super().__init__(f"non-finite free energy at iteration {iteration}; blocks: {bad}")


@dataclass
class PosteriorState:
    shape: tuple
    m: np.ndarray  # (N, K) means of q(f_j | z_j = k)
    v: np.ndarray  # (N, K) variances of q(f_j | z_j = k)
    qz: np.ndarray  # (N, K) label probabilities
    alpha_zeta: np.ndarray  # (M,)
    beta_zeta: np.ndarray  # (M,)
    m0: np.ndarray  # (K,) means of q(m_k)
    v0: np.ndarray  # (K,) variances of q(m_k)
    alpha0: np.ndarray  # (K,)
    beta0: np.ndarray  # (K,)

    @property
    def N(self):
        return self.m.shape[0]

    @property
    def K(self):
        return self.m.shape[1]

    @property
    def M(self):
        return self.alpha_zeta.size

    def copy(self):
        return replace(self, **{k: np.array(getattr(self, k)) for k in _ARRAY_FIELDS})

    def check(self):
        """Raise if a distribution parameter left its admissible range."""
        rows = self.qz.sum(axis=1)
        if np.any(self.qz < 0) or np.any(np.abs(rows - 1.0) > 1e-12):
            raise ValueError("label probabilities are not normalized")
        for name in ("v", "v0", "alpha_zeta", "beta_zeta", "alpha0", "beta0"):
            arr = getattr(self, name)
            if not np.all(arr > 0):
                raise ValueError(f"{name} must stay strictly positive")


_ARRAY_FIELDS = ("m", "v", "qz", "alpha_zeta", "beta_zeta", "m0", "v0", "alpha0", "beta0")


@dataclass
class Auxiliaries:
    m_bar: np.ndarray  # mixture mean per voxel
    v_bar: np.ndarray  # mixture of conditional variances
    m2: np.ndarray  # spread of the conditional means
    v2: np.ndarray  # total variance v_bar + m2
    v_zeta: np.ndarray  # beta_zeta / alpha_zeta
    gram_diag: np.ndarray  # [H^T V_zeta^-1 H]_jj
    projection: np.ndarray  # H m_bar
    residual: np.ndarray  # g - H m_bar
    residual_backproj: np.ndarray  # H^T V_zeta^-1 (g - H m_bar)


def compute_auxiliaries(state, op, g, gram_diag=None):
    """Auxiliary quantities of ``state``; pass ``gram_diag`` to reuse it when the
    noise precisions have not changed."""
    q = state.qz
    m_bar = (state.m * q).sum(axis=1)
    v_bar = (state.v * q).sum(axis=1)
    m2 = ((state.m - m_bar[:, None]) ** 2 * q).sum(axis=1)
    v_zeta = state.beta_zeta / state.alpha_zeta
    weights = state.alpha_zeta / state.beta_zeta
    projection = op.apply(m_bar)
    residual = g - projection
    return Auxiliaries(
        m_bar=m_bar,
        v_bar=v_bar,
        m2=m2,
        v2=v_bar + m2,
        v_zeta=v_zeta,
        gram_diag=op.weighted_gram_diagonal(weights) if gram_diag is None else gram_diag,
        projection=projection,
        residual=residual,
        residual_backproj=op.adjoint(weights * residual),
    )


def class_precision_mean(state):
    return state.alpha0 / state.beta0


def expected_log_class_precision(state):
    """E_q[ln rho_k] = psi(alpha) - ln(beta)."""
    return digamma(state.alpha0) - np.log(state.beta0)


def update_volume(state, aux):
    """New (m, v) of q(f_j | z_j = k), all voxels from the same snapshot ``aux``."""
    rho = class_precision_mean(state)
    v = 1.0 / (rho[None, :] + aux.gram_diag[:, None])
    drift = rho[None, :] * (state.m0[None, :] - aux.m_bar[:, None]) + aux.residual_backproj[:, None]
    m = aux.m_bar[:, None] + v * drift
    assert np.all(v > 0)
    return m, v


def label_log_weights(state, aux, hyper):
    """Per-voxel, per-class log weight alpha~_jk before neighbour coupling.

    ``state`` carries the freshly updated (m, v); ``aux`` is the snapshot the
    volume update used, so the data term needs no new operator calls.
    """
    rho = class_precision_mean(state)
    class_fit = rho * (state.v + state.v0 + (state.m - state.m0) ** 2) - expected_log_class_precision(state)
    d = aux.gram_diag[:, None]
    data_fit = (state.v + state.m**2) * d - 2.0 * state.m * (aux.m_bar[:, None] * d + aux.residual_backproj[:, None])
    return hyper.potts.alpha - 0.5 * class_fit - 0.5 * data_fit + 0.5 * np.log(state.v)


def normalize_log_probabilities(logits):
    logits = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    p[p < PROB_FLOOR] = 0.0
    p /= p.sum(axis=1, keepdims=True)
    return p


def update_labels(state, aux, hyper):
    """New q(z). Neighbour terms use ``state.qz`` (the previous iteration)."""
    logits = label_log_weights(state, aux, hyper)
    gamma0 = hyper.potts.gamma0
    if gamma0 > 0 and len(state.shape) > 0:
        grid = state.qz.reshape(tuple(state.shape) + (state.K,))
        coupling = neighbor_sum(grid, ndim=len(state.shape)).reshape(state.N, state.K)
        logits = logits + PAIR_MULTIPLICITY * gamma0 * coupling
    return normalize_log_probabilities(logits)


def update_noise_precisions(state, aux, op, hyper):
    alpha = np.full(state.M, hyper.alpha_zeta0 + 0.5)
    beta = hyper.beta_zeta0 + 0.5 * (aux.residual**2 + op.row_weighted_square_sum(aux.v2))
    return alpha, beta


def update_class_means(state, hyper):
    rho = class_precision_mean(state)
    counts = state.qz.sum(axis=0)
    v0 = 1.0 / (1.0 / hyper.v0 + rho * counts)
    m0 = v0 * (hyper.m0 / hyper.v0 + rho * (state.m * state.qz).sum(axis=0))
    return m0, v0


def update_class_precisions(state, hyper):
    counts = state.qz.sum(axis=0)
    alpha = hyper.alpha0 + 0.5 * counts
    spread = state.v0[None, :] + state.v + (state.m - state.m0[None, :]) ** 2
    beta = hyper.beta0 + 0.5 * (spread * state.qz).sum(axis=0)
    return alpha, beta


def gamma_entropy(alpha, beta):
    """Entropy of Gamma(shape=alpha, rate=beta), elementwise."""
    alpha = np.asarray(alpha, dtype=float)
    return ln_gamma(alpha) - np.log(beta) + alpha - (alpha - 1.0) * digamma(alpha)


def _xlogx(p):
    out = np.zeros_like(p)
    pos = p > 0
    out[pos] = p[pos] * np.log(p[pos])
    return out


def entropy_blocks(state):
    N, K = state.N, state.K
    return {
        "volume": 0.5 * N * (1.0 + LOG_2PI) + 0.5 * float((np.log(state.v) * state.qz).sum()),
        "labels": -float(_xlogx(state.qz).sum()),
        "noise_precisions": float(np.sum(gamma_entropy(state.alpha_zeta, state.beta_zeta))),
        "class_means": 0.5 * K * (1.0 + LOG_2PI) + 0.5 * float(np.log(state.v0).sum()),
        "class_precisions": float(np.sum(gamma_entropy(state.alpha0, state.beta0))),
    }


def entropy(state):
    return sum(entropy_blocks(state).values())


def expected_log_joint_blocks(state, aux, hyper):
    """Blocks of E_q[ln p(g, f, rho_zeta, z, m, rho)], minus ln Z(alpha, gamma0)."""
    N, K, M = state.N, state.K, state.M
    q = state.qz
    elog_noise = digamma(state.alpha_zeta) - np.log(state.beta_zeta)
    noise_mean = state.alpha_zeta / state.beta_zeta
    elog_rho = expected_log_class_precision(state)
    rho = class_precision_mean(state)

    likelihood = (
        -0.5 * M * LOG_2PI
        + 0.5 * float(elog_noise.sum())
        - 0.5 * float((noise_mean * aux.residual**2).sum())
        - 0.5 * float((aux.v2 * aux.gram_diag).sum())
    )
    spread = state.v + state.v0[None, :] + (state.m - state.m0[None, :]) ** 2
    volume = -0.5 * N * LOG_2PI - 0.5 * float(((rho * spread - elog_rho) * q).sum())

    unary = float((q * hyper.potts.alpha).sum())
    if hyper.potts.gamma0 > 0:
        grid = q.reshape(tuple(state.shape) + (K,))
        pair = float((neighbor_sum(grid, ndim=len(state.shape)).reshape(N, K) * q).sum())
    else:
        pair = 0.0
    labels = unary + hyper.potts.gamma0 * pair

    a, b = hyper.alpha_zeta0, hyper.beta_zeta0
    noise_prior = (
        -M * (float(ln_gamma(a)) - a * np.log(b))
        + (a - 1.0) * float(elog_noise.sum())
        - b * float(noise_mean.sum())
    )
    mean_prior = -0.5 * K * np.log(2.0 * np.pi * hyper.v0) - float(
        ((state.v0 + (state.m0 - hyper.m0) ** 2) / (2.0 * hyper.v0)).sum()
    )
    a, b = hyper.alpha0, hyper.beta0
    precision_prior = float(
        np.sum(-(ln_gamma(a) - a * np.log(b)) + (a - 1.0) * elog_rho - b * rho)
    )
    return {
        "likelihood": likelihood,
        "volume_prior": volume,
        "label_prior": labels,
        "noise_prior": noise_prior,
        "mean_prior": mean_prior,
        "precision_prior": precision_prior,
    }


def expected_log_joint(state, aux, hyper):
    return sum(expected_log_joint_blocks(state, aux, hyper).values())


def free_energy(state, op, g, hyper, aux=None):
    """F = H(q) + E_q[ln p], up to the constant -ln Z(alpha, gamma0)."""
    if aux is None:
        aux = compute_auxiliaries(state, op, g)
    return entropy(state) + expected_log_joint(state, aux, hyper)


@dataclass
class FreeEnergyTrace:
    initial_entropy: float = np.nan
    initial_expected_log_joint: float = np.nan
    records: list = field(default_factory=list)
    converged: bool = False

    @property
    def initial_free_energy(self):
        return self.initial_entropy + self.initial_expected_log_joint

    @property
    def free_energy(self):
        return np.array([r["free_energy"] for r in self.records])

    def __len__(self):
        return len(self.records)

    def decreases(self, rel_slack=0.0):
        """Iterations where F dropped by more than ``rel_slack * |F_prev|``."""
        values = np.concatenate([[self.initial_free_energy], self.free_energy])
        drops = values[1:] - values[:-1] < -rel_slack * np.abs(values[:-1])
        return list(np.flatnonzero(drops) + 1)


def _blocks_finite(state, aux, hyper):
    blocks = {f"entropy.{k}": v for k, v in entropy_blocks(state).items()}
    blocks.update({f"log_joint.{k}": v for k, v in expected_log_joint_blocks(state, aux, hyper).items()})
    return blocks


def safeguard_step(state, proposal, aux, op, g, hyper, f_current, enabled=True, max_halvings=30):
    """Accept the simultaneous volume/label proposal unless it lowers F.

    The proposal updates every voxel from one snapshot, which is exact for a
    diagonal operator but can overshoot when H couples voxels strongly. On a
    drop of F, (m, qz) are moved only a fraction of the way toward the
    proposal, halving the fraction until F does not decrease. The proposal
    variances are always kept: they maximize F given everything else, so the
    zero-length step never lowers F.

    Returns (new state, its auxiliaries, accepted fraction).
    """
    new_aux = compute_auxiliaries(proposal, op, g, gram_diag=aux.gram_diag)
    if not enabled:
        return proposal, new_aux, 1.0
    floor = f_current - 1e-13 * abs(f_current)
    if free_energy(proposal, op, g, hyper, aux=new_aux) >= floor:
        return proposal, new_aux, 1.0
    step = 1.0
    for _ in range(max_halvings):
        step *= 0.5
        trial = replace(
            proposal,
            m=state.m + step * (proposal.m - state.m),
            qz=state.qz + step * (proposal.qz - state.qz),
        )
        trial_aux = compute_auxiliaries(trial, op, g, gram_diag=aux.gram_diag)
        if free_energy(trial, op, g, hyper, aux=trial_aux) >= floor:
            return trial, trial_aux, step
    trial = replace(proposal, m=state.m, qz=state.qz)
    return trial, compute_auxiliaries(trial, op, g, gram_diag=aux.gram_diag), 0.0


def iterate(
    state,
    op,
    g,
    hyper,
    tol=DEFAULT_TOL,
    max_iter=DEFAULT_MAX_ITER,
    callback=None,
    safeguard=True,
):
    """Run the coordinate updates until F changes by at most ``tol`` (relative).

    Per iteration: volume and labels (both from the previous snapshot), then
    noise precisions, class means and class precisions, each using the
    latest values. With ``safeguard`` off, the volume/label proposal is
    always taken as is. Returns (final state, FreeEnergyTrace);
    ``callback(t, state, record)`` runs after each completed iteration.
    """
    if not tol > 0:
        raise ValueError("tol must be > 0")
    g = np.asarray(g, dtype=float).ravel()
    state = state.copy()
    trace = FreeEnergyTrace()
    aux = compute_auxiliaries(state, op, g)
    blocks = _blocks_finite(state, aux, hyper)
    h0 = sum(v for k, v in blocks.items() if k.startswith("entropy."))
    trace.initial_entropy = h0
    trace.initial_expected_log_joint = sum(blocks.values()) - h0
    if not np.isfinite(trace.initial_free_energy):
        raise NonFiniteFreeEnergy(0, blocks)
    f_prev = trace.initial_free_energy

    for t in range(1, max_iter + 1):
        timings = {}

        tic = time.perf_counter()
        m, v = update_volume(state, aux)
        proposal = replace(state, m=m, v=v)
        timings["volume"] = time.perf_counter() - tic

        tic = time.perf_counter()
        proposal = replace(proposal, qz=update_labels(proposal, aux, hyper))
        timings["labels"] = time.perf_counter() - tic

        tic = time.perf_counter()
        state, aux, step = safeguard_step(state, proposal, aux, op, g, hyper, f_prev, safeguard)
        if step < 1.0:
            log.debug("iteration %d: volume/label step shortened to %g", t, step)
        timings["safeguard"] = time.perf_counter() - tic

        tic = time.perf_counter()
        alpha, beta = update_noise_precisions(state, aux, op, hyper)
        state = replace(state, alpha_zeta=alpha, beta_zeta=beta)
        timings["noise_precisions"] = time.perf_counter() - tic

        tic = time.perf_counter()
        m0, v0 = update_class_means(state, hyper)
        state = replace(state, m0=m0, v0=v0)
        timings["class_means"] = time.perf_counter() - tic

        tic = time.perf_counter()
        alpha0, beta0 = update_class_precisions(state, hyper)
        state = replace(state, alpha0=alpha0, beta0=beta0)
        timings["class_precisions"] = time.perf_counter() - tic

        tic = time.perf_counter()
        aux = compute_auxiliaries(state, op, g)
        blocks = _blocks_finite(state, aux, hyper)
        timings["free_energy"] = time.perf_counter() - tic
        h = sum(v for k, v in blocks.items() if k.startswith("entropy."))
        total = sum(blocks.values())
        if not np.isfinite(total):
            raise NonFiniteFreeEnergy(t, blocks)
        record = {
            "iteration": t,
            "entropy": h,
            "expected_log_joint": total - h,
            "free_energy": total,
            "step": step,
            "wall_ms": {k: 1e3 * s for k, s in timings.items()},
        }
        trace.records.append(record)
        if total < f_prev - 1e-6 * abs(f_prev):
            log.debug("free energy decreased at iteration %d: %r -> %r", t, f_prev, total)
        if callback is not None:
            callback(t, state, record)
        if abs(total - f_prev) <= tol * abs(f_prev):
            trace.converged = True
            break
        f_prev = total
    return state, trace


@dataclass
class Estimates:
    z_hat: np.ndarray  # 0-based MAP labels
    f_hat: np.ndarray  # conditional mean under the MAP label
    rho_zeta_hat: np.ndarray
    m_hat: np.ndarray
    rho_hat: np.ndarray
    uncertainty: np.ndarray  # conditional variance under the MAP label
    label_confidence: np.ndarray  # max_k q(z_j = k)
    posterior_mean: np.ndarray  # mixture mean sum_k q m
    posterior_variance: np.ndarray  # mixture variance
    expected_counts: np.ndarray  # sum_j q(z_j = k)
    shape: tuple


def extract_estimates(state):
    q = state.qz
    z_hat = np.argmax(q, axis=1)
    rows = np.arange(state.N)
    m_bar = (state.m * q).sum(axis=1)
    variance = (state.v * q).sum(axis=1) + ((state.m - m_bar[:, None]) ** 2 * q).sum(axis=1)
    return Estimates(
        z_hat=z_hat,
        f_hat=state.m[rows, z_hat],
        rho_zeta_hat=state.alpha_zeta / state.beta_zeta,
        m_hat=np.array(state.m0),
        rho_hat=state.alpha0 / state.beta0,
        uncertainty=state.v[rows, z_hat],
        label_confidence=q.max(axis=1),
        posterior_mean=m_bar,
        posterior_variance=variance,
        expected_counts=q.sum(axis=0),
        shape=tuple(state.shape),
    )
