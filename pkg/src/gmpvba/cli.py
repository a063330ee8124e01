"""Command line driver: Potts simulation, reconstruction and oracle comparison.

Every run reads one INI config, writes the fully resolved config (defaults
filled in, paths made absolute) back into its output directory, and only
ever seeds its generators from the config's ``seed``. CSV outputs are
therefore byte-identical across reruns; wall-clock timings go to a separate
JSON file.
"""

import argparse
import configparser
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import io, linops, model, oracle, plotting, potts
from .initseg import (
    fallback_initial_volume,
    initialize_state,
    kmeans_segment,
    least_squares_initial_volume,
    otsu_segment,
)
from .vba import NonFiniteFreeEnergy, extract_estimates, iterate

log = logging.getLogger("gmpvba")

EXIT_CONVERGED = 0
EXIT_ERROR = 1
EXIT_MAX_ITER = 2

DEFAULT_GAMMAS = "0.5, 0.7, 0.8, 1.6"


class ConfigError(ValueError):
    pass


class RunConfig:
    """A parsed INI config plus the directory relative paths resolve against.

    Lookups record their effective value so the echo written into the run
    directory holds every default that was actually used.
    """

    def __init__(self, parser, base_dir):
        self.parser = parser
        self.base_dir = Path(base_dir)
        self.resolved = configparser.ConfigParser(interpolation=None)
        self.resolved.optionxform = str

    @classmethod
    def load(cls, path):
        path = Path(path)
        return cls(io.load_config(path), path.resolve().parent)

    def has(self, section, key=None):
        if key is None:
            return self.parser.has_section(section)
        return self.parser.has_option(section, key)

    def _record(self, section, key, value):
        if not self.resolved.has_section(section):
            self.resolved.add_section(section)
        self.resolved.set(section, key, str(value))
        return value

    def get(self, section, key, default=None, required=False):
        if self.parser.has_option(section, key):
            value = self.parser.get(section, key).strip()
        elif required:
            raise ConfigError(f"config is missing [{section}] {key}")
        else:
            value = default
        if value is None:
            return None
        return self._record(section, key, value)

    def get_float(self, section, key, default=None, required=False):
        value = self.get(section, key, default, required)
        try:
            return None if value is None else float(value)
        except ValueError:
            raise ConfigError(f"[{section}] {key} = {value!r} is not a number") from None

    def get_int(self, section, key, default=None, required=False):
        value = self.get(section, key, default, required)
        try:
            return None if value is None else int(value)
        except ValueError:
            raise ConfigError(f"[{section}] {key} = {value!r} is not an integer") from None

    def get_path(self, section, key, required=False):
        value = self.get(section, key, None, required)
        if value is None:
            return None
        path = io.resolve_path(value, self.base_dir).resolve()
        self._record(section, key, path)
        if not path.is_file():
            raise FileNotFoundError(f"input file not found: {path} ([{section}] {key})")
        return path

    def get_shape(self, section, key, required=True):
        value = self.get(section, key, None, required)
        if value is None:
            return None
        shape = tuple(io.parse_ints(value))
        if not shape or any(s < 1 for s in shape):
            raise ConfigError(f"[{section}] {key} = {value!r} is not a grid shape")
        return shape

    def copy_section(self, section):
        """Echo every key of ``section`` verbatim (for free-form entries)."""
        if self.parser.has_section(section):
            for key, value in self.parser.items(section):
                if not (self.resolved.has_section(section) and self.resolved.has_option(section, key)):
                    self._record(section, key, value)

    def seed(self):
        seed = self.get_int("run", "seed", required=True)
        if seed < 0:
            raise ConfigError("seed must be >= 0")
        return seed

    def write_echo(self, out_dir):
        io.save_config(Path(out_dir) / "config.ini", self.resolved)


def build_operator(cfg, shape):
    kind = cfg.get("operator", "kind", "identity").lower()
    n = int(np.prod(shape))
    if kind == "identity":
        return linops.identity(n)
    if kind == "convolution":
        size = cfg.get_int("operator", "size", 5)
        kernel = cfg.get("operator", "kernel", "box").lower()
        if kernel == "box":
            k = linops.box_kernel(size, ndim=len(shape))
        elif kernel == "gaussian":
            k = linops.gaussian_kernel(size, cfg.get_float("operator", "sigma", 1.0), ndim=len(shape))
        else:
            raise ConfigError(f"unknown kernel {kernel!r}; use box or gaussian")
        return linops.ConvolutionOperator(k, shape)
    if kind == "projector":
        if len(shape) != 2:
            raise ConfigError("the parallel-beam projector is 2-D only")
        n_angles = cfg.get_int("operator", "angles", 60)
        angles = np.linspace(0.0, np.pi, n_angles, endpoint=False)
        detectors = cfg.get_int("operator", "detectors", int(math.ceil(math.hypot(*shape))))
        spacing = cfg.get_float("operator", "spacing", 1.0)
        return linops.ParallelBeamProjector(shape, angles, detectors, spacing)
    if kind == "dense":
        op = linops.load_dense_csv(cfg.get_path("operator", "matrix", required=True))
        if op.domain_size != n:
            raise linops.DimensionError(f"matrix has {op.domain_size} columns but the grid has {n} voxels")
        return op
    raise ConfigError(f"unknown operator kind {kind!r}; use identity, convolution, projector or dense")


def _parse_region(key, text):
    parts = text.split()
    if not parts:
        raise ConfigError(f"[phantom] {key} is empty")
    kind, values = parts[0].lower(), [float(x) for x in parts[1:]]
    if kind == "disk" and len(values) >= 4:
        *center, radius, label = values
        return model.Disk(tuple(center), radius, int(label) - 1)
    if kind in ("rect", "rectangle") and len(values) >= 5 and len(values) % 2 == 1:
        *corners, label = values
        half = len(corners) // 2
        return model.Rectangle(tuple(corners[:half]), tuple(corners[half:]), int(label) - 1)
    raise ConfigError(
        f"[phantom] {key} = {text!r}; expected 'disk <centre...> <radius> <label>' "
        "or 'rect <lower...> <upper...> <label>'"
    )


def build_phantom(cfg, K):
    shape = cfg.get_shape("phantom", "shape")
    preset = cfg.get("phantom", "preset", "default" if K == 3 else "none").lower()
    if preset == "default":
        spec = model.default_phantom(shape)
        means = cfg.get("phantom", "means", ", ".join(repr(m) for m in spec.means))
        variances = cfg.get("phantom", "variances", ", ".join(repr(v) for v in spec.variances))
        spec = model.PhantomSpec(shape, io.parse_floats(means), io.parse_floats(variances), spec.regions)
    elif preset == "none":
        means = io.parse_floats(cfg.get("phantom", "means", required=True))
        variances = io.parse_floats(cfg.get("phantom", "variances", required=True))
        regions = [
            _parse_region(key, value)
            for key, value in sorted(cfg.parser.items("phantom"), key=lambda kv: kv[0])
            if key.startswith("region")
        ]
        cfg.copy_section("phantom")
        background = cfg.get_int("phantom", "background", 1) - 1
        spec = model.PhantomSpec(shape, means, variances, regions, background)
    else:
        raise ConfigError(f"unknown phantom preset {preset!r}; use default or none")
    if spec.K != K:
        raise ConfigError(f"phantom has {spec.K} classes but [run] K = {K}")
    return spec


def _prepare_out(args, cfg, command):
    out = args.out or cfg.get("run", "output", f"runs/{command}")
    out = io.resolve_path(out, Path.cwd() if args.out else cfg.base_dir).resolve()
    cfg._record("run", "output", out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _save_image(out, stem, image, seed):
    io.write_array_csv(out / f"{stem}.csv", image, seed=seed)
    if image.ndim == 2:
        io.write_pgm(out / f"{stem}.pgm", image)


def _save_labels(out, stem, labels, K, seed):
    """CSV holds labels 1..K; the PGM spreads them over 0..255."""
    io.write_array_csv(out / f"{stem}.csv", labels + 1, seed=seed)
    if labels.ndim == 2:
        io.write_label_pgm(out / f"{stem}.pgm", labels, K)


def cmd_simulate_potts(cfg, out):
    """Potts fields for a list of granularity values plus a compactness table."""
    seed = cfg.seed()
    shape = tuple(io.parse_ints(cfg.get("potts", "shape", "128, 128")))
    K = cfg.get_int("potts", "K", 2)
    sweeps = cfg.get_int("potts", "sweeps", 200)
    chains = cfg.get_int("potts", "chains", 1)
    gammas = io.parse_floats(cfg.get("potts", "gamma0", DEFAULT_GAMMAS))
    if any(g < 0 for g in gammas):
        raise ConfigError(f"gamma0 values must be >= 0, got {gammas}")
    if K < 1 or chains < 1:
        raise ConfigError("K and chains must be >= 1")
    cfg.write_echo(out)

    seeds = np.random.SeedSequence(seed).spawn(len(gammas))
    rows, panel = [], {}
    for gamma0, child in zip(gammas, seeds):
        params = potts.PottsParams.uniform(K, gamma0)
        fields = potts.sample_potts(shape, params, sweeps, child, n_chains=chains)
        fractions = [potts.like_neighbor_fraction(z) for z in fields]
        stem = f"potts_gamma{gamma0:g}"
        _save_labels(out, stem, fields[0], K, seed)
        panel[gamma0] = fields[0]
        rows.append([gamma0, float(np.mean(fractions)), float(np.min(fractions)), float(np.max(fractions)), chains, sweeps, seed])
        log.info("gamma0 = %g: like-neighbour fraction %.4f", gamma0, rows[-1][1])
    io.write_table_csv(
        out / "compactness.csv",
        ["gamma0", "like_neighbor_fraction", "min_over_chains", "max_over_chains", "chains", "sweeps", "seed"],
        rows,
    )
    if len(shape) == 2:
        plotting.potts_panel(out / "potts_fields.png", panel, K)
    return EXIT_CONVERGED


def _load_or_simulate(cfg, K, seeds, out, seed):
    """Return (shape, op, g, truth) where truth is None for loaded data."""
    if cfg.has("data"):
        g_path = cfg.get_path("data", "g", required=True)
        shape = cfg.get_shape("data", "shape")
        op = build_operator(cfg, shape)
        g = io.read_array_csv(g_path).ravel()
        if g.size != op.range_size:
            raise linops.DimensionError(f"{g_path}: {g.size} measurements, operator expects {op.range_size}")
        return shape, op, g, None
    spec = build_phantom(cfg, K)
    snr_db = cfg.get_float("run", "snr_db", 30.0)
    op = build_operator(cfg, spec.shape)
    f_true, z_true = model.generate_phantom(spec, seeds[0])
    g, rho_true = model.simulate_data(op, f_true, None if math.isinf(snr_db) else snr_db, seeds[1])
    _save_image(out, "phantom_f", f_true, seed)
    _save_labels(out, "phantom_z", z_true, K, seed)
    if len(spec.shape) == 2 and op.range_size == op.domain_size:
        _save_image(out, "data_g", g.reshape(spec.shape), seed)
    else:
        io.write_array_csv(out / "data_g.csv", g, seed=seed)
    return spec.shape, op, g, (f_true, z_true, rho_true)


def cmd_reconstruct(cfg, out):
    """Simulate or load data, initialize, iterate and write every estimate."""
    seed = cfg.seed()
    K = cfg.get_int("run", "K", required=True)
    if K < 1:
        raise ConfigError("K must be >= 1")
    gamma0 = cfg.get_float("run", "gamma0", 1.0)
    tol = cfg.get_float("run", "tol", 1e-6)
    max_iter = cfg.get_int("run", "max_iter", 200)
    init_method = cfg.get("run", "init", "kmeans").lower()
    seeds = np.random.SeedSequence(seed).spawn(2)

    shape, op, g, truth = _load_or_simulate(cfg, K, seeds, out, seed)
    snr_db = cfg.get_float("run", "snr_db", 30.0)
    prior_snr = cfg.get_float("run", "prior_snr_db", snr_db if math.isfinite(snr_db) else 60.0)

    source = cfg.get("run", "initial_volume", "backprojection")
    if source == "backprojection":
        f0 = fallback_initial_volume(op, g)
    elif source == "lsqr":
        f0 = least_squares_initial_volume(op, g, cfg.get_int("run", "lsqr_iterations", 30))
    else:
        f0 = io.read_volume(cfg.get_path("run", "initial_volume"), shape).ravel()
    if init_method == "kmeans":
        init = kmeans_segment(f0, K)
    elif init_method == "otsu":
        if K != 2:
            raise ConfigError("otsu initialization needs K = 2")
        init = otsu_segment(f0)
    else:
        raise ConfigError(f"unknown init {init_method!r}; use kmeans or otsu")
    hyper = model.fix_hyperparameters(f0, init.z0, K, prior_snr, gamma0)
    cfg.write_echo(out)

    io.write_table_csv(
        out / "init_classes.csv",
        ["class", "mean", "variance", "count"],
        [[k + 1, init.means[k], init.variances[k], int(init.counts[k])] for k in range(K)],
        seed=seed,
    )
    state = initialize_state(f0, init, op, hyper, g, shape=shape)

    def progress(t, _state, record):
        log.info("iteration %3d  F = %.10g  step = %g", t, record["free_energy"], record["step"])

    try:
        state, trace = iterate(state, op, g, hyper, tol=tol, max_iter=max_iter, callback=progress)
    except NonFiniteFreeEnergy as exc:
        dump = {"iteration": exc.iteration, "blocks": {k: repr(v) for k, v in exc.diagnostics.items()}}
        (out / "diagnostics.txt").write_text(json.dumps(dump, indent=2) + "\n")
        raise

    _write_trace(out, trace, seed)
    est = extract_estimates(state)
    _save_image(out, "f_hat", est.f_hat.reshape(shape), seed)
    _save_image(out, "uncertainty", est.uncertainty.reshape(shape), seed)
    _save_labels(out, "z_hat", est.z_hat.reshape(shape), K, seed)
    _save_image(out, "posterior_mean", est.posterior_mean.reshape(shape), seed)
    _save_image(out, "label_confidence", est.label_confidence.reshape(shape), seed)
    io.write_table_csv(
        out / "classes.csv",
        ["class", "m_hat", "rho_hat", "expected_count"],
        [[k + 1, est.m_hat[k], est.rho_hat[k], est.expected_counts[k]] for k in range(K)],
        seed=seed,
    )
    io.write_table_csv(
        out / "noise_precision.csv",
        ["measurement", "rho_zeta_hat"],
        [[i, r] for i, r in enumerate(est.rho_zeta_hat)],
        seed=seed,
    )

    summary = [
        ["iterations", len(trace)],
        ["converged", int(trace.converged)],
        ["free_energy", float(trace.free_energy[-1]) if len(trace) else trace.initial_free_energy],
        ["rho_zeta_hat_mean", float(est.rho_zeta_hat.mean())],
        ["rho_zeta_hat_harmonic_mean", float(1.0 / np.mean(1.0 / est.rho_zeta_hat))],
    ]
    if truth is not None:
        f_true, z_true, rho_true = truth
        accuracy, mapping = model.segmentation_accuracy(est.z_hat, z_true, K)
        summary += [
            ["z_accuracy", accuracy],
            ["rho_zeta_true", float(rho_true[0])],
            ["rmse_f_hat", float(np.sqrt(np.mean((est.f_hat - f_true.ravel()) ** 2)))],
        ]
        summary += [[f"m_hat_{k + 1}_matches_class", int(mapping[k]) + 1] for k in range(K)]
    io.write_table_csv(out / "summary.csv", ["quantity", "value"], summary, seed=seed)

    if len(shape) == 2:
        f_true = truth[0] if truth is not None else None
        data = g.reshape(shape) if g.size == est.f_hat.size else None
        plotting.reconstruction_panel(
            out / "reconstruction.png",
            est.f_hat.reshape(shape),
            est.z_hat.reshape(shape),
            est.uncertainty.reshape(shape),
            K,
            f_true=f_true,
            data=data,
        )
    if len(trace):
        plotting.free_energy_plot(out / "free_energy.png", trace)
    if trace.converged:
        log.info("converged after %d iterations", len(trace))
        return EXIT_CONVERGED
    log.warning("stopped at max_iter = %d without meeting tol = %g", max_iter, tol)
    return EXIT_MAX_ITER


def _write_trace(out, trace, seed):
    rows = [[0, trace.initial_entropy, trace.initial_expected_log_joint, trace.initial_free_energy, 1.0]]
    rows += [
        [r["iteration"], r["entropy"], r["expected_log_joint"], r["free_energy"], r["step"]]
        for r in trace.records
    ]
    io.write_table_csv(
        out / "trace.csv",
        ["iteration", "entropy", "expected_log_joint", "free_energy", "step"],
        rows,
        seed=seed,
    )
    timings = [{"iteration": r["iteration"], **r["wall_ms"]} for r in trace.records]
    (out / "timings.json").write_text(json.dumps(timings, indent=1) + "\n")


def cmd_oracle_compare(cfg, out):
    """Pinned variational runs against the exact posterior on small instances."""
    seed = cfg.seed()
    shape = cfg.get_shape("oracle", "shape")
    means = io.parse_floats(cfg.get("oracle", "means", "0, 1"))
    class_variance = cfg.get_float("oracle", "class_variance", 0.01)
    gamma0 = cfg.get_float("oracle", "gamma0", 0.5)
    snr_db = cfg.get_float("oracle", "snr_db", 20.0)
    instances = cfg.get_int("oracle", "instances", 10)
    tolerance = cfg.get_float("oracle", "tolerance", 0.05)
    shape_param = cfg.get_float("oracle", "pin_shape", 1e6)
    mean_variance = cfg.get_float("oracle", "pin_mean_variance", 1e-8)
    K = len(means)
    if K ** int(np.prod(shape)) > oracle.MAX_CONFIGURATIONS:
        raise oracle.EnumerationTooLarge(
            f"{K}^{int(np.prod(shape))} label configurations exceed {oracle.MAX_CONFIGURATIONS}"
        )
    op = build_operator(cfg, shape)
    cfg.write_echo(out)

    voxel_rows, summary_rows = [], []
    all_converged = True
    first = None
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(instances)):
        instance_seed = int(child.generate_state(1)[0])
        pm, f_true, _ = oracle.synthetic_pinned_model(shape, op, means, class_variance, gamma0, snr_db, instance_seed)
        exact = oracle.exact_posterior(pm)
        state, trace, _ = oracle.pinned_vba(pm, shape_param, mean_variance)
        all_converged &= trace.converged
        vba_mean = (state.m * state.qz).sum(axis=1)
        d_mean = np.abs(vba_mean - exact.mean)
        d_q = np.abs(state.qz - exact.marginals).max(axis=1)
        dynamic = float(np.ptp(f_true)) or 1.0
        for j in range(pm.N):
            voxel_rows.append([i, j, float(d_mean[j]), float(d_q[j])])
        ok = bool(d_q.max() <= tolerance and d_mean.max() <= tolerance * dynamic)
        summary_rows.append(
            [i, float(d_mean.max()), float(d_mean.mean()), float(d_q.max()), float(d_q.mean()),
             dynamic, len(trace), int(trace.converged), int(ok)]
        )
        log.info("instance %d: max |dPM| %.3g, max |dq| %.3g", i, d_mean.max(), d_q.max())
        if first is None:
            first = (exact.marginals, state.qz, exact.mean, vba_mean)
    io.write_table_csv(out / "comparison.csv", ["instance", "voxel", "abs_delta_pm", "abs_delta_marginal"], voxel_rows, seed=seed)
    io.write_table_csv(
        out / "comparison_summary.csv",
        ["instance", "max_delta_pm", "mean_delta_pm", "max_delta_marginal", "mean_delta_marginal",
         "true_dynamic_range", "iterations", "converged", "within_tolerance"],
        summary_rows,
        seed=seed,
    )
    plotting.oracle_scatter(out / "oracle_scatter.png", *first)
    return EXIT_CONVERGED if all_converged else EXIT_MAX_ITER


COMMANDS = {
    "simulate-potts": cmd_simulate_potts,
    "reconstruct": cmd_reconstruct,
    "oracle-compare": cmd_oracle_compare,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="gmpvba", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="INI run configuration")
    parser.add_argument("--out", help="output directory (overrides [run] output)")
    parser.add_argument("--threads", type=int, default=1, help="BLAS/OpenMP thread count")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_ERROR
    from threadpoolctl import threadpool_limits

    try:
        cfg = RunConfig.load(args.config)
        out = _prepare_out(args, cfg, args.command)
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](cfg, out)
    except NonFiniteFreeEnergy as exc:
        print(f"error: {exc}; block values written to diagnostics.txt", file=sys.stderr)
        return EXIT_ERROR
    except (OSError, ValueError, configparser.Error) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
