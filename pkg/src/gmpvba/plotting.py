"""PNG figures for CLI runs.

Uses the object-oriented matplotlib API with an Agg canvas, so nothing here
touches pyplot's global state or needs a display.
"""

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

_META = {"Software": None}


def _new_figure(ncols, nrows=1, panel=2.6):
    fig = Figure(figsize=(panel * ncols, panel * nrows + 0.3), layout="constrained")
    FigureCanvasAgg(fig)
    return fig


def _image(ax, image, title, cmap="gray", **kwargs):
    im = ax.imshow(image, cmap=cmap, interpolation="nearest", **kwargs)
    ax.set_title(title, fontsize=9)
    ax.set_xticks([])
    ax.set_yticks([])
    return im


def potts_panel(path, fields, K):
    """One panel per granularity value; ``fields`` maps gamma0 -> 2-D labels."""
    fig = _new_figure(len(fields))
    axes = np.atleast_1d(fig.subplots(1, len(fields)))
    for ax, (gamma0, z) in zip(axes, fields.items()):
        _image(ax, z, f"gamma0 = {gamma0:g}", cmap="viridis", vmin=0, vmax=max(K - 1, 1))
    fig.savefig(path, dpi=120, metadata=_META)


def reconstruction_panel(path, f_hat, z_hat, uncertainty, K, f_true=None, data=None):
    """Truth and data (when known) next to f_hat, z_hat and the uncertainty map."""
    panels = []
    if f_true is not None:
        panels.append(("true volume", f_true, "gray", {}))
    if data is not None and np.shape(data) == np.shape(f_hat):
        panels.append(("data", data, "gray", {}))
    panels.append(("reconstruction", f_hat, "gray", {}))
    panels.append(("segmentation", z_hat, "viridis", {"vmin": 0, "vmax": max(K - 1, 1)}))
    panels.append(("posterior sd", np.sqrt(uncertainty), "magma", {}))
    fig = _new_figure(len(panels))
    axes = np.atleast_1d(fig.subplots(1, len(panels)))
    for ax, (title, image, cmap, kwargs) in zip(axes, panels):
        im = _image(ax, image, title, cmap=cmap, **kwargs)
        if title == "posterior sd":
            fig.colorbar(im, ax=ax, shrink=0.8)
    fig.savefig(path, dpi=120, metadata=_META)


def free_energy_plot(path, trace):
    """F per iteration, and the relative change on a log scale."""
    values = np.concatenate([[trace.initial_free_energy], trace.free_energy])
    fig = _new_figure(2, panel=3.2)
    ax_f, ax_d = fig.subplots(1, 2)
    ax_f.plot(np.arange(values.size), values, marker=".", lw=1)
    ax_f.set_xlabel("iteration")
    ax_f.set_ylabel("free energy")
    rel = np.abs(np.diff(values)) / np.abs(values[:-1])
    ax_d.semilogy(np.arange(1, values.size), np.maximum(rel, 1e-300), marker=".", lw=1)
    ax_d.set_xlabel("iteration")
    ax_d.set_ylabel("|dF| / |F|")
    fig.savefig(path, dpi=120, metadata=_META)


def oracle_scatter(path, exact_marginals, vba_marginals, exact_mean, vba_mean):
    """Variational against exact label marginals and posterior means."""
    fig = _new_figure(2, panel=3.0)
    ax_q, ax_m = fig.subplots(1, 2)
    for ax, x, y, label in (
        (ax_q, exact_marginals.ravel(), vba_marginals.ravel(), "label marginal"),
        (ax_m, exact_mean.ravel(), vba_mean.ravel(), "posterior mean"),
    ):
        lo, hi = min(x.min(), y.min()), max(x.max(), y.max())
        ax.plot([lo, hi], [lo, hi], color="0.6", lw=0.8)
        ax.plot(x, y, ".", ms=4)
        ax.set_xlabel(f"exact {label}")
        ax.set_ylabel(f"variational {label}")
    fig.savefig(path, dpi=120, metadata=_META)
