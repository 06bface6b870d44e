"""Figure rendering for the reproduction recipes.

Every plot is written next to the delimited output it visualizes; nothing
here feeds back into the analysis.
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .coincidence import centers
from .diffusion import variance_evolution


def _map_panel(ax, hist, corrected, title):
    cx = centers(hist.x_edges)
    extent = [hist.x_edges[0], hist.x_edges[-1], hist.x_edges[0], hist.x_edges[-1]]
    vmax = max(float(np.percentile(corrected, 99.9)), 1.0)
    ax.imshow(corrected.T, origin="lower", extent=extent, cmap="inferno",
              vmin=0.0, vmax=vmax, aspect="equal", interpolation="nearest")
    ax.plot(cx, -cx, color="w", lw=0.5, ls="--", alpha=0.5)
    lab = "x" if hist.axis == "x" else "y"
    ax.set_xlabel(rf"$\theta_{lab}^{{(S)}}$ (mrad)")
    ax.set_ylabel(rf"$\theta_{lab}^{{(AS)}}$ (mrad)")
    ax.set_title(title, fontsize=10)


def render_fig4_figures(points, series, dfit, config, out_dir) -> dict[str, Path]:
    """Coincidence maps at up to three storage times, M(tau), and width decay."""
    out_dir = Path(out_dir)
    written: dict[str, Path] = {}

    # --- corrected coincidence maps
    show = points if len(points) <= 3 else [points[0], points[len(points) // 2], points[-1]]
    fig, axes = plt.subplots(1, len(show), figsize=(4 * len(show), 3.6),
                             constrained_layout=True)
    if len(show) == 1:
        axes = [axes]
    for ax, p in zip(axes, show):
        _map_panel(ax, p.hist, p.corrected,
                   rf"$\tau = {p.tau_s * 1e6:.1f}\,\mu s$")
    path = out_dir / "coincidence_maps.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    written["fig_maps"] = path

    # --- mode count versus storage time, measured and modeled
    taus = np.array([p.tau_s for p in points]) * 1e6
    m = np.array([p.modes for p in points])
    merr = np.array([p.modes_err for p in points])
    mmod = np.array([p.modes_model for p in points])
    fig, ax = plt.subplots(figsize=(5, 3.6), constrained_layout=True)
    ax.errorbar(taus, m, yerr=merr, fmt="o", ms=4, capsize=2, label="pipeline")
    ax.plot(taus, mmod, "-", color="C1", label="diffusion model")
    ax.axhline(2.0, color="gray", lw=0.8, ls=":")
    ax.set_xlabel(r"storage time $\tau$ ($\mu$s)")
    ax.set_ylabel("retrieved modes M")
    ax.legend(frameon=False)
    path = out_dir / "modes_vs_tau.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    written["fig_modes"] = path

    # --- width decay with the fitted model
    fig, ax = plt.subplots(figsize=(5, 3.6), constrained_layout=True)
    ax.errorbar(taus, series.sigma_diff_mrad, yerr=series.sigma_diff_err,
                fmt="s", ms=4, capsize=2, label=r"$\sigma_{diff}$")
    ax.errorbar(taus, series.sigma_sum_mrad, yerr=series.sigma_sum_err,
                fmt="o", ms=4, capsize=2, label=r"$\sigma_{sum}$")
    tt = np.linspace(series.tau_s[0], series.tau_s[-1], 200)
    from .diffusion import effective_kernel_mrad

    k = effective_kernel_mrad(config)
    if dfit is not None and dfit.diffusion_m2_s > 0:
        model_d = [math.hypot(variance_evolution(dfit.sigma0_diff_mrad,
                                                 dfit.diffusion_m2_s, t,
                                                 config.wavelength_m), k)
                   for t in tt]
        model_s = [math.hypot(variance_evolution(dfit.sigma0_sum_mrad,
                                                 dfit.diffusion_m2_s, t,
                                                 config.wavelength_m), k)
                   for t in tt]
        ax.plot(tt * 1e6, model_d, "-", color="C0", lw=1)
        ax.plot(tt * 1e6, model_s, "-", color="C1", lw=1)
    ax.set_xlabel(r"storage time $\tau$ ($\mu$s)")
    ax.set_ylabel("width (mrad)")
    if dfit is not None:
        ax.set_title(f"fitted D = {dfit.diffusion_m2_s:.3g} m$^2$/s", fontsize=10)
    ax.legend(frameon=False)
    path = out_dir / "widths_vs_tau.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    written["fig_widths"] = path
    return written


def render_single_photon_figure(hist, corrected, report, out_dir) -> Path:
    out_dir = Path(out_dir)
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(9, 3.8), constrained_layout=True)
    _map_panel(ax0, hist, corrected, "corrected coincidences (low gain)")
    ax1.axis("off")
    lines = [
        f"shots: {report['shots']}",
        f"write pairs / shot: {report['write_pairs_per_shot']:.3f}",
        f"read pairs / shot: {report['read_pairs_per_shot']:.3f}",
        f"pairs / mode: {report['pairs_per_mode']:.3f}",
        f"accidental fraction: {report['accidental_fraction']:.3f}",
        f"coincidence ratio: {report['coincidence_ratio']:.3f}",
        f"modes estimate: {report['modes_estimate']:.1f}",
    ]
    ax1.text(0.02, 0.95, "\n".join(lines), transform=ax1.transAxes,
             va="top", family="monospace", fontsize=10)
    path = out_dir / "single_photon_level.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
