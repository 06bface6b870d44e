"""End-to-end pipelines: simulation runs, calibration, sweeps, reproduction recipes.

Shots are embarrassingly parallel (each one is a pure function of
``(config, shot_id, master_seed)``); workers process disjoint shot-id
chunks and partial results are merged in shot-id order, so the thread
count never changes any output byte.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, build_mode_grid, config_to_text, mode_occupancy_weights
from .coincidence import (
    CoincidenceHistogram,
    accidental_fraction,
    accidental_histogram,
    accumulate,
    coincidence_ratio,
    fit_correlation,
    make_edges,
    mode_count,
    mode_count_err,
    subtract,
    write_histogram_csv,
)
from .diffusion import (
    WidthSeries,
    effective_kernel_mrad,
    fit_diffusion,
    predict_mode_count,
    write_widths_csv,
)
from .errors import ParameterError
from .eventio import EventTable, atomic_output, fmt, sha256_file, write_keyvalue
from .geometry import MRAD
from .memory import run_shot

_MASK64 = 0xFFFFFFFFFFFFFFFF


def resolve_threads(threads: int | None) -> int:
    """CLI --threads, else HOLOMUX_THREADS, else 1."""
    if threads is not None and threads > 0:
        return threads
    env = os.environ.get("HOLOMUX_THREADS", "")
    if env.strip():
        try:
            n = int(env)
        except ValueError as exc:
            raise ParameterError(f"HOLOMUX_THREADS must be an integer, got {env!r}") from exc
        if n > 0:
            return n
    return 1


@dataclass
class RunTally:
    """Aggregate truth-channel bookkeeping over a whole run."""

    shots: int = 0
    write_pairs: int = 0
    stored_pairs: int = 0
    read_pairs: int = 0
    detected_pairs: int = 0
    stokes_events: int = 0
    antistokes_events: int = 0
    # second moment of per-shot write pairs, for standard errors
    write_pairs_sq: int = 0

    def add(self, other: "RunTally"):
        for name in ("shots", "write_pairs", "stored_pairs", "read_pairs",
                     "detected_pairs", "stokes_events", "antistokes_events",
                     "write_pairs_sq"):
            setattr(self, name, getattr(self, name) + getattr(other, name))


@dataclass
class SimulationResult:
    table: EventTable
    truth_index: np.ndarray      # (n, 3) shot_id, stokes_idx, antistokes_idx
    truth_angles: np.ndarray     # (n, 4) xS, yS, xAS, yAS in mrad
    tally: RunTally


def _simulate_chunk(config: ExperimentConfig, start: int, stop: int,
                    master_seed: int) -> tuple:
    sid, reg, xs, ys, ts = [], [], [], [], []
    truth_idx, truth_xy = [], []
    tally = RunTally()
    timed = config.time_bins
    for shot in range(start, stop):
        rec = run_shot(config, shot, master_seed)
        tally.shots += 1
        t = rec.tally
        tally.write_pairs += t.write_pairs
        tally.write_pairs_sq += t.write_pairs * t.write_pairs
        tally.stored_pairs += t.stored_pairs
        tally.read_pairs += t.read_pairs
        tally.detected_pairs += t.detected_pairs
        tally.stokes_events += len(rec.stokes_events)
        tally.antistokes_events += len(rec.antistokes_events)
        for code, events in ((0, rec.stokes_events), (1, rec.antistokes_events)):
            for ev in events:
                sid.append(shot)
                reg.append(code)
                xs.append(ev.angle.theta_x)
                ys.append(ev.angle.theta_y)
                if timed:
                    ts.append(ev.time_bin_ns if ev.time_bin_ns is not None else -1)
        for si, ai in rec.truth:
            truth_idx.append((shot, si, ai))
            s_ev = rec.stokes_events[si].angle
            a_ev = rec.antistokes_events[ai].angle
            truth_xy.append((s_ev.theta_x, s_ev.theta_y, a_ev.theta_x, a_ev.theta_y))
    return (
        np.asarray(sid, dtype=np.int64), np.asarray(reg, dtype=np.uint8),
        np.asarray(xs, dtype=float), np.asarray(ys, dtype=float),
        np.asarray(ts, dtype=np.int64) if timed else None,
        np.asarray(truth_idx, dtype=np.int64).reshape(-1, 3),
        np.asarray(truth_xy, dtype=float).reshape(-1, 4),
        tally,
    )


def simulate(config: ExperimentConfig, shots: int, master_seed: int,
             threads: int | None = None) -> SimulationResult:
    """Run ``shots`` independent shots and collect events plus truth links."""
    if shots <= 0:
        raise ParameterError(f"shot count must be positive, got {shots}")
    threads = resolve_threads(threads)
    if threads == 1:
        parts = [_simulate_chunk(config, 0, shots, master_seed)]
    else:
        chunk = max(256, math.ceil(shots / (threads * 8)))
        spans = [(lo, min(lo + chunk, shots)) for lo in range(0, shots, chunk)]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(_simulate_chunk, config, lo, hi, master_seed)
                       for lo, hi in spans]
            parts = [f.result() for f in futures]  # submission (shot) order

    tally = RunTally()
    for p in parts:
        tally.add(p[7])
    timed = config.time_bins
    table = EventTable(
        shot_id=np.concatenate([p[0] for p in parts]),
        region=np.concatenate([p[1] for p in parts]),
        theta_x=np.concatenate([p[2] for p in parts]),
        theta_y=np.concatenate([p[3] for p in parts]),
        time_bin_ns=np.concatenate([p[4] for p in parts]) if timed else None,
        n_shots=shots,
    )
    truth_index = np.concatenate([p[5] for p in parts])
    truth_angles = np.concatenate([p[6] for p in parts])
    return SimulationResult(table, truth_index, truth_angles, tally)


def run_coincidence(table: EventTable, config: ExperimentConfig,
                    axis: str = "x") -> CoincidenceHistogram:
    edges = make_edges(config.fov_mrad, config.bin_mrad)
    return accumulate(table, config.delta_theta_mrad, edges, axis=axis)


def truth_histogram(truth_angles: np.ndarray, hist: CoincidenceHistogram) -> np.ndarray:
    """Histogram of genuine pairs under the same stripe gate and binning."""
    if truth_angles.size == 0:
        return np.zeros_like(hist.n2)
    li, ti = (0, 1) if hist.axis == "x" else (1, 0)
    t_sum = truth_angles[:, ti] + truth_angles[:, 2 + ti]
    sel = np.abs(t_sum) < hist.delta_theta_mrad
    xs = truth_angles[sel, li]
    xa = truth_angles[sel, 2 + li]
    counts, _, _ = np.histogram2d(xs, xa, bins=(hist.x_edges, hist.x_edges))
    return counts


def mean_survival(config: ExperimentConfig, tau_s: float) -> float:
    """Occupancy-weighted mean storage survival over the mode grid."""
    grid = build_mode_grid(config)
    w = mode_occupancy_weights(config, grid)
    k2 = ((2 * math.pi * MRAD / config.wavelength_m) ** 2
          * (grid.centers_x**2 + grid.centers_y**2))
    surv = np.exp(-2.0 * config.diffusion_m2_s * tau_s * k2)
    return float((w * surv).sum() / w.sum())


def calibrate_noise_rate(
    config: ExperimentConfig,
    target: float = 0.58,
    tol: float = 0.02,
    shots: int = 20000,
    master_seed: int = 11,
    max_iter: int = 32,
) -> tuple[ExperimentConfig, float]:
    """Bisect ``noise_rate`` until the central accidental fraction hits the target.

    The fraction is measured over the configured central window. The same
    master seed is reused for every probe so the bisection sees a smooth,
    monotone response.
    """
    if not 0.0 < target < 1.0:
        raise ParameterError("target fraction must be in (0, 1)")

    def fraction(rate: float) -> float:
        probe = config.with_updates(noise_rate=rate)
        result = simulate(probe, shots, master_seed)
        hist = run_coincidence(result.table, probe)
        return accidental_fraction(hist, probe.central_window_mrad)

    lo, f_lo = 0.0, fraction(0.0)
    if f_lo >= target:
        return config.with_updates(noise_rate=0.0), f_lo
    hi = max(config.noise_rate, 0.5)
    f_hi = fraction(hi)
    grow = 0
    while f_hi < target and grow < 24:
        hi *= 2.0
        f_hi = fraction(hi)
        grow += 1
    if f_hi < target:
        raise ParameterError(
            f"could not reach accidental fraction {target}; at noise_rate={hi} "
            f"the fraction is only {f_hi:.3f}")
    mid, f_mid = hi, f_hi
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        f_mid = fraction(mid)
        if abs(f_mid - target) <= tol * 0.5:
            break
        if f_mid < target:
            lo = mid
        else:
            hi = mid
    return config.with_updates(noise_rate=mid), f_mid


# ---------------------------------------------------------------------------
# tau sweeps

@dataclass
class TauPoint:
    tau_s: float
    shots: int
    hist: CoincidenceHistogram
    corrected: np.ndarray
    sigma_sum: float
    sigma_sum_err: float
    sigma_diff: float
    sigma_diff_err: float
    modes: float
    modes_err: float
    modes_model: float


def sweep_storage_time(
    config: ExperimentConfig,
    tau_list_s,
    shots: int,
    master_seed: int,
    threads: int | None = None,
    boost_cap: float = 16.0,
    axis: str = "x",
) -> list[TauPoint]:
    """Full pipeline at each storage time; shot counts grow as survival drops."""
    points = []
    for tau in tau_list_s:
        cfg = config.with_updates(tau_s=tau)
        boost = min(boost_cap, 1.0 / max(mean_survival(config, tau), 1e-9))
        n = int(math.ceil(shots * boost))
        result = simulate(cfg, n, master_seed, threads)
        hist = run_coincidence(result.table, cfg, axis=axis)
        corrected = subtract(hist)
        fit = fit_correlation(hist, corrected)
        points.append(TauPoint(
            tau, n, hist, corrected,
            fit.sigma_sum, fit.sigma_sum_err, fit.sigma_diff, fit.sigma_diff_err,
            mode_count(fit), mode_count_err(fit), predict_mode_count(cfg, tau),
        ))
    return points


def width_series_from_points(points: list[TauPoint]) -> WidthSeries:
    return WidthSeries(
        np.array([p.tau_s for p in points]),
        np.array([p.sigma_sum for p in points]),
        np.array([max(p.sigma_sum_err, 1e-4) for p in points]),
        np.array([p.sigma_diff for p in points]),
        np.array([max(p.sigma_diff_err, 1e-4) for p in points]),
    )


# ---------------------------------------------------------------------------
# manifests

def write_manifest(path, config: ExperimentConfig, master_seed: int, shots,
                   artifacts: dict[str, Path], extra: dict | None = None):
    """Record everything needed to reproduce a run byte for byte."""
    pairs: dict = {"tool_version": __version__, "master_seed": master_seed,
                   "shots": shots}
    if extra:
        pairs.update(extra)
    for name, p in artifacts.items():
        pairs[f"sha256.{name}"] = f"{p.name} {sha256_file(p)}"
    with atomic_output(path) as fh:
        for key, value in pairs.items():
            fh.write(f"{key} = {value}\n")
        fh.write("# --- configuration snapshot ---\n")
        for line in config_to_text(config).splitlines():
            if not line.startswith("#"):
                fh.write(f"config.{line}\n")


# ---------------------------------------------------------------------------
# reproduction recipes

def pipeline_reproduce_fig4(
    config: ExperimentConfig,
    tau_list_s,
    shots: int,
    master_seed: int,
    out_dir: str | Path,
    threads: int | None = None,
    figures: bool = True,
    boost_cap: float = 16.0,
    axis: str = "x",
) -> dict:
    """Storage-time sweep: coincidence maps, widths, M(tau), fitted D.

    Writes one histogram CSV per storage time, the width series, the mode
    count curve with the model prediction, the diffusion fit, and (by
    default) rendered figures, all into ``out_dir``.
    """
    if shots <= 0:
        raise ParameterError("shot count must be positive; nothing to reproduce")
    tau_list_s = sorted(float(t) for t in tau_list_s)
    if not tau_list_s:
        raise ParameterError("need at least one storage time")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    points = sweep_storage_time(config, tau_list_s, shots, master_seed,
                                threads, boost_cap, axis)
    artifacts: dict[str, Path] = {}
    for p in points:
        name = f"hist_tau_{p.tau_s * 1e6:.2f}us.csv"
        write_histogram_csv(out / name, p.hist)
        artifacts[f"hist_{p.tau_s * 1e6:.2f}us"] = out / name

    series = width_series_from_points(points)
    write_widths_csv(out / "widths.csv", series)
    artifacts["widths"] = out / "widths.csv"

    with atomic_output(out / "modes.csv") as fh:
        fh.write("tau_us,modes,modes_err,modes_model\n")
        for p in points:
            fh.write(f"{fmt(p.tau_s * 1e6)},{fmt(p.modes)},{fmt(p.modes_err)},"
                     f"{fmt(p.modes_model)}\n")
    artifacts["modes"] = out / "modes.csv"

    kernel = effective_kernel_mrad(config)
    dfit = None
    if len(points) >= 3:
        dfit = fit_diffusion(series, config.wavelength_m, kernel)
    report = {
        "modes_tau0": points[0].modes,
        "modes_tau0_err": points[0].modes_err,
        "modes_tau0_model": points[0].modes_model,
        "sigma_kernel_eff_mrad": kernel,
        "diffusion_fit_m2_per_s": dfit.diffusion_m2_s if dfit else float("nan"),
        "diffusion_fit_err": dfit.diffusion_err if dfit else float("nan"),
        "diffusion_config_m2_per_s": config.diffusion_m2_s,
        "width_2w_corr_tau0_mrad": 4.0 * points[0].sigma_sum,
        "width_2w_avg_tau0_mrad": 4.0 * points[0].sigma_diff,
    }
    if dfit is None:
        report["note"] = "diffusion fit skipped: need at least 3 storage times"
    write_keyvalue(out / "report.keyvalue", report)
    artifacts["report"] = out / "report.keyvalue"

    if figures:
        from .figures import render_fig4_figures

        for name, p in render_fig4_figures(points, series, dfit, config, out).items():
            artifacts[name] = p

    write_manifest(out / "manifest.keyvalue", config, master_seed, shots, artifacts,
                   extra={"tau_list_us": " ".join(fmt(t * 1e6) for t in tau_list_s),
                          "recipe": "fig4", "axis": axis})
    report["points"] = points
    report["diffusion_result"] = dfit
    return report


def pipeline_single_photon_level(
    config: ExperimentConfig,
    shots: int,
    master_seed: int,
    out_dir: str | Path,
    threads: int | None = None,
    figures: bool = True,
    axis: str = "y",
) -> dict:
    """Low-gain run: pair-rate bookkeeping plus the coincidence analytics.

    Reports generated pairs per shot, read-converted pairs per shot
    (pre-detector), per-mode occupancy, the central accidental fraction,
    the coincidence ratio, and the mode-count estimate.
    """
    if shots <= 0:
        raise ParameterError("shot count must be positive; nothing to reproduce")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    result = simulate(config, shots, master_seed, threads)
    tally = result.tally
    hist = run_coincidence(result.table, config, axis=axis)
    corrected = subtract(hist)
    fit = fit_correlation(hist, corrected)
    n_modes = config.mode_count()

    write_pairs = tally.write_pairs / shots
    var_write = tally.write_pairs_sq / shots - write_pairs**2
    report = {
        "shots": shots,
        "modes": n_modes,
        "write_pairs_per_shot": write_pairs,
        "write_pairs_per_shot_err": math.sqrt(max(var_write, 0.0) / shots),
        "read_pairs_per_shot": tally.read_pairs / shots,
        "pairs_per_mode": write_pairs / n_modes,
        "detected_truth_pairs_per_shot": tally.detected_pairs / shots,
        "accidental_fraction": accidental_fraction(hist, config.central_window_mrad),
        "coincidence_ratio": coincidence_ratio(hist, config.central_window_mrad),
        "modes_estimate": mode_count(fit),
        "modes_estimate_err": mode_count_err(fit),
        "width_2w_corr_mrad": 4.0 * fit.sigma_sum,
    }
    write_histogram_csv(out / "hist_single_photon.csv", hist)
    write_keyvalue(out / "report.keyvalue", report)
    artifacts = {"hist": out / "hist_single_photon.csv",
                 "report": out / "report.keyvalue"}

    if figures:
        from .figures import render_single_photon_figure

        artifacts["figure"] = render_single_photon_figure(hist, corrected, report, out)

    write_manifest(out / "manifest.keyvalue", config, master_seed, shots, artifacts,
                   extra={"recipe": "single-photon", "axis": axis})
    report["hist"] = hist
    report["fit"] = fit
    return report
