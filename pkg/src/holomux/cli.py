"""Command-line interface.

Subcommands cover every pipeline stage; all of them exit nonzero on any
stage error and write output files atomically (never partially).
"""

from __future__ import annotations

import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .config import (
    ExperimentConfig,
    builtin_preset,
    config_from_pairs,
    load_config,
    parse_key_values,
)
from .errors import HolomuxError


def _fail(exc: BaseException) -> "click.ClickException":
    err = click.ClickException(str(exc))
    err.exit_code = 1
    return err


def _load_setup(config_path, preset=None):
    """(config, spot model, extraction params, frame geometry) from one file."""
    from .extract import ExtractionParams, extraction_from_pairs
    from .frames import SpotModel, spot_model_from_pairs

    if config_path is None:
        if preset is None:
            return ExperimentConfig(), SpotModel(), ExtractionParams(), (512, 1024)
        text = None
        config = builtin_preset(preset)
        from importlib.resources import files

        text = files("holomux.presets").joinpath(f"{preset}.conf").read_text()
        pairs = parse_key_values(text, source=f"preset:{preset}")
    else:
        pairs = parse_key_values(Path(config_path).read_text(), source=str(config_path))
        config = config_from_pairs(pairs, source=str(config_path))
    spot = spot_model_from_pairs(pairs, source=str(config_path))
    extraction = extraction_from_pairs(pairs, source=str(config_path))
    height = int(pairs.get("frame_height_px", 512))
    width = int(pairs.get("frame_width_px", 1024))
    return config, spot, extraction, (height, width)


config_option = click.option("--config", "config_path", type=click.Path(exists=True),
                             default=None, help="Key-value configuration file.")
seed_option = click.option("--seed", type=int, default=0, show_default=True,
                           help="Master seed; shots derive their own streams from it.")
threads_option = click.option("--threads", type=int, default=None,
                              help="Worker processes (default: HOLOMUX_THREADS or 1).")
out_option = click.option("--out", "out_dir", type=click.Path(), required=True,
                          help="Output directory.")


@click.group()
@click.version_option(version=__version__, prog_name="holomux")
def main():
    """Simulation and photon-counting analytics for a multiplexed Raman memory."""


@main.command()
@config_option
@click.option("--shots", type=int, required=True, help="Number of shots to simulate.")
@seed_option
@threads_option
@out_option
@click.option("--emit-truth", is_flag=True, help="Also write the genuine-pair links.")
@click.option("--time-bins", is_flag=True, help="Attach 100 ns time bins to events.")
def simulate(config_path, shots, seed, threads, out_dir, emit_truth, time_bins):
    """Generate shots and write the event-list CSV."""
    from .eventio import write_events_csv, write_truth_csv
    from .pipeline import simulate as run_simulation, write_manifest

    try:
        config, _, _, _ = _load_setup(config_path)
        if time_bins:
            config = config.with_updates(time_bins=True)
        result = run_simulation(config, shots, seed, threads)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        events_path = out / "events.csv"
        write_events_csv(events_path, result.table)
        artifacts = {"events": events_path}
        if emit_truth:
            truth_path = out / "truth.csv"
            write_truth_csv(truth_path, map(tuple, result.truth_index))
            artifacts["truth"] = truth_path
        write_manifest(out / "manifest.keyvalue", config, seed, shots, artifacts)
        click.echo(f"wrote {len(result.table)} events from {shots} shots to {events_path}")
    except HolomuxError as exc:
        raise _fail(exc)


@main.command()
@config_option
@click.option("--events", "events_path", type=click.Path(exists=True), required=True)
@seed_option
@out_option
def render(config_path, events_path, seed, out_dir):
    """Render an event CSV into synthetic camera frames (one stream file)."""
    from .eventio import read_events_csv
    from .frames import default_calibration, render_frame, write_frames
    from .memory import PhotonEvent, ShotRecord, shot_rng, REGION_STOKES
    from .geometry import Angle2D
    from .coincidence import iter_shot_groups

    try:
        config, spot, _, frame_shape = _load_setup(config_path)
        table = read_events_csv(events_path)
        split, cal_s, cal_as = default_calibration(frame_shape[1], frame_shape[0],
                                                   fov_mrad=config.fov_mrad)

        def frames():
            for shot_id, s_xy, as_xy in iter_shot_groups(table):
                rec = ShotRecord(shot_id)
                for x, y in s_xy:
                    rec.stokes_events.append(
                        PhotonEvent("S", Angle2D(float(x), float(y)), shot_id))
                for x, y in as_xy:
                    rec.antistokes_events.append(
                        PhotonEvent("AS", Angle2D(float(x), float(y)), shot_id))
                yield render_frame(rec, spot, frame_shape, split, cal_s, cal_as,
                                   shot_rng(seed, shot_id))

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        n = write_frames(out / "frames.holo", frames())
        click.echo(f"rendered {n} frames to {out / 'frames.holo'}")
    except HolomuxError as exc:
        raise _fail(exc)


@main.command()
@config_option
@click.option("--frames", "frames_path", type=click.Path(exists=True), required=True,
              help="Frame stream file written by `holomux render`.")
@click.option("--threshold-sigma", type=float, default=None,
              help="Detection threshold in noise sigmas (default from config or 5).")
@out_option
def extract(config_path, frames_path, threshold_sigma, out_dir):
    """Extract photon events from rendered frames back into a CSV."""
    from .eventio import EventTableBuilder, write_events_csv
    from .extract import extract_events
    from .frames import read_frames
    from .memory import ShotRecord

    try:
        _, _, params, _ = _load_setup(config_path)
        if threshold_sigma is None:
            threshold_sigma = params.threshold_sigma
        builder = EventTableBuilder()
        flagged = 0
        for idx, frame in enumerate(read_frames(frames_path)):
            result = extract_events(frame, threshold_sigma, params, shot_id=idx)
            flagged += len(result.oversized)
            rec = ShotRecord(idx)
            for ev in result.events:
                (rec.stokes_events if ev.region == "S"
                 else rec.antistokes_events).append(ev)
            builder.add_record(rec)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        table = builder.build()
        write_events_csv(out / "events.csv", table)
        msg = f"extracted {len(table)} events from {builder.n_shots} frames"
        if flagged:
            msg += f" ({flagged} oversized blob(s) flagged, not split)"
        click.echo(msg + f" to {out / 'events.csv'}")
    except HolomuxError as exc:
        raise _fail(exc)


@main.command()
@config_option
@click.option("--events", "events_path", type=click.Path(exists=True), required=True)
@click.option("--delta-theta", type=float, default=None,
              help="Stripe gate half-width in mrad (default from config).")
@click.option("--bin", "bin_mrad", type=float, default=None,
              help="Histogram bin width in mrad (default from config).")
@click.option("--axis", type=click.Choice(["x", "y"]), default="x", show_default=True)
@out_option
def coincide(config_path, events_path, delta_theta, bin_mrad, axis, out_dir):
    """Accumulate the stripe-gated coincidence histogram from events."""
    from .coincidence import accumulate, make_edges, write_histogram_csv
    from .eventio import read_events_csv

    try:
        config, _, _, _ = _load_setup(config_path)
        table = read_events_csv(events_path)
        delta = delta_theta if delta_theta is not None else config.delta_theta_mrad
        width = bin_mrad if bin_mrad is not None else config.bin_mrad
        edges = make_edges(config.fov_mrad, width)
        hist = accumulate(table, delta, edges, axis=axis)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_histogram_csv(out / "hist.csv", hist)
        click.echo(f"accumulated {int(hist.n2.sum())} gated pairs over "
                   f"{hist.n_frames} shots to {out / 'hist.csv'}")
    except HolomuxError as exc:
        raise _fail(exc)


@main.command(name="fit-modes")
@click.option("--hist", "hist_path", type=click.Path(exists=True), required=True)
@out_option
def fit_modes(hist_path, out_dir):
    """Fit the correlation peak of a histogram CSV and report the mode count."""
    from .coincidence import (CoincidenceHistogram, fit_correlation, mode_count,
                              mode_count_err, read_histogram_csv)
    from .eventio import write_keyvalue

    try:
        edges, n2, n_acc, n_frames, delta, axis = read_histogram_csv(hist_path)
        hist = CoincidenceHistogram(edges, edges, n2,
                                    np.zeros((len(edges) - 1, len(edges) - 1)),
                                    np.zeros((len(edges) - 1, len(edges) - 1)),
                                    n_frames, delta, axis)
        fit = fit_correlation(hist, n2 - n_acc)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report = {
            "sigma_sum_mrad": fit.sigma_sum,
            "sigma_sum_err": fit.sigma_sum_err,
            "sigma_diff_mrad": fit.sigma_diff,
            "sigma_diff_err": fit.sigma_diff_err,
            "center_s_mrad": fit.center_s,
            "center_as_mrad": fit.center_as,
            "amplitude": fit.amplitude,
            "width_2w_corr_mrad": 4.0 * fit.sigma_sum,
            "width_2w_avg_mrad": 4.0 * fit.sigma_diff,
            "modes": mode_count(fit),
            "modes_err": mode_count_err(fit),
        }
        write_keyvalue(out / "fit.keyvalue", report)
        click.echo(f"M = {report['modes']:.2f} +/- {report['modes_err']:.2f} "
                   f"-> {out / 'fit.keyvalue'}")
    except HolomuxError as exc:
        raise _fail(exc)


@main.command(name="fit-diffusion")
@click.option("--series", "series_path", type=click.Path(exists=True), required=True,
              help="widths.csv written by `holomux reproduce fig4` or compatible.")
@click.option("--lambda-nm", type=float, default=795.0, show_default=True)
@click.option("--sigma-kernel-mrad", type=float, required=True,
              help="Constant width floor (rotated frame) to deconvolve.")
@out_option
def fit_diffusion_cmd(series_path, lambda_nm, sigma_kernel_mrad, out_dir):
    """Fit the diffusion coefficient from a width-versus-storage-time series."""
    from .diffusion import fit_diffusion, read_widths_csv
    from .eventio import write_keyvalue

    try:
        series = read_widths_csv(series_path)
        result = fit_diffusion(series, lambda_nm * 1e-9, sigma_kernel_mrad)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_keyvalue(out / "diffusion.keyvalue", {
            "D_m2_per_s": result.diffusion_m2_s,
            "D_err": result.diffusion_err,
            "sigma0_sum_mrad": result.sigma0_sum_mrad,
            "sigma0_diff_mrad": result.sigma0_diff_mrad,
            "residual_norm": result.residual_norm,
            "clamped_to_zero": result.clamped_to_zero,
        })
        click.echo(f"D = {result.diffusion_m2_s:.4g} +/- {result.diffusion_err:.2g} m^2/s "
                   f"-> {out / 'diffusion.keyvalue'}")
    except HolomuxError as exc:
        raise _fail(exc)


@main.group(invoke_without_command=True)
@click.option("--zeta", type=float, default=None, help="Per-mode excitation probability.")
@click.option("--modes", type=int, default=None, help="Number of multiplexed modes.")
@click.option("--eta-h", type=float, default=1.0, show_default=True,
              help="Heralding efficiency.")
@click.option("--n", "n_targets", type=int, default=1, show_default=True,
              help="Largest photon number to tabulate.")
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Write the enhancement table CSV here.")
@click.pass_context
def plan(ctx, zeta, modes, eta_h, n_targets, out_path):
    """Multiplexed-source rate planning (or `plan route` for switch routing)."""
    if ctx.invoked_subcommand is not None:
        return
    from .eventio import atomic_output, fmt
    from .planner import SourceSpec, enhancement_report, p_at_least_one

    try:
        if zeta is None or modes is None:
            raise click.UsageError("--zeta and --modes are required (or use `plan route`)")
        spec = SourceSpec(zeta, modes, eta_h, n_targets)
        rows = enhancement_report(spec)
        click.echo(f"P(at least one mode fires) = {p_at_least_one(zeta, modes):.4f}")
        header = "N,p_multiplexed,p_independent,ratio,log10_ratio"
        click.echo(header)
        lines = [header]
        for r in rows:
            line = (f"{r.n},{fmt(r.p_multiplexed)},{fmt(r.p_independent)},"
                    f"{fmt(r.ratio)},{fmt(r.log10_ratio)}")
            click.echo(line)
            lines.append(line)
        if out_path:
            with atomic_output(out_path) as fh:
                fh.write("\n".join(lines) + "\n")
    except HolomuxError as exc:
        raise _fail(exc)


@plan.command(name="route")
@click.option("--triggers", "triggers_path", type=click.Path(exists=True), required=True,
              help="CSV with theta_x_mrad,theta_y_mrad trigger directions.")
@click.option("--ports", type=int, required=True, help="Number of switch output ports.")
@click.option("--out", "out_path", type=click.Path(), default=None)
def plan_route(triggers_path, ports, out_path):
    """Assign triggered modes to switch outputs at the conjugate angles."""
    from .eventio import atomic_output, fmt
    from .geometry import Angle2D
    from .planner import route

    try:
        triggers = []
        with open(triggers_path) as fh:
            header = fh.readline().strip()
            if header != "theta_x_mrad,theta_y_mrad":
                raise click.UsageError(
                    f"expected header 'theta_x_mrad,theta_y_mrad', got {header!r}")
            for line in fh:
                line = line.strip()
                if line and not line.startswith("#"):
                    x, y = (float(p) for p in line.split(","))
                    triggers.append(Angle2D(x, y))
        plan_result = route(triggers, ports)
        header = "port,trigger_x_mrad,trigger_y_mrad,out_x_mrad,out_y_mrad"
        lines = [header]
        for port, trig, out_dir_angle in plan_result.assignments:
            lines.append(f"{port},{fmt(trig.theta_x)},{fmt(trig.theta_y)},"
                         f"{fmt(out_dir_angle.theta_x)},{fmt(out_dir_angle.theta_y)}")
        for trig in plan_result.unassigned:
            lines.append(f"-1,{fmt(trig.theta_x)},{fmt(trig.theta_y)},,")
        for line in lines:
            click.echo(line)
        if out_path:
            with atomic_output(out_path) as fh:
                fh.write("\n".join(lines) + "\n")
    except HolomuxError as exc:
        raise _fail(exc)


@main.group()
def reproduce():
    """Figure-level reproduction recipes (CSV tables plus rendered figures)."""


@reproduce.command(name="fig4")
@config_option
@click.option("--preset/--no-preset", default=True, show_default=True,
              help="Fall back to the built-in high-gain preset when no --config.")
@click.option("--tau-list-us", type=str, default="0,0.5,1,1.5,2,2.5,3,3.5,4,4.5,5",
              show_default=True, help="Comma-separated storage times in microseconds.")
@click.option("--shots", type=int, default=30000, show_default=True,
              help="Base shots per storage time (scaled up as survival drops).")
@seed_option
@threads_option
@out_option
@click.option("--figures/--no-figures", default=True, show_default=True)
@click.option("--axis", type=click.Choice(["x", "y"]), default="x", show_default=True)
def reproduce_fig4(config_path, preset, tau_list_us, shots, seed, threads, out_dir,
                   figures, axis):
    """Storage-time sweep: coincidence maps, M(tau) decay, diffusion fit."""
    from .pipeline import pipeline_reproduce_fig4

    try:
        if config_path is not None:
            config, _, _, _ = _load_setup(config_path)
        elif preset:
            config = builtin_preset("fig4_high_gain")
        else:
            config = ExperimentConfig()
        tau_s = [float(t) * 1e-6 for t in tau_list_us.split(",") if t.strip()]
        report = pipeline_reproduce_fig4(config, tau_s, shots, seed, out_dir,
                                         threads, figures, axis=axis)
        click.echo(f"M(tau=0) = {report['modes_tau0']:.1f} "
                   f"(model {report['modes_tau0_model']:.1f}); "
                   f"fitted D = {report['diffusion_fit_m2_per_s']:.3g} m^2/s "
                   f"(config {report['diffusion_config_m2_per_s']:.3g})")
        click.echo(f"outputs in {out_dir}")
    except HolomuxError as exc:
        raise _fail(exc)


@reproduce.command(name="single-photon")
@config_option
@click.option("--preset/--no-preset", default=True, show_default=True,
              help="Fall back to the built-in low-gain preset when no --config.")
@click.option("--shots", type=int, default=200000, show_default=True)
@seed_option
@threads_option
@out_option
@click.option("--figures/--no-figures", default=True, show_default=True)
@click.option("--axis", type=click.Choice(["x", "y"]), default="y", show_default=True)
def reproduce_single_photon(config_path, preset, shots, seed, threads, out_dir,
                            figures, axis):
    """Low-gain run: pair-rate bookkeeping and coincidence analytics."""
    from .pipeline import pipeline_single_photon_level

    try:
        if config_path is not None:
            config, _, _, _ = _load_setup(config_path)
        elif preset:
            config = builtin_preset("single_photon")
        else:
            config = ExperimentConfig()
        report = pipeline_single_photon_level(config, shots, seed, out_dir,
                                              threads, figures, axis=axis)
        click.echo(f"write pairs/shot = {report['write_pairs_per_shot']:.3f}, "
                   f"read pairs/shot = {report['read_pairs_per_shot']:.3f}, "
                   f"pairs/mode = {report['pairs_per_mode']:.3f}")
        click.echo(f"accidental fraction = {report['accidental_fraction']:.3f}, "
                   f"coincidence ratio = {report['coincidence_ratio']:.3f}, "
                   f"M = {report['modes_estimate']:.1f}")
        click.echo(f"outputs in {out_dir}")
    except HolomuxError as exc:
        raise _fail(exc)


if __name__ == "__main__":
    main()
